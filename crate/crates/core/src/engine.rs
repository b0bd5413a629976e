//! Forward and reverse passes for a stack of dense layers followed by L2
//! normalization and prototype scoring.
//!
//! The per-layer primitives (`DenseLayer::forward`, `DenseLayer::backward`,
//! [`normalize_rows`], [`score`] and their adjoints) are public so that the
//! sharded trainer can interleave them with parameter gathers. The whole-net
//! [`forward`] and [`backward`] compose exactly the same primitives in the same
//! order, which is what makes sharded and dense runs bit-identical.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netspec::ModelSpec;
use crate::tensor::Matrix;

/// Added under the square root when normalizing embeddings.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in_dim × out_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

impl LayerGrad {
    /// Weight gradient row-major followed by the bias gradient.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_len(&self) -> usize {
        self.in_dim() * self.out_dim() + self.out_dim()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn from_flat(in_dim: usize, out_dim: usize, activation: Activation, flat: &[f64]) -> Result<Self> {
        let n_w = in_dim * out_dim;
        if flat.len() != n_w + out_dim {
            return Err(Error::Shape(format!(
                "{} values for a {in_dim}x{out_dim} layer",
                flat.len()
            )));
        }
        Ok(Self {
            weight: Matrix::from_vec(in_dim, out_dim, flat[..n_w].to_vec())?,
            bias: flat[n_w..].to_vec(),
            activation,
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input width {} for layer expecting {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut out = x.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
                if self.activation == Activation::Relu && *o < 0.0 {
                    *o = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Reverse pass given the layer's input, its (post-activation) output and
    /// the gradient on that output.
    pub fn backward(&self, input: &Matrix, output: &Matrix, d_out: &Matrix) -> Result<LayerGrad> {
        if d_out.rows() != output.rows() || d_out.cols() != output.cols() {
            return Err(Error::Shape("output gradient does not match output".into()));
        }
        let mut d_pre = d_out.clone();
        if self.activation == Activation::Relu {
            for (g, &o) in d_pre.as_mut_slice().iter_mut().zip(output.as_slice()) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Ok(LayerGrad {
            weight: input.t_matmul(&d_pre)?,
            bias: d_pre.col_sums(),
            input: d_pre.matmul_t(&self.weight)?,
        })
    }
}

/// Shape-only description of a [`LayeredNet`], enough to rebuild one from flat
/// parameter vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetLayout {
    /// Input width followed by every layer's output width.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub n_prototypes: usize,
}

impl NetLayout {
    pub fn from_spec(spec: &ModelSpec, input_dim: usize) -> Self {
        let widths = spec.layer_widths();
        let n = widths.len();
        let mut dims = vec![input_dim];
        dims.extend(widths);
        let activations = (0..n)
            .map(|i| if i + 1 == n { Activation::None } else { Activation::Relu })
            .collect();
        Self {
            dims,
            activations,
            n_prototypes: spec.n_prototypes,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    /// Parameter units: one per layer, then the prototype matrix.
    pub fn n_units(&self) -> usize {
        self.n_layers() + 1
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().expect("layout has an input dim")
    }

    pub fn unit_len(&self, unit: usize) -> usize {
        if unit < self.n_layers() {
            self.dims[unit] * self.dims[unit + 1] + self.dims[unit + 1]
        } else {
            self.n_prototypes * self.embed_dim()
        }
    }

    pub fn unit_lens(&self) -> Vec<usize> {
        (0..self.n_units()).map(|u| self.unit_len(u)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredNet {
    pub layers: Vec<DenseLayer>,
    /// `n_prototypes × embed_dim`, rows kept at unit norm.
    pub prototypes: Matrix,
}

impl LayeredNet {
    pub fn new(layers: Vec<DenseLayer>, prototypes: Matrix) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer output {} does not chain into input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        let embed = layers.last().expect("non-empty").out_dim();
        if prototypes.cols() != embed {
            return Err(Error::Shape(format!(
                "prototypes of width {} for embedding width {embed}",
                prototypes.cols()
            )));
        }
        Ok(Self { layers, prototypes })
    }

    /// He-initialized weights, zero biases, unit-norm Gaussian prototypes.
    pub fn init<R: Rng + ?Sized>(layout: &NetLayout, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(layout.n_layers());
        for (l, &act) in layout.activations.iter().enumerate() {
            let (fan_in, fan_out) = (layout.dims[l], layout.dims[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            layers.push(DenseLayer::new(
                Matrix::from_vec(fan_in, fan_out, w)?,
                vec![0.0; fan_out],
                act,
            )?);
        }
        let d = layout.embed_dim();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let p = (0..layout.n_prototypes * d).map(|_| normal.sample(rng)).collect();
        let prototypes = normalize_rows(&Matrix::from_vec(layout.n_prototypes, d, p)?).0;
        Self::new(layers, prototypes)
    }

    pub fn layout(&self) -> NetLayout {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(DenseLayer::out_dim));
        NetLayout {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
            n_prototypes: self.prototypes.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Flat parameter vector of every unit (layers, then prototypes).
    pub fn units(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.layers.iter().map(DenseLayer::flat).collect();
        out.push(self.prototypes.as_slice().to_vec());
        out
    }

    pub fn from_units(layout: &NetLayout, units: &[Vec<f64>]) -> Result<Self> {
        if units.len() != layout.n_units() {
            return Err(Error::Shape(format!(
                "{} parameter units for a layout with {}",
                units.len(),
                layout.n_units()
            )));
        }
        let mut layers = Vec::with_capacity(layout.n_layers());
        for (l, &act) in layout.activations.iter().enumerate() {
            layers.push(DenseLayer::from_flat(
                layout.dims[l],
                layout.dims[l + 1],
                act,
                &units[l],
            )?);
        }
        let prototypes = Matrix::from_vec(
            layout.n_prototypes,
            layout.embed_dim(),
            units[layout.n_layers()].clone(),
        )?;
        Self::new(layers, prototypes)
    }
}

/// L2-normalizes each row with [`NORM_EPS`] under the root; returns the
/// normalized rows and the per-row norms used.
pub fn normalize_rows(y: &Matrix) -> (Matrix, Vec<f64>) {
    let mut z = y.clone();
    let mut norms = Vec::with_capacity(y.rows());
    for r in 0..y.rows() {
        let mut ss = 0.0;
        for v in y.row(r) {
            ss += v * v;
        }
        let n = (ss + NORM_EPS).sqrt();
        for v in z.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    (z, norms)
}

/// Adjoint of [`normalize_rows`]: `dy = (dz − z·(z·dz)) / n` per row.
pub fn normalize_backward(dz: &Matrix, z: &Matrix, norms: &[f64]) -> Matrix {
    let mut dy = dz.clone();
    for r in 0..z.rows() {
        let mut dot = 0.0;
        for (a, b) in z.row(r).iter().zip(dz.row(r)) {
            dot += a * b;
        }
        let n = norms[r];
        for (g, &zv) in dy.row_mut(r).iter_mut().zip(z.row(r)) {
            *g = (*g - zv * dot) / n;
        }
    }
    dy
}

/// Prototype scores `z · Cᵀ` (batch × n_prototypes).
pub fn score(z: &Matrix, prototypes: &Matrix) -> Result<Matrix> {
    z.matmul_t(prototypes)
}

/// Adjoint of [`score`]: returns `(dz, dC)`.
pub fn score_backward(grad_scores: &Matrix, z: &Matrix, prototypes: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((grad_scores.matmul(prototypes)?, grad_scores.t_matmul(z)?))
}

/// Which layer activations a forward pass keeps for the reverse pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Retention {
    All,
    /// Segment starts (interior layer indices); only inputs to these layers and
    /// to layer 0 are kept, everything else is recomputed during backward.
    Boundaries(Vec<usize>),
}

impl Retention {
    /// Segments `[start, end)` covering `n_layers`.
    pub fn segments(&self, n_layers: usize) -> Result<Vec<(usize, usize)>> {
        match self {
            Retention::All => Ok(vec![(0, n_layers)]),
            Retention::Boundaries(b) => segments_from_boundaries(b, n_layers),
        }
    }
}

pub fn segments_from_boundaries(boundaries: &[usize], n_layers: usize) -> Result<Vec<(usize, usize)>> {
    let mut prev = 0;
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    for &b in boundaries {
        if b <= prev || b >= n_layers {
            return Err(Error::InvalidPlan(format!(
                "boundaries {boundaries:?} are not strictly increasing within (0, {n_layers})"
            )));
        }
        out.push((prev, b));
        prev = b;
    }
    out.push((prev, n_layers));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BatchActivations {
    pub retention: Retention,
    /// `stored[l]` is the input to layer `l`; `stored[n_layers]` is the final
    /// pre-normalization output, always kept.
    pub stored: Vec<Option<Matrix>>,
    pub norms: Vec<f64>,
    pub z: Matrix,
    pub scores: Matrix,
}

impl BatchActivations {
    pub fn retained_count(&self) -> usize {
        self.stored.iter().filter(|s| s.is_some()).count()
    }
}

pub fn forward(net: &LayeredNet, input: &Matrix, retain: &Retention) -> Result<BatchActivations> {
    let n = net.layers.len();
    let segments = retain.segments(n)?;
    let mut keep = vec![matches!(retain, Retention::All); n + 1];
    for &(s, _) in &segments {
        keep[s] = true;
    }
    keep[n] = true;

    let mut stored: Vec<Option<Matrix>> = vec![None; n + 1];
    let mut x = input.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        let y = layer.forward(&x)?;
        if keep[l] {
            stored[l] = Some(x);
        }
        x = y;
    }
    let (z, norms) = normalize_rows(&x);
    stored[n] = Some(x);
    let scores = score(&z, &net.prototypes)?;
    Ok(BatchActivations {
        retention: retain.clone(),
        stored,
        norms,
        z,
        scores,
    })
}

/// Embeddings only, no retention.
pub fn embed(net: &LayeredNet, input: &Matrix) -> Result<Matrix> {
    let mut x = input.clone();
    for layer in &net.layers {
        x = layer.forward(&x)?;
    }
    Ok(normalize_rows(&x).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub prototypes: Matrix,
}

impl Gradients {
    /// Flat gradient per parameter unit, aligned with [`LayeredNet::units`].
    pub fn units(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.layers.iter().map(LayerGrad::flat).collect();
        out.push(self.prototypes.as_slice().to_vec());
        out
    }
}

pub fn backward(net: &LayeredNet, acts: &BatchActivations, grad_scores: &Matrix) -> Result<Gradients> {
    let n = net.layers.len();
    if grad_scores.rows() != acts.scores.rows() || grad_scores.cols() != acts.scores.cols() {
        return Err(Error::Shape("score gradient does not match scores".into()));
    }
    if acts.stored.len() != n + 1 {
        return Err(Error::State("activations were produced by a different network".into()));
    }
    let (dz, d_proto) = score_backward(grad_scores, &acts.z, &net.prototypes)?;
    let mut d_out = normalize_backward(&dz, &acts.z, &acts.norms);

    let segments = acts.retention.segments(n)?;
    let mut layer_grads: Vec<Option<LayerGrad>> = vec![None; n];
    for &(start, end) in segments.iter().rev() {
        let seg_input = acts.stored[start]
            .as_ref()
            .ok_or_else(|| Error::State(format!("no retained activation at layer {start}")))?;
        // inputs[i] is the input to layer start+i; the last entry is the segment output
        let mut inputs = Vec::with_capacity(end - start + 1);
        inputs.push(seg_input.clone());
        for l in start..end {
            let next = match (&acts.retention, &acts.stored[l + 1]) {
                (Retention::All, Some(m)) => m.clone(),
                (Retention::All, None) => {
                    return Err(Error::State(format!("missing activation after layer {l}")))
                }
                (Retention::Boundaries(_), _) => net.layers[l].forward(&inputs[l - start])?,
            };
            inputs.push(next);
        }
        for l in (start..end).rev() {
            let g = net.layers[l].backward(&inputs[l - start], &inputs[l - start + 1], &d_out)?;
            d_out = g.input.clone();
            layer_grads[l] = Some(g);
        }
    }
    Ok(Gradients {
        layers: layer_grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        prototypes: d_proto,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, dims: &[usize], k: usize) -> LayeredNet {
        let n = dims.len() - 1;
        let layout = NetLayout {
            dims: dims.to_vec(),
            activations: (0..n)
                .map(|i| if i + 1 == n { Activation::None } else { Activation::Relu })
                .collect(),
            n_prototypes: k,
        };
        LayeredNet::init(&layout, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_matrix(seed: u64, r: usize, c: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_net_normalizes_input() {
        let layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2], Activation::None).unwrap();
        let net = LayeredNet::new(vec![layer], Matrix::identity(2)).unwrap();
        let x = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let acts = forward(&net, &x, &Retention::All).unwrap();
        assert!((acts.z.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((acts.z.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_input_is_guarded() {
        let layer = DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Relu).unwrap();
        let net = LayeredNet::new(vec![layer], Matrix::identity(3)).unwrap();
        let x = Matrix::zeros(2, 3);
        let acts = forward(&net, &x, &Retention::All).unwrap();
        assert!(acts.z.all_finite());
        assert!(acts.z.as_slice().iter().all(|&v| v == 0.0));
        let g = backward(&net, &acts, &Matrix::zeros(2, 3)).unwrap();
        assert!(g.units().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let net = small_net(1, &[4, 3, 2], 2);
        assert!(matches!(
            forward(&net, &Matrix::zeros(2, 5), &Retention::All),
            Err(Error::Shape(_))
        ));
        let bad = DenseLayer::new(Matrix::zeros(2, 3), vec![0.0; 3], Activation::None).unwrap();
        assert!(LayeredNet::new(vec![net.layers[0].clone(), bad], Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn scores_match_naive_products() {
        let net = small_net(7, &[6, 5, 4, 3], 4);
        let x = random_matrix(8, 5, 6);
        let acts = forward(&net, &x, &Retention::All).unwrap();
        // independent scalar-loop recomputation
        let mut h: Vec<Vec<f64>> = (0..5).map(|r| x.row(r).to_vec()).collect();
        for layer in &net.layers {
            h = h
                .iter()
                .map(|row| {
                    (0..layer.out_dim())
                        .map(|j| {
                            let mut s = 0.0;
                            for (i, v) in row.iter().enumerate() {
                                s += v * layer.weight.get(i, j);
                            }
                            s += layer.bias[j];
                            if layer.activation == Activation::Relu { s.max(0.0) } else { s }
                        })
                        .collect()
                })
                .collect();
        }
        for (b, row) in h.iter().enumerate() {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            for k in 0..4 {
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(d, v)| v / n * net.prototypes.get(k, d))
                    .sum();
                assert!((s - acts.scores.get(b, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_linear_layer_closed_form() {
        // squared error on the raw layer output: L = Σ (XW − Y)² / B
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let layer = DenseLayer::new(w.clone(), vec![0.0; 2], Activation::None).unwrap();
        let x = random_matrix(4, 5, 3);
        let y = random_matrix(5, 5, 2);
        let out = layer.forward(&x).unwrap();
        let mut d_out = out.clone();
        for (d, t) in d_out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *d = 2.0 * (*d - t) / 5.0;
        }
        let g = layer.backward(&x, &out, &d_out).unwrap();
        let mut resid = x.matmul(&w).unwrap();
        for (r, t) in resid.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *r -= t;
        }
        let expected = x.transpose().matmul(&resid).unwrap();
        for (a, b) in g.weight.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - 2.0 * b / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_retention_recomputes_bit_exact() {
        let net = small_net(11, &[5, 6, 7, 6, 5, 4], 3);
        let x = random_matrix(12, 4, 5);
        let g = random_matrix(13, 4, 3);
        let full = forward(&net, &x, &Retention::All).unwrap();
        let reference = backward(&net, &full, &g).unwrap();
        for b in [vec![1], vec![2, 4], vec![1, 2, 3, 4], vec![3]] {
            let ck = forward(&net, &x, &Retention::Boundaries(b.clone())).unwrap();
            assert!(ck.retained_count() <= full.retained_count());
            assert_eq!(ck.retained_count(), b.len() + 2);
            assert_eq!(ck.scores, full.scores);
            assert_eq!(backward(&net, &ck, &g).unwrap(), reference, "boundaries {b:?}");
        }
        assert!(forward(&net, &x, &Retention::Boundaries(vec![0])).is_err());
        assert!(forward(&net, &x, &Retention::Boundaries(vec![5])).is_err());
        assert!(forward(&net, &x, &Retention::Boundaries(vec![3, 2])).is_err());
    }

    #[test]
    fn missing_activation_is_state_error() {
        let net = small_net(2, &[3, 3, 3], 2);
        let x = random_matrix(3, 2, 3);
        let mut acts = forward(&net, &x, &Retention::All).unwrap();
        acts.stored[1] = None;
        assert!(matches!(
            backward(&net, &acts, &Matrix::zeros(2, 2)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn units_round_trip() {
        let net = small_net(5, &[4, 3, 2], 3);
        let layout = net.layout();
        assert_eq!(layout.unit_lens(), vec![15, 8, 6]);
        let back = LayeredNet::from_units(&layout, &net.units()).unwrap();
        assert_eq!(back, net);
    }
}
