//! RegNet-style width generation and the dense toy topology derived from it.
//!
//! Widths follow the quantized linear parameterization: a linear ramp
//! `u_j = w0 + wa * j` is snapped onto the geometric grid `w0 * wm^s`,
//! rounded to a multiple of 8 and made compatible with the group width.
//! Consecutive blocks of equal width form a stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generation parameters for one RegNet family member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegnetConfig {
    pub w0: f64,
    pub wa: f64,
    pub wm: f64,
    #[serde(rename = "depth")]
    pub total_depth: usize,
    pub group_width: usize,
}

impl RegnetConfig {
    /// RG-8gf row of the model-family table.
    pub const RG_8GF: RegnetConfig = RegnetConfig::new(192.0, 76.82, 2.19, 27, 56);
    /// RG-16gf row.
    pub const RG_16GF: RegnetConfig = RegnetConfig::new(200.0, 160.23, 2.48, 27, 112);
    /// RG-32gf row.
    pub const RG_32GF: RegnetConfig = RegnetConfig::new(232.0, 115.89, 2.53, 27, 232);
    /// RG-64gf row.
    pub const RG_64GF: RegnetConfig = RegnetConfig::new(352.0, 147.48, 2.4, 27, 328);
    /// RG-128gf, the base model.
    pub const RG_128GF: RegnetConfig = RegnetConfig::new(456.0, 160.83, 2.52, 27, 264);
    /// RG-256gf row.
    pub const RG_256GF: RegnetConfig = RegnetConfig::new(640.0, 230.83, 2.53, 27, 373);
    /// The 10B-parameter configuration.
    pub const RG_10B: RegnetConfig = RegnetConfig::new(1744.0, 620.83, 2.52, 27, 1010);

    pub const fn new(w0: f64, wa: f64, wm: f64, total_depth: usize, group_width: usize) -> Self {
        Self {
            w0,
            wa,
            wm,
            total_depth,
            group_width,
        }
    }

    /// Looks up a named row of the model-family table (`"rg-8gf"`, `"rg-10b"`, ...).
    pub fn named(name: &str) -> Option<RegnetConfig> {
        match name.to_ascii_lowercase().as_str() {
            "rg-8gf" => Some(Self::RG_8GF),
            "rg-16gf" => Some(Self::RG_16GF),
            "rg-32gf" => Some(Self::RG_32GF),
            "rg-64gf" => Some(Self::RG_64GF),
            "rg-128gf" => Some(Self::RG_128GF),
            "rg-256gf" => Some(Self::RG_256GF),
            "rg-10b" => Some(Self::RG_10B),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w0.is_finite() && self.w0 > 0.0) {
            return Err(Error::InvalidConfig(format!("w0 must be > 0, got {}", self.w0)));
        }
        if !(self.wa.is_finite() && self.wa >= 0.0) {
            return Err(Error::InvalidConfig(format!("wa must be >= 0, got {}", self.wa)));
        }
        if !self.wm.is_finite() || self.wm <= 0.0 || (self.wa > 0.0 && self.wm <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "wm must be > 1 when wa > 0, got {}",
                self.wm
            )));
        }
        if self.total_depth == 0 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if self.group_width == 0 {
            return Err(Error::InvalidConfig("group_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stage layout: run-length encoded block widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWidths {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
}

impl StageWidths {
    /// Per-block widths, expanded from the run-length form.
    pub fn block_widths(&self) -> Vec<usize> {
        self.widths
            .iter()
            .zip(&self.depths)
            .flat_map(|(&w, &d)| std::iter::repeat_n(w, d))
            .collect()
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Generates stage widths and depths from a RegNet configuration.
pub fn generate_widths(cfg: &RegnetConfig) -> Result<StageWidths> {
    cfg.validate()?;
    let log_wm = cfg.wm.ln();
    let mut widths: Vec<usize> = Vec::new();
    let mut depths: Vec<usize> = Vec::new();
    for j in 0..cfg.total_depth {
        let u = cfg.w0 + cfg.wa * j as f64;
        let s = if cfg.wa == 0.0 {
            0.0
        } else {
            round_half_up((u / cfg.w0).ln() / log_wm)
        };
        let q = cfg.w0 * cfg.wm.powf(s);
        if !q.is_finite() {
            return Err(Error::InvalidConfig(format!("non-finite width at block {j}")));
        }
        let q = (round_half_up(q / 8.0) * 8.0).max(8.0) as usize;
        let g = cfg.group_width.min(q);
        let w = (round_half_up(q as f64 / g as f64) as usize) * g;
        match widths.last() {
            Some(&last) if last == w => *depths.last_mut().expect("parallel vecs") += 1,
            _ => {
                widths.push(w);
                depths.push(1);
            }
        }
    }
    Ok(StageWidths { widths, depths })
}

/// Dense toy topology: trunk stages, projection head and prototype count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Output widths of the projection-head layers; the last is the embedding dimension.
    pub head_dims: Vec<usize>,
    pub n_prototypes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != self.stage_depths.len() {
            return Err(Error::InvalidConfig(
                "stage_widths and stage_depths differ in length".into(),
            ));
        }
        if self.stage_widths.iter().chain(&self.head_dims).any(|&w| w == 0) {
            return Err(Error::InvalidConfig("all widths must be positive".into()));
        }
        if self.layer_widths().is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        if self.n_prototypes == 0 {
            return Err(Error::InvalidConfig("n_prototypes must be >= 1".into()));
        }
        Ok(())
    }

    /// Output width of every layer, trunk blocks first, then head layers.
    pub fn layer_widths(&self) -> Vec<usize> {
        let stages = StageWidths {
            widths: self.stage_widths.clone(),
            depths: self.stage_depths.clone(),
        };
        let mut out = stages.block_widths();
        out.extend_from_slice(&self.head_dims);
        out
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_widths().last().expect("validated spec has layers")
    }

    pub fn total_depth(&self) -> usize {
        self.stage_depths.iter().sum()
    }
}

/// Shrinks generated stage widths by an integer divisor and attaches a head.
///
/// `max_blocks_per_stage`, when set, caps every stage depth so that deep
/// family members stay trainable at desk scale.
pub fn toy_spec(
    cfg: &RegnetConfig,
    scale_divisor: usize,
    head_dims: &[usize],
    n_prototypes: usize,
    max_blocks_per_stage: Option<usize>,
) -> Result<ModelSpec> {
    if scale_divisor == 0 {
        return Err(Error::InvalidConfig("scale_divisor must be >= 1".into()));
    }
    let stages = generate_widths(cfg)?;
    let smallest = *stages.widths.iter().min().expect("depth >= 1");
    if scale_divisor > smallest {
        return Err(Error::InvalidConfig(format!(
            "scale_divisor {scale_divisor} exceeds the smallest stage width {smallest}"
        )));
    }
    let stage_widths = stages
        .widths
        .iter()
        .map(|&w| (round_half_up(w as f64 / scale_divisor as f64) as usize).max(1))
        .collect();
    let stage_depths = match max_blocks_per_stage {
        Some(0) => return Err(Error::InvalidConfig("max_blocks_per_stage must be >= 1".into())),
        Some(cap) => stages.depths.iter().map(|&d| d.min(cap)).collect(),
        None => stages.depths.clone(),
    };
    let spec = ModelSpec {
        stage_widths,
        stage_depths,
        head_dims: head_dims.to_vec(),
        n_prototypes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Per-layer activation sizes for the checkpoint planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub m: Vec<u64>,
    pub batch: usize,
    pub bytes_per_elem: usize,
}

pub fn activation_profile(
    spec: &ModelSpec,
    batch: usize,
    bytes_per_elem: usize,
) -> Result<ActivationProfile> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    if bytes_per_elem != 4 && bytes_per_elem != 8 {
        return Err(Error::InvalidArgument(format!(
            "bytes_per_elem must be 4 or 8, got {bytes_per_elem}"
        )));
    }
    let m = spec
        .layer_widths()
        .iter()
        .map(|&w| (batch * w * bytes_per_elem) as u64)
        .collect();
    Ok(ActivationProfile {
        m,
        batch,
        bytes_per_elem,
    })
}

/// Number of dense parameters (weights and biases) for a given input dimension.
pub fn dense_param_count(spec: &ModelSpec, input_dim: usize) -> usize {
    let mut prev = input_dim;
    let mut total = 0;
    for w in spec.layer_widths() {
        total += prev * w + w;
        prev = w;
    }
    total + spec.n_prototypes * prev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_model_matches_published_table() {
        let s = generate_widths(&RegnetConfig::RG_128GF).unwrap();
        assert_eq!(s.widths, vec![528, 1056, 2904, 7392]);
        assert_eq!(s.depths, vec![2, 7, 17, 1]);
    }

    #[test]
    fn ten_billion_final_width_feeds_head() {
        let s = generate_widths(&RegnetConfig::RG_10B).unwrap();
        // the head table lists 28280 as the trunk output width
        assert_eq!(*s.widths.last().unwrap(), 28280);
        assert_eq!(s.depths, vec![2, 7, 17, 1]);
    }

    #[test]
    fn rg8gf_hand_evaluated() {
        // u_j = 192 + 76.82 j, s_j = round(ln(u_j/192)/ln 2.19):
        // j in {0,1} -> s=0 (q=192, g=56, 192/56=3.43 -> 168)
        // j in 2..=5 -> s=1 (q=420.48 -> 424, 424/56=7.57 -> 448)
        // j in 6..=15 -> s=2 (q=920.85 -> 920, 920/56=16.43 -> 896)
        // j in 16..=26 -> s=3 (q=2016.66 -> 2016, 36*56 = 2016)
        let s = generate_widths(&RegnetConfig::RG_8GF).unwrap();
        assert_eq!(s.widths, vec![168, 448, 896, 2016]);
        assert_eq!(s.depths, vec![2, 4, 10, 11]);
    }

    #[test]
    fn zero_slope_is_single_stage() {
        let s = generate_widths(&RegnetConfig::new(64.0, 0.0, 1.0, 4, 32)).unwrap();
        assert_eq!(s.widths, vec![64]);
        assert_eq!(s.depths, vec![4]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_widths(&RegnetConfig::new(0.0, 1.0, 2.0, 4, 8)).is_err());
        assert!(generate_widths(&RegnetConfig::new(8.0, 1.0, -2.0, 4, 8)).is_err());
        assert!(generate_widths(&RegnetConfig::new(8.0, 1.0, 1.0, 4, 8)).is_err());
        assert!(generate_widths(&RegnetConfig::new(8.0, 1.0, 2.0, 0, 8)).is_err());
        assert!(generate_widths(&RegnetConfig::new(8.0, 1.0, 2.0, 3, 0)).is_err());
    }

    #[test]
    fn widths_are_group_multiples() {
        for cfg in [
            RegnetConfig::RG_8GF,
            RegnetConfig::RG_16GF,
            RegnetConfig::RG_32GF,
            RegnetConfig::RG_64GF,
            RegnetConfig::RG_128GF,
            RegnetConfig::RG_256GF,
            RegnetConfig::RG_10B,
        ] {
            let s = generate_widths(&cfg).unwrap();
            assert_eq!(s.depths.iter().sum::<usize>(), cfg.total_depth);
            assert!(s.widths.windows(2).all(|w| w[0] < w[1]));
            for &w in &s.widths {
                assert_eq!(w % cfg.group_width.min(w), 0);
            }
        }
    }

    #[test]
    fn toy_spec_divides_widths() {
        let spec = toy_spec(&RegnetConfig::RG_128GF, 264, &[44, 32, 32, 16], 8, None).unwrap();
        assert_eq!(spec.stage_widths, vec![2, 4, 11, 28]);
        assert_eq!(spec.stage_depths, vec![2, 7, 17, 1]);
        assert_eq!(spec.embed_dim(), 16);
        assert_eq!(spec.n_prototypes, 8);

        let ident = toy_spec(&RegnetConfig::RG_128GF, 1, &[16], 8, None).unwrap();
        assert_eq!(ident.stage_widths, vec![528, 1056, 2904, 7392]);

        assert!(toy_spec(&RegnetConfig::RG_128GF, 529, &[16], 8, None).is_err());
        let capped = toy_spec(&RegnetConfig::RG_128GF, 264, &[16], 8, Some(1)).unwrap();
        assert_eq!(capped.stage_depths, vec![1, 1, 1, 1]);
    }

    #[test]
    fn profile_products() {
        let spec = ModelSpec {
            stage_widths: vec![4, 8],
            stage_depths: vec![1, 1],
            head_dims: vec![],
            n_prototypes: 2,
        };
        let p = activation_profile(&spec, 2, 4).unwrap();
        assert_eq!(p.m, vec![32, 64]);
        assert!(activation_profile(&spec, 0, 4).is_err());
        let p2 = activation_profile(&spec, 4, 4).unwrap();
        assert!(p.m.iter().zip(&p2.m).all(|(a, b)| 2 * a == *b));
    }

    #[test]
    fn ten_billion_toy_profile_tracks_width_ratios() {
        let spec = toy_spec(&RegnetConfig::RG_10B, 1010, &[8, 8, 4], 4, None).unwrap();
        assert_eq!(spec.stage_widths, vec![2, 4, 11, 28]);
        let p = activation_profile(&spec, 3, 8).unwrap();
        let widths = spec.layer_widths();
        assert_eq!(p.m.len(), 27 + 3);
        for (m, w) in p.m.iter().zip(&widths) {
            assert_eq!(*m, (3 * 8 * w) as u64);
        }
        // trunk part is monotone
        assert!(p.m[..27].windows(2).all(|w| w[0] <= w[1]));
    }
}
