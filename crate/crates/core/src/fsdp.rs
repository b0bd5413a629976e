//! Fully sharded data parallelism.
//!
//! Every parameter unit (each dense layer's weights and bias, and the
//! prototype matrix) is flattened, zero-padded to a multiple of the world
//! size and split into equal contiguous blocks, one per rank. Momentum is
//! sharded the same way. A training step:
//!
//! 1. all-gathers each unit right before it is used, prefetching the next one,
//!    and releases it after use;
//! 2. all-gathers embeddings so every rank computes codes on the global batch;
//! 3. runs the reverse pass segment by segment, re-gathering and recomputing
//!    checkpointed segments;
//! 4. reduce-scatters each unit's gradient, computes trust-ratio norms with
//!    one batched all-reduce and updates its shards locally.
//!
//! [`ddp_baseline_step`] performs the same arithmetic on dense state and is
//! the equivalence oracle for the sharded path.

use serde::{Deserialize, Serialize};

use crate::engine::{
    self, normalize_backward, normalize_rows, score, score_backward, segments_from_boundaries, DenseLayer,
    LayerGrad, LayeredNet, NetLayout, Retention,
};
use crate::error::{Error, Result};
use crate::fabric::{EventRecord, WorldHandle, NO_LAYER};
use crate::optim::{self, shard_len, OptimConfig};
use crate::swav::{swav_loss, SwavConfig};
use crate::tensor::Matrix;

/// Local event tag for dropping an unsharded unit.
pub const RELEASE_EVENT: &str = "release";

/// One rank's block of a parameter unit and its momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitShard {
    pub full_len: usize,
    pub weights: Vec<f64>,
    pub momentum: Vec<f64>,
}

impl UnitShard {
    pub fn shard_len(&self) -> usize {
        self.weights.len()
    }

    /// Zero entries appended to the flat unit so it divides evenly.
    pub fn pad_len(&self, world: usize) -> usize {
        self.shard_len() * world - self.full_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardedState {
    pub rank: usize,
    pub world_size: usize,
    pub layout: NetLayout,
    pub units: Vec<UnitShard>,
}

/// This rank's padded block of `full`.
pub fn shard_vector(full: &[f64], rank: usize, world: usize) -> Vec<f64> {
    let block = shard_len(full.len(), world);
    let lo = (rank * block).min(full.len());
    let hi = ((rank + 1) * block).min(full.len());
    let mut out = full[lo..hi].to_vec();
    out.resize(block, 0.0);
    out
}

fn pad_to(v: &[f64], len: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(len, 0.0);
    out
}

impl ShardedState {
    /// Shards dense parameters and momentum (one flat vector per unit).
    pub fn from_dense(layout: &NetLayout, params: &[Vec<f64>], momentum: &[Vec<f64>], rank: usize, world: usize) -> Result<Self> {
        if world == 0 || rank >= world {
            return Err(Error::InvalidArgument(format!("rank {rank} of world {world}")));
        }
        let lens = layout.unit_lens();
        if params.len() != lens.len() || momentum.len() != lens.len() {
            return Err(Error::Shape("unit count does not match layout".into()));
        }
        let mut units = Vec::with_capacity(lens.len());
        for ((p, m), &len) in params.iter().zip(momentum).zip(&lens) {
            if p.len() != len || m.len() != len {
                return Err(Error::Shape(format!("unit of length {} for layout length {len}", p.len())));
            }
            units.push(UnitShard {
                full_len: len,
                weights: shard_vector(p, rank, world),
                momentum: shard_vector(m, rank, world),
            });
        }
        Ok(Self {
            rank,
            world_size: world,
            layout: layout.clone(),
            units,
        })
    }
}

/// Shards a dense network with zero momentum across `world` ranks.
pub fn shard_params(net: &LayeredNet, world: usize) -> Result<Vec<ShardedState>> {
    let dense = DenseState::new(net.clone());
    dense.shard(world)
}

/// Concatenates every rank's shards in rank order and drops the padding.
pub fn consolidate(states: &[ShardedState]) -> Result<DenseState> {
    let first = states.first().ok_or_else(|| Error::InvalidArgument("no shards".into()))?;
    let world = first.world_size;
    if states.len() != world || states.iter().enumerate().any(|(r, s)| s.rank != r || s.world_size != world) {
        return Err(Error::InvalidArgument("shards must be ranks 0..world in order".into()));
    }
    let n_units = first.units.len();
    let mut params = Vec::with_capacity(n_units);
    let mut momentum = Vec::with_capacity(n_units);
    for u in 0..n_units {
        let full_len = first.units[u].full_len;
        let mut w: Vec<f64> = states.iter().flat_map(|s| s.units[u].weights.iter().copied()).collect();
        let mut m: Vec<f64> = states.iter().flat_map(|s| s.units[u].momentum.iter().copied()).collect();
        w.truncate(full_len);
        m.truncate(full_len);
        params.push(w);
        momentum.push(m);
    }
    Ok(DenseState {
        net: LayeredNet::from_units(&first.layout, &params)?,
        momentum,
    })
}

/// Dense parameters plus momentum, the unsharded training state.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub net: LayeredNet,
    pub momentum: Vec<Vec<f64>>,
}

impl DenseState {
    pub fn new(net: LayeredNet) -> Self {
        let momentum = net.layout().unit_lens().into_iter().map(|l| vec![0.0; l]).collect();
        Self { net, momentum }
    }

    pub fn shard(&self, world: usize) -> Result<Vec<ShardedState>> {
        let layout = self.net.layout();
        let params = self.net.units();
        (0..world)
            .map(|r| ShardedState::from_dense(&layout, &params, &self.momentum, r, world))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
}

/// Stacks a microbatch's views (each `B × dim`) view-major.
pub fn stack_views(views: &[Matrix]) -> Result<Matrix> {
    Matrix::vstack(views)
}

/// Per-view global score matrices from every rank's view-major embeddings.
fn global_view_scores(rank_z: &[Matrix], n_views: usize, prototypes: &Matrix) -> Result<Vec<Matrix>> {
    (0..n_views)
        .map(|v| {
            let parts: Vec<Matrix> = rank_z
                .iter()
                .map(|z| {
                    let b = z.rows() / n_views;
                    z.slice_rows(v * b, (v + 1) * b)
                })
                .collect();
            score(&Matrix::vstack(&parts)?, prototypes)
        })
        .collect()
}

/// Rows of the global score gradients belonging to `rank`, view-major.
fn rank_score_grads(grads: &[Matrix], rank: usize, per_rank: usize) -> Result<Matrix> {
    let parts: Vec<Matrix> = grads
        .iter()
        .map(|g| g.slice_rows(rank * per_rank, (rank + 1) * per_rank))
        .collect();
    Matrix::vstack(&parts)
}

fn renormalize_prototypes(flat: &[f64], k: usize, d: usize) -> Result<Vec<f64>> {
    let m = Matrix::from_vec(k, d, flat.to_vec())?;
    Ok(normalize_rows(&m).0.into_vec())
}

fn check_microbatch(views: &[Matrix], swav: &SwavConfig, input_dim: usize) -> Result<usize> {
    if views.len() != swav.n_views() {
        return Err(Error::Shape(format!("{} views for {} expected", views.len(), swav.n_views())));
    }
    let b = views[0].rows();
    if b == 0 || views.iter().any(|v| v.rows() != b || v.cols() != input_dim) {
        return Err(Error::Shape("views must share a non-empty batch and the input width".into()));
    }
    Ok(b)
}

/// Dense data-parallel reference step: per-microbatch gradients folded in
/// ascending virtual-rank order, then the same optimizer as the sharded path.
pub fn ddp_baseline_step(
    state: &mut DenseState,
    microbatches: &[Vec<Matrix>],
    iter: u64,
    swav: &SwavConfig,
    optim_cfg: &OptimConfig,
) -> Result<StepReport> {
    let world = microbatches.len();
    if world == 0 {
        return Err(Error::InvalidArgument("no microbatches".into()));
    }
    let n_views = swav.n_views();
    let mut per_rank = None;
    let mut acts = Vec::with_capacity(world);
    for mb in microbatches {
        let b = check_microbatch(mb, swav, state.net.input_dim())?;
        if *per_rank.get_or_insert(b) != b {
            return Err(Error::Shape("microbatches differ in size".into()));
        }
        acts.push(engine::forward(&state.net, &stack_views(mb)?, &Retention::All)?);
    }
    let per_rank = per_rank.expect("world >= 1");
    let zs: Vec<Matrix> = acts.iter().map(|a| a.z.clone()).collect();
    let scores = global_view_scores(&zs, n_views, &state.net.prototypes)?;
    let loss = swav_loss(&scores, swav)?;

    let mut folded: Option<Vec<Vec<f64>>> = None;
    for (r, a) in acts.iter().enumerate() {
        let g = rank_score_grads(&loss.score_grads, r, per_rank)?;
        let rank_acts = engine::BatchActivations {
            scores: score(&a.z, &state.net.prototypes)?,
            ..a.clone()
        };
        let units = engine::backward(&state.net, &rank_acts, &g)?.units();
        folded = Some(match folded {
            None => units,
            Some(mut acc) => {
                for (au, gu) in acc.iter_mut().zip(&units) {
                    for (x, y) in au.iter_mut().zip(gu) {
                        *x += y;
                    }
                }
                acc
            }
        });
    }
    let grads = folded.expect("world >= 1");

    let mut params = state.net.units();
    let norms = optim::blocked_norms(&params, &grads, world);
    let lrs = optim_cfg.effective_lrs(iter, &norms)?;
    for (u, ((p, g), m)) in params.iter_mut().zip(&grads).zip(state.momentum.iter_mut()).enumerate() {
        optim::sgd_step(p, g, m, lrs[u], optim_cfg.weight_decay, optim_cfg.momentum)?;
    }
    let layout = state.net.layout();
    let last = layout.n_layers();
    params[last] = renormalize_prototypes(&params[last], layout.n_prototypes, layout.embed_dim())?;
    state.net = LayeredNet::from_units(&layout, &params)?;
    Ok(StepReport {
        loss: loss.loss,
        lr: optim::schedule_lr(iter, &optim_cfg.schedule)?,
    })
}

async fn gather_unit(handle: &mut WorldHandle, state: &ShardedState, unit: usize) -> Result<Vec<f64>> {
    let mut full = handle.all_gather(unit as i64, &state.units[unit].weights).await?;
    full.truncate(state.units[unit].full_len);
    Ok(full)
}

async fn gather_layer(handle: &mut WorldHandle, state: &ShardedState, l: usize) -> Result<DenseLayer> {
    let flat = gather_unit(handle, state, l).await?;
    let layout = &state.layout;
    DenseLayer::from_flat(layout.dims[l], layout.dims[l + 1], layout.activations[l], &flat)
}

/// One sharded training step for this rank. Every rank must call it with an
/// equally sized microbatch and the same checkpoint boundaries.
pub async fn fsdp_train_step(
    state: &mut ShardedState,
    handle: &mut WorldHandle,
    iter: u64,
    views: &[Matrix],
    swav: &SwavConfig,
    optim_cfg: &OptimConfig,
    boundaries: &[usize],
) -> Result<StepReport> {
    let layout = state.layout.clone();
    let n_layers = layout.n_layers();
    let proto_unit = n_layers;
    let world = state.world_size;
    if handle.world_size() != world || handle.rank() != state.rank {
        return Err(Error::State("state does not belong to this rank".into()));
    }
    let segments = segments_from_boundaries(boundaries, n_layers)?;
    let checkpointing = segments.len() > 1;
    let per_rank = check_microbatch(views, swav, layout.dims[0])?;
    let n_views = swav.n_views();
    handle.set_step(iter);

    // forward, prefetching one unit ahead
    let x = stack_views(views)?;
    let mut stored: Vec<Option<Matrix>> = vec![None; n_layers + 1];
    let mut seg_start = vec![false; n_layers + 1];
    for &(s, _) in &segments {
        seg_start[s] = true;
    }
    let mut current = Some(gather_layer(handle, state, 0).await?);
    let mut prototypes_flat = None;
    let mut h = x;
    for l in 0..n_layers {
        let layer = current.take().expect("gathered before use");
        if l + 1 < n_layers {
            current = Some(gather_layer(handle, state, l + 1).await?);
        } else {
            prototypes_flat = Some(gather_unit(handle, state, proto_unit).await?);
        }
        let y = layer.forward(&h)?;
        handle.log_local(RELEASE_EVENT, l as i64);
        if !checkpointing || seg_start[l] {
            stored[l] = Some(h);
        }
        h = y;
    }
    let prototypes = Matrix::from_vec(
        layout.n_prototypes,
        layout.embed_dim(),
        prototypes_flat.expect("prototype unit gathered"),
    )?;
    let (z, norms) = normalize_rows(&h);
    stored[n_layers] = Some(h);

    // codes on the global batch
    let gathered = handle.all_gather(NO_LAYER, z.as_slice()).await?;
    let rows = z.rows();
    let dim = z.cols();
    let rank_z: Vec<Matrix> = (0..world)
        .map(|r| Matrix::from_vec(rows, dim, gathered[r * rows * dim..(r + 1) * rows * dim].to_vec()))
        .collect::<Result<_>>()?;
    let scores = global_view_scores(&rank_z, n_views, &prototypes)?;
    let loss = swav_loss(&scores, swav)?;
    let g_scores = rank_score_grads(&loss.score_grads, state.rank, per_rank)?;

    // reverse pass: head, then segments last to first
    let mut grad_shards: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    let (dz, d_proto) = score_backward(&g_scores, &z, &prototypes)?;
    drop(prototypes);
    handle.log_local(RELEASE_EVENT, proto_unit as i64);
    let padded = state.units[proto_unit].shard_len() * world;
    grad_shards[proto_unit] = handle
        .reduce_scatter(proto_unit as i64, &pad_to(d_proto.as_slice(), padded))
        .await?;
    let mut d_out = normalize_backward(&dz, &z, &norms);

    for &(start, end) in segments.iter().rev() {
        let mut inputs: Vec<Matrix> = Vec::with_capacity(end - start + 1);
        inputs.push(
            stored[start]
                .take()
                .ok_or_else(|| Error::State(format!("segment input {start} not retained")))?,
        );
        for l in start..end {
            let next = if checkpointing {
                let layer = gather_layer(handle, state, l).await?;
                let y = layer.forward(&inputs[l - start])?;
                handle.log_local(RELEASE_EVENT, l as i64);
                y
            } else {
                stored[l + 1].take().expect("full retention")
            };
            inputs.push(next);
        }
        for l in (start..end).rev() {
            let layer = gather_layer(handle, state, l).await?;
            let LayerGrad { weight, bias, input } =
                layer.backward(&inputs[l - start], &inputs[l - start + 1], &d_out)?;
            handle.log_local(RELEASE_EVENT, l as i64);
            let mut flat = weight.into_vec();
            flat.extend_from_slice(&bias);
            let padded = state.units[l].shard_len() * world;
            grad_shards[l] = handle.reduce_scatter(l as i64, &pad_to(&flat, padded)).await?;
            d_out = input;
        }
    }

    // shard-local update with distributed trust-ratio norms
    let weight_refs: Vec<&[f64]> = state.units.iter().map(|u| u.weights.as_slice()).collect();
    let grad_refs: Vec<&[f64]> = grad_shards.iter().map(Vec::as_slice).collect();
    let layer_norms = optim::distributed_norms(handle, &weight_refs, &grad_refs).await?;
    let lrs = optim_cfg.effective_lrs(iter, &layer_norms)?;
    for (u, unit) in state.units.iter_mut().enumerate() {
        optim::sgd_step(
            &mut unit.weights,
            &grad_shards[u],
            &mut unit.momentum,
            lrs[u],
            optim_cfg.weight_decay,
            optim_cfg.momentum,
        )?;
    }
    let full = gather_unit(handle, state, proto_unit).await?;
    let normalized = renormalize_prototypes(&full, layout.n_prototypes, layout.embed_dim())?;
    state.units[proto_unit].weights = shard_vector(&normalized, state.rank, world);
    handle.log_local(RELEASE_EVENT, proto_unit as i64);

    Ok(StepReport {
        loss: loss.loss,
        lr: optim::schedule_lr(iter, &optim_cfg.schedule)?,
    })
}

/// Maximum number of simultaneously unsharded parameter units on `rank`
/// during `step`, replayed from the event log: parameter gathers minus
/// releases. The embedding exchange carries no layer tag and is not counted.
pub fn peak_unsharded(events: &[EventRecord], rank: usize, step: u64) -> usize {
    let mut live: usize = 0;
    let mut peak = 0;
    for e in events.iter().filter(|e| e.rank == rank && e.step == step && e.layer != NO_LAYER) {
        match e.op.as_str() {
            "all_gather" => {
                live += 1;
                peak = peak.max(live);
            }
            RELEASE_EVENT => live = live.saturating_sub(1),
            _ => {}
        }
    }
    peak
}

/// Kinds of events on the two simulated lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleEventKind {
    AllGatherStart,
    AllGatherEnd,
    ComputeStart,
    ComputeEnd,
    ReduceScatterStart,
    ReduceScatterEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub kind: ScheduleEventKind,
    pub layer: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSim {
    pub prefetch: bool,
    pub events: Vec<ScheduleEvent>,
    pub makespan: f64,
}

/// Two-lane (communication, compute) model of a sharded forward pass.
///
/// Without prefetch each layer's all-gather and compute run back to back.
/// With prefetch the communication lane issues all-gathers continuously in
/// layer order and `compute(l)` starts at `max(gather_end(l), compute_end(l-1))`.
pub fn simulate_schedule(comm: &[f64], compute: &[f64], prefetch: bool) -> Result<ScheduleSim> {
    if comm.len() != compute.len() {
        return Err(Error::Shape("comm and compute cost vectors differ in length".into()));
    }
    if comm.iter().chain(compute).any(|&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidArgument("costs must be finite and non-negative".into()));
    }
    use ScheduleEventKind::*;
    let mut events = Vec::with_capacity(4 * comm.len());
    let mut comm_free = 0.0f64;
    let mut compute_free = 0.0f64;
    for l in 0..comm.len() {
        let ag_start = if prefetch { comm_free } else { comm_free.max(compute_free) };
        let ag_end = ag_start + comm[l];
        comm_free = ag_end;
        let c_start = ag_end.max(compute_free);
        let c_end = c_start + compute[l];
        compute_free = c_end;
        if !prefetch {
            comm_free = c_end;
        }
        events.push(ScheduleEvent { kind: AllGatherStart, layer: l, time: ag_start });
        events.push(ScheduleEvent { kind: AllGatherEnd, layer: l, time: ag_end });
        events.push(ScheduleEvent { kind: ComputeStart, layer: l, time: c_start });
        events.push(ScheduleEvent { kind: ComputeEnd, layer: l, time: c_end });
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(ScheduleSim {
        prefetch,
        events,
        makespan: compute_free.max(comm_free),
    })
}
