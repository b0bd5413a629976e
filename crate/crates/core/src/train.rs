//! Training driver: deterministic batching, the per-rank step loop, metrics,
//! periodic sharded checkpoints and resume.

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::ckptplan::{self, CheckpointPlan};
use crate::ckptstore::{self, RunInfo};
use crate::config::RunConfig;
use crate::engine::{LayeredNet, NetLayout};
use crate::error::{Error, Result};
use crate::fabric::{EventRecord, ExecMode, Fabric, WorldHandle};
use crate::fsdp::{self, DenseState, ShardedState};
use crate::netspec::activation_profile;
use crate::optim::OptimConfig;
use crate::rng::{self, streams};
use crate::swav::{make_view_batch, synth_dataset, SwavConfig, SynthDataset};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub peak_modeled_mem: u64,
}

/// Everything derived from a validated config before training starts.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cfg: RunConfig,
    pub layout: NetLayout,
    pub dataset: SynthDataset,
    pub optim: OptimConfig,
    pub plan: CheckpointPlan,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.model_spec()?;
        let layout = NetLayout::from_spec(&spec, cfg.dataset.dim);
        let d = &cfg.dataset;
        let dataset = synth_dataset(
            d.n_clusters,
            d.dim,
            d.n_samples,
            d.spread,
            &mut rng::stream(cfg.seed, &[streams::DATASET]),
        )?;
        let rows = cfg.swav.n_views() * cfg.batch_per_rank;
        let m = activation_profile(&spec, rows, 8)?.m;
        let plan = match (cfg.memory_budget_bytes, &cfg.boundaries) {
            (Some(budget), _) => ckptplan::auto_plan(&m, budget)?,
            (None, Some(b)) => CheckpointPlan::from_boundaries(&m, b.clone())?,
            (None, None) => CheckpointPlan::from_boundaries(&m, Vec::new())?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            dataset,
            optim: cfg.optim_config(),
            plan,
        })
    }

    pub fn swav(&self) -> &SwavConfig {
        &self.cfg.swav
    }

    pub fn initial_net(&self) -> Result<LayeredNet> {
        LayeredNet::init(&self.layout, &mut rng::stream(self.cfg.seed, &[streams::INIT]))
    }

    /// Views of `rank`'s microbatch at `step`. The global batch is drawn
    /// without replacement and split into contiguous rank blocks.
    pub fn microbatch(&self, step: u64, rank: usize) -> Result<Vec<Matrix>> {
        let b = self.cfg.batch_per_rank;
        let global = self.cfg.world_size * b;
        let mut pick = rng::stream(self.cfg.seed, &[streams::BATCH, step]);
        let idx = index::sample(&mut pick, self.dataset.samples.rows(), global).into_vec();
        let rows: Vec<&[f64]> = idx[rank * b..(rank + 1) * b]
            .iter()
            .map(|&i| self.dataset.samples.row(i))
            .collect();
        let mut views = rng::stream(self.cfg.seed, &[streams::VIEWS, step, rank as u64]);
        make_view_batch(&rows, self.swav(), &mut views)
    }

    pub fn run_info(&self, step: u64) -> RunInfo {
        RunInfo {
            step,
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
        }
    }
}

/// Runs one worker per rank, handing each its own state.
pub fn run_sharded<T, F, Fut>(fabric: &Fabric, mode: ExecMode, states: Vec<ShardedState>, f: F) -> Result<Vec<T>>
where
    F: Fn(ShardedState, WorldHandle) -> Fut + Sync,
    Fut: Future<Output = Result<T>>,
    T: Send,
{
    if states.len() != fabric.world_size() {
        return Err(Error::InvalidArgument(format!(
            "{} states for world {}",
            states.len(),
            fabric.world_size()
        )));
    }
    let slots: Vec<Mutex<Option<ShardedState>>> = states.into_iter().map(|s| Mutex::new(Some(s))).collect();
    fabric.run(mode, |h| {
        let st = slots[h.rank()]
            .lock()
            .expect("state slot")
            .take()
            .expect("each rank runs once");
        f(st, h)
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub states: Vec<ShardedState>,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<EventRecord>,
}

impl TrainOutcome {
    pub fn dense(&self) -> Result<DenseState> {
        fsdp::consolidate(&self.states)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Sharded checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps instead of `total_iters`.
    pub stop_at: Option<u64>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}"))
}

/// Trains with the sharded step on `world_size` in-process ranks. Rank 0's
/// metrics go to `on_metrics` as they are produced.
pub fn train(
    setup: &Setup,
    mode: ExecMode,
    opts: &TrainOptions,
    on_metrics: &(dyn Fn(&MetricsRecord) + Sync),
) -> Result<TrainOutcome> {
    let cfg = &setup.cfg;
    let world = cfg.world_size;
    let (states, start) = match &opts.resume {
        Some(dir) => {
            let mut states = Vec::with_capacity(world);
            let mut start = 0;
            for r in 0..world {
                let (st, run) = ckptstore::load_sharded(dir, r, world)?;
                if run.config_hash != cfg.hash() || run.seed != cfg.seed {
                    return Err(Error::InvalidConfig(format!(
                        "checkpoint {} was written by a different config",
                        dir.display()
                    )));
                }
                if st.layout != setup.layout {
                    return Err(Error::InvalidConfig("checkpoint layout differs from the config".into()));
                }
                start = run.step;
                states.push(st);
            }
            (states, start)
        }
        None => (DenseState::new(setup.initial_net()?).shard(world)?, 0),
    };
    let stop = opts.stop_at.unwrap_or(cfg.total_iters).min(cfg.total_iters);
    let boundaries = setup.plan.boundaries.clone();
    let peak = setup.plan.modeled_peak;
    let fabric = Fabric::new(world)?;

    let results = run_sharded(&fabric, mode, states, |mut st, mut h| {
        let boundaries = &boundaries;
        async move {
            let mut metrics = Vec::new();
            for step in start..stop {
                let views = setup.microbatch(step, h.rank())?;
                let report =
                    fsdp::fsdp_train_step(&mut st, &mut h, step, &views, setup.swav(), &setup.optim, boundaries).await?;
                if !report.loss.is_finite() {
                    return Err(Error::Numeric(format!("loss is {} at iteration {step}", report.loss)));
                }
                if h.rank() == 0 {
                    let rec = MetricsRecord {
                        iter: step,
                        lr: report.lr,
                        loss: report.loss,
                        peak_modeled_mem: peak,
                    };
                    on_metrics(&rec);
                    metrics.push(rec);
                }
                let done = step + 1;
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                    let dir = checkpoint_path(cfg.checkpoint_dir.as_deref().expect("validated"), done);
                    h.barrier().await?;
                    ckptstore::save_sharded(&st, &setup.run_info(done), &dir)?;
                    h.barrier().await?;
                }
            }
            Ok((st, metrics))
        }
    })?;
    let mut states = Vec::with_capacity(world);
    let mut metrics = Vec::new();
    for (st, m) in results {
        states.push(st);
        if metrics.is_empty() {
            metrics = m;
        }
    }
    Ok(TrainOutcome {
        states,
        metrics,
        events: fabric.events(),
    })
}

/// The dense oracle trajectory: `steps` baseline steps over the same
/// microbatches the sharded run consumes.
pub fn train_dense(setup: &Setup, steps: u64) -> Result<(DenseState, Vec<f64>)> {
    let mut state = DenseState::new(setup.initial_net()?);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mbs: Vec<Vec<Matrix>> = (0..setup.cfg.world_size)
            .map(|r| setup.microbatch(step, r))
            .collect::<Result<_>>()?;
        losses.push(fsdp::ddp_baseline_step(&mut state, &mbs, step, setup.swav(), &setup.optim)?.loss);
    }
    Ok((state, losses))
}
