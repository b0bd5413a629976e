//! JSON run configuration. Every key has a toy-scale default, so `{}` is a
//! complete config; unknown keys are rejected at every nesting level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::NetLayout;
use crate::error::{Error, Result};
use crate::netspec::{toy_spec, ModelSpec, RegnetConfig};
use crate::optim::{LarcConfig, LrSchedule, OptimConfig};
use crate::swav::SwavConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_iters: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `null` turns trust-ratio scaling off.
    pub larc: Option<LarcConfig>,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            peak_lr: 0.5,
            final_lr: 0.0005,
            warmup_iters: 50,
            momentum: 0.9,
            weight_decay: 1e-6,
            larc: Some(LarcConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_clusters: usize,
    pub dim: usize,
    pub n_samples: usize,
    /// Per-coordinate std-dev around the unit-norm cluster means.
    pub spread: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            dim: 32,
            n_samples: 2000,
            spread: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub regnet: RegnetConfig,
    pub width_divisor: usize,
    pub max_blocks_per_stage: Option<usize>,
    pub head_dims: Vec<usize>,
    pub swav: SwavConfig,
    pub optim: OptimSection,
    pub dataset: DatasetConfig,
    pub world_size: usize,
    pub batch_per_rank: usize,
    pub total_iters: u64,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// When set, checkpoint boundaries come from the automatic planner.
    pub memory_budget_bytes: Option<u64>,
    /// Explicit checkpoint boundaries; conflicts with `memory_budget_bytes`.
    pub boundaries: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            regnet: RegnetConfig::RG_8GF,
            width_divisor: 14,
            max_blocks_per_stage: Some(1),
            head_dims: vec![32, 16],
            swav: SwavConfig::default(),
            optim: OptimSection::default(),
            dataset: DatasetConfig::default(),
            world_size: 4,
            batch_per_rank: 16,
            total_iters: 500,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            memory_budget_bytes: None,
            boundaries: None,
        }
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`, or 1.
fn key_line(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

impl RunConfig {
    /// Parses and validates; messages carry the line of the offending key.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", e.line())))?;
        if let Err((key, msg)) = cfg.check() {
            return Err(Error::InvalidConfig(format!("line {}: {key}: {msg}", key_line(text, key))));
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, None, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(key, msg)| Error::InvalidConfig(format!("{key}: {msg}")))
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let fail = |key: &'static str, e: Error| Err((key, e.to_string()));
        if let Err(e) = self.regnet.validate() {
            return fail("regnet", e);
        }
        if let Err(e) = self.swav.validate() {
            return fail("swav", e);
        }
        if self.world_size == 0 {
            return Err(("world_size", "must be >= 1".into()));
        }
        if self.batch_per_rank == 0 {
            return Err(("batch_per_rank", "must be >= 1".into()));
        }
        if self.total_iters == 0 {
            return Err(("total_iters", "must be >= 1".into()));
        }
        if self.optim.warmup_iters >= self.total_iters {
            return Err(("warmup_iters", format!("must be below total_iters {}", self.total_iters)));
        }
        if let Err(e) = self.optim_config().validate() {
            return fail("optim", e);
        }
        let d = &self.dataset;
        if d.n_clusters < 2 || d.dim == 0 || !(d.spread >= 0.0) {
            return Err(("dataset", "needs n_clusters >= 2, dim >= 1 and spread >= 0".into()));
        }
        if d.n_samples < self.world_size * self.batch_per_rank {
            return Err((
                "n_samples",
                format!("{} samples cannot fill a global batch of {}", d.n_samples, self.world_size * self.batch_per_rank),
            ));
        }
        if self.head_dims.is_empty() {
            return Err(("head_dims", "needs at least the embedding layer".into()));
        }
        let spec = match self.model_spec() {
            Ok(s) => s,
            Err(e) => return fail("width_divisor", e),
        };
        if self.memory_budget_bytes.is_some() && self.boundaries.is_some() {
            return Err(("boundaries", "give either boundaries or memory_budget_bytes, not both".into()));
        }
        if let Some(b) = &self.boundaries {
            if let Err(e) = crate::engine::segments_from_boundaries(b, spec.layer_widths().len()) {
                return fail("boundaries", e);
            }
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(("checkpoint_every", "needs checkpoint_dir".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        toy_spec(
            &self.regnet,
            self.width_divisor,
            &self.head_dims,
            self.swav.n_prototypes,
            self.max_blocks_per_stage,
        )
    }

    pub fn layout(&self) -> Result<NetLayout> {
        Ok(NetLayout::from_spec(&self.model_spec()?, self.dataset.dim))
    }

    pub fn optim_config(&self) -> OptimConfig {
        let o = &self.optim;
        OptimConfig {
            schedule: LrSchedule {
                base_lr: o.base_lr,
                peak_lr: o.peak_lr,
                final_lr: o.final_lr,
                warmup_iters: o.warmup_iters,
                total_iters: self.total_iters,
            },
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            larc: o.larc,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_rejected_at_any_depth() {
        assert!(RunConfig::from_json_str(r#"{"wrld_size": 2}"#).is_err());
        let err = RunConfig::from_json_str("{\n  \"swav\": {\n    \"temp\": 0.1\n  }\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(RunConfig::from_json_str(r#"{"optim": {"larc": {"etaa": 1}}}"#).is_err());
    }

    #[test]
    fn validation_points_at_key_line() {
        let text = "{\n  \"total_iters\": 10,\n  \"optim\": {\n    \"warmup_iters\": 20\n  }\n}";
        let err = RunConfig::from_json_str(text).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("warmup_iters"), "{err}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"swav": {"tau": 0.2}, "optim": {"larc": null}}"#).unwrap();
        assert_eq!(cfg.swav.tau, 0.2);
        assert_eq!(cfg.swav.epsilon, SwavConfig::default().epsilon);
        assert!(cfg.optim.larc.is_none());
    }

    #[test]
    fn conflicting_plan_sources_rejected() {
        let text = r#"{"boundaries": [1], "memory_budget_bytes": 100}"#;
        assert!(RunConfig::from_json_str(text).is_err());
    }
}
