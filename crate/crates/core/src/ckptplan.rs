//! Activation-checkpoint planning.
//!
//! A plan cuts the per-layer activation array `m` into consecutive segments.
//! Segment starts are the checkpointed layers: their activations are kept and
//! every other activation is recomputed during the reverse pass.
//!
//! `n_segments` counts segments, so a plan with `S` segments has `S - 1`
//! interior boundaries. One segment means no checkpointing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    /// Interior segment starts, strictly increasing within `(0, n_layers)`.
    pub boundaries: Vec<usize>,
    pub n_segments: usize,
    /// Largest segment sum under this partition.
    pub minimax_sum: u64,
    pub modeled_peak: u64,
    /// Re-forwarded work units, with one unit per layer unless per-layer costs are supplied.
    pub recompute_flops: u64,
}

impl CheckpointPlan {
    /// Evaluates an explicit boundary list against a profile.
    pub fn from_boundaries(m: &[u64], boundaries: Vec<usize>) -> Result<Self> {
        validate_boundaries(&boundaries, m.len())?;
        let minimax_sum = segment_sums(m, &boundaries).into_iter().max().unwrap_or(0);
        let modeled_peak = simulate_peak(m, &boundaries)?;
        let recompute = recompute_flops(&boundaries, &vec![1; m.len()])?;
        Ok(Self {
            n_segments: boundaries.len() + 1,
            boundaries,
            minimax_sum,
            modeled_peak,
            recompute_flops: recompute,
        })
    }

    /// Same plan with the recompute cost re-evaluated for per-layer costs `f`.
    pub fn with_flops(mut self, f: &[u64]) -> Result<Self> {
        self.recompute_flops = recompute_flops(&self.boundaries, f)?;
        Ok(self)
    }
}

fn validate_boundaries(boundaries: &[usize], n: usize) -> Result<()> {
    let mut prev = 0;
    for &b in boundaries {
        if b <= prev || b >= n {
            return Err(Error::InvalidPlan(format!(
                "boundaries {boundaries:?} must increase strictly within (0, {n})"
            )));
        }
        prev = b;
    }
    Ok(())
}

fn segment_sums(m: &[u64], boundaries: &[usize]) -> Vec<u64> {
    let mut starts = vec![0];
    starts.extend_from_slice(boundaries);
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let e = starts.get(i + 1).copied().unwrap_or(m.len());
            m[s..e].iter().sum()
        })
        .collect()
}

/// Minimax partition of `m` into exactly `n_segments` consecutive, non-empty
/// segments. Among optimal partitions the lexicographically smallest boundary
/// list is returned.
pub fn plan(m: &[u64], n_segments: usize) -> Result<CheckpointPlan> {
    let n = m.len();
    if n_segments == 0 || n_segments > n {
        return Err(Error::InvalidArgument(format!(
            "n_segments must be in [1, {n}], got {n_segments}"
        )));
    }
    let mut prefix = vec![0u64; n + 1];
    for (i, &v) in m.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let range = |a: usize, b: usize| prefix[b] - prefix[a];

    // best[s][i]: minimal max-sum splitting suffix m[i..] into s segments
    let mut best = vec![vec![u64::MAX; n + 1]; n_segments + 1];
    for i in 0..n {
        best[1][i] = range(i, n);
    }
    for s in 2..=n_segments {
        for i in 0..n {
            if n - i < s {
                continue;
            }
            let mut v = u64::MAX;
            for j in (i + 1)..=(n - (s - 1)) {
                v = v.min(range(i, j).max(best[s - 1][j]));
            }
            best[s][i] = v;
        }
    }
    let optimum = best[n_segments][0];

    let mut boundaries = Vec::with_capacity(n_segments - 1);
    let mut pos = 0;
    for remaining in (1..n_segments).rev() {
        let next = ((pos + 1)..=(n - remaining))
            .find(|&j| range(pos, j) <= optimum && best[remaining][j] <= optimum)
            .expect("an optimal continuation exists");
        boundaries.push(next);
        pos = next;
    }
    let plan = CheckpointPlan::from_boundaries(m, boundaries)?;
    debug_assert_eq!(plan.minimax_sum, optimum);
    Ok(plan)
}

/// Smallest segment count whose minimax plan fits `budget` under
/// [`simulate_peak`].
pub fn auto_plan(m: &[u64], budget: u64) -> Result<CheckpointPlan> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("empty activation profile".into()));
    }
    let mut min_peak = u64::MAX;
    for s in 1..=m.len() {
        let p = plan(m, s)?;
        if p.modeled_peak <= budget {
            return Ok(p);
        }
        min_peak = min_peak.min(p.modeled_peak);
    }
    Err(Error::Infeasible { budget, min_peak })
}

/// Modeled peak activation memory: retained segment-start activations plus the
/// largest recomputed segment live during the reverse pass.
pub fn simulate_peak(m: &[u64], boundaries: &[usize]) -> Result<u64> {
    validate_boundaries(boundaries, m.len())?;
    if m.is_empty() {
        return Ok(0);
    }
    let mut starts = vec![0];
    starts.extend_from_slice(boundaries);
    let retained: u64 = starts.iter().map(|&s| m[s]).sum();
    let live = segment_sums(m, boundaries)
        .iter()
        .zip(&starts)
        .map(|(sum, &s)| sum - m[s])
        .max()
        .unwrap_or(0);
    Ok(retained + live)
}

/// Work re-done by the reverse pass: every layer inside a checkpointed
/// segment is forwarded once more. Zero without checkpointing.
pub fn recompute_flops(boundaries: &[usize], f: &[u64]) -> Result<u64> {
    validate_boundaries(boundaries, f.len())?;
    if boundaries.is_empty() {
        return Ok(0);
    }
    Ok(f.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_split() {
        let p = plan(&[1, 1, 1, 1], 2).unwrap();
        assert_eq!(p.boundaries, vec![2]);
        assert_eq!(p.minimax_sum, 2);
    }

    #[test]
    fn uneven_three_way() {
        // all six splits: [1,2]→6 [1,3]→5 [1,4]→5 [2,3]→5 [2,4]→4 [3,4]→5
        let p = plan(&[3, 1, 1, 3, 2], 3).unwrap();
        assert_eq!(p.boundaries, vec![2, 4]);
        assert_eq!(p.minimax_sum, 4);
    }

    #[test]
    fn every_layer_alone() {
        let m = [5, 2, 9, 1];
        let p = plan(&m, 4).unwrap();
        assert_eq!(p.boundaries, vec![1, 2, 3]);
        assert_eq!(p.minimax_sum, 9);
        assert!(plan(&m, 0).is_err());
        assert!(plan(&m, 5).is_err());
    }

    #[test]
    fn peak_model() {
        assert_eq!(simulate_peak(&[1, 1, 1, 1], &[]).unwrap(), 4);
        assert_eq!(simulate_peak(&[1, 1, 1, 1], &[2]).unwrap(), 3);
        for b in [vec![1], vec![2], vec![3], vec![1, 2], vec![1, 2, 3]] {
            assert!(simulate_peak(&[8, 1, 1, 1], &b).unwrap() >= 8);
        }
        assert!(simulate_peak(&[1, 1], &[2]).is_err());
    }

    #[test]
    fn recompute_units() {
        assert_eq!(recompute_flops(&[], &[1, 1, 1, 1]).unwrap(), 0);
        assert_eq!(recompute_flops(&[2], &[1, 1, 1, 1]).unwrap(), 4);
        assert_eq!(recompute_flops(&[2], &[0, 0, 0, 0]).unwrap(), 0);
    }

    #[test]
    fn auto_plan_cases() {
        let m = [1, 1, 1, 1];
        assert_eq!(auto_plan(&m, 4).unwrap().n_segments, 1);
        let p = auto_plan(&m, 3).unwrap();
        assert_eq!(p.n_segments, 2);
        assert_eq!(p.boundaries, vec![2]);
        match auto_plan(&[8, 1, 1, 1], 7) {
            Err(Error::Infeasible { min_peak, .. }) => assert!(min_peak >= 8),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
