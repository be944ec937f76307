use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::log::{EventLog, Interaction, NodeId};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Transductive,
    Inductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
    Test,
}

/// Chronological train/val/test boundaries plus the inductive node mask.
///
/// Index boundaries are authoritative; the timestamps are those of the last
/// interaction in each of the first two parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end_ts: f64,
    pub val_end_ts: f64,
    pub inductive_masked_nodes: BTreeSet<NodeId>,
    pub n_train: usize,
    pub n_val_end: usize,
    pub n_total: usize,
}

fn floor_count(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Split `log` chronologically by `ratios` (train, val, test). With
/// `inductive`, a seeded `mask_fraction` of the nodes seen in val/test is
/// hidden from the training view.
pub fn chronological_split(
    log: &EventLog,
    ratios: (f64, f64, f64),
    inductive: bool,
    mask_fraction: f64,
    seeds: &SeedStream,
) -> Result<SplitSpec> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Split(format!("ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    if !(0.0..1.0).contains(&mask_fraction) {
        return Err(Error::Split(format!("mask_fraction {mask_fraction} outside [0, 1)")));
    }
    let n = log.len();
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 interactions, got {n}")));
    }
    let n_train = floor_count(r_train, n);
    let n_val_end = floor_count(r_train + r_val, n).max(n_train);
    if n_train == 0 {
        return Err(Error::Split("training part is empty".into()));
    }
    let ev = log.interactions();
    let train_end_ts = ev[n_train - 1].ts;
    let val_end_ts = ev[n_val_end.max(1) - 1].ts;

    let mut masked = BTreeSet::new();
    if inductive && mask_fraction > 0.0 {
        let candidates: BTreeSet<NodeId> =
            ev[n_train..].iter().flat_map(|e| [e.src, e.dst]).collect();
        let mut candidates: Vec<NodeId> = candidates.into_iter().collect();
        let want = ((mask_fraction * candidates.len() as f64 + 1e-9).floor() as usize).max(1);
        let want = want.min(candidates.len());
        candidates.shuffle(&mut seeds.rng("split"));
        masked.extend(candidates.into_iter().take(want));
    }

    Ok(SplitSpec {
        train_end_ts,
        val_end_ts,
        inductive_masked_nodes: masked,
        n_train,
        n_val_end,
        n_total: n,
    })
}

impl SplitSpec {
    pub fn range(&self, phase: Phase) -> Range<usize> {
        match phase {
            Phase::Train => 0..self.n_train,
            Phase::Val => self.n_train..self.n_val_end,
            Phase::Test => self.n_val_end..self.n_total,
        }
    }

    pub fn phase_of(&self, idx: usize) -> Phase {
        if idx < self.n_train {
            Phase::Train
        } else if idx < self.n_val_end {
            Phase::Val
        } else {
            Phase::Test
        }
    }

    pub fn is_masked(&self, node: NodeId) -> bool {
        self.inductive_masked_nodes.contains(&node)
    }

    fn touches_mask(&self, e: &Interaction) -> bool {
        self.is_masked(e.src) || self.is_masked(e.dst)
    }

    /// Whether interaction `e` is visible to training: in the training part
    /// and not touching a masked node.
    pub fn in_training_view(&self, e: &Interaction) -> bool {
        e.idx < self.n_train && !self.touches_mask(e)
    }

    /// Training-view interaction indices.
    pub fn train_indices(&self, log: &EventLog) -> Vec<usize> {
        log.interactions()[self.range(Phase::Train)]
            .iter()
            .filter(|e| self.in_training_view(e))
            .map(|e| e.idx)
            .collect()
    }

    /// Evaluation positives for `phase`. In inductive mode only edges touching
    /// a masked node are kept.
    pub fn eval_indices(&self, log: &EventLog, phase: Phase, mode: Mode) -> Vec<usize> {
        log.interactions()[self.range(phase)]
            .iter()
            .filter(|e| mode == Mode::Transductive || self.touches_mask(e))
            .map(|e| e.idx)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> EventLog {
        let edges: Vec<_> = (0..n).map(|i| (i % 7, (i * 3 + 1) % 7, (i + 1) as f64)).collect();
        EventLog::from_edges(&edges).unwrap()
    }

    #[test]
    fn ten_events() {
        let s = chronological_split(&ramp(10), (0.7, 0.15, 0.15), false, 0.1, &SeedStream::new(0)).unwrap();
        assert_eq!(s.train_end_ts, 7.0);
        assert_eq!(s.val_end_ts, 8.0);
        assert_eq!(s.range(Phase::Train).len(), 7);
        assert_eq!(s.range(Phase::Val).len(), 1);
        assert_eq!(s.range(Phase::Test).len(), 2);
        assert!(s.inductive_masked_nodes.is_empty());
    }

    #[test]
    fn too_short_is_error() {
        let log = EventLog::from_edges(&[(0, 1, 1.0), (1, 2, 2.0)]).unwrap();
        let r = chronological_split(&log, (0.7, 0.15, 0.15), false, 0.1, &SeedStream::new(0));
        assert!(matches!(r, Err(Error::Split(_))));
    }

    #[test]
    fn inductive_mask_is_deterministic() {
        let edges: Vec<_> = (0..400).map(|i| (i % 100, (i * 37 + 11) % 100, i as f64)).collect();
        let log = EventLog::from_edges(&edges).unwrap();
        let seeds = SeedStream::new(5);
        let a = chronological_split(&log, (0.7, 0.15, 0.15), true, 0.1, &seeds).unwrap();
        let b = chronological_split(&log, (0.7, 0.15, 0.15), true, 0.1, &seeds).unwrap();
        assert_eq!(a, b);
        assert!(!a.inductive_masked_nodes.is_empty());
        for &i in &a.train_indices(&log) {
            let e = &log.interactions()[i];
            assert!(!a.is_masked(e.src) && !a.is_masked(e.dst));
        }
        for &i in &a.eval_indices(&log, Phase::Test, Mode::Inductive) {
            let e = &log.interactions()[i];
            assert!(a.is_masked(e.src) || a.is_masked(e.dst));
        }
    }

    proptest! {
        #[test]
        fn disjoint_cover(n in 3usize..80, seed in 0u64..100) {
            let log = ramp(n);
            let seeds = SeedStream::new(seed);
            let s = chronological_split(&log, (0.7, 0.15, 0.15), true, 0.2, &seeds).unwrap();
            let again = chronological_split(&log, (0.7, 0.15, 0.15), true, 0.2, &seeds).unwrap();
            prop_assert_eq!(&s, &again);
            let mut seen = vec![0u8; n];
            for p in [Phase::Train, Phase::Val, Phase::Test] {
                for i in s.range(p) {
                    seen[i] += 1;
                    prop_assert_eq!(s.phase_of(i), p);
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(s.train_end_ts <= s.val_end_ts);
            prop_assert!(s.val_end_ts <= log.max_ts().unwrap());
        }
    }
}
