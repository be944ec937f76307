use std::collections::BTreeSet;

use log::debug;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::log::{EventLog, Interaction, NodeId};
use super::split::SplitSpec;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Random,
    Historical,
    Inductive,
}

/// Precomputed negative-destination pools for the three protocols.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    num_nodes: usize,
    /// Distinct destinations over the whole log.
    all_dst: Vec<NodeId>,
    /// Distinct destinations in the training view.
    train_dst: Vec<NodeId>,
    /// Per source: destinations linked in the training window.
    hist: Vec<BTreeSet<NodeId>>,
    /// Per source: destinations linked only after the training window.
    later_only: Vec<BTreeSet<NodeId>>,
    /// Per source: `(ts, dst)` of every outgoing edge, time ordered.
    outgoing: Vec<Vec<(f64, NodeId)>>,
    masked: BTreeSet<NodeId>,
}

impl NegativeSampler {
    pub fn new(log: &EventLog, split: &SplitSpec) -> Result<Self> {
        let n = log.num_nodes();
        if n < 2 {
            return Err(Error::Sampling(format!("need at least 2 nodes, got {n}")));
        }
        let mut all = BTreeSet::new();
        let mut train = BTreeSet::new();
        let mut hist = vec![BTreeSet::new(); n];
        let mut later = vec![BTreeSet::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for e in log.interactions() {
            all.insert(e.dst);
            outgoing[e.src].push((e.ts, e.dst));
            if e.idx < split.n_train {
                hist[e.src].insert(e.dst);
                if split.in_training_view(e) {
                    train.insert(e.dst);
                }
            } else {
                later[e.src].insert(e.dst);
            }
        }
        for (l, h) in later.iter_mut().zip(&hist) {
            l.retain(|d| !h.contains(d));
        }
        Ok(Self {
            num_nodes: n,
            all_dst: all.into_iter().collect(),
            train_dst: train.into_iter().collect(),
            hist,
            later_only: later,
            outgoing,
            masked: split.inductive_masked_nodes.clone(),
        })
    }

    fn linked_at(&self, src: NodeId, ts: f64) -> impl Iterator<Item = NodeId> + '_ {
        let out = &self.outgoing[src];
        let lo = out.partition_point(|&(t, _)| t < ts);
        let hi = out.partition_point(|&(t, _)| t <= ts);
        out[lo..hi].iter().map(|&(_, d)| d)
    }

    /// The protocol's candidate pool for `positive`, before any fallback.
    pub fn pool(&self, protocol: Protocol, positive: &Interaction) -> Vec<NodeId> {
        let dst = positive.dst;
        match protocol {
            Protocol::Random => self.all_dst.iter().copied().filter(|&d| d != dst).collect(),
            Protocol::Historical => {
                let now: BTreeSet<NodeId> = self.linked_at(positive.src, positive.ts).collect();
                self.hist
                    .get(positive.src)
                    .into_iter()
                    .flatten()
                    .copied()
                    .filter(|d| *d != dst && !now.contains(d))
                    .collect()
            }
            Protocol::Inductive => self
                .later_only
                .get(positive.src)
                .into_iter()
                .flatten()
                .copied()
                .filter(|&d| d != dst)
                .collect(),
        }
    }

    /// Draw one negative destination for an evaluation positive.
    pub fn sample(&self, protocol: Protocol, positive: &Interaction, rng: &mut Rng) -> NodeId {
        let pool = self.pool(protocol, positive);
        if let Some(&d) = pick(&pool, rng) {
            return d;
        }
        if protocol != Protocol::Random {
            debug!(
                "{protocol:?} pool empty for source {} at ts {}; using random",
                positive.src, positive.ts
            );
        }
        self.random_fallback(positive.dst, rng, |_| true)
    }

    /// Draw a training negative: a training-view destination other than the
    /// positive's, never a masked node.
    pub fn sample_train(&self, positive: &Interaction, rng: &mut Rng) -> NodeId {
        let dst = positive.dst;
        let len = self.train_dst.len();
        let has_dst = self.train_dst.binary_search(&dst).is_ok();
        let avail = len - usize::from(has_dst);
        if avail > 0 {
            let mut i = rng.random_range(0..avail);
            if has_dst && self.train_dst[i] >= dst {
                i += 1;
            }
            return self.train_dst[i];
        }
        self.random_fallback(dst, rng, |d| !self.masked.contains(&d))
    }

    fn random_fallback(&self, dst: NodeId, rng: &mut Rng, ok: impl Fn(NodeId) -> bool) -> NodeId {
        let candidates: Vec<NodeId> = self
            .all_dst
            .iter()
            .copied()
            .filter(|&d| d != dst && ok(d))
            .collect();
        if let Some(&d) = pick(&candidates, rng) {
            return d;
        }
        let any: Vec<NodeId> = (0..self.num_nodes).filter(|&d| d != dst && ok(d)).collect();
        match pick(&any, rng) {
            Some(&d) => d,
            None => (0..self.num_nodes).find(|&d| d != dst).unwrap_or(0),
        }
    }
}

fn pick<'a, T>(v: &'a [T], rng: &mut Rng) -> Option<&'a T> {
    if v.is_empty() {
        None
    } else {
        Some(&v[rng.random_range(0..v.len())])
    }
}
