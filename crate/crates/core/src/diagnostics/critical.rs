use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::events::{NeighborIndex, NodeId};
use crate::featurizer::{refresh_cooccurrence, TokenSequence};
use crate::rng::SeedStream;
use crate::train::{evaluate_detailed, Dataset, EvalReport, EvalSpec, Query, ScoreRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticalThresholds {
    /// Distinct candidate nodes a structural critical node has met.
    pub structural: usize,
    /// Interactions with `u` or `v` required of both temporal partners.
    pub temporal: usize,
    /// Repeated interactions between the temporal partners.
    pub repeat: usize,
}

impl Default for CriticalThresholds {
    fn default() -> Self {
        Self {
            structural: 2,
            temporal: 2,
            repeat: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CriticalReason {
    pub structural: bool,
    pub temporal: bool,
}

/// Critical nodes of a query pair, with the candidate pool they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CriticalSet {
    pub candidates: BTreeSet<NodeId>,
    pub critical: BTreeMap<NodeId, CriticalReason>,
}

impl CriticalSet {
    pub fn contains(&self, n: NodeId) -> bool {
        self.critical.contains_key(&n)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.critical.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.critical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.critical.is_empty()
    }
}

/// Candidates are the historical neighbors of `u` and `v` before `t`,
/// excluding `u` and `v`. A candidate is structural if it has met at least
/// `structural` distinct candidates, and temporal if some other candidate
/// met it at least `repeat` times while both met `u` or `v` at least
/// `temporal` times.
pub fn find_critical(index: &NeighborIndex, u: NodeId, v: NodeId, t: f64, th: &CriticalThresholds) -> CriticalSet {
    let mut candidates: BTreeSet<NodeId> = index
        .history(u, t)
        .iter()
        .chain(index.history(v, t))
        .map(|e| e.neighbor)
        .collect();
    candidates.remove(&u);
    candidates.remove(&v);

    // per candidate: interaction counts with other candidates, and with u or v
    let mut pair_counts: BTreeMap<NodeId, BTreeMap<NodeId, usize>> = BTreeMap::new();
    let mut query_counts: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &w in &candidates {
        let mut per: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut uv = 0;
        for e in index.history(w, t) {
            if e.neighbor == w {
                continue;
            }
            if e.neighbor == u || e.neighbor == v {
                uv += 1;
            }
            if candidates.contains(&e.neighbor) {
                *per.entry(e.neighbor).or_default() += 1;
            }
        }
        pair_counts.insert(w, per);
        query_counts.insert(w, uv);
    }

    let mut critical = BTreeMap::new();
    for &w in &candidates {
        let per = &pair_counts[&w];
        let structural = per.len() >= th.structural;
        let temporal = query_counts[&w] >= th.temporal
            && per
                .iter()
                .any(|(x, &c)| c >= th.repeat && query_counts[x] >= th.temporal);
        if structural || temporal {
            critical.insert(w, CriticalReason { structural, temporal });
        }
    }
    CriticalSet { candidates, critical }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Mask critical nodes, keeping a seeded fraction of them.
    Critical,
    /// Mask as many randomly chosen historical nodes.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    /// Fraction of critical nodes retained, in `[0, 1]`.
    pub retention: f64,
    pub seed: u64,
    pub thresholds: CriticalThresholds,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub queries: usize,
    /// Queries where at least one node was masked.
    pub queries_masked: usize,
    /// Distinct node ids masked, summed over queries.
    pub masked_nodes: usize,
    /// Token rows masked, summed over queries.
    pub masked_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedReport {
    pub spec: MaskSpec,
    pub report: EvalReport,
    pub stats: MaskStats,
}

fn token_nodes(su: &TokenSequence, sv: &TokenSequence) -> BTreeSet<NodeId> {
    su.history_nodes().into_iter().chain(sv.history_nodes()).collect()
}

/// Node ids to mask for one query, before any change to the sequences.
pub fn mask_selection(
    index: &NeighborIndex,
    q: &Query,
    su: &TokenSequence,
    sv: &TokenSequence,
    spec: &MaskSpec,
    retain_rng: &mut crate::rng::Rng,
    random_rng: &mut crate::rng::Rng,
) -> HashSet<NodeId> {
    let crit = find_critical(index, q.src, q.dst, q.ts, &spec.thresholds);
    let mut ids = crit.ids();
    ids.shuffle(retain_rng);
    let keep = (spec.retention * ids.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let present = token_nodes(su, sv);
    let masked: HashSet<NodeId> = ids[keep.min(ids.len())..]
        .iter()
        .copied()
        .filter(|n| present.contains(n))
        .collect();
    match spec.mode {
        MaskMode::Critical => masked,
        MaskMode::Random => {
            let pool: Vec<NodeId> = present.into_iter().collect();
            pool.choose_multiple(random_rng, masked.len()).copied().collect()
        }
    }
}

/// Evaluate with critical or random nodes removed from both sequences of
/// every query. Retention 1 reproduces the unmasked evaluation exactly.
pub fn masked_evaluate(
    model: &Model,
    data: &Dataset,
    eval: &EvalSpec,
    spec: &MaskSpec,
) -> Result<(MaskedReport, Vec<ScoreRow>)> {
    if !(0.0..=1.0).contains(&spec.retention) {
        return Err(Error::Config(format!("retention {} outside [0, 1]", spec.retention)));
    }
    let seeds = SeedStream::new(spec.seed);
    let mut retain_rng = seeds.rng("retain");
    let mut random_rng = seeds.rng("random-mask");
    let mut stats = MaskStats::default();
    let index = &data.full_index;
    let mut hook = |q: &Query, su: &mut TokenSequence, sv: &mut TokenSequence| -> Result<()> {
        let chosen = mask_selection(index, q, su, sv, spec, &mut retain_rng, &mut random_rng);
        stats.queries += 1;
        if chosen.is_empty() {
            return Ok(());
        }
        stats.queries_masked += 1;
        stats.masked_nodes += chosen.len();
        stats.masked_tokens += su.mask_nodes(&chosen) + sv.mask_nodes(&chosen);
        refresh_cooccurrence(su, sv);
        Ok(())
    };
    let (report, rows) = evaluate_detailed(model, data, eval, Some(&mut hook))?;
    Ok((
        MaskedReport {
            spec: *spec,
            report,
            stats,
        },
        rows,
    ))
}
