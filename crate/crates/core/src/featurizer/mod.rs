//! Token sequences for a query pair: a self token followed by recent 1-hop
//! (and optionally 2-hop) neighbors, each carrying five raw channels.
//!
//! Learnable parts of the channels (time frequencies, the co-occurrence map
//! and the per-channel projections) live with the encoder parameters; this
//! module only produces the raw, parameter-free inputs.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventLog, NeighborIndex, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Projection width of each channel; tokens are `5 * d` wide.
    pub d: usize,
    pub d_t: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub k: usize,
    pub k2: usize,
    pub hops: usize,
    /// Count the query node itself in row 0's co-occurrence pair.
    pub self_cooccurrence: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            d: 36,
            d_t: 100,
            d_c: 36,
            d_s: 1,
            k: 20,
            k2: 0,
            hops: 1,
            self_cooccurrence: false,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_t == 0 || self.d_c == 0 || self.d_s == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !self.d_c.is_multiple_of(2) {
            return Err(Error::Config(format!("d_c must be even, got {}", self.d_c)));
        }
        match (self.hops, self.k2) {
            (1, 0) => Ok(()),
            (1, k2) => Err(Error::Config(format!("k2 = {k2} requires hops = 2"))),
            (2, 0) => Err(Error::Config("hops = 2 requires k2 > 0".into())),
            (2, _) => Ok(()),
            (h, _) => Err(Error::Config(format!("hops must be 1 or 2, got {h}"))),
        }
    }

    /// Rows per sequence.
    pub fn seq_len(&self) -> usize {
        1 + self.k + if self.hops == 2 { self.k2 } else { 0 }
    }

    pub fn token_width(&self) -> usize {
        5 * self.d
    }
}

/// `cos(freqs[i] * dt)` for each frequency.
pub fn time_encoding(dt: f64, freqs: &[f64]) -> Vec<f64> {
    freqs.iter().map(|f| (f * dt).cos()).collect()
}

/// Geometric initial frequencies `10^(-9 i / (d_t - 1))`.
pub fn default_time_freqs(d_t: usize) -> Vec<f64> {
    if d_t == 1 {
        return vec![1.0];
    }
    (0..d_t)
        .map(|i| 10f64.powf(-9.0 * i as f64 / (d_t - 1) as f64))
        .collect()
}

/// Multiplicity of `w` in each of two neighbor multisets.
pub fn cooccurrence_counts(w: NodeId, hist_u: &[NodeId], hist_v: &[NodeId]) -> (usize, usize) {
    let count = |h: &[NodeId]| h.iter().filter(|&&x| x == w).count();
    (count(hist_u), count(hist_v))
}

/// Raw input for one node at one query time.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub cfg: ChannelConfig,
    /// Query node (row 0).
    pub node: NodeId,
    pub t: f64,
    /// Node id of every row; padded rows repeat the query node.
    pub node_ids: Vec<NodeId>,
    pub hop: Vec<u8>,
    pub valid: Vec<bool>,
    /// Interaction behind each row (none for row 0 and padding).
    pub edge_idx: Vec<Option<usize>>,
    /// Elapsed time `t - t_j`; zero for row 0 and padding.
    pub dt: Vec<f64>,
    /// Raw node channel, `len x d_n`.
    pub node_feat: Vec<Vec<f64>>,
    /// Raw edge channel, `len x d_e`.
    pub edge_feat: Vec<Vec<f64>>,
    /// (count in own tokens, count in the partner's tokens).
    pub cooc: Vec<[f64; 2]>,
    /// Hop distance repeated `d_s` times.
    pub spatial: Vec<Vec<f64>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Whether row `r` contributes to the time channel.
    pub fn time_active(&self, r: usize) -> bool {
        r > 0 && self.valid[r]
    }

    /// Node ids of valid non-self rows.
    pub fn history_nodes(&self) -> Vec<NodeId> {
        (1..self.len())
            .filter(|&r| self.valid[r])
            .map(|r| self.node_ids[r])
            .collect()
    }

    /// Turn row `r` into padding.
    pub fn invalidate(&mut self, r: usize) {
        assert!(r > 0, "the self token cannot be masked");
        self.valid[r] = false;
        self.node_ids[r] = self.node;
        self.edge_idx[r] = None;
        self.dt[r] = 0.0;
        self.node_feat[r].iter_mut().for_each(|x| *x = 0.0);
        self.edge_feat[r].iter_mut().for_each(|x| *x = 0.0);
        self.cooc[r] = [0.0; 2];
        self.spatial[r].iter_mut().for_each(|x| *x = 0.0);
    }

    /// Mask every non-self row whose node id is in `nodes`; returns how many rows changed.
    pub fn mask_nodes(&mut self, nodes: &HashSet<NodeId>) -> usize {
        let hits: Vec<usize> = (1..self.len())
            .filter(|&r| self.valid[r] && nodes.contains(&self.node_ids[r]))
            .collect();
        for &r in &hits {
            self.invalidate(r);
        }
        hits.len()
    }
}

fn blank_sequence(log: &EventLog, cfg: &ChannelConfig, node: NodeId, t: f64) -> TokenSequence {
    let n = cfg.seq_len();
    let mut node_feat = vec![vec![0.0; log.node_dim()]; n];
    if node < log.num_nodes() {
        node_feat[0] = log.node_feat(node).to_vec();
    }
    TokenSequence {
        cfg: cfg.clone(),
        node,
        t,
        node_ids: vec![node; n],
        hop: vec![0; n],
        valid: (0..n).map(|r| r == 0).collect(),
        edge_idx: vec![None; n],
        dt: vec![0.0; n],
        node_feat,
        edge_feat: vec![vec![0.0; log.edge_dim()]; n],
        cooc: vec![[0.0; 2]; n],
        spatial: vec![vec![0.0; cfg.d_s]; n],
    }
}

fn fill_row(seq: &mut TokenSequence, log: &EventLog, r: usize, node: NodeId, ts: f64, edge: usize, hop: u8) {
    seq.node_ids[r] = node;
    seq.hop[r] = hop;
    seq.valid[r] = true;
    seq.edge_idx[r] = Some(edge);
    seq.dt[r] = seq.t - ts;
    seq.node_feat[r] = log.node_feat(node).to_vec();
    seq.edge_feat[r] = log.interactions()[edge].edge_feat.clone();
    seq.spatial[r] = vec![f64::from(hop); seq.cfg.d_s];
}

fn node_sequence(log: &EventLog, index: &NeighborIndex, u: NodeId, t: f64, cfg: &ChannelConfig) -> TokenSequence {
    let mut seq = blank_sequence(log, cfg, u, t);
    let first = index.recent_neighbors(u, t, cfg.k);
    for (i, e) in first.iter().enumerate() {
        fill_row(&mut seq, log, 1 + i, e.neighbor, e.ts, e.edge_idx, 1);
    }
    if cfg.hops == 2 {
        let mut seen: HashSet<NodeId> = first.iter().map(|e| e.neighbor).collect();
        seen.insert(u);
        // most recent entry per candidate node
        let mut best: BTreeMap<NodeId, (f64, usize)> = BTreeMap::new();
        for p in first {
            for e in index.recent_neighbors(p.neighbor, t, cfg.k2) {
                if seen.contains(&e.neighbor) {
                    continue;
                }
                let slot = best.entry(e.neighbor).or_insert((e.ts, e.edge_idx));
                if e.ts > slot.0 {
                    *slot = (e.ts, e.edge_idx);
                }
            }
        }
        let mut cand: Vec<(NodeId, f64, usize)> = best.into_iter().map(|(n, (ts, ei))| (n, ts, ei)).collect();
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cand.truncate(cfg.k2);
        cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (i, (n, ts, ei)) in cand.into_iter().enumerate() {
            fill_row(&mut seq, log, 1 + cfg.k + i, n, ts, ei, 2);
        }
    }
    seq
}

/// Recompute the co-occurrence pair of every row from the current valid
/// tokens of both sequences.
pub fn refresh_cooccurrence(su: &mut TokenSequence, sv: &mut TokenSequence) {
    let hu = su.history_nodes();
    let hv = sv.history_nodes();
    for (seq, own, other) in [(su, &hu, &hv), (sv, &hv, &hu)] {
        let self_count = seq.cfg.self_cooccurrence;
        for r in 0..seq.len() {
            seq.cooc[r] = if !seq.valid[r] || (r == 0 && !self_count) {
                [0.0; 2]
            } else {
                let (a, b) = cooccurrence_counts(seq.node_ids[r], own, other);
                [a as f64, b as f64]
            };
        }
    }
}

/// Sequences for source `u` and destination `v` at query time `t`, using
/// history strictly before `t` from `index`.
pub fn build_sequence(
    log: &EventLog,
    index: &NeighborIndex,
    u: NodeId,
    v: NodeId,
    t: f64,
    cfg: &ChannelConfig,
) -> Result<(TokenSequence, TokenSequence)> {
    cfg.validate()?;
    let mut su = node_sequence(log, index, u, t, cfg);
    let mut sv = node_sequence(log, index, v, t, cfg);
    refresh_cooccurrence(&mut su, &mut sv);
    Ok((su, sv))
}

/// Row-stacked sequences sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub cfg: ChannelConfig,
    pub num_seqs: usize,
    pub seq_len: usize,
    pub node_ids: Vec<NodeId>,
    pub valid: Vec<bool>,
    pub positions: Vec<usize>,
    pub dt: Vec<f64>,
    pub time_active: Vec<bool>,
    /// `rows x d_n`, row-major.
    pub node_feat: Vec<f64>,
    pub node_dim: usize,
    pub edge_feat: Vec<f64>,
    pub edge_dim: usize,
    /// Own / partner co-occurrence counts per row.
    pub cooc_own: Vec<f64>,
    pub cooc_other: Vec<f64>,
    pub spatial: Vec<f64>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.num_seqs * self.seq_len
    }

    /// Attention key mask, `rows x seq_len`: row `r` may attend to key `j` of
    /// its own sequence when that key is valid.
    pub fn key_mask(&self) -> Vec<bool> {
        let t = self.seq_len;
        let mut m = Vec::with_capacity(self.rows() * t);
        for b in 0..self.num_seqs {
            let keys = &self.valid[b * t..(b + 1) * t];
            for _ in 0..t {
                m.extend_from_slice(keys);
            }
        }
        m
    }
}

/// Stack sequences into one dense batch.
pub fn assemble_batch(seqs: &[&TokenSequence]) -> Result<Batch> {
    let first = seqs.first().ok_or_else(|| Error::Batch("empty batch".into()))?;
    let cfg = first.cfg.clone();
    let node_dim = first.node_feat.first().map_or(0, Vec::len);
    let edge_dim = first.edge_feat.first().map_or(0, Vec::len);
    let t = cfg.seq_len();
    let mut b = Batch {
        cfg,
        num_seqs: seqs.len(),
        seq_len: t,
        node_ids: Vec::new(),
        valid: Vec::new(),
        positions: Vec::new(),
        dt: Vec::new(),
        time_active: Vec::new(),
        node_feat: Vec::new(),
        node_dim,
        edge_feat: Vec::new(),
        edge_dim,
        cooc_own: Vec::new(),
        cooc_other: Vec::new(),
        spatial: Vec::new(),
    };
    for (i, s) in seqs.iter().enumerate() {
        if s.cfg != b.cfg || s.len() != t {
            return Err(Error::Batch(format!("sequence {i} has a different channel configuration")));
        }
        for r in 0..t {
            if s.node_feat[r].len() != node_dim || s.edge_feat[r].len() != edge_dim {
                return Err(Error::Batch(format!("sequence {i} has different feature widths")));
            }
            b.node_ids.push(s.node_ids[r]);
            b.valid.push(s.valid[r]);
            b.positions.push(r);
            b.dt.push(s.dt[r]);
            b.time_active.push(s.time_active(r));
            b.node_feat.extend_from_slice(&s.node_feat[r]);
            b.edge_feat.extend_from_slice(&s.edge_feat[r]);
            b.cooc_own.push(s.cooc[r][0]);
            b.cooc_other.push(s.cooc[r][1]);
            b.spatial.extend_from_slice(&s.spatial[r]);
        }
    }
    Ok(b)
}
