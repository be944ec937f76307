use super::log::{EventLog, NodeId};

/// One side of an interaction as seen from a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborEntry {
    pub neighbor: NodeId,
    pub ts: f64,
    pub edge_idx: usize,
}

/// Per-node, time-sorted adjacency over both edge directions.
#[derive(Debug, Clone, Default)]
pub struct NeighborIndex {
    adj: Vec<Vec<NeighborEntry>>,
}

impl NeighborIndex {
    pub fn build(log: &EventLog) -> Self {
        Self::build_filtered(log, |_| true)
    }

    /// Index only the interactions for which `keep(idx)` holds.
    pub fn build_filtered(log: &EventLog, keep: impl Fn(usize) -> bool) -> Self {
        let mut adj = vec![Vec::new(); log.num_nodes()];
        for e in log.interactions().iter().filter(|e| keep(e.idx)) {
            adj[e.src].push(NeighborEntry {
                neighbor: e.dst,
                ts: e.ts,
                edge_idx: e.idx,
            });
            adj[e.dst].push(NeighborEntry {
                neighbor: e.src,
                ts: e.ts,
                edge_idx: e.idx,
            });
        }
        // Log order is already chronological; insertion order keeps ties by idx.
        Self { adj }
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    /// Every entry of `u`, oldest first.
    pub fn entries(&self, u: NodeId) -> &[NeighborEntry] {
        self.adj.get(u).map_or(&[], Vec::as_slice)
    }

    /// Entries of `u` strictly before `t`.
    pub fn history(&self, u: NodeId, t: f64) -> &[NeighborEntry] {
        let all = self.entries(u);
        &all[..all.partition_point(|e| e.ts < t)]
    }

    /// The `k` most recent entries of `u` strictly before `t`, in ascending time order.
    pub fn recent_neighbors(&self, u: NodeId, t: f64, k: usize) -> &[NeighborEntry] {
        let h = self.history(u, t);
        &h[h.len().saturating_sub(k)..]
    }
}
