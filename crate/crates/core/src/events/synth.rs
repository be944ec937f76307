use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use super::log::{EventLog, NodeId};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Knobs of the synthetic two-community generator.
#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    /// Probability that a fresh destination comes from the source's community.
    pub p_intra: f64,
    /// Probability that an intra-community destination is a hub.
    pub p_hub: f64,
    /// Fraction of each community designated as hubs (at least one).
    pub hub_fraction: f64,
    /// Probability of repeating one of the source's recent partners.
    pub p_repeat: f64,
    /// Fraction of the horizon before the community shift.
    pub shift_at: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            p_intra: 0.85,
            p_hub: 0.5,
            hub_fraction: 0.1,
            p_repeat: 0.3,
            shift_at: 0.7,
        }
    }
}

/// Two-community stream whose assignments are partly reshuffled for the last
/// 30% of events. `shift` is the fraction of nodes whose labels get permuted.
pub fn synth_generate(n_nodes: usize, n_events: usize, shift: f64, seed: u64) -> Result<EventLog> {
    synth_generate_with(n_nodes, n_events, shift, seed, SynthParams::default())
}

pub fn synth_generate_with(
    n_nodes: usize,
    n_events: usize,
    shift: f64,
    seed: u64,
    p: SynthParams,
) -> Result<EventLog> {
    if n_nodes < 4 {
        return Err(Error::Generation(format!("n_nodes must be at least 4, got {n_nodes}")));
    }
    if n_events < 10 {
        return Err(Error::Generation(format!("n_events must be at least 10, got {n_events}")));
    }
    if !(0.0..=1.0).contains(&shift) {
        return Err(Error::Generation(format!("shift {shift} outside [0, 1]")));
    }
    let mut rng = SeedStream::new(seed).rng("synth");

    let mut order: Vec<NodeId> = (0..n_nodes).collect();
    order.shuffle(&mut rng);
    let mut community = vec![0usize; n_nodes];
    for &node in &order[n_nodes / 2..] {
        community[node] = 1;
    }
    let mut is_hub = vec![false; n_nodes];
    for c in 0..2 {
        let members: Vec<NodeId> = order.iter().copied().filter(|&x| community[x] == c).collect();
        let n_hubs = ((p.hub_fraction * members.len() as f64).round() as usize).max(1);
        for &h in &members[..n_hubs] {
            is_hub[h] = true;
        }
    }

    let mut shifted = community.clone();
    let n_shift = (shift * n_nodes as f64).round() as usize;
    if n_shift > 1 {
        let mut chosen: Vec<NodeId> = (0..n_nodes).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(n_shift);
        let mut labels: Vec<usize> = chosen.iter().map(|&x| community[x]).collect();
        labels.shuffle(&mut rng);
        for (&x, l) in chosen.iter().zip(labels) {
            shifted[x] = l;
        }
    }

    let shift_from = (p.shift_at * n_events as f64).ceil() as usize;
    let mut recent: Vec<Vec<NodeId>> = vec![Vec::new(); n_nodes];
    let mut edges = Vec::with_capacity(n_events);
    for i in 0..n_events {
        let comm = if i < shift_from { &community } else { &shifted };
        let src = rng.random_range(0..n_nodes);
        let dst = loop {
            let d = if !recent[src].is_empty() && rng.random_bool(p.p_repeat) {
                *recent[src].choose(&mut rng).expect("non-empty")
            } else {
                let c = if rng.random_bool(p.p_intra) { comm[src] } else { 1 - comm[src] };
                let want_hub = rng.random_bool(p.p_hub);
                let pool: Vec<NodeId> = (0..n_nodes)
                    .filter(|&x| comm[x] == c && (!want_hub || is_hub[x]))
                    .collect();
                match pool.choose(&mut rng) {
                    Some(&d) => d,
                    None => rng.random_range(0..n_nodes),
                }
            };
            if d != src {
                break d;
            }
        };
        for (a, b) in [(src, dst), (dst, src)] {
            let r = &mut recent[a];
            r.push(b);
            if r.len() > 5 {
                r.remove(0);
            }
        }
        edges.push((src, dst, (i + 1) as f64));
    }
    EventLog::new(
        edges.into_iter().map(|(s, d, t)| (s, d, t, Vec::new())).collect(),
        Vec::new(),
        n_nodes,
    )
}
