//! Shared fixtures for the benchmarks.

use diffdyg_core::encoder::{AttentionKind, Model, ModelConfig};
use diffdyg_core::events::{synth_generate, EventLog, NeighborIndex};
use diffdyg_core::featurizer::{build_sequence, ChannelConfig, TokenSequence};
use diffdyg_core::rng::SeedStream;

pub fn stream(events: usize) -> EventLog {
    synth_generate(200, events, 1.0, 7).expect("valid synthetic sizes")
}

pub fn channels(k: usize) -> ChannelConfig {
    ChannelConfig {
        d: 8,
        d_t: 16,
        d_c: 8,
        k,
        ..ChannelConfig::default()
    }
}

pub fn model(k: usize, attention: AttentionKind) -> Model {
    let cfg = ModelConfig {
        d_attn: 10,
        attention,
        ..ModelConfig::default()
    };
    Model::new(channels(k), cfg, 0, 0, &SeedStream::new(1)).expect("valid model config")
}

/// Sequence pairs for the last `n` interactions of `log`.
pub fn pairs(log: &EventLog, index: &NeighborIndex, cfg: &ChannelConfig, n: usize) -> Vec<(TokenSequence, TokenSequence)> {
    let ev = log.interactions();
    ev[ev.len() - n..]
        .iter()
        .map(|e| build_sequence(log, index, e.src, e.dst, e.ts, cfg).expect("valid channels"))
        .collect()
}
