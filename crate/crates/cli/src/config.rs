use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use diffdyg_core::diagnostics::{Bandwidth, CriticalThresholds, DiagnosticsConfig, ShiftConfig};
use diffdyg_core::encoder::{AttentionKind, ModelConfig, RopeMode};
use diffdyg_core::events::{Mode, Phase, Protocol};
use diffdyg_core::featurizer::ChannelConfig;
use diffdyg_core::train::TrainConfig;

/// Every setting of a run as one flat document. Written next to the outputs
/// of each command; feeding it back with `--config` repeats the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for split, initialization, dropout, training negatives and masks.
    pub seed: u64,
    /// Evaluation seeds; each redraws the negatives.
    pub seeds: Vec<u64>,
    pub out: PathBuf,

    pub data: Option<PathBuf>,
    pub node_features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub mode: Mode,
    pub protocol: Protocol,
    pub mask_fraction: f64,

    pub synth_nodes: usize,
    pub synth_events: usize,
    pub synth_shift: f64,

    pub d: usize,
    pub d_t: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub k: usize,
    pub k2: usize,
    pub hops: usize,
    pub self_cooccurrence: bool,

    pub layers: usize,
    pub heads: usize,
    pub d_attn: usize,
    pub dropout: f64,
    pub attention: AttentionKind,
    pub rope: RopeMode,
    pub head_norm: bool,

    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,

    pub eval_phase: Phase,
    pub diag_layer: Option<usize>,
    pub top_k_frac: f64,
    pub max_queries: Option<usize>,
    pub theta_structural: usize,
    pub theta_temporal: usize,
    pub theta_repeat: usize,
    pub shift_max_points: usize,
    /// Fixed MMD bandwidth; the median heuristic when absent.
    pub mmd_sigma: Option<f64>,
    pub retentions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ch = ChannelConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let th = CriticalThresholds::default();
        let diag = DiagnosticsConfig::default();
        Self {
            seed: 0,
            seeds: t.seeds,
            out: PathBuf::from("runs"),
            data: None,
            node_features: None,
            checkpoint: None,
            train_ratio: 0.70,
            val_ratio: 0.15,
            test_ratio: 0.15,
            mode: t.mode,
            protocol: t.protocol,
            mask_fraction: t.mask_fraction,
            synth_nodes: 100,
            synth_events: 3000,
            synth_shift: 0.0,
            d: ch.d,
            d_t: ch.d_t,
            d_c: ch.d_c,
            d_s: ch.d_s,
            k: ch.k,
            k2: ch.k2,
            hops: ch.hops,
            self_cooccurrence: ch.self_cooccurrence,
            layers: m.layers,
            heads: m.heads,
            d_attn: m.d_attn,
            dropout: m.dropout,
            attention: m.attention,
            rope: m.rope,
            head_norm: m.head_norm,
            epochs: t.epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            eval_phase: Phase::Test,
            diag_layer: diag.layer,
            top_k_frac: diag.top_k_frac,
            max_queries: Some(2000),
            theta_structural: th.structural,
            theta_temporal: th.temporal,
            theta_repeat: th.repeat,
            shift_max_points: ShiftConfig::default().max_points,
            mmd_sigma: None,
            retentions: vec![1.0, 0.75, 0.5, 0.25, 0.0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train_ratio, self.val_ratio, self.test_ratio)
    }

    pub fn channels(&self) -> ChannelConfig {
        ChannelConfig {
            d: self.d,
            d_t: self.d_t,
            d_c: self.d_c,
            d_s: self.d_s,
            k: self.k,
            k2: self.k2,
            hops: self.hops,
            self_cooccurrence: self.self_cooccurrence,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_attn: self.d_attn,
            dropout: self.dropout,
            attention: self.attention,
            rope: self.rope,
            head_norm: self.head_norm,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seeds: self.seeds.clone(),
            protocol: self.protocol,
            mode: self.mode,
            mask_fraction: self.mask_fraction,
        }
    }

    pub fn thresholds(&self) -> CriticalThresholds {
        CriticalThresholds {
            structural: self.theta_structural,
            temporal: self.theta_temporal,
            repeat: self.theta_repeat,
        }
    }

    pub fn diagnostics(&self) -> DiagnosticsConfig {
        DiagnosticsConfig {
            phase: self.eval_phase,
            layer: self.diag_layer,
            top_k_frac: self.top_k_frac,
            thresholds: self.thresholds(),
            max_queries: self.max_queries,
        }
    }

    pub fn shift(&self) -> ShiftConfig {
        ShiftConfig {
            max_points: self.shift_max_points,
            bandwidth: self.mmd_sigma.map_or(Bandwidth::Median, Bandwidth::Fixed),
        }
    }

    /// Copy the architecture of a loaded model so the written config
    /// describes what actually ran.
    pub fn adopt_model(&mut self, ch: &ChannelConfig, m: &ModelConfig) {
        self.d = ch.d;
        self.d_t = ch.d_t;
        self.d_c = ch.d_c;
        self.d_s = ch.d_s;
        self.k = ch.k;
        self.k2 = ch.k2;
        self.hops = ch.hops;
        self.self_cooccurrence = ch.self_cooccurrence;
        self.layers = m.layers;
        self.heads = m.heads;
        self.d_attn = m.d_attn;
        self.dropout = m.dropout;
        self.attention = m.attention;
        self.rope = m.rope;
        self.head_norm = m.head_norm;
    }
}
