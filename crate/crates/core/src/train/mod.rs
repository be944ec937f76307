//! Mini-batch training with early stopping, and AP / AUC evaluation.

mod metrics;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use metrics::{auc_roc, average_precision, bce_loss, mean_std};

use crate::encoder::{Forward, Model};
use crate::error::{Error, Result};
use crate::events::{EventLog, Mode, NegativeSampler, NeighborIndex, NodeId, Phase, Protocol, SplitSpec};
use crate::featurizer::{build_sequence, TokenSequence};
use crate::rng::SeedStream;
use crate::tensor::{AdamConfig, AdamState, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Evaluation seeds; negatives are redrawn for each.
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
    pub mode: Mode,
    pub mask_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 5,
            batch_size: 200,
            lr: 1e-4,
            weight_decay: 1e-4,
            seeds: vec![0, 1, 2, 3, 4],
            protocol: Protocol::Random,
            mode: Mode::Transductive,
            mask_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 100 {
            return Err(Error::Config(format!("epochs must be at most 100, got {}", self.epochs)));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("patience and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay nonnegative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!("mask_fraction {} outside [0, 1)", self.mask_fraction)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// A split log with its neighbor indices and negative pools.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tag: String,
    pub log: EventLog,
    pub split: SplitSpec,
    /// History visible during training (training view only).
    pub train_index: NeighborIndex,
    /// Full history, used for validation and test queries.
    pub full_index: NeighborIndex,
    pub sampler: NegativeSampler,
}

impl Dataset {
    pub fn new(tag: impl Into<String>, log: EventLog, split: SplitSpec) -> Result<Self> {
        let ev = log.interactions();
        let train_index = NeighborIndex::build_filtered(&log, |i| split.in_training_view(&ev[i]));
        let full_index = NeighborIndex::build(&log);
        let sampler = NegativeSampler::new(&log, &split)?;
        Ok(Self {
            tag: tag.into(),
            log,
            split,
            train_index,
            full_index,
            sampler,
        })
    }
}

/// One scored link: a positive or its sampled negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: f64,
    pub label: bool,
    /// Index of the positive interaction this query belongs to.
    pub positive_idx: usize,
}

/// Positives of `phase` interleaved with one protocol negative each.
pub fn eval_queries(data: &Dataset, phase: Phase, protocol: Protocol, mode: Mode, seed: u64) -> Vec<Query> {
    let mut rng = SeedStream::new(seed).rng("negatives");
    let ev = data.log.interactions();
    let mut out = Vec::new();
    for i in data.split.eval_indices(&data.log, phase, mode) {
        let e = &ev[i];
        let neg = data.sampler.sample(protocol, e, &mut rng);
        out.push(Query {
            src: e.src,
            dst: e.dst,
            ts: e.ts,
            label: true,
            positive_idx: i,
        });
        out.push(Query {
            src: e.src,
            dst: neg,
            ts: e.ts,
            label: false,
            positive_idx: i,
        });
    }
    out
}

/// Hook applied to each query's sequences before scoring.
pub type SequenceHook<'a> = dyn FnMut(&Query, &mut TokenSequence, &mut TokenSequence) -> Result<()> + 'a;

const CHUNK: usize = 256;

/// Evaluation-mode probabilities for `queries`, built against `index`.
pub fn score_queries(
    model: &Model,
    data: &Dataset,
    index: &NeighborIndex,
    queries: &[Query],
    mut hook: Option<&mut SequenceHook>,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(CHUNK) {
        let mut pairs = Vec::with_capacity(chunk.len());
        for q in chunk {
            let (mut su, mut sv) = build_sequence(&data.log, index, q.src, q.dst, q.ts, &model.channels)?;
            if let Some(h) = hook.as_deref_mut() {
                h(q, &mut su, &mut sv)?;
            }
            pairs.push((su, sv));
        }
        scores.extend(model.score_pairs(&pairs)?);
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub ap: f64,
    pub auc: f64,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub phase: Phase,
    pub protocol: Protocol,
    pub mode: Mode,
    pub per_seed: Vec<SeedMetrics>,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub seed: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: f64,
    pub label: u8,
    pub score: f64,
}

/// Settings of one evaluation.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub phase: Phase,
    pub protocol: Protocol,
    pub mode: Mode,
    pub seeds: Vec<u64>,
}

pub fn evaluate(model: &Model, data: &Dataset, spec: &EvalSpec) -> Result<EvalReport> {
    evaluate_detailed(model, data, spec, None).map(|(r, _)| r)
}

/// Evaluate and return every scored query. `hook` may rewrite sequences
/// (used by the masking ablations).
pub fn evaluate_detailed(
    model: &Model,
    data: &Dataset,
    spec: &EvalSpec,
    mut hook: Option<&mut SequenceHook>,
) -> Result<(EvalReport, Vec<ScoreRow>)> {
    let mut per_seed = Vec::with_capacity(spec.seeds.len());
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let queries = eval_queries(data, spec.phase, spec.protocol, spec.mode, seed);
        if queries.is_empty() {
            return Err(Error::Metric(format!("no {:?} queries to evaluate", spec.phase)));
        }
        let scores = score_queries(model, data, &data.full_index, &queries, hook.as_deref_mut())?;
        let labels: Vec<bool> = queries.iter().map(|q| q.label).collect();
        per_seed.push(SeedMetrics {
            seed,
            ap: average_precision(&scores, &labels)?,
            auc: auc_roc(&scores, &labels)?,
            positives: queries.len() / 2,
        });
        rows.extend(queries.iter().zip(&scores).map(|(q, &score)| ScoreRow {
            seed,
            src: q.src,
            dst: q.dst,
            ts: q.ts,
            label: u8::from(q.label),
            score,
        }));
    }
    let aps: Vec<f64> = per_seed.iter().map(|m| m.ap).collect();
    let aucs: Vec<f64> = per_seed.iter().map(|m| m.auc).collect();
    let (ap_mean, ap_std) = mean_std(&aps);
    let (auc_mean, auc_std) = mean_std(&aucs);
    Ok((
        EvalReport {
            dataset: data.tag.clone(),
            phase: spec.phase,
            protocol: spec.protocol,
            mode: spec.mode,
            per_seed,
            ap_mean,
            ap_std,
            auc_mean,
            auc_std,
        },
        rows,
    ))
}

/// Writes `src,dst,ts,label,score` rows.
pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "src,dst,ts,label,score")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.src, r.dst, r.ts, r.label, r.score)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ap: Option<f64>,
    pub val_auc: Option<f64>,
    pub improved: bool,
}

/// Writes one JSON object per line.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in history {
        serde_json::to_writer(&mut w, rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (or the last epoch when no
    /// validation queries exist).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_ap: Option<f64>,
}

/// Runs one epoch of training; returns the mean batch loss.
fn run_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    seeds: &SeedStream,
) -> Result<f64> {
    let stream = seeds.child("epoch", epoch as u64);
    let mut neg_rng = stream.rng("negatives");
    let mut drop_rng = stream.rng("dropout");
    let ev = data.log.interactions();
    let train = data.split.train_indices(&data.log);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in train.chunks(cfg.batch_size).enumerate() {
        let mut pairs = Vec::with_capacity(2 * chunk.len());
        let mut labels = Vec::with_capacity(2 * chunk.len());
        let mut negatives = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let e = &ev[i];
            pairs.push(build_sequence(&data.log, &data.train_index, e.src, e.dst, e.ts, &model.channels)?);
            labels.push(1.0);
            negatives.push(data.sampler.sample_train(e, &mut neg_rng));
        }
        for (&i, &n) in chunk.iter().zip(&negatives) {
            let e = &ev[i];
            pairs.push(build_sequence(&data.log, &data.train_index, e.src, n, e.ts, &model.channels)?);
            labels.push(0.0);
        }
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &pairs, &labels, &mut Forward::train(&mut drop_rng))?;
        let value = tape.value(loss).data()[0];
        let diverged = |msg: &str| Error::Training {
            epoch,
            batch: b,
            msg: msg.into(),
        };
        if !value.is_finite() {
            return Err(diverged("loss is not finite"));
        }
        let grads = tape.backward(loss, model.params())?;
        if !grads.is_finite() {
            return Err(diverged("gradient is not finite"));
        }
        adam.step(model.params_mut(), &grads)?;
        total += value;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Train `model` with early stopping on validation AP.
pub fn train(data: &Dataset, cfg: &TrainConfig, mut model: Model, seeds: &SeedStream) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut adam = AdamState::new(cfg.adam(), model.params());
    let val_spec = EvalSpec {
        phase: Phase::Val,
        protocol: cfg.protocol,
        mode: cfg.mode,
        seeds: vec![seeds.seed_for("validation")],
    };
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let train_loss = run_epoch(&mut model, &mut adam, data, cfg, epoch, seeds)?;
        let val = match evaluate(&model, data, &val_spec) {
            Ok(r) => Some((r.ap_mean, r.auc_mean)),
            Err(Error::Metric(msg)) => {
                warn!("validation skipped: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        let improved = match (val, &best) {
            (Some((ap, _)), Some((_, best_ap, _))) => ap > *best_ap,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((epoch, val.map_or(0.0, |v| v.0), model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        info!(
            "epoch {epoch}: loss {train_loss:.5} val_ap {}",
            val.map_or("n/a".to_string(), |v| format!("{:.5}", v.0))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_ap: val.map(|v| v.0),
            val_auc: val.map(|v| v.1),
            improved,
        });
        if val.is_some() && stale >= cfg.patience {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(match best {
        Some((epoch, ap, m)) => TrainOutcome {
            model: m,
            history,
            best_epoch: Some(epoch),
            best_val_ap: Some(ap),
        },
        None => TrainOutcome {
            model,
            history,
            best_epoch: None,
            best_val_ap: None,
        },
    })
}
