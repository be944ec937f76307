use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::critical::{find_critical, CriticalSet, CriticalThresholds};
use super::stats::{critical_mass, mmd, row_entropy, topk_critical_proportion, Bandwidth, MmdResult, POSITIVE_EPS};
use crate::encoder::{AttentionKind, AttentionRecord, Forward, Model};
use crate::error::{Error, Result};
use crate::events::{Mode, NodeId, Phase};
use crate::featurizer::{assemble_batch, build_sequence, TokenSequence};
use crate::tensor::Tape;
use crate::train::Dataset;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub phase: Phase,
    /// Layer to inspect; the last one when absent.
    pub layer: Option<usize>,
    pub top_k_frac: f64,
    pub thresholds: CriticalThresholds,
    /// Cap on positive queries, taken evenly across the phase.
    pub max_queries: Option<usize>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Test,
            layer: None,
            top_k_frac: 0.05,
            thresholds: CriticalThresholds::default(),
            max_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub query_idx: usize,
    pub layer: usize,
    pub head: usize,
    pub entropy: f64,
    pub critical_mass: f64,
    pub topk_prop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    pub dataset: String,
    pub attention: AttentionKind,
    pub layer: usize,
    pub heads: usize,
    pub queries: usize,
    pub entropy: f64,
    pub critical_mass: f64,
    pub topk_prop: f64,
    pub top_k_frac: f64,
    /// How the per-row numbers are combined.
    pub aggregation: String,
}

/// Metrics of one query row over its historical keys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMetrics {
    pub entropy: f64,
    pub critical_mass: f64,
    pub topk_prop: f64,
}

/// Row 0 of `seq` restricted to valid historical keys, positive-normalized,
/// then scored. `None` if the row has no positive mass there.
pub fn query_row_metrics(
    row: &[f64],
    seq: &TokenSequence,
    crit: &CriticalSet,
    top_k_frac: f64,
) -> Option<RowMetrics> {
    let keys: Vec<usize> = (1..seq.len()).filter(|&j| seq.valid[j]).collect();
    let raw: Vec<f64> = keys.iter().map(|&j| row[j].max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let p: Vec<f64> = raw.iter().map(|a| a / (total + POSITIVE_EPS)).collect();
    let ids: Vec<NodeId> = keys.iter().map(|&j| seq.node_ids[j]).collect();
    let is_crit = |n: NodeId| crit.contains(n);
    Some(RowMetrics {
        entropy: row_entropy(&p)?,
        critical_mass: critical_mass(&p, &ids, is_crit),
        topk_prop: topk_critical_proportion(&p, &ids, &vec![true; p.len()], is_crit, top_k_frac),
    })
}

fn even_subsample<T: Copy>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if c < items.len() => (0..c).map(|i| items[i * items.len() / c]).collect(),
        _ => items.to_vec(),
    }
}

/// Entropy, critical mass and top-k critical share of the query rows of one
/// layer, per positive query and head. Each query averages its source and
/// destination rows; the summary averages over queries, then heads.
pub fn attention_diagnostics(model: &Model, data: &Dataset, cfg: &DiagnosticsConfig) -> Result<(Vec<DiagRow>, DiagSummary)> {
    let layers = model.config.layers;
    let layer = cfg.layer.unwrap_or(layers - 1);
    if layer >= layers {
        return Err(Error::Config(format!("layer {layer} out of range (model has {layers})")));
    }
    if !(cfg.top_k_frac > 0.0 && cfg.top_k_frac <= 1.0) {
        return Err(Error::Config(format!("top_k_frac {} outside (0, 1]", cfg.top_k_frac)));
    }
    let heads = model.config.heads;
    let ev = data.log.interactions();
    let all = data.split.eval_indices(&data.log, cfg.phase, Mode::Transductive);
    let picked = even_subsample(&all, cfg.max_queries);
    let mut rows = Vec::new();
    let mut per_head: Vec<Vec<[f64; 3]>> = vec![Vec::new(); heads];

    for (chunk_no, chunk) in picked.chunks(CHUNK).enumerate() {
        let mut pairs = Vec::with_capacity(chunk.len());
        let mut crits = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let e = &ev[i];
            pairs.push(build_sequence(&data.log, &data.full_index, e.src, e.dst, e.ts, &model.channels)?);
            crits.push(find_critical(&data.full_index, e.src, e.dst, e.ts, &cfg.thresholds));
        }
        let seqs: Vec<&TokenSequence> = pairs.iter().flat_map(|(a, b)| [a, b]).collect();
        let (_, records) = model.encode_with_records(&seqs)?;
        let t = model.channels.seq_len();
        for rec in records.iter().filter(|r| r.layer == layer) {
            for (q, crit) in crits.iter().enumerate() {
                let sides: Vec<RowMetrics> = (0..2)
                    .filter_map(|s| {
                        let k = 2 * q + s;
                        query_row_metrics(rec.b.row(k * t), seqs[k], crit, cfg.top_k_frac)
                    })
                    .collect();
                if sides.is_empty() {
                    continue;
                }
                let n = sides.len() as f64;
                let m = [
                    sides.iter().map(|s| s.entropy).sum::<f64>() / n,
                    sides.iter().map(|s| s.critical_mass).sum::<f64>() / n,
                    sides.iter().map(|s| s.topk_prop).sum::<f64>() / n,
                ];
                per_head[rec.head].push(m);
                rows.push(DiagRow {
                    query_idx: chunk_no * CHUNK + q,
                    layer,
                    head: rec.head,
                    entropy: m[0],
                    critical_mass: m[1],
                    topk_prop: m[2],
                });
            }
        }
    }
    rows.sort_by_key(|r| (r.query_idx, r.head));

    let mut means = [0.0; 3];
    for h in &per_head {
        if h.is_empty() {
            continue;
        }
        for (k, m) in means.iter_mut().enumerate() {
            *m += h.iter().map(|x| x[k]).sum::<f64>() / h.len() as f64 / heads as f64;
        }
    }
    let summary = DiagSummary {
        dataset: data.tag.clone(),
        attention: model.config.attention,
        layer,
        heads,
        queries: per_head.first().map_or(0, Vec::len),
        entropy: means[0],
        critical_mass: means[1],
        topk_prop: means[2],
        top_k_frac: cfg.top_k_frac,
        aggregation: "mean of source and destination query rows, then over queries, then over heads".into(),
    };
    Ok((rows, summary))
}

pub fn write_diagnostics(dir: &Path, rows: &[DiagRow], summary: &DiagSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("diagnostics_summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Cap on embeddings per window, taken evenly.
    pub max_points: usize,
    pub bandwidth: Bandwidth,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            max_points: 400,
            bandwidth: Bandwidth::Median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub dataset: String,
    pub mmd: f64,
    pub sigma: f64,
    pub train_window: [f64; 2],
    pub test_window: [f64; 2],
    pub n_train: usize,
    pub n_test: usize,
}

/// Pooled source embeddings for the interactions `idx`, in order.
pub fn window_embeddings(model: &Model, data: &Dataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    let ev = data.log.interactions();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(CHUNK) {
        let mut seqs = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let e = &ev[i];
            seqs.push(build_sequence(&data.log, &data.full_index, e.src, e.dst, e.ts, &model.channels)?.0);
        }
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = assemble_batch(&refs)?;
        let mut tape = Tape::new();
        let y = model.encode(&mut tape, &batch, &mut Forward::eval(), &mut Vec::new())?;
        let y = tape.value(y);
        out.extend((0..y.rows()).map(|r| y.row(r).to_vec()));
    }
    Ok(out)
}

/// MMD between embeddings of the training window and the test window.
pub fn shift_report(model: &Model, data: &Dataset, cfg: &ShiftConfig) -> Result<ShiftReport> {
    let ev = data.log.interactions();
    let window = |phase: Phase| -> (Vec<usize>, [f64; 2]) {
        let r = data.split.range(phase);
        let span = if r.is_empty() {
            [f64::NAN; 2]
        } else {
            [ev[r.start].ts, ev[r.end - 1].ts]
        };
        (even_subsample(&r.collect::<Vec<_>>(), Some(cfg.max_points)), span)
    };
    let (train_idx, train_window) = window(Phase::Train);
    let (test_idx, test_window) = window(Phase::Test);
    let x = window_embeddings(model, data, &train_idx)?;
    let y = window_embeddings(model, data, &test_idx)?;
    let MmdResult { value, sigma } = mmd(&x, &y, cfg.bandwidth)?;
    Ok(ShiftReport {
        dataset: data.tag.clone(),
        mmd: value,
        sigma,
        train_window,
        test_window,
        n_train: x.len(),
        n_test: y.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct DumpHeader<'a> {
    src: NodeId,
    dst: NodeId,
    ts: f64,
    seq_len: usize,
    attention: AttentionKind,
    /// `lambdas[layer][head]`.
    lambdas: Vec<Vec<f64>>,
    src_valid: &'a [bool],
    dst_valid: &'a [bool],
    src_nodes: &'a [NodeId],
    dst_nodes: &'a [NodeId],
}

/// Full attention maps of one query pair: `attn_{src|dst}_l{layer}_h{head}.csv`
/// with `query_row,key_row,a1,a2,b`, plus `attn_header.json`.
pub fn dump_attention(dir: &Path, model: &Model, data: &Dataset, src: NodeId, dst: NodeId, ts: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (su, sv) = build_sequence(&data.log, &data.full_index, src, dst, ts, &model.channels)?;
    let (_, records) = model.encode_with_records(&[&su, &sv])?;
    let t = su.len();
    for rec in &records {
        for (side, k) in [("src", 0), ("dst", 1)] {
            let path = dir.join(format!("attn_{side}_l{}_h{}.csv", rec.layer, rec.head));
            write_record(&path, rec, k * t, t)?;
        }
    }
    let c = &model.config;
    let lambdas = (0..c.layers)
        .map(|l| (0..c.heads).map(|h| model.lambda(l, h)).collect())
        .collect();
    let header = DumpHeader {
        src,
        dst,
        ts,
        seq_len: t,
        attention: c.attention,
        lambdas,
        src_valid: &su.valid,
        dst_valid: &sv.valid,
        src_nodes: &su.node_ids,
        dst_nodes: &sv.node_ids,
    };
    fs::write(dir.join("attn_header.json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

fn write_record(path: &Path, rec: &AttentionRecord, offset: usize, t: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "query_row,key_row,a1,a2,b")?;
    for i in 0..t {
        for j in 0..t {
            let a2 = rec.a2.as_ref().map_or(0.0, |a| a.get(offset + i, j));
            writeln!(w, "{i},{j},{},{a2},{}", rec.a1.get(offset + i, j), rec.b.get(offset + i, j))?;
        }
    }
    w.flush()?;
    Ok(())
}
