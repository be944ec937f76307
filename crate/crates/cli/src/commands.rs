use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use diffdyg_core::diagnostics::{
    attention_diagnostics, dump_attention, masked_evaluate, shift_report, write_diagnostics, MaskMode, MaskSpec,
};
use diffdyg_core::encoder::Model;
use diffdyg_core::events::{chronological_split, convert_benchmark_csv, load_events, synth_generate, Mode};
use diffdyg_core::rng::SeedStream;
use diffdyg_core::train::{self as trainer, evaluate_detailed, write_history, write_scores, Dataset, EvalSpec};

use crate::config::RunConfig;
use crate::Common;

const CHECKPOINT: &str = "model.ckpt";

fn prepare_out(c: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    c.save(&c.out.join(format!("{command}_config.toml")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn load_dataset(c: &RunConfig) -> Result<Dataset> {
    let Some(path) = &c.data else {
        bail!("no event data given (use --data or set `data` in the config)");
    };
    let log = load_events(path, c.node_features.as_deref())?;
    let split = chronological_split(
        &log,
        c.ratios(),
        c.mode == Mode::Inductive,
        c.mask_fraction,
        &SeedStream::new(c.seed),
    )?;
    let tag = path.file_stem().map_or_else(|| "events".into(), |s| s.to_string_lossy().into_owned());
    info!("loaded {} events over {} nodes from {}", log.len(), log.num_nodes(), path.display());
    Ok(Dataset::new(tag, log, split)?)
}

fn eval_spec(c: &RunConfig) -> EvalSpec {
    EvalSpec {
        phase: c.eval_phase,
        protocol: c.protocol,
        mode: c.mode,
        seeds: c.seeds.clone(),
    }
}

/// The stored run config of a checkpoint, overridden by `--config` and flags.
pub fn resolve_with_checkpoint(common: &Common) -> Result<(RunConfig, Model)> {
    let first = common.resolve(RunConfig::default())?;
    let Some(ckpt) = first.checkpoint.clone() else {
        bail!("no checkpoint given (use --checkpoint or set `checkpoint` in the config)");
    };
    let (model, extra) = Model::load(&ckpt)?;
    let stored: RunConfig = match extra.get("config") {
        Some(v) => serde_json::from_value(v.clone()).context("checkpoint carries an invalid run config")?,
        None => RunConfig::default(),
    };
    let mut c = if common.config.is_some() { first } else { common.resolve(stored)? };
    c.checkpoint = Some(ckpt);
    if c.attention != model.config.attention || c.hops != model.channels.hops {
        log::warn!("architecture flags are ignored; the checkpoint defines the model");
    }
    c.adopt_model(&model.channels, &model.config);
    Ok((c, model))
}

pub fn synth(c: &RunConfig) -> Result<()> {
    prepare_out(c, "synth")?;
    let log = synth_generate(c.synth_nodes, c.synth_events, c.synth_shift, c.seed)?;
    let path = c.out.join("events.csv");
    log.write_csv(&path)?;
    info!("wrote {} events to {}", log.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: Option<usize>,
    best_val_ap: Option<f64>,
    epochs_run: usize,
    checkpoint: String,
}

pub fn train(c: &RunConfig) -> Result<()> {
    let cfg = c.train();
    cfg.validate()?;
    let data = load_dataset(c)?;
    prepare_out(c, "train")?;
    let seeds = SeedStream::new(c.seed);
    let model = Model::new(c.channels(), c.model(), data.log.node_dim(), data.log.edge_dim(), &seeds)?;
    let out = trainer::train(&data, &cfg, model, &seeds)?;

    let ckpt = c.out.join(CHECKPOINT);
    let mut stored = c.clone();
    stored.checkpoint = Some(ckpt.clone());
    out.model.save(&ckpt, serde_json::json!({ "config": stored }))?;
    write_history(&c.out.join("history.jsonl"), &out.history)?;
    write_json(
        &c.out.join("train_summary.json"),
        &TrainSummary {
            best_epoch: out.best_epoch,
            best_val_ap: out.best_val_ap,
            epochs_run: out.history.len(),
            checkpoint: ckpt.display().to_string(),
        },
    )?;
    info!("best validation AP {:?} at epoch {:?}", out.best_val_ap, out.best_epoch);
    Ok(())
}

pub fn eval(c: &RunConfig, model: &Model) -> Result<()> {
    let data = load_dataset(c)?;
    prepare_out(c, "eval")?;
    let (report, rows) = evaluate_detailed(model, &data, &eval_spec(c), None)?;
    write_json(&c.out.join("eval_report.json"), &report)?;
    write_scores(&c.out.join("scores.csv"), &rows)?;
    info!("AP {:.4} ± {:.4}, AUC {:.4} ± {:.4}", report.ap_mean, report.ap_std, report.auc_mean, report.auc_std);
    Ok(())
}

pub fn diagnose(c: &RunConfig, model: &Model) -> Result<()> {
    let data = load_dataset(c)?;
    prepare_out(c, "diagnose")?;
    let shift = shift_report(model, &data, &c.shift())?;
    write_json(&c.out.join("shift_report.json"), &shift)?;
    info!("train/test MMD {:.4} (sigma {:.4})", shift.mmd, shift.sigma);

    let (rows, summary) = attention_diagnostics(model, &data, &c.diagnostics())?;
    write_diagnostics(&c.out, &rows, &summary)?;
    info!(
        "layer {} entropy {:.4}, critical mass {:.4}, top-k critical {:.4}",
        summary.layer, summary.entropy, summary.critical_mass, summary.topk_prop
    );

    let range = data.split.range(c.eval_phase);
    if let Some(i) = range.clone().next() {
        let e = &data.log.interactions()[i];
        dump_attention(&c.out.join("attention"), model, &data, e.src, e.dst, e.ts)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    mode: MaskMode,
    retention: f64,
    seed: u64,
    ap: f64,
    auc: f64,
}

pub fn ablate(c: &RunConfig, model: &Model) -> Result<()> {
    if c.retentions.iter().any(|r| !(0.0..=1.0).contains(r)) {
        bail!("retention ratios must lie in [0, 1]");
    }
    let data = load_dataset(c)?;
    prepare_out(c, "ablate")?;
    let spec = eval_spec(c);
    let mask_seed = SeedStream::new(c.seed).seed_for("masks");
    let mut w = csv::Writer::from_path(c.out.join("ablation.csv"))?;
    let mut reports = Vec::new();
    for mode in [MaskMode::Critical, MaskMode::Random] {
        for &retention in &c.retentions {
            let mask = MaskSpec {
                mode,
                retention,
                seed: mask_seed,
                thresholds: c.thresholds(),
            };
            let (rep, _) = masked_evaluate(model, &data, &spec, &mask)?;
            for m in &rep.report.per_seed {
                w.serialize(AblationRow {
                    mode,
                    retention,
                    seed: m.seed,
                    ap: m.ap,
                    auc: m.auc,
                })?;
            }
            info!("{mode:?} retention {retention}: AP {:.4}", rep.report.ap_mean);
            reports.push(rep);
        }
    }
    w.flush()?;
    write_json(&c.out.join("ablation.json"), &reports)?;
    Ok(())
}

pub fn convert(input: &Path, output: &Path) -> Result<()> {
    let log = convert_benchmark_csv(input, output)?;
    info!("converted {} events over {} nodes", log.len(), log.num_nodes());
    Ok(())
}
