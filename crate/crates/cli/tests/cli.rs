use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [0, 1]
synth_nodes = 20
synth_events = 300
synth_shift = 1.0
d = 4
d_t = 8
d_c = 4
k = 5
layers = 1
heads = 1
d_attn = 4
epochs = 2
batch_size = 32
lr = 0.001
max_queries = 30
shift_max_points = 40
"#;

fn diffdyg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffdyg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = diffdyg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Config, synthetic events and one trained run in a temp dir.
fn setup() -> (tempfile::TempDir, PathBuf, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let synth = dir.path().join("synth");
    ok(&["synth", "--config", p(&cfg), "--seed", "3", "--out", p(&synth)]);
    let events = synth.join("events.csv");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--seed", "0", "--data", p(&events), "--out", p(&run)]);
    (dir, cfg, events, run)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn training_is_reproducible_from_flags_and_from_its_config() {
    let (dir, cfg, events, run) = setup();
    assert!(run.join("history.jsonl").exists() && run.join("train_config.toml").exists());
    let again = dir.path().join("again");
    ok(&["train", "--config", p(&cfg), "--seed", "0", "--data", p(&events), "--out", p(&again)]);
    let replay = dir.path().join("replay");
    ok(&["train", "--config", p(&run.join("train_config.toml")), "--out", p(&replay)]);
    let blob = fs::read(run.join("model.ckpt")).unwrap();
    assert_eq!(blob, fs::read(again.join("model.ckpt")).unwrap());
    assert_eq!(blob, fs::read(replay.join("model.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(run.join("history.jsonl")).unwrap(),
        fs::read_to_string(replay.join("history.jsonl")).unwrap()
    );
}

#[test]
fn full_retention_ablation_matches_eval() {
    let (dir, _, _, run) = setup();
    let ckpt = run.join("model.ckpt");
    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", p(&ckpt), "--out", p(&ev)]);
    let report = json(&ev.join("eval_report.json"));
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 2);
    let scores = fs::read_to_string(ev.join("scores.csv")).unwrap();
    assert!(scores.starts_with("src,dst,ts,label,score\n"));

    let ab = dir.path().join("ablate");
    ok(&["ablate", "--checkpoint", p(&ckpt), "--retention", "1.0", "--out", p(&ab)]);
    let mut rdr = csv::Reader::from_path(ab.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let seed: u64 = row[2].parse().unwrap();
        let m = report["per_seed"].as_array().unwrap().iter().find(|m| m["seed"] == seed).unwrap();
        assert_eq!(row[3].parse::<f64>().unwrap(), m["ap"].as_f64().unwrap());
        assert_eq!(row[4].parse::<f64>().unwrap(), m["auc"].as_f64().unwrap());
    }
}

#[test]
fn full_sweep_covers_both_modes() {
    let (dir, _, _, run) = setup();
    let ab = dir.path().join("ablate");
    ok(&["ablate", "--checkpoint", p(&run.join("model.ckpt")), "--out", p(&ab)]);
    let text = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert!(text.starts_with("mode,retention,seed,ap,auc\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 5 * 2);
    assert!(text.contains("random,0.0,") && text.contains("critical,0.75,"));
}

#[test]
fn diagnose_writes_reports_and_dumps() {
    let (dir, _, _, run) = setup();
    let out = dir.path().join("diag");
    ok(&["diagnose", "--checkpoint", p(&run.join("model.ckpt")), "--out", p(&out)]);
    let shift = json(&out.join("shift_report.json"));
    assert!(shift["mmd"].as_f64().unwrap() >= 0.0);
    let summary = json(&out.join("diagnostics_summary.json"));
    assert_eq!(summary["layer"], 0);
    assert!(fs::read_to_string(out.join("diagnostics.csv"))
        .unwrap()
        .starts_with("query_idx,layer,head,entropy,critical_mass,topk_prop"));
    assert!(out.join("attention/attn_header.json").exists());
    assert!(out.join("attention/attn_src_l0_h0.csv").exists());
    assert!(out.join("diagnose_config.toml").exists());
}

#[test]
fn two_hop_flag_fills_in_the_second_hop_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    ok(&["synth", "--config", p(&cfg), "--out", p(dir.path())]);
    let events = dir.path().join("events.csv");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--hops", "2", "--epochs", "1", "--data", p(&events), "--out", p(&run)]);
    let resolved = fs::read_to_string(run.join("train_config.toml")).unwrap();
    assert!(resolved.contains("hops = 2") && resolved.contains("k2 = 5"), "{resolved}");
}

#[test]
fn failures_exit_nonzero_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "learning_rate = 0.5\n").unwrap();
    for args in [
        vec!["train", "--config", p(&bad)],
        vec!["train", "--out", p(dir.path())],
        vec!["eval", "--checkpoint", "/nonexistent/model.ckpt"],
    ] {
        let out = diffdyg(&args);
        assert!(!out.status.success());
        let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
        assert!(err["error"].is_string() && err["message"].is_string(), "{err}");
    }
    let csv_path = dir.path().join("broken.csv");
    fs::write(&csv_path, "src,dst,ts\n0,1,2.0\n1,2,1.0\n").unwrap();
    let out = diffdyg(&["train", "--data", p(&csv_path), "--out", p(dir.path())]);
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "ordering");
}

#[test]
fn convert_offsets_items_after_users() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.csv");
    fs::write(&input, "user,item,timestamp,state_label,f0\n0,0,1.0,0,0.5\n1,1,2.0,0,0.25\n").unwrap();
    let output = dir.path().join("events.csv");
    ok(&["convert", "--input", p(&input), "--output", p(&output)]);
    let text = fs::read_to_string(&output).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows[0].starts_with("0,2,") && rows[1].starts_with("1,3,"), "{text}");
}
