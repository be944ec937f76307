//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any gating criterion fails. Criterion 10 needs a local copy of
//! the UCI benchmark and only runs with `--ignored` or `--include-ignored`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use diffdyg_core::diagnostics::{
    attention_diagnostics, critical_mass, find_critical, masked_evaluate, mmd, positive_normalized, row_entropy,
    topk_critical_proportion, Bandwidth, CriticalThresholds, DiagnosticsConfig, MaskMode, MaskSpec, POSITIVE_EPS,
};
use diffdyg_core::encoder::{rope_apply, AttentionKind, Forward, Model, ModelConfig};
use diffdyg_core::events::{
    chronological_split, load_events, synth_generate, EventLog, Mode, NeighborIndex, Phase, Protocol,
};
use diffdyg_core::featurizer::{assemble_batch, build_sequence, ChannelConfig, TokenSequence};
use diffdyg_core::rng::SeedStream;
use diffdyg_core::tensor::{numeric_gradient, softmax_rows, Tape, Tensor};
use diffdyg_core::train::{auc_roc, average_precision, evaluate, mean_std, train, Dataset, EvalSpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// Pinned tolerances.
const FD_STEP: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the finite-difference relative error.
const FD_FLOOR: f64 = 1e-6;
const REDUCTION_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-9;
const MMD_ZERO_TOL: f64 = 1e-9;
const NO_SHIFT_AP_GAP: f64 = 0.05;
const UCI_MIN_AP: f64 = 0.90;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed;
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn featured_log() -> EventLog {
    let mut r = lcg(3);
    let rows = (0..40usize)
        .map(|i| {
            let s = (i * 7 + 1) % 9;
            let d = if (i * 4 + 3) % 9 == s { (s + 1) % 9 } else { (i * 4 + 3) % 9 };
            (s, d, 1.0 + 0.25 * i as f64, vec![r(), r()])
        })
        .collect();
    let node_feat = (0..9).map(|_| vec![r(), r(), r()]).collect();
    EventLog::new(rows, node_feat, 0).unwrap()
}

fn pairs(log: &EventLog, cfg: &ChannelConfig, q: &[(usize, usize, f64)]) -> Vec<(TokenSequence, TokenSequence)> {
    let idx = NeighborIndex::build(log);
    q.iter()
        .map(|&(u, v, t)| build_sequence(log, &idx, u, v, t, cfg).unwrap())
        .collect()
}

fn c1_gradients() -> Outcome {
    let log = featured_log();
    let ch = ChannelConfig {
        d: 4,
        d_t: 4,
        d_c: 4,
        d_s: 1,
        k: 4,
        ..ChannelConfig::default()
    };
    let cfg = ModelConfig {
        layers: 1,
        heads: 1,
        d_attn: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(ch.clone(), cfg, 3, 2, &SeedStream::new(21)).unwrap();
    let pairs = pairs(&log, &ch, &[(1, 4, 8.0), (6, 2, 5.5), (0, 8, 10.5)]);
    let labels = [1.0, 0.0, 1.0];
    let loss_of = |m: &Model| {
        let mut t = Tape::new();
        let l = m.loss(&mut t, &pairs, &labels, &mut Forward::eval()).unwrap();
        t.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, &pairs, &labels, &mut Forward::eval()).unwrap();
    let grads = tape.backward(loss, model.params()).unwrap();
    grads.require_all(model.params()).map_err(|e| e.to_string())?;
    let analytic = grads.flat();
    let numeric = numeric_gradient(
        model.params(),
        |s| {
            let mut m = model.clone();
            *m.params_mut() = s.clone();
            loss_of(&m)
        },
        FD_STEP,
    );
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR);
    let errs: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| rel(a, n)).collect();
    let (i, worst) = errs.iter().copied().enumerate().fold((0, 0.0), |b, (i, e)| if e > b.1 { (i, e) } else { b });
    let (id, off) = model.params().locate(i).unwrap();
    let over = errs.iter().filter(|&&e| e >= FD_REL_TOL).count();
    let mut msg = format!(
        "{} scalars, worst relative error {worst:.2e} at {}[{off}], {over} at or above {FD_REL_TOL:.0e}",
        analytic.len(),
        model.params().name(id)
    );
    if over > 0 {
        // Report how the failing entries behave as the step shrinks.
        let finer = numeric_gradient(model.params(), |s| {
            let mut m = model.clone();
            *m.params_mut() = s.clone();
            loss_of(&m)
        }, FD_STEP / 4.0);
        let ratio = errs[i] / rel(analytic[i], finer[i]);
        let worst_fine = analytic.iter().zip(&finer).map(|(&a, &n)| rel(a, n)).fold(0.0, f64::max);
        msg.push_str(&format!(
            "; at h/4 the worst error is {worst_fine:.2e} and the worst entry shrinks {ratio:.1}x"
        ));
    }
    ensure(over == 0, msg.clone())?;
    Ok(msg)
}

fn cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let data = (0..t.rows()).flat_map(|r| t.row(r)[start..start + len].to_vec()).collect();
    Tensor::matrix(t.rows(), len, data).unwrap()
}

/// Plain masked softmax attention within `seg`-row blocks.
fn block_attention(q: &Tensor, k: &Tensor, v: &Tensor, seg: usize, mask: &[bool]) -> Tensor {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = Tensor::zeros(&[q.rows(), seg]);
    for r in 0..q.rows() {
        let b = r / seg;
        for j in 0..seg {
            let dot: f64 = q.row(r).iter().zip(k.row(b * seg + j)).map(|(x, y)| x * y).sum();
            s.set(r, j, dot * scale);
        }
    }
    let a = softmax_rows(&s, Some(mask)).unwrap();
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    for r in 0..q.rows() {
        let b = r / seg;
        for j in 0..seg {
            for c in 0..v.cols() {
                out.set(r, c, out.get(r, c) + a.get(r, j) * v.get(b * seg + j, c));
            }
        }
    }
    out
}

fn c2_reductions() -> Outcome {
    let log = featured_log();
    let ch = ChannelConfig {
        d: 4,
        d_t: 4,
        d_c: 4,
        k: 5,
        ..ChannelConfig::default()
    };
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        d_attn: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let ps = pairs(&log, &ch, &[(1, 4, 8.0), (6, 2, 5.5), (3, 7, 2.0)]);
    let seqs: Vec<&TokenSequence> = ps.iter().flat_map(|p| [&p.0, &p.1]).collect();
    let batch = assemble_batch(&seqs).unwrap();
    let mut r = lcg(8);
    let z = Tensor::matrix(batch.rows(), 20, (0..batch.rows() * 20).map(|_| r()).collect()).unwrap();

    let mut model = Model::new(ch.clone(), cfg.clone(), 3, 2, &SeedStream::new(4)).unwrap();
    model.set_param("layer0.lambda0", &[0.0]);
    model.set_param("layer0.lambda1", &[0.0]);
    let (pre, _, _) = model.diff_attention(0, &z, &batch).unwrap();
    let p = model.params();
    let proj = |n: &str| z.matmul(p.get(p.find(n).unwrap())).unwrap();
    let (q, k, v) = (proj("layer0.wq"), proj("layer0.wk"), proj("layer0.wv"));
    let mask = batch.key_mask();
    let mut worst: f64 = 0.0;
    for h in 0..2 {
        let q1 = rope_apply(&cols(&q, h * 8, 4), &batch.positions).unwrap();
        let k1 = rope_apply(&cols(&k, h * 8, 4), &batch.positions).unwrap();
        let want = block_attention(&q1, &k1, &cols(&v, h * 8, 8), batch.seq_len, &mask);
        for (a, b) in cols(&pre, h * 8, 8).data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= REDUCTION_TOL, format!("lambda=0 deviates from standard attention by {worst:.2e}"))?;

    let mut tied = Model::new(ch, cfg, 3, 2, &SeedStream::new(5)).unwrap();
    for name in ["layer0.wq", "layer0.wk"] {
        let id = tied.params().find(name).unwrap();
        let w = tied.params_mut().get_mut(id);
        for row in 0..w.rows() {
            for h in 0..2 {
                for c in 0..4 {
                    let x = w.get(row, h * 8 + c);
                    w.set(row, h * 8 + 4 + c, x);
                }
            }
        }
    }
    tied.set_param("layer0.lambda0", &[1.0]);
    tied.set_param("layer0.lambda1", &[1.0]);
    let (pre, _, _) = tied.diff_attention(0, &z, &batch).unwrap();
    ensure(pre.data().iter().all(|&x| x == 0.0), "tied branches with lambda=1 are not exactly zero")?;
    Ok(format!("lambda=0 max deviation {worst:.1e}; tied branches cancel exactly"))
}

fn brute_ap(s: &[f64], y: &[bool]) -> f64 {
    // Stable descending order: j precedes i if it scores higher, or ties earlier.
    let before = |j: usize, i: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
    let mut total = 0.0;
    let mut pos = 0;
    for i in 0..s.len() {
        if !y[i] {
            continue;
        }
        pos += 1;
        let rank = (0..s.len()).filter(|&j| j == i || before(j, i)).count();
        let hits = (0..s.len()).filter(|&j| y[j] && (j == i || before(j, i))).count();
        total += hits as f64 / rank as f64;
    }
    total / pos as f64
}

fn brute_auc(s: &[f64], y: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn c3_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 100 {
        let n = rng.random_range(2..=20);
        // coarse scores so ties occur
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
            continue;
        }
        worst = worst.max((average_precision(&s, &y).unwrap() - brute_ap(&s, &y)).abs());
        worst = worst.max((auc_roc(&s, &y).unwrap() - brute_auc(&s, &y)).abs());
        done += 1;
    }
    ensure(worst <= METRIC_TOL, format!("brute-force disagreement {worst:.2e}"))?;
    let s = [0.9, 0.8, 0.7];
    let y = [true, false, true];
    let ap = average_precision(&s, &y).unwrap();
    let auc = auc_roc(&s, &y).unwrap();
    ensure((ap - 5.0 / 6.0).abs() <= METRIC_TOL, format!("worked AP {ap}"))?;
    ensure((auc - 0.5).abs() <= METRIC_TOL, format!("worked AUC {auc}"))?;
    Ok(format!("100 instances, max deviation {worst:.1e}; AP {ap:.6}, AUC {auc}"))
}

/// Both criteria evaluated directly on the raw interaction list.
fn brute_critical(edges: &[(usize, usize, f64)], u: usize, v: usize, t: f64) -> BTreeSet<usize> {
    let past: Vec<(usize, usize)> = edges.iter().filter(|e| e.2 < t).map(|e| (e.0, e.1)).collect();
    let links = |a: usize, b: usize| past.iter().filter(|&&(s, d)| (s == a && d == b) || (s == b && d == a)).count();
    let mut cand = BTreeSet::new();
    for &(s, d) in &past {
        for (x, y) in [(s, d), (d, s)] {
            if x == u || x == v {
                cand.insert(y);
            }
        }
    }
    cand.remove(&u);
    cand.remove(&v);
    let anchor = |w: usize| if u == v { links(w, u) } else { links(w, u) + links(w, v) };
    cand.iter()
        .copied()
        .filter(|&w| {
            let others: Vec<usize> = cand.iter().copied().filter(|&x| x != w).collect();
            let structural = others.iter().filter(|&&x| links(w, x) > 0).count() >= 2;
            let temporal = anchor(w) >= 2 && others.iter().any(|&x| links(w, x) >= 2 && anchor(x) >= 2);
            structural || temporal
        })
        .collect()
}

fn c4_critical() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut nonempty = 0;
    for trial in 0..200 {
        let n = rng.random_range(3..=30usize);
        let m = rng.random_range(1..=120usize);
        let edges: Vec<(usize, usize, f64)> = (0..m)
            .map(|i| {
                let s = rng.random_range(0..n);
                let mut d = rng.random_range(0..n);
                if d == s {
                    d = (d + 1) % n;
                }
                (s, d, (i / 2) as f64)
            })
            .collect();
        let log = EventLog::from_edges(&edges).unwrap();
        let idx = NeighborIndex::build(&log);
        for _ in 0..5 {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            let t = rng.random_range(0..=m) as f64 / 2.0 + 0.25;
            let got: BTreeSet<usize> = find_critical(&idx, u, v, t, &CriticalThresholds::default())
                .ids()
                .into_iter()
                .collect();
            let want = brute_critical(&edges, u, v, t);
            ensure(got == want, format!("log {trial}, query ({u},{v},{t}): {got:?} vs {want:?}"))?;
            nonempty += usize::from(!want.is_empty());
        }
    }
    Ok(format!("200 logs x 5 queries match; {nonempty} queries with critical nodes"))
}

fn c5_dispersion() -> Outcome {
    let h = row_entropy(&[0.125; 8]).unwrap();
    ensure((h - 8f64.ln()).abs() <= ENTROPY_TOL, format!("uniform entropy {h}"))?;
    ensure(row_entropy(&[0.0, 1.0, 0.0]) == Some(0.0), "one-hot entropy")?;
    ensure((row_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() <= ENTROPY_TOL, "two-term entropy")?;

    let mut r = lcg(5);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..9).map(|_| r()).collect()).collect();
    let p = positive_normalized(&Tensor::from_rows(&rows).unwrap(), None, POSITIVE_EPS);
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().sum();
        ensure(p.row(i).iter().all(|&x| x >= 0.0), "negative entry after normalization")?;
        ensure(s == 0.0 || (s - 1.0).abs() < 1e-6, format!("row sum {s}"))?;
    }
    let ex = positive_normalized(&Tensor::from_rows(&[vec![0.5, -0.2, 0.1], vec![-1.0, -0.5, 0.0]]).unwrap(), None, POSITIVE_EPS);
    ensure((ex.get(0, 0) - 0.8333).abs() < 1e-4 && ex.get(0, 1) == 0.0 && (ex.get(0, 2) - 0.1667).abs() < 1e-4, "worked normalization")?;
    ensure(ex.row(1).iter().all(|&x| x == 0.0), "nonpositive row")?;

    let ids = [10, 11, 12];
    let m = critical_mass(&[0.6, 0.3, 0.1], &ids, |n| n != 11);
    ensure((m - 0.7).abs() <= METRIC_TOL, format!("mass on tokens 0 and 2 is {m}"))?;
    ensure(critical_mass(&[0.6, 0.3, 0.1], &ids, |_| false) == 0.0, "empty critical set")?;
    ensure(critical_mass(&[0.6, 0.3, 0.1], &ids, |_| true) == 1.0, "all critical")?;
    let ten: Vec<f64> = (0..10).map(|i| if i == 2 { 0.55 } else { 0.05 }).collect();
    let ids10: Vec<usize> = (0..10).collect();
    ensure(topk_critical_proportion(&ten, &ids10, &[true; 10], |n| n == 2, 0.05) == 1.0, "top-1 of 10")?;
    let twenty: Vec<f64> = (0..20).map(|i| if i == 13 { 0.24 } else { 0.04 }).collect();
    let ids20: Vec<usize> = (0..20).collect();
    ensure(topk_critical_proportion(&twenty, &ids20, &[true; 20], |n| n != 13, 0.05) == 0.0, "top-1 of 20")?;
    Ok(format!("uniform-8 entropy {h:.10}; 200 normalized rows; worked examples exact"))
}

fn c6_mmd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |shift: f64| -> Vec<Vec<f64>> { (0..200).map(|_| vec![normal.sample(&mut rng) + shift]).collect() };
    let x = draw(0.0);
    let same = mmd(&x, &x.clone(), Bandwidth::Median).unwrap().value;
    ensure(same.abs() <= MMD_ZERO_TOL, format!("identical windows give {same}"))?;
    let vals: Vec<f64> = [0.0, 1.0, 2.0]
        .iter()
        .map(|&d| mmd(&x, &draw(d), Bandwidth::Median).unwrap().value)
        .collect();
    ensure(vals[0] < vals[1] && vals[1] < vals[2], format!("not increasing: {vals:?}"))?;
    ensure(mmd(&x[..1], &x, Bandwidth::Median).is_err(), "single-row window accepted")?;
    Ok(format!("identical {same:.1e}; offsets 0/1/2 give {:.4}/{:.4}/{:.4}", vals[0], vals[1], vals[2]))
}

// Desk-scale experiment shared by criteria 7-9.
const SEEDS: [u64; 3] = [0, 1, 2];
const N_NODES: usize = 100;
const N_EVENTS: usize = 3000;
const EPOCHS: usize = 10;

fn desk_channels() -> ChannelConfig {
    ChannelConfig {
        d: 8,
        d_t: 16,
        d_c: 8,
        d_s: 1,
        k: 10,
        ..ChannelConfig::default()
    }
}

fn desk_model(attention: AttentionKind, seed: u64) -> Model {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_attn: 10,
        attention,
        ..ModelConfig::default()
    };
    Model::new(desk_channels(), cfg, 0, 0, &SeedStream::new(seed)).unwrap()
}

fn desk_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        batch_size: 32,
        lr: 1e-3,
        seeds: SEEDS.to_vec(),
        ..TrainConfig::default()
    }
}

fn test_spec() -> EvalSpec {
    EvalSpec {
        phase: Phase::Test,
        protocol: Protocol::Random,
        mode: Mode::Transductive,
        seeds: vec![0, 1, 2],
    }
}

struct DeskRun {
    shift: f64,
    seed: u64,
    attention: AttentionKind,
    model: Model,
    data: Dataset,
    test_ap: f64,
}

fn desk_runs() -> Vec<DeskRun> {
    let mut runs = Vec::new();
    for shift in [0.0, 1.0] {
        for seed in SEEDS {
            let log = synth_generate(N_NODES, N_EVENTS, shift, seed).unwrap();
            let split = chronological_split(&log, (0.7, 0.15, 0.15), false, 0.1, &SeedStream::new(seed)).unwrap();
            let data = Dataset::new("synthetic", log, split).unwrap();
            for attention in [AttentionKind::Differential, AttentionKind::Standard] {
                let t0 = Instant::now();
                let out = train(&data, &desk_train_cfg(), desk_model(attention, seed), &SeedStream::new(seed)).unwrap();
                let test_ap = evaluate(&out.model, &data, &test_spec()).unwrap().ap_mean;
                eprintln!(
                    "  shift {shift} seed {seed} {attention:?}: test AP {test_ap:.4} (best epoch {}, {:.1}s)",
                    out.best_epoch.map_or(-1, |e| e as i64),
                    t0.elapsed().as_secs_f64()
                );
                runs.push(DeskRun {
                    shift,
                    seed,
                    attention,
                    model: out.model,
                    data: data.clone(),
                    test_ap,
                });
            }
        }
    }
    runs
}

fn mean_of<'a>(runs: &'a [DeskRun], shift: f64, attention: AttentionKind) -> impl Iterator<Item = &'a DeskRun> {
    runs.iter().filter(move |r| r.shift == shift && r.attention == attention)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    mean_std(&v).0
}

fn c7_shift_trend(runs: &[DeskRun]) -> Outcome {
    let ap = |s, a| mean(mean_of(runs, s, a).map(|r| r.test_ap));
    let (d1, s1) = (ap(1.0, AttentionKind::Differential), ap(1.0, AttentionKind::Standard));
    let (d0, s0) = (ap(0.0, AttentionKind::Differential), ap(0.0, AttentionKind::Standard));
    let msg = format!("shift=1 AP diff {d1:.4} vs std {s1:.4}; shift=0 AP diff {d0:.4} vs std {s0:.4}");
    ensure(d1 >= s1 && (d0 - s0).abs() < NO_SHIFT_AP_GAP, msg.clone())?;
    Ok(msg)
}

fn c8_entropy(runs: &[DeskRun]) -> Outcome {
    let cfg = DiagnosticsConfig::default();
    let ent = |a| {
        mean(mean_of(runs, 1.0, a).map(|r| attention_diagnostics(&r.model, &r.data, &cfg).unwrap().1.entropy))
    };
    let (d, s) = (ent(AttentionKind::Differential), ent(AttentionKind::Standard));
    let msg = format!("last-layer entropy diff {d:.4} vs std {s:.4}");
    ensure(d <= s, msg.clone())?;
    Ok(msg)
}

fn c9_ablation(runs: &[DeskRun]) -> Outcome {
    let ablate = |r: &DeskRun, mode| {
        let spec = MaskSpec {
            mode,
            retention: 0.0,
            seed: r.seed,
            thresholds: CriticalThresholds::default(),
        };
        masked_evaluate(&r.model, &r.data, &test_spec(), &spec).unwrap().0.report.ap_mean
    };
    let shifted: Vec<&DeskRun> = mean_of(runs, 1.0, AttentionKind::Differential).collect();
    let crit = mean(shifted.iter().map(|r| ablate(r, MaskMode::Critical)));
    let rand = mean(shifted.iter().map(|r| ablate(r, MaskMode::Random)));
    let full = mean(shifted.iter().map(|r| r.test_ap));
    let msg = format!("AP unmasked {full:.4}, critical-0 {crit:.4}, random-0 {rand:.4}");
    ensure(crit <= rand, msg.clone())?;
    Ok(msg)
}

fn c10_uci() -> Outcome {
    let path = std::env::var_os("DIFFDYG_UCI_CSV")
        .map(PathBuf::from)
        .ok_or("set DIFFDYG_UCI_CSV to the UCI event CSV (src,dst,ts)")?;
    let log = load_events(&path, None).map_err(|e| e.to_string())?;
    let split = chronological_split(&log, (0.7, 0.15, 0.15), false, 0.1, &SeedStream::new(0)).map_err(|e| e.to_string())?;
    let data = Dataset::new("uci", log, split).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 10,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let model = Model::new(ChannelConfig::default(), ModelConfig::default(), data.log.node_dim(), data.log.edge_dim(), &SeedStream::new(0))
        .map_err(|e| e.to_string())?;
    let out = train(&data, &cfg, model, &SeedStream::new(0)).map_err(|e| e.to_string())?;
    let ap = evaluate(&out.model, &data, &test_spec()).map_err(|e| e.to_string())?.ap_mean;
    let msg = format!("test AP {ap:.4}");
    ensure(ap >= UCI_MIN_AP, msg.clone())?;
    Ok(msg)
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    match res {
        Ok(msg) => {
            println!("criterion {id} {name}: PASS ({msg}) [{secs:.1}s]");
            true
        }
        Err(msg) => {
            println!("criterion {id} {name}: FAIL ({msg}) [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");

    let mut ok = true;
    ok &= run(1, "gradient fidelity", c1_gradients);
    ok &= run(2, "attention reductions", c2_reductions);
    ok &= run(3, "metric oracles", c3_metrics);
    ok &= run(4, "critical-node oracle", c4_critical);
    ok &= run(5, "dispersion metrics", c5_dispersion);
    ok &= run(6, "mmd behavior", c6_mmd);

    let t0 = Instant::now();
    let runs = catch_unwind(desk_runs).ok();
    eprintln!("desk experiment: {:.1}s", t0.elapsed().as_secs_f64());
    let with_runs = |f: fn(&[DeskRun]) -> Outcome| {
        let r = runs.as_deref();
        move || r.map_or_else(|| Err("desk experiment failed".to_string()), f)
    };
    ok &= run(7, "shift trend", with_runs(c7_shift_trend));
    ok &= run(8, "attention focus trend", with_runs(c8_entropy));
    ok &= run(9, "ablation gap trend", with_runs(c9_ablation));

    if ignored {
        run(10, "uci benchmark (non-gating)", c10_uci);
    } else {
        println!("criterion 10 uci benchmark (non-gating): IGNORED");
    }
    if !ok {
        std::process::exit(1);
    }
}
