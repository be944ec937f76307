use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::NodeId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sample.
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub value: f64,
    pub sigma: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Square root of the biased (V-statistic) MMD² under an RBF kernel.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Bandwidth) -> Result<MmdResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Metric(format!(
            "MMD needs at least 2 rows per sample, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|r| r.len() != dim) {
        return Err(Error::Metric("MMD rows differ in width".into()));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => return Err(Error::Metric(format!("bandwidth {s} must be positive"))),
        Bandwidth::Median => {
            let all: Vec<&Vec<f64>> = x.iter().chain(y).collect();
            let mut d = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    d.push(sq_dist(all[i], all[j]).sqrt());
                }
            }
            let m = median(d);
            if m > 0.0 {
                m
            } else {
                warn!("median pairwise distance is zero; using bandwidth 1");
                1.0
            }
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += (-gamma * sq_dist(p, q)).exp();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let m2 = mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y);
    Ok(MmdResult {
        value: m2.max(0.0).sqrt(),
        sigma,
    })
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric("pearson_r needs two equal-length lists of at least 2".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("pearson_r of a constant list".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub const POSITIVE_EPS: f64 = 1e-8;

/// Clip negatives to zero and divide each row by its positive mass plus
/// `eps`. Entries with a false mask are zeroed first.
pub fn positive_normalized(b: &Tensor, mask: Option<&[bool]>, eps: f64) -> Tensor {
    let mut out = b.clone();
    let cols = b.cols();
    for r in 0..b.rows() {
        let row = out.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            let keep = mask.is_none_or(|m| m[r * cols + j]);
            *v = if keep { v.max(0.0) } else { 0.0 };
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total + eps);
    }
    out
}

/// Natural-log Shannon entropy of a nonnegative row; `None` if it has no mass.
pub fn row_entropy(row: &[f64]) -> Option<f64> {
    if row.iter().all(|&a| a <= 0.0) {
        return None;
    }
    Some(-row.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>())
}

/// Mean entropy over the rows of `map` that carry mass, restricted to `mask`.
pub fn attention_entropy(map: &Tensor, mask: Option<&[bool]>) -> f64 {
    let cols = map.cols();
    let mut total = 0.0;
    let mut n = 0usize;
    for r in 0..map.rows() {
        let row: Vec<f64> = map
            .row(r)
            .iter()
            .enumerate()
            .map(|(j, &v)| if mask.is_none_or(|m| m[r * cols + j]) { v } else { 0.0 })
            .collect();
        if let Some(h) = row_entropy(&row) {
            total += h;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Share of a row's mass on tokens whose node is critical.
pub fn critical_mass(row: &[f64], node_ids: &[NodeId], is_critical: impl Fn(NodeId) -> bool) -> f64 {
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let hit: f64 = row
        .iter()
        .zip(node_ids)
        .filter(|(_, &n)| is_critical(n))
        .map(|(a, _)| a)
        .sum();
    hit / total
}

/// Fraction of critical nodes among the top `ceil(k_frac * n_valid)` valid
/// tokens by attention (ties by token index).
pub fn topk_critical_proportion(
    row: &[f64],
    node_ids: &[NodeId],
    valid: &[bool],
    is_critical: impl Fn(NodeId) -> bool,
    k_frac: f64,
) -> f64 {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| valid[j]).collect();
    if idx.is_empty() {
        return 0.0;
    }
    let k = ((k_frac * idx.len() as f64 - 1e-9).ceil() as usize).clamp(1, idx.len());
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let hits = idx[..k].iter().filter(|&&j| is_critical(node_ids[j])).count();
    hits as f64 / k as f64
}
