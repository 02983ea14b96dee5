//! Classification and forecasting metrics. Multi-label inputs are row-major
//! `(n, m)`; per-label values are macro-averaged.

use std::cmp::Ordering;
use std::collections::BTreeMap;

pub const THRESHOLD: f64 = 0.5;

fn desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` unless both classes occur.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of 1-based midranks of the positives, doubled to stay integral.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let pos = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += pos * twice_mid;
        i = j + 1;
    }
    let np = n_pos as u64;
    let twice_u = twice_rank_sum - np * (np + 1);
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Average precision: `Σ (R_i − R_{i−1}) P_i` over distinct score thresholds,
/// highest first. `None` without positives.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let idx = desc(scores);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let new_tp = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        if new_tp > 0 {
            tp += new_tp;
            ap += (new_tp as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Some(ap)
}

/// Per-label F1 at [`THRESHOLD`], averaged over labels. A label with neither
/// true nor predicted positives contributes 0.
pub fn f1_macro(probs: &[f64], labels: &[f64], m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..m {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, y) in probs.iter().skip(j).step_by(m).zip(labels.iter().skip(j).step_by(m)) {
            match (*p >= THRESHOLD, *y >= THRESHOLD) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    total / m as f64
}

/// Fraction of label entries predicted correctly at [`THRESHOLD`].
pub fn accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().zip(labels).filter(|(p, y)| (**p >= THRESHOLD) == (**y >= THRESHOLD)).count();
    hits as f64 / probs.len() as f64
}

fn macro_over_labels(probs: &[f64], labels: &[f64], m: usize, f: fn(&[f64], &[bool]) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = (0..m)
        .filter_map(|j| {
            let s: Vec<f64> = probs.iter().skip(j).step_by(m).copied().collect();
            let l: Vec<bool> = labels.iter().skip(j).step_by(m).map(|&y| y >= THRESHOLD).collect();
            f(&s, &l)
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `accuracy`, `auroc`, `f1_macro`, `auprc`; undefined rank metrics are omitted.
pub fn classification_metrics(probs: &[f64], labels: &[f64], m: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    out.insert("accuracy".into(), accuracy(probs, labels));
    out.insert("f1_macro".into(), f1_macro(probs, labels, m));
    if let Some(v) = macro_over_labels(probs, labels, m, auroc) {
        out.insert("auroc".into(), v);
    }
    if let Some(v) = macro_over_labels(probs, labels, m, auprc) {
        out.insert("auprc".into(), v);
    }
    out
}

pub fn forecast_metrics(pred: &[f64], target: &[f64]) -> BTreeMap<String, f64> {
    let n = pred.len().max(1) as f64;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    BTreeMap::from([("mae".to_string(), mae), ("mse".to_string(), mse)])
}
