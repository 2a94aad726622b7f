//! Brute-force oracles shared by the property tests and the acceptance run.

use cdds_core::semalign::{quantile_transport, sparsify, Axis, THRESHOLD_TOL};
use cdds_core::Tensor;

// Brute-force transport oracle. Ranks are found by counting, order
// statistics by searching for the element with exactly k smaller ones.

fn count_below(v: &[f64], c: f64) -> usize {
    v.iter().filter(|&&x| x < c).count()
}

fn kth_smallest(v: &[f64], k: usize) -> f64 {
    *v.iter().find(|&&x| count_below(v, x) == k).expect("values are distinct")
}

fn oracle_rank(src: &[f64], c: f64) -> f64 {
    let n = src.len();
    if let Some(&hit) = src.iter().find(|&&x| x == c) {
        return count_below(src, hit) as f64;
    }
    let below = src.iter().filter(|&&x| x < c).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let above = src.iter().filter(|&&x| x > c).fold(f64::INFINITY, |a, &b| a.min(b));
    if below == f64::NEG_INFINITY {
        return 0.0;
    }
    if above == f64::INFINITY {
        return (n - 1) as f64;
    }
    count_below(src, below) as f64 + (c - below) / (above - below)
}

pub fn oracle_transport(src: &[f64], query: &[f64], tgt: &[f64]) -> Vec<f64> {
    let (n, m) = (src.len(), tgt.len());
    query
        .iter()
        .map(|&c| {
            if m == 1 {
                return tgt[0];
            }
            let pos = if n == 1 { 0.5 * (m - 1) as f64 } else { oracle_rank(src, c) * (m - 1) as f64 / (n - 1) as f64 };
            let a = (pos.floor() as usize).min(m - 2);
            let lam = pos - a as f64;
            (1.0 - lam) * kth_smallest(tgt, a) + lam * kth_smallest(tgt, a + 1)
        })
        .collect()
}

pub fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Transport of `src` plus `extra` queries against the oracle, then the
/// identity fixed point and monotonicity. `src` and `tgt` hold distinct values.
pub fn transport_case(src: &[f64], tgt: &[f64], extra: &[f64]) -> Result<(), String> {
    let (s, t) = (sorted(src.to_vec()), sorted(tgt.to_vec()));
    let mut query = src.to_vec();
    query.extend_from_slice(extra);
    let fast = quantile_transport(&s, &query, &t).map_err(|e| e.to_string())?;
    let slow = oracle_transport(src, &query, tgt);
    for (a, b) in fast.iter().zip(&slow) {
        if (a - b).abs() > 1e-10 {
            return Err(format!("transport {a} vs oracle {b}"));
        }
    }
    let same = quantile_transport(&s, &s, &s).map_err(|e| e.to_string())?;
    if same.iter().zip(&s).any(|(a, b)| (a - b).abs() > 1e-10) {
        return Err("identity is not a fixed point".into());
    }
    let out = quantile_transport(&s, &sorted(query), &t).map_err(|e| e.to_string())?;
    if !out.windows(2).all(|w| w[0] <= w[1] + 1e-12) {
        return Err("transport is not monotone".into());
    }
    Ok(())
}

// Per-row threshold oracle written out independently.
pub fn oracle_sparsify(s: &[Vec<f64>], alpha: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let d = s.len();
    let (mut mask, mut weights, mut thr) = (vec![vec![0.0; d]; d], vec![vec![0.0; d]; d], vec![0.0; d]);
    for i in 0..d {
        let p: Vec<f64> = s[i].iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let mu = p.iter().sum::<f64>() / d as f64;
        let sd = (p.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64).sqrt();
        thr[i] = mu + alpha[i] * sd;
        let mut keep: Vec<usize> = (0..d).filter(|&j| p[j] > thr[i] + THRESHOLD_TOL).collect();
        if keep.is_empty() {
            let mut best = 0;
            for j in 1..d {
                if s[i][j] > s[i][best] {
                    best = j;
                }
            }
            keep = vec![best];
        }
        let z: f64 = keep.iter().map(|&j| s[i][j]).sum();
        for j in keep {
            mask[i][j] = 1.0;
            weights[i][j] = s[i][j] / z;
        }
    }
    (mask, weights, thr)
}

/// `rows` with row `tie` flattened to a constant, checked against the oracle.
pub fn sparsify_case(rows: &[Vec<f64>], alpha: &[f64], tie: usize) -> Result<(), String> {
    let d = rows.len();
    let mut rows = rows.to_vec();
    rows[tie] = vec![rows[tie][0]; d];
    let s = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    let got = sparsify(&s, alpha, Axis::Row).map_err(|e| e.to_string())?;
    let (mask, weights, thr) = oracle_sparsify(&rows, alpha);
    for i in 0..d {
        if (got.thresholds[i] - thr[i]).abs() > 1e-12 {
            return Err(format!("row {i}: threshold {} vs {}", got.thresholds[i], thr[i]));
        }
        let mut row_sum = 0.0;
        for j in 0..d {
            if got.mask.get(i, j) != mask[i][j] {
                return Err(format!("mask differs at ({i}, {j})"));
            }
            if (got.weights.get(i, j) - weights[i][j]).abs() > 1e-12 {
                return Err(format!("weight differs at ({i}, {j})"));
            }
            row_sum += got.weights.get(i, j);
        }
        if (row_sum - 1.0).abs() > 1e-10 {
            return Err(format!("row {i} weights sum to {row_sum}"));
        }
    }
    // an all-tie row keeps exactly its first entry
    let kept: Vec<f64> = (0..d).map(|j| got.mask.get(tie, j)).collect();
    if kept.iter().sum::<f64>() != 1.0 || kept[0] != 1.0 {
        return Err(format!("tie row {tie} kept {kept:?}"));
    }
    Ok(())
}
