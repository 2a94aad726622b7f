//! Adaptive soft-threshold sparsification of the correlation matrix.
//!
//! Scores are mapped through a sigmoid; an entry survives when its
//! probability exceeds `mean + α·std` of its row (or column). Survivors are
//! renormalised to sum to one. The hard mask has no useful derivative, so
//! `α` is trained through a relaxed gate `sigmoid((p - k) / τ)` while the
//! forward weights stay exactly the hard ones.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Result};
use crate::tape::{sigmoid, CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// `p` must exceed the threshold by more than this to be kept, so rounding in
/// the mean cannot split an all-tie row.
pub const THRESHOLD_TOL: f64 = 1e-12;
pub const GATE_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Row,
    Column,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sparsified {
    /// 0/1 entries, same orientation as the input.
    pub mask: Tensor,
    /// Retained scores normalised along the chosen axis.
    pub weights: Tensor,
    /// One threshold per row (or column).
    pub thresholds: Vec<f64>,
}

fn check(s: &Tensor, alpha: &[f64]) -> Result<usize> {
    let (m, n) = s.dims2()?;
    if m != n {
        return dim_err("sparsify", format!("{m}x{n} is not square"));
    }
    if alpha.len() != n {
        return dim_err("sparsify", format!("{} alphas for {n} rows", alpha.len()));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return contract("sparsify: alpha must be finite");
    }
    Ok(n)
}

fn oriented(s: &Tensor, axis: Axis) -> Result<Tensor> {
    match axis {
        Axis::Row => Ok(s.clone()),
        Axis::Column => s.transpose(),
    }
}

/// Mean and population standard deviation.
fn moments(p: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn sparsify(s: &Tensor, alpha: &[f64], axis: Axis) -> Result<Sparsified> {
    let d = check(s, alpha)?;
    let work = oriented(s, axis)?;
    let mut mask = vec![0.0; d * d];
    let mut weights = vec![0.0; d * d];
    let mut thresholds = Vec::with_capacity(d);
    for i in 0..d {
        let row = work.row(i);
        let p: Vec<f64> = row.iter().map(|&v| sigmoid(v)).collect();
        let (mu, theta) = moments(&p);
        let k = mu + alpha[i] * theta;
        thresholds.push(k);
        let mut kept: Vec<usize> = (0..d).filter(|&j| p[j] > k + THRESHOLD_TOL).collect();
        if kept.is_empty() {
            let best = (0..d).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            kept.push(best);
        }
        let total: f64 = kept.iter().map(|&j| row[j]).sum();
        for &j in &kept {
            mask[i * d + j] = 1.0;
            weights[i * d + j] = row[j] / total;
        }
    }
    let mask = Tensor::matrix(d, d, mask)?;
    let weights = Tensor::matrix(d, d, weights)?;
    Ok(match axis {
        Axis::Row => Sparsified { mask, weights, thresholds },
        Axis::Column => Sparsified {
            mask: mask.transpose()?,
            weights: weights.transpose()?,
            thresholds,
        },
    })
}

/// Relaxed weights `g·s / Σ g·s` with `g = sigmoid((p - k) / τ)`.
pub fn soft_weights(s: &Tensor, alpha: &[f64], axis: Axis, tau: f64) -> Result<Tensor> {
    let d = check(s, alpha)?;
    let work = oriented(s, axis)?;
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        let row = work.row(i);
        let p: Vec<f64> = row.iter().map(|&v| sigmoid(v)).collect();
        let (mu, theta) = moments(&p);
        let k = mu + alpha[i] * theta;
        let a: Vec<f64> = (0..d).map(|j| sigmoid((p[j] - k) / tau) * row[j]).collect();
        let z: f64 = a.iter().sum();
        for j in 0..d {
            out[i * d + j] = a[j] / z;
        }
    }
    let out = Tensor::matrix(d, d, out)?;
    match axis {
        Axis::Row => Ok(out),
        Axis::Column => out.transpose(),
    }
}

/// Forward value: the hard weights. Backward: the relaxed weights' VJP
/// with respect to `α`.
#[derive(Debug)]
struct ThresholdGate {
    s: Tensor,
    axis: Axis,
    tau: f64,
}

impl CustomOp for ThresholdGate {
    fn name(&self) -> &'static str {
        "threshold_gate"
    }

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Vec<f64>>> {
        let alpha = inputs[0].data();
        let d = alpha.len();
        let work = oriented(&self.s, self.axis).expect("square");
        let g_at = |i: usize, j: usize| match self.axis {
            Axis::Row => grad_out[i * d + j],
            Axis::Column => grad_out[j * d + i],
        };
        let mut dalpha = vec![0.0; d];
        for (i, da) in dalpha.iter_mut().enumerate() {
            let row = work.row(i);
            let p: Vec<f64> = row.iter().map(|&v| sigmoid(v)).collect();
            let (mu, theta) = moments(&p);
            let k = mu + alpha[i] * theta;
            let gate: Vec<f64> = p.iter().map(|&pj| sigmoid((pj - k) / self.tau)).collect();
            let a: Vec<f64> = (0..d).map(|j| gate[j] * row[j]).collect();
            let da_dalpha: Vec<f64> = (0..d)
                .map(|j| -gate[j] * (1.0 - gate[j]) * theta / self.tau * row[j])
                .collect();
            let z: f64 = a.iter().sum();
            let dz: f64 = da_dalpha.iter().sum();
            *da = (0..d)
                .map(|j| g_at(i, j) * (da_dalpha[j] / z - a[j] * dz / (z * z)))
                .sum();
        }
        vec![Some(dalpha)]
    }
}

/// Records the sparsified weights of `s` on the tape as a function of the
/// `1×d` parameter `alpha`.
pub fn threshold_gate(tape: &mut Tape, s: &Tensor, alpha: Var, axis: Axis) -> Result<(Var, Sparsified)> {
    let a = tape.value(alpha).data().to_vec();
    let hard = sparsify(s, &a, axis)?;
    let op = ThresholdGate {
        s: s.clone(),
        axis,
        tau: GATE_TAU,
    };
    let w = tape.custom(&[alpha], hard.weights.clone(), Box::new(op))?;
    Ok((w, hard))
}
