//! Related-semantics identification and x-semantic construction.
//!
//! Each feature column of a modality is summarised by a smoothed histogram
//! and its sorted raw values. Column pairs across modalities are scored by
//! `exp(-KL)`, the score matrix is sparsified per row (image side) or per
//! column (text side), and the surviving weights mix quantile-transported
//! copies of one modality's columns into the other's distributional form.
//!
//! All statistics here are plain values; only [`transport_mix`]
//! and [`threshold_gate`] touch the tape.

pub mod sparsify;
pub mod transport;

pub use sparsify::{soft_weights, sparsify, threshold_gate, Axis, Sparsified, GATE_TAU, THRESHOLD_TOL};
pub use transport::{
    interpolate_sorted, quantile_transport, transport_mix, transport_position, x_semantic_reference,
    TransportPlan,
};

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 32;
pub const SMOOTHING: f64 = 1e-6;
pub const RANGE_PAD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnHistogram {
    /// `B + 1` edges spanning the padded column range.
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDistributions {
    pub bins: usize,
    pub columns: Vec<ColumnHistogram>,
    /// Sorted ascending, one list per column.
    pub raw_values: Vec<Vec<f64>>,
}

impl ColumnDistributions {
    pub fn d(&self) -> usize {
        self.columns.len()
    }
}

fn padded_range(sorted: &[f64]) -> (f64, f64) {
    (sorted[0] - RANGE_PAD, sorted[sorted.len() - 1] + RANGE_PAD)
}

/// Smoothed histogram of sorted values over `[lo, hi]`.
fn histogram(sorted: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in sorted {
        let b = ((v - lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1.0;
    }
    let denom = sorted.len() as f64 + bins as f64 * SMOOTHING;
    counts.iter().map(|c| (c + SMOOTHING) / denom).collect()
}

fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let w = (hi - lo) / bins as f64;
    (0..=bins).map(|b| if b == bins { hi } else { lo + w * b as f64 }).collect()
}

fn sorted_column(x: &Tensor, c: usize) -> Vec<f64> {
    let mut col = x.column(c);
    col.sort_by(f64::total_cmp);
    col
}

pub fn estimate_column(sorted: Vec<f64>, bins: usize) -> Result<(ColumnHistogram, Vec<f64>)> {
    if sorted.len() < 2 {
        return contract("a column distribution needs at least two values");
    }
    if bins < 2 {
        return contract("histograms need at least two bins");
    }
    let (lo, hi) = padded_range(&sorted);
    let hist = ColumnHistogram {
        bin_edges: edges(lo, hi, bins),
        probabilities: histogram(&sorted, lo, hi, bins),
    };
    Ok((hist, sorted))
}

/// Per-column distributions of `rows` (all patch or word rows of a batch).
pub fn estimate_columns(rows: &Tensor, bins: usize) -> Result<ColumnDistributions> {
    let (n, d) = rows.dims2()?;
    if n < 2 {
        return contract(format!("estimate_columns needs at least 2 rows, got {n}"));
    }
    let mut columns = Vec::with_capacity(d);
    let mut raw_values = Vec::with_capacity(d);
    for c in 0..d {
        let (h, raw) = estimate_column(sorted_column(rows, c), bins)?;
        columns.push(h);
        raw_values.push(raw);
    }
    Ok(ColumnDistributions { bins, columns, raw_values })
}

/// `KL(p ‖ q)` for strictly positive distributions on the same bins.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return contract(format!("KL over {} vs {} bins", p.len(), q.len()));
    }
    if p.iter().chain(q).any(|&v| v <= 0.0 || !v.is_finite()) {
        return contract("KL needs strictly positive probabilities");
    }
    Ok(p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum())
}

/// `exp(-KL(a ‖ b))` after re-binning both value lists onto their joint range.
pub fn correlation_entry(a_sorted: &[f64], b_sorted: &[f64], bins: usize) -> f64 {
    let (alo, ahi) = padded_range(a_sorted);
    let (blo, bhi) = padded_range(b_sorted);
    let (lo, hi) = (alo.min(blo), ahi.max(bhi));
    let p = histogram(a_sorted, lo, hi, bins);
    let q = histogram(b_sorted, lo, hi, bins);
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    (-kl.max(0.0)).exp()
}

/// `d_v × d_t` matrix of `exp(-KL(C^v_i ‖ C^t_j))`.
pub fn correlation_matrix(cv: &ColumnDistributions, ct: &ColumnDistributions) -> Result<Tensor> {
    if cv.bins != ct.bins {
        return contract(format!("bin counts differ: {} vs {}", cv.bins, ct.bins));
    }
    let (dv, dt) = (cv.d(), ct.d());
    let mut s = Vec::with_capacity(dv * dt);
    for a in &cv.raw_values {
        for b in &ct.raw_values {
            s.push(correlation_entry(a, b, cv.bins));
        }
    }
    Tensor::matrix(dv, dt, s)
}

/// The correlation matrix together with the distributions it came from, so
/// that a subset of columns can be re-estimated later.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationState {
    pub s: Tensor,
    pub image: ColumnDistributions,
    pub text: ColumnDistributions,
}

impl CorrelationState {
    pub fn compute(image_rows: &Tensor, text_rows: &Tensor, bins: usize) -> Result<Self> {
        let image = estimate_columns(image_rows, bins)?;
        let text = estimate_columns(text_rows, bins)?;
        if image.d() != text.d() {
            return dim_err("correlation", format!("{} vs {} columns", image.d(), text.d()));
        }
        let s = correlation_matrix(&image, &text)?;
        Ok(Self { s, image, text })
    }

    /// Re-estimates the listed columns of both modalities from new rows and
    /// recomputes the affected rows and columns of `S`.
    pub fn refresh_columns(&mut self, image_rows: &Tensor, text_rows: &Tensor, cols: &[usize]) -> Result<()> {
        let d = self.image.d();
        if image_rows.cols()? != d || text_rows.cols()? != d {
            return dim_err("refresh_columns", "row width differs from the stored state");
        }
        let bins = self.image.bins;
        for &c in cols {
            if c >= d {
                return contract(format!("column {c} out of range"));
            }
            let (h, raw) = estimate_column(sorted_column(image_rows, c), bins)?;
            self.image.columns[c] = h;
            self.image.raw_values[c] = raw;
            let (h, raw) = estimate_column(sorted_column(text_rows, c), bins)?;
            self.text.columns[c] = h;
            self.text.raw_values[c] = raw;
        }
        let s = self.s.data_mut();
        for &c in cols {
            for j in 0..d {
                s[c * d + j] = correlation_entry(&self.image.raw_values[c], &self.text.raw_values[j], bins);
                s[j * d + c] = correlation_entry(&self.image.raw_values[j], &self.text.raw_values[c], bins);
            }
        }
        Ok(())
    }
}
