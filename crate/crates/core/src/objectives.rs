//! Training objectives: semantic consistency, modality consistency, the two
//! reconstruction (integrity) terms, and their weighted sum.
//!
//! Every function records onto a [`Tape`] and returns a scalar [`Var`].

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest anchor set a single contrastive softmax runs over.
pub const NEGATIVE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticForm {
    /// `-log Σ_i exp(c_ii) / Σ_{j≠i} exp(c_ij)` with `c` the cosine matrix.
    Literal,
    /// Mean over anchors of `-log softmax_j(c_ij / τ)[i]`.
    InfoNce { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalForm {
    /// Mean pairwise KL between softmaxed rows; zero when all rows agree.
    Consistency,
    /// `Σ_{i,j} exp(-KL(p_i ‖ p_j))`.
    Literal,
}

/// Splits `n` rows into near-equal consecutive chunks of at most
/// [`NEGATIVE_CHUNK`] rows.
fn chunks(n: usize) -> Vec<(usize, usize)> {
    let k = n.div_ceil(NEGATIVE_CHUNK);
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

fn select_rows(tape: &mut Tape, x: Var, start: usize, end: usize) -> Result<Var> {
    let n = tape.value(x).rows()?;
    if start == 0 && end == n {
        return Ok(x);
    }
    let mut sel = Tensor::zeros(&[end - start, n]);
    for r in start..end {
        sel.data_mut()[(r - start) * n + r] = 1.0;
    }
    let sel = tape.constant(sel);
    tape.matmul(sel, x)
}

fn diagonal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n == k % n).collect()
}

/// Contrastive term for one modality: anchors are rows of `x`, positives the
/// same-index rows of `s`, negatives every other row of `s`.
pub fn semantic_term(tape: &mut Tape, x: Var, s: Var, form: SemanticForm) -> Result<Var> {
    let (nx, dx) = tape.value(x).dims2()?;
    if tape.value(s).dims2()? != (nx, dx) {
        return dim_err("loss_semantic", format!("{:?} vs {:?}", tape.value(x).shape(), tape.value(s).shape()));
    }
    if nx < 2 {
        return contract("loss_semantic needs at least two rows to form negatives");
    }
    let mut total: Option<Var> = None;
    let parts = chunks(nx);
    for &(a, b) in &parts {
        let xa = select_rows(tape, x, a, b)?;
        let sa = select_rows(tape, s, a, b)?;
        let c = tape.cosine_similarity(xa, sa)?;
        let pos = tape.diag(c)?;
        let n = b - a;
        let term = match form {
            SemanticForm::Literal => {
                let neg = tape.logsumexp_rows(c, Some(diagonal_mask(n)))?;
                let ratio = tape.sub(pos, neg)?;
                let ratio = tape.reshape(ratio, vec![1, n])?;
                let lse = tape.logsumexp_rows(ratio, None)?;
                let lse = tape.sum(lse)?;
                tape.scale(lse, -1.0)?
            }
            SemanticForm::InfoNce { temperature } => {
                if temperature.is_nan() || temperature <= 0.0 {
                    return Err(Error::Config("InfoNCE temperature must be positive".into()));
                }
                let c = tape.scale(c, 1.0 / temperature)?;
                let pos = tape.scale(pos, 1.0 / temperature)?;
                let all = tape.logsumexp_rows(c, None)?;
                let nll = tape.sub(all, pos)?;
                let m = tape.mean(nll)?;
                tape.scale(m, 1.0 / parts.len() as f64)?
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one chunk"))
}

/// Semantic consistency over both modalities.
pub fn loss_semantic(tape: &mut Tape, vx: Var, vs: Var, tx: Var, ts: Var, form: SemanticForm) -> Result<Var> {
    let a = semantic_term(tape, vx, vs, form)?;
    let b = semantic_term(tape, tx, ts, form)?;
    tape.add(a, b)
}

fn mean_pool_matrix(rows: usize, group: usize) -> Result<Tensor> {
    if rows.checked_rem(group) != Some(0) {
        return dim_err("pool", format!("{rows} rows do not split into items of {group}"));
    }
    let items = rows / group;
    let mut p = Tensor::zeros(&[items, rows]);
    for r in 0..rows {
        p.data_mut()[(r / group) * rows + r] = 1.0 / group as f64;
    }
    Ok(p)
}

/// Mean of each item's rows: `(rows/group) × d`.
pub fn mean_pool(tape: &mut Tape, x: Var, group: usize) -> Result<Var> {
    let rows = tape.value(x).rows()?;
    let p = tape.constant(mean_pool_matrix(rows, group)?);
    tape.matmul(p, x)
}

/// Replacement for the semantic term when x-semantics are not built:
/// contrast item-pooled image semantics directly with item-pooled text
/// semantics, in both directions.
pub fn pooled_contrastive(
    tape: &mut Tape,
    vs: Var,
    group_v: usize,
    ts: Var,
    group_t: usize,
    form: SemanticForm,
) -> Result<Var> {
    let pv = mean_pool(tape, vs, group_v)?;
    let pt = mean_pool(tape, ts, group_t)?;
    let a = semantic_term(tape, pv, pt, form)?;
    let b = semantic_term(tape, pt, pv, form)?;
    tape.add(a, b)
}

/// Modality-consistency term for one modality's modal rows.
pub fn modal_term(tape: &mut Tape, m: Var, form: ModalForm) -> Result<Var> {
    let (r, _) = tape.value(m).dims2()?;
    if r < 2 {
        return contract("loss_modal needs at least two rows");
    }
    let p = tape.softmax(m)?;
    let logp = tape.log(p)?;
    match form {
        ModalForm::Consistency => {
            // Σ_{i,j} KL(p_i ‖ p_j) = R·Σ p log p − Σ_k colsum(p)_k · colsum(log p)_k
            let plogp = tape.mul(p, logp)?;
            let self_term = tape.sum(plogp)?;
            let self_term = tape.scale(self_term, r as f64)?;
            let ones = tape.constant(Tensor::full(&[1, r], 1.0));
            let cp = tape.matmul(ones, p)?;
            let cl = tape.matmul(ones, logp)?;
            let cross = tape.mul(cp, cl)?;
            let cross = tape.sum(cross)?;
            let total = tape.sub(self_term, cross)?;
            tape.scale(total, 1.0 / (r * (r - 1)) as f64)
        }
        ModalForm::Literal => {
            // KL_ij = h_i − (p · log pᵀ)_ij with h_i = Σ_k p_ik log p_ik
            let plogp = tape.mul(p, logp)?;
            let ones_d = tape.constant(Tensor::full(&[tape.value(m).cols()?, 1], 1.0));
            let h = tape.matmul(plogp, ones_d)?;
            let ones_r = tape.constant(Tensor::full(&[1, r], 1.0));
            let h = tape.matmul(h, ones_r)?;
            let logpt = tape.transpose(logp)?;
            let cross = tape.matmul(p, logpt)?;
            let kl = tape.sub(h, cross)?;
            let neg = tape.scale(kl, -1.0)?;
            let e = tape.exp(neg)?;
            tape.sum(e)
        }
    }
}

pub fn loss_modal(tape: &mut Tape, vm: Var, tm: Var, form: ModalForm) -> Result<Var> {
    let a = modal_term(tape, vm, form)?;
    let b = modal_term(tape, tm, form)?;
    tape.add(a, b)
}

/// Mean over rows of `‖w_m·m + w_c·c − x‖²` for one modality.
pub fn integrity_term(tape: &mut Tape, m: Var, c: Var, x: Var, w_m: Var, w_c: Var) -> Result<Var> {
    let rows = tape.value(x).rows()?;
    let a = tape.scalar_mul(w_m, m)?;
    let b = tape.scalar_mul(w_c, c)?;
    let rec = tape.add(a, b)?;
    let err = tape.sub(rec, x)?;
    let sq = tape.mul(err, err)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Reconstruction of both modalities from modal plus semantic components.
#[allow(clippy::too_many_arguments)]
pub fn loss_integrity(
    tape: &mut Tape,
    vm: Var,
    vs: Var,
    v: Var,
    tm: Var,
    ts: Var,
    t: Var,
    w_m: Var,
    w_s: Var,
) -> Result<Var> {
    let a = integrity_term(tape, vm, vs, v, w_m, w_s)?;
    let b = integrity_term(tape, tm, ts, t, w_m, w_s)?;
    tape.add(a, b)
}

/// Reconstruction from modal plus x-semantic components.
#[allow(clippy::too_many_arguments)]
pub fn loss_x_integrity(
    tape: &mut Tape,
    vm: Var,
    vx: Var,
    v: Var,
    tm: Var,
    tx: Var,
    t: Var,
    w_m: Var,
    w_x: Var,
) -> Result<Var> {
    loss_integrity(tape, vm, vx, v, tm, tx, t, w_m, w_x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub alpha_m: f64,
    /// Splits the integrity budget between `L_f` and `L_x`.
    pub alpha_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_s: 1.0,
            alpha_m: 0.1,
            alpha_f: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_s", self.alpha_s), ("alpha_m", self.alpha_m), ("alpha_f", self.alpha_f)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.alpha_f > 1.0 {
            return Err(Error::Config(format!("alpha_f must lie in [0, 1], got {}", self.alpha_f)));
        }
        Ok(())
    }
}

/// The individual terms of one step. A `None` term was switched off and is
/// reported as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub l_s: Option<Var>,
    pub l_m: Option<Var>,
    pub l_f: Option<Var>,
    pub l_x: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_m: f64,
    pub l_f: f64,
    pub l_x: f64,
    pub total: f64,
}

/// `α_s·L_s + α_m·L_m + α_f·L_f + (1−α_f)·L_x` over the active terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let value = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item()).transpose();
    let mut b = LossBreakdown {
        l_s: value(tape, terms.l_s)?.unwrap_or(0.0),
        l_m: value(tape, terms.l_m)?.unwrap_or(0.0),
        l_f: value(tape, terms.l_f)?.unwrap_or(0.0),
        l_x: value(tape, terms.l_x)?.unwrap_or(0.0),
        total: 0.0,
    };
    let mut total: Option<Var> = None;
    for (term, w) in [
        (terms.l_s, weights.alpha_s),
        (terms.l_m, weights.alpha_m),
        (terms.l_f, weights.alpha_f),
        (terms.l_x, 1.0 - weights.alpha_f),
    ] {
        let Some(term) = term else { continue };
        let scaled = tape.scale(term, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let Some(total) = total else {
        return contract("every loss term is switched off");
    };
    b.total = tape.value(total).item()?;
    Ok((total, b))
}
