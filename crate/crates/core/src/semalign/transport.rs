//! One-dimensional quantile transport between empirical distributions.
//!
//! A query value is located in the sorted source by its mid-rank, linearly
//! interpolated between neighbouring source values and clamped outside the
//! source range. The resulting fractional rank is rescaled to the target's
//! length and read off the sorted target by linear interpolation.

use crate::error::{contract, dim_err, Result};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// Fractional 0-based rank of `c` within `sorted`.
pub fn transport_position(sorted: &[f64], c: f64) -> f64 {
    let n = sorted.len();
    let lo = sorted.partition_point(|&v| v < c);
    let hi = sorted.partition_point(|&v| v <= c);
    if hi > lo {
        return (lo + hi - 1) as f64 / 2.0;
    }
    if lo == 0 {
        return 0.0;
    }
    if lo == n {
        return (n - 1) as f64;
    }
    let (a, b) = (sorted[lo - 1], sorted[lo]);
    (lo - 1) as f64 + (c - a) / (b - a)
}

/// Maps a source rank onto a target of length `m`, returning the lower
/// order-statistic index and the interpolation weight of the next one.
fn target_slot(u: f64, n: usize, m: usize) -> (usize, f64) {
    if m == 1 {
        return (0, 0.0);
    }
    let pos = if n == 1 { 0.5 * (m - 1) as f64 } else { u * (m - 1) as f64 / (n - 1) as f64 };
    let a = (pos.floor() as usize).min(m - 2);
    (a, pos - a as f64)
}

/// Value at fractional index `pos` of a sorted list.
pub fn interpolate_sorted(sorted: &[f64], pos: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let a = (pos.floor().max(0.0) as usize).min(m - 2);
    let lambda = pos - a as f64;
    (1.0 - lambda) * sorted[a] + lambda * sorted[a + 1]
}

fn check_sorted(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return contract(format!("quantile transport: empty {name}"));
    }
    if v.windows(2).any(|w| w[0] > w[1]) || v.iter().any(|x| !x.is_finite()) {
        return contract(format!("quantile transport: {name} must be sorted and finite"));
    }
    Ok(())
}

pub fn quantile_transport(source: &[f64], query: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_sorted("source", source)?;
    check_sorted("target", target)?;
    let (n, m) = (source.len(), target.len());
    Ok(query
        .iter()
        .map(|&c| {
            let (a, lambda) = target_slot(transport_position(source, c), n, m);
            if m == 1 {
                target[0]
            } else {
                (1.0 - lambda) * target[a] + lambda * target[a + 1]
            }
        })
        .collect())
}

fn sorted_copy(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

/// Item layout for an x-semantic construction: source rows in items of
/// `group_s`, target rows in items of `group_t`, and the target item paired
/// with each source item.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub group_s: usize,
    pub group_t: usize,
    pub pairing: Vec<usize>,
    /// Rank queries against the whole source column rather than the item's
    /// own rows.
    pub pooled_source: bool,
}

impl TransportPlan {
    fn check(&self, source: &Tensor, target: &Tensor, weights: &Tensor) -> Result<usize> {
        let (rs, d) = source.dims2()?;
        let (rt, dt) = target.dims2()?;
        if d != dt || weights.dims2()? != (d, d) {
            return dim_err("transport_mix", format!("source {d} cols, target {dt}, weights {:?}", weights.shape()));
        }
        if self.group_s == 0 || self.group_t == 0 || rs % self.group_s != 0 || rt % self.group_t != 0 {
            return dim_err("transport_mix", "row counts do not split into items");
        }
        if rs / self.group_s != self.pairing.len() {
            return dim_err("transport_mix", "one pairing entry per source item required");
        }
        let nt = rt / self.group_t;
        if let Some(&p) = self.pairing.iter().find(|&&p| p >= nt) {
            return contract(format!("pairing refers to target item {p} of {nt}"));
        }
        Ok(d)
    }
}

/// Straightforward composition of [`quantile_transport`]: column `i` of each
/// source item becomes `Σ_j W_ij · transport(col i → paired target col j)`.
pub fn x_semantic_reference(source: &Tensor, target: &Tensor, weights: &Tensor, plan: &TransportPlan) -> Result<Tensor> {
    let d = plan.check(source, target, weights)?;
    let (gs, gt) = (plan.group_s, plan.group_t);
    let mut out = Tensor::zeros(source.shape());
    for (k, &p) in plan.pairing.iter().enumerate() {
        let item = source.slice_rows(k * gs, (k + 1) * gs)?;
        let paired = target.slice_rows(p * gt, (p + 1) * gt)?;
        for i in 0..d {
            let query = item.column(i);
            let src = sorted_copy(if plan.pooled_source { source.column(i) } else { query.clone() });
            for j in 0..d {
                let w = weights.get(i, j);
                if w == 0.0 {
                    continue;
                }
                let moved = quantile_transport(&src, &query, &sorted_copy(paired.column(j)))?;
                for (r, v) in moved.into_iter().enumerate() {
                    out.data_mut()[(k * gs + r) * d + i] += w * v;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
struct TransportMix {
    plan: TransportPlan,
    d: usize,
    /// Per source row and column: lower target slot and weight of the next.
    slots: Vec<(usize, f64)>,
    /// Per target item and column: local row indices in ascending value order.
    order: Vec<Vec<usize>>,
}

impl TransportMix {
    fn new(source: &Tensor, target: &Tensor, plan: TransportPlan, d: usize) -> Result<Self> {
        let (gs, gt) = (plan.group_s, plan.group_t);
        let mut slots = vec![(0, 0.0); source.numel()];
        let pooled: Vec<Vec<f64>> = if plan.pooled_source {
            (0..d).map(|i| sorted_copy(source.column(i))).collect()
        } else {
            Vec::new()
        };
        for k in 0..plan.pairing.len() {
            let item = source.slice_rows(k * gs, (k + 1) * gs)?;
            for i in 0..d {
                let col = item.column(i);
                let own;
                let src = if plan.pooled_source {
                    &pooled[i]
                } else {
                    own = sorted_copy(col.clone());
                    &own
                };
                for (r, &c) in col.iter().enumerate() {
                    slots[(k * gs + r) * d + i] = target_slot(transport_position(src, c), src.len(), gt);
                }
            }
        }
        let n_targets = target.rows()? / gt;
        let mut order = Vec::with_capacity(n_targets * d);
        for g in 0..n_targets {
            let item = target.slice_rows(g * gt, (g + 1) * gt)?;
            for j in 0..d {
                order.push(argsort(&item.column(j)));
            }
        }
        Ok(Self { plan, d, slots, order })
    }

    /// Target rows (global) and weights feeding `(r, i)` from target column `j`.
    fn taps(&self, r: usize, i: usize, j: usize) -> [(usize, f64); 2] {
        let (gs, gt) = (self.plan.group_s, self.plan.group_t);
        let g = self.plan.pairing[r / gs];
        let (a, lambda) = self.slots[r * self.d + i];
        let ord = &self.order[g * self.d + j];
        let b = (a + 1).min(gt - 1);
        [(g * gt + ord[a], 1.0 - lambda), (g * gt + ord[b], lambda)]
    }

    fn forward(&self, weights: &[f64], target: &[f64], rows: usize) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    let w = weights[i * d + j];
                    if w == 0.0 {
                        continue;
                    }
                    let [(t0, l0), (t1, l1)] = self.taps(r, i, j);
                    acc += w * (l0 * target[t0 * d + j] + l1 * target[t1 * d + j]);
                }
                out[r * d + i] = acc;
            }
        }
        out
    }
}

impl CustomOp for TransportMix {
    fn name(&self) -> &'static str {
        "transport_mix"
    }

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Vec<f64>>> {
        let (weights, target) = (inputs[0].data(), inputs[1].data());
        let d = self.d;
        let rows = grad_out.len() / d;
        let mut dw = vec![0.0; d * d];
        let mut dt = vec![0.0; target.len()];
        for r in 0..rows {
            for i in 0..d {
                let g = grad_out[r * d + i];
                if g == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let [(t0, l0), (t1, l1)] = self.taps(r, i, j);
                    dw[i * d + j] += g * (l0 * target[t0 * d + j] + l1 * target[t1 * d + j]);
                    let w = weights[i * d + j];
                    if w != 0.0 {
                        dt[t0 * d + j] += g * w * l0;
                        dt[t1 * d + j] += g * w * l1;
                    }
                }
            }
        }
        vec![Some(dw), Some(dt)]
    }
}

/// Records the x-semantic construction on the tape.
///
/// `source` holds the values of the modality being re-expressed; its ranks
/// are not differentiated. Gradients flow into `weights` (`d×d`, output
/// column by target column) and into the `target` rows.
pub fn transport_mix(tape: &mut Tape, source: &Tensor, target: Var, weights: Var, plan: TransportPlan) -> Result<Var> {
    let d = plan.check(source, tape.value(target), tape.value(weights))?;
    let rows = source.rows()?;
    let op = TransportMix::new(source, tape.value(target), plan, d)?;
    let out = op.forward(tape.value(weights).data(), tape.value(target).data(), rows);
    tape.custom(&[weights, target], Tensor::matrix(rows, d, out)?, Box::new(op))
}
