//! Central-difference checks of every differentiable operation and loss.

use cdds_core::decoupler::{Decoupler, DecouplerConfig};
use cdds_core::nn::{AttentionBlock, Binding, Linear};
use cdds_core::objectives::{
    integrity_term, loss_integrity, modal_term, pooled_contrastive, semantic_term, total_loss, LossTerms, LossWeights,
    ModalForm, SemanticForm,
};
use cdds_core::semalign::{transport_mix, TransportPlan};
use cdds_core::{CustomOp, Init, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative error between the tape gradient and central differences of
/// `f`, taken over every input entry at once.
fn check<F>(name: &str, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    assert!(tape.value(out).is_scalar(), "{name}: output must be scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (k, t) in inputs.iter().enumerate() {
        for (e, &a) in analytic[k].iter().enumerate().take(t.numel()) {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            diff += (a - numeric).powi(2);
            scale += a * a + numeric * numeric;
        }
    }
    assert!(scale > 1e-12, "{name}: gradient vanishes, check is vacuous");
    let rel = diff.sqrt() / scale.sqrt();
    assert!(rel < TOL, "{name}: relative error {rel:e}");
}

/// Sum of `x ⊙ r` for a fixed random `r`, so every output entry matters.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.value(x).dims2().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_matrix(&mut rng, r, c, -1.0, 1.0));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
pub fn elementwise_ops() {
    let mut g = rng(1);
    let a = rand_matrix(&mut g, 4, 5, -1.0, 1.0);
    let b = rand_matrix(&mut g, 4, 5, -1.0, 1.0);
    let pos = rand_matrix(&mut g, 4, 5, 0.5, 2.0);
    check("add", vec![a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 9)
    });
    check("sub", vec![a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, 9)
    });
    check("mul", vec![a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 9)
    });
    check("scale", vec![a.clone()], |t, v| {
        let y = t.scale(v[0], -2.5).unwrap();
        project(t, y, 9)
    });
    check("add_scalar", vec![a.clone()], |t, v| {
        let y = t.add_scalar(v[0], 0.7).unwrap();
        let y = t.mul(y, y).unwrap();
        project(t, y, 9)
    });
    check("exp", vec![a.clone()], |t, v| {
        let y = t.exp(v[0]).unwrap();
        project(t, y, 9)
    });
    check("log", vec![pos], |t, v| {
        let y = t.log(v[0]).unwrap();
        project(t, y, 9)
    });
    check("sigmoid", vec![a.clone()], |t, v| {
        let y = t.sigmoid(v[0]).unwrap();
        project(t, y, 9)
    });
    check("scalar_mul", vec![Tensor::scalar(0.3), a.clone()], |t, v| {
        let y = t.scalar_mul(v[0], v[1]).unwrap();
        project(t, y, 9)
    });
    check("mean", vec![a.clone()], |t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.mean(y).unwrap()
    });
    check("reshape", vec![a], |t, v| {
        let y = t.reshape(v[0], vec![2, 10]).unwrap();
        project(t, y, 9)
    });
}

#[test]
pub fn matrix_ops() {
    let mut g = rng(2);
    let a = rand_matrix(&mut g, 3, 5, -1.0, 1.0);
    let b = rand_matrix(&mut g, 5, 4, -1.0, 1.0);
    let bias = rand_matrix(&mut g, 1, 5, -1.0, 1.0);
    let sq = rand_matrix(&mut g, 6, 6, -1.0, 1.0);
    check("matmul", vec![a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 3)
    });
    check("transpose", vec![a.clone()], |t, v| {
        let y = t.transpose(v[0]).unwrap();
        project(t, y, 3)
    });
    check("add_row", vec![a.clone(), bias], |t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        let y = t.mul(y, y).unwrap();
        project(t, y, 3)
    });
    check("diag", vec![sq.clone()], |t, v| {
        let y = t.diag(v[0]).unwrap();
        let y = t.exp(y).unwrap();
        t.sum(y).unwrap()
    });
    check("softmax", vec![a.clone()], |t, v| {
        let y = t.softmax(v[0]).unwrap();
        project(t, y, 3)
    });
    check("logsumexp_rows", vec![sq.clone()], |t, v| {
        let y = t.logsumexp_rows(v[0], None).unwrap();
        project(t, y, 3)
    });
    let mask: Vec<bool> = (0..36).map(|k| k % 7 != 0).collect();
    check("logsumexp_rows masked", vec![sq], move |t, v| {
        let y = t.logsumexp_rows(v[0], Some(mask.clone())).unwrap();
        project(t, y, 3)
    });
}

#[test]
pub fn normalisation_ops() {
    let mut g = rng(3);
    let a = rand_matrix(&mut g, 5, 6, -1.0, 1.0);
    let b = rand_matrix(&mut g, 4, 6, -1.0, 1.0);
    check("normalize_rows", vec![a.clone()], |t, v| {
        let y = t.normalize_rows(v[0]).unwrap();
        project(t, y, 4)
    });
    check("l2_norm", vec![a.clone()], |t, v| {
        let y = t.l2_norm(v[0]).unwrap();
        project(t, y, 4)
    });
    check("cosine_similarity", vec![a.clone(), b], |t, v| {
        let y = t.cosine_similarity(v[0], v[1]).unwrap();
        project(t, y, 4)
    });
    check("layer_norm", vec![a], |t, v| {
        let y = t.layer_norm(v[0]).unwrap();
        project(t, y, 4)
    });
}

#[test]
pub fn block_attention_op() {
    let mut g = rng(4);
    let q = rand_matrix(&mut g, 6, 4, -1.0, 1.0);
    let k = rand_matrix(&mut g, 6, 4, -1.0, 1.0);
    let v = rand_matrix(&mut g, 6, 4, -1.0, 1.0);
    check("block_attention", vec![q, k, v], |t, x| {
        let y = t.block_attention(x[0], x[1], x[2], 3).unwrap();
        project(t, y, 5)
    });
}

#[test]
pub fn transport_mix_op() {
    let mut g = rng(5);
    let source = rand_matrix(&mut g, 6, 3, -1.0, 1.0);
    let target = rand_matrix(&mut g, 8, 3, -1.0, 1.0);
    let weights = rand_matrix(&mut g, 3, 3, 0.0, 1.0);
    let plan = TransportPlan { group_s: 3, group_t: 4, pairing: vec![1, 0], pooled_source: false };
    check("transport_mix", vec![target, weights], move |t, v| {
        let y = transport_mix(t, &source, v[0], v[1], plan.clone()).unwrap();
        project(t, y, 6)
    });
}

/// Parameters of a small layer become the checked inputs.
fn check_layer<F>(name: &str, store: &ParamStore, x: Tensor, f: F)
where
    F: Fn(&mut Tape, &Binding, Var) -> Var,
{
    let mut inputs = vec![x];
    inputs.extend((0..store.len()).map(|k| store.get(cdds_core::ParamId(k)).clone()));
    check(name, inputs, |tape, vars| {
        let bind = Binding::from_vars(vars[1..].to_vec());
        f(tape, &bind, vars[0])
    });
}

#[test]
pub fn linear_and_attention_block() {
    let mut g = rng(6);
    let mut store = ParamStore::new();
    Linear::new(&mut store, "lin", 4, 3, true, Init::Xavier, &mut g);
    let x = rand_matrix(&mut g, 4, 4, -1.0, 1.0);
    let lin = Linear { weight: cdds_core::ParamId(0), bias: Some(cdds_core::ParamId(1)) };
    check_layer("linear", &store, x, move |t, b, x| {
        let y = lin.forward(t, b, x).unwrap();
        project(t, y, 7)
    });

    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "blk", 4, true, Init::Xavier, &mut g);
    let x = rand_matrix(&mut g, 6, 4, -1.0, 1.0);
    check_layer("attention block", &store, x, move |t, b, x| {
        let y = block.forward(t, b, x, 3).unwrap();
        project(t, y, 7)
    });
}

#[test]
pub fn decoupler_forward() {
    let mut g = rng(7);
    let mut store = ParamStore::new();
    let cfg = DecouplerConfig { n_layers: 2, z: 2, noise_std: 0.1, d: 4 };
    let dec = Decoupler::new(&mut store, "dec", cfg, Init::Xavier, &mut g).unwrap();
    let x = rand_matrix(&mut g, 6, 4, -1.0, 1.0);
    check_layer("decoupler", &store, x, move |t, b, x| {
        // Same noise draw for every evaluation.
        let mut noise = ChaCha8Rng::seed_from_u64(11);
        let out = dec.decouple(t, b, x, 3, 0.1, &mut noise).unwrap();
        let s = project(t, out.semantic, 8);
        let m = project(t, out.modal, 12);
        t.add(s, m).unwrap()
    });
}

#[test]
pub fn semantic_losses() {
    let mut g = rng(8);
    let x = rand_matrix(&mut g, 6, 5, -1.0, 1.0);
    let s = rand_matrix(&mut g, 6, 5, -1.0, 1.0);
    check("semantic literal", vec![x.clone(), s.clone()], |t, v| {
        semantic_term(t, v[0], v[1], SemanticForm::Literal).unwrap()
    });
    check("semantic infonce", vec![x.clone(), s.clone()], |t, v| {
        semantic_term(t, v[0], v[1], SemanticForm::InfoNce { temperature: 0.2 }).unwrap()
    });
    let ts = rand_matrix(&mut g, 4, 5, -1.0, 1.0);
    check("pooled contrastive", vec![s, ts], |t, v| {
        pooled_contrastive(t, v[0], 3, v[1], 2, SemanticForm::Literal).unwrap()
    });
}

#[test]
pub fn modal_losses() {
    let mut g = rng(9);
    let m = rand_matrix(&mut g, 5, 6, -2.0, 2.0);
    check("modal consistency", vec![m.clone()], |t, v| modal_term(t, v[0], ModalForm::Consistency).unwrap());
    check("modal literal", vec![m], |t, v| modal_term(t, v[0], ModalForm::Literal).unwrap());
}

#[test]
pub fn integrity_and_total() {
    let mut g = rng(10);
    let m = rand_matrix(&mut g, 4, 3, -1.0, 1.0);
    let c = rand_matrix(&mut g, 4, 3, -1.0, 1.0);
    let x = rand_matrix(&mut g, 4, 3, -1.0, 1.0);
    check(
        "integrity",
        vec![m.clone(), c.clone(), x.clone(), Tensor::scalar(0.4), Tensor::scalar(0.7)],
        |t, v| integrity_term(t, v[0], v[1], v[2], v[3], v[4]).unwrap(),
    );
    let inputs = vec![m.clone(), c.clone(), x.clone(), c, m, x, Tensor::scalar(0.4), Tensor::scalar(0.7)];
    check("total", inputs, |t, v| {
        let l_s = semantic_term(t, v[1], v[3], SemanticForm::Literal).unwrap();
        let l_m = modal_term(t, v[0], ModalForm::Consistency).unwrap();
        let l_f = loss_integrity(t, v[0], v[1], v[2], v[4], v[3], v[5], v[6], v[7]).unwrap();
        let l_x = integrity_term(t, v[0], v[3], v[2], v[6], v[7]).unwrap();
        let terms = LossTerms { l_s: Some(l_s), l_m: Some(l_m), l_f: Some(l_f), l_x: Some(l_x) };
        total_loss(t, &terms, &LossWeights::default()).unwrap().0
    });
}

/// Every finite-difference case, for runners outside the test harness.
pub const CASES: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("matrix_ops", matrix_ops),
    ("normalisation_ops", normalisation_ops),
    ("block_attention_op", block_attention_op),
    ("transport_mix_op", transport_mix_op),
    ("linear_and_attention_block", linear_and_attention_block),
    ("decoupler_forward", decoupler_forward),
    ("semantic_losses", semantic_losses),
    ("modal_losses", modal_losses),
    ("integrity_and_total", integrity_and_total),
];

/// Doubles its input but claims the derivative is 3.
#[derive(Debug)]
struct WrongDouble;

impl CustomOp for WrongDouble {
    fn name(&self) -> &'static str {
        "wrong_double"
    }

    fn backward(&self, grad_out: &[f64], _: &[&Tensor], _: &Tensor) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.iter().map(|g| 3.0 * g).collect())]
    }
}

#[test]
#[should_panic(expected = "relative error")]
fn checker_rejects_wrong_vjp() {
    let x = rand_matrix(&mut rng(11), 3, 3, -1.0, 1.0);
    check("wrong", vec![x], |t, v| {
        let doubled = t.value(v[0]).data().iter().map(|a| 2.0 * a).collect();
        let out = Tensor::matrix(3, 3, doubled).unwrap();
        let y = t.custom(&[v[0]], out, Box::new(WrongDouble)).unwrap();
        project(t, y, 1)
    });
}
