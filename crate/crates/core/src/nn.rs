//! Parameter storage and the two layer types the decoupler is built from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// A binding over vars the caller recorded, one per parameter in store
    /// order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        Binding { vars }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        let vars = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        Binding { vars }
    }

    /// Copies gradients from a differentiated tape. Parameters that were not
    /// reached by the loss end up with no gradient at all.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            let grad = if tape.is_reached(v) {
                tape.grad(v).map(<[f64]>::to_vec)
            } else {
                None
            };
            p.tensor.set_grad(grad)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
}

fn init_matrix(rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    if init == Init::Xavier {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
    }
    t
}

/// `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_matrix(fan_in, fan_out, init, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bind.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, bind.var(b)),
            None => Ok(y),
        }
    }
}

/// Pre-norm transformer layer: single-head attention within each item's rows
/// followed by a two-layer SiLU feed-forward, both with residual connections.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ff_in: Linear,
    ff_out: Linear,
}

pub const FFN_MULT: usize = 2;

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let mut lin = |suffix: &str, i: usize, o: usize, b: bool| {
            Linear::new(store, &format!("{name}.{suffix}"), i, o, b, init, rng)
        };
        Self {
            query: lin("q", d, d, false),
            key: lin("k", d, d, false),
            value: lin("v", d, d, false),
            out: lin("o", d, d, bias),
            ff_in: lin("ff1", d, FFN_MULT * d, bias),
            ff_out: lin("ff2", FFN_MULT * d, d, bias),
        }
    }

    /// `x` holds items stacked row-wise, `group` rows per item.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var, group: usize) -> Result<Var> {
        let h = tape.layer_norm(x)?;
        let q = self.query.forward(tape, bind, h)?;
        let k = self.key.forward(tape, bind, h)?;
        let v = self.value.forward(tape, bind, h)?;
        let a = tape.block_attention(q, k, v, group)?;
        let a = self.out.forward(tape, bind, a)?;
        let x1 = tape.add(x, a)?;

        let h = tape.layer_norm(x1)?;
        let f = self.ff_in.forward(tape, bind, h)?;
        let gate = tape.sigmoid(f)?;
        let f = tape.mul(f, gate)?;
        let f = self.ff_out.forward(tape, bind, f)?;
        tape.add(x1, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", 4, true, Init::Xavier, &mut rng);
        let x = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let y = block.forward(&mut tape, &bind, xv, 3).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[6, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn bias_free_block_maps_zero_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "n", 5, false, Init::Xavier, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let z = tape.constant(Tensor::zeros(&[4, 5]));
        let y = block.forward(&mut tape, &bind, z, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreached_params_get_no_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let used = Linear::new(&mut store, "a", 2, 2, true, Init::Xavier, &mut rng);
        let unused = Linear::new(&mut store, "b", 2, 2, true, Init::Xavier, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[1, 2], 1.0));
        let y = used.forward(&mut tape, &bind, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &bind).unwrap();
        assert!(store.get(used.weight).grad().is_some());
        assert!(store.get(unused.weight).grad().is_none());
    }
}
