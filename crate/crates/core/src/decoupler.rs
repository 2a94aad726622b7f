//! Dual-path UNet that splits embeddings into semantic and modal components.
//!
//! A shared encoder of `n_layers` attention blocks produces one output per
//! layer; the deepest is the representation `H`. Gaussian noise is shaped by
//! a bias-free attention block and added to `H` once per draw. Each of the
//! two decoders runs `n_layers` of (attention block, linear) over every
//! perturbed copy, adding the mirrored encoder output before each layer, and
//! the decoded copies are averaged.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Error, Result};
use crate::nn::{AttentionBlock, Binding, Init, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplerConfig {
    /// Depth of the encoder and of each decoder.
    pub n_layers: usize,
    /// Number of noise draws averaged by the decoders.
    pub z: usize,
    pub noise_std: f64,
    pub d: usize,
}

impl Default for DecouplerConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            z: 4,
            noise_std: 0.1,
            d: 32,
        }
    }
}

impl DecouplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.z == 0 || self.d == 0 {
            return Err(Error::Config("n_layers, z and d must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be a nonnegative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderPath {
    Semantic,
    Modal,
}

/// Decoder outputs still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledVars {
    pub semantic: Var,
    pub modal: Var,
}

/// Materialised components for one set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledSet {
    pub semantic: Tensor,
    pub modal: Tensor,
    pub x_semantic: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    block: AttentionBlock,
    proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoupler {
    config: DecouplerConfig,
    encoder: Vec<AttentionBlock>,
    noise_block: AttentionBlock,
    semantic: Vec<DecoderLayer>,
    modal: Vec<DecoderLayer>,
    encoder_params: Range<usize>,
    semantic_params: Range<usize>,
    modal_params: Range<usize>,
}

impl Decoupler {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: DecouplerConfig,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let start = store.len();
        let encoder = (0..config.n_layers)
            .map(|l| AttentionBlock::new(store, &format!("{name}.enc{l}"), d, true, init, rng))
            .collect();
        let noise_block = AttentionBlock::new(store, &format!("{name}.noise"), d, false, init, rng);
        let encoder_params = start..store.len();

        let mut decoder = |path: &str, store: &mut ParamStore| {
            (0..config.n_layers)
                .map(|l| DecoderLayer {
                    block: AttentionBlock::new(store, &format!("{name}.{path}{l}.block"), d, true, init, rng),
                    proj: Linear::new(store, &format!("{name}.{path}{l}.proj"), d, d, true, init, rng),
                })
                .collect::<Vec<_>>()
        };
        let s0 = store.len();
        let semantic = decoder("sem", store);
        let semantic_params = s0..store.len();
        let m0 = store.len();
        let modal = decoder("mod", store);
        let modal_params = m0..store.len();

        Ok(Self {
            config,
            encoder,
            noise_block,
            semantic,
            modal,
            encoder_params,
            semantic_params,
            modal_params,
        })
    }

    pub fn config(&self) -> &DecouplerConfig {
        &self.config
    }

    /// Store indices of the shared encoder (including the noise block).
    pub fn encoder_params(&self) -> Range<usize> {
        self.encoder_params.clone()
    }

    pub fn decoder_params(&self, path: DecoderPath) -> Range<usize> {
        match path {
            DecoderPath::Semantic => self.semantic_params.clone(),
            DecoderPath::Modal => self.modal_params.clone(),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var, group: usize) -> Result<()> {
        let (rows, d) = tape.value(x).dims2()?;
        if d != self.config.d {
            return dim_err("decoupler", format!("input has {d} columns, model expects {}", self.config.d));
        }
        if group == 0 || rows % group != 0 {
            return dim_err("decoupler", format!("{rows} rows do not split into items of {group}"));
        }
        Ok(())
    }

    /// All encoder layer outputs; the last one is `H`.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, x: Var, group: usize) -> Result<Vec<Var>> {
        self.check_input(tape, x, group)?;
        let mut outputs = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(tape, bind, h, group)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// `z` perturbed copies `H + E_n(δ_i)`, `δ_i ~ N(0, noise_std²)`.
    ///
    /// With `noise_std == 0` every copy is the same tape value, returned `z`
    /// times.
    #[allow(clippy::too_many_arguments)]
    pub fn perturb(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: Var,
        z: usize,
        noise_std: f64,
        group: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var>> {
        if z == 0 {
            return contract("perturb needs at least one noise draw");
        }
        let shape = tape.value(h).shape().to_vec();
        if noise_std == 0.0 {
            let zeros = tape.constant(Tensor::zeros(&shape));
            let shaped = self.noise_block.forward(tape, bind, zeros, group)?;
            let perturbed = tape.add(h, shaped)?;
            return Ok(vec![perturbed; z]);
        }
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let numel = shape.iter().product();
        let mut out = Vec::with_capacity(z);
        for _ in 0..z {
            let delta: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
            let delta = tape.constant(Tensor::new(shape.clone(), delta)?);
            let shaped = self.noise_block.forward(tape, bind, delta, group)?;
            out.push(tape.add(h, shaped)?);
        }
        Ok(out)
    }

    /// Decodes every perturbed copy through one path and averages them.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        perturbed: &[Var],
        encoder_outputs: &[Var],
        path: DecoderPath,
        group: usize,
    ) -> Result<Var> {
        let Some(&first) = perturbed.first() else {
            return contract("decode needs at least one perturbed representation");
        };
        if encoder_outputs.len() != self.config.n_layers {
            return contract(format!(
                "decode got {} encoder outputs for {} layers",
                encoder_outputs.len(),
                self.config.n_layers
            ));
        }
        let layers = match path {
            DecoderPath::Semantic => &self.semantic,
            DecoderPath::Modal => &self.modal,
        };
        let run = |tape: &mut Tape, mut h: Var| -> Result<Var> {
            for (k, layer) in layers.iter().enumerate() {
                let skip = encoder_outputs[encoder_outputs.len() - 1 - k];
                h = tape.add(h, skip)?;
                h = layer.block.forward(tape, bind, h, group)?;
                h = layer.proj.forward(tape, bind, h)?;
            }
            Ok(h)
        };
        if perturbed.iter().all(|&p| p == first) {
            return run(tape, first);
        }
        let mut acc = run(tape, first)?;
        for &p in &perturbed[1..] {
            let decoded = run(tape, p)?;
            acc = tape.add(acc, decoded)?;
        }
        tape.scale(acc, 1.0 / perturbed.len() as f64)
    }

    /// Encoder, perturbation and both decoders. The two paths share the
    /// encoder outputs and the perturbed copies.
    pub fn decouple(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        group: usize,
        noise_std: f64,
        rng: &mut impl Rng,
    ) -> Result<DecoupledVars> {
        let enc = self.encode(tape, bind, x, group)?;
        let h = *enc.last().expect("n_layers >= 1");
        let perturbed = self.perturb(tape, bind, h, self.config.z, noise_std, group, rng)?;
        let semantic = self.decode(tape, bind, &perturbed, &enc, DecoderPath::Semantic, group)?;
        let modal = self.decode(tape, bind, &perturbed, &enc, DecoderPath::Modal, group)?;
        Ok(DecoupledVars { semantic, modal })
    }

    /// Noise-free forward without gradients, for inference.
    pub fn decouple_frozen(&self, store: &ParamStore, x: &Tensor, group: usize) -> Result<DecoupledSet> {
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.decouple(&mut tape, &bind, xv, group, 0.0, &mut rng)?;
        Ok(DecoupledSet {
            semantic: tape.value(out.semantic).clone(),
            modal: tape.value(out.modal).clone(),
            x_semantic: None,
        })
    }
}
