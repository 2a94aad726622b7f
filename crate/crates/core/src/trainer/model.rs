use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Ablation, TrainConfig};
use crate::decoupler::{DecoupledSet, Decoupler};
use crate::error::Result;
use crate::nn::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// RNG stream reserved for parameter initialisation.
pub(crate) const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Both decouplers plus the sparsity parameters and reconstruction weights.
///
/// Without the decoupler (the `Dec` ablation) the semantic component is the
/// raw embedding and the modal component is zero.
#[derive(Clone, Debug)]
pub struct CddsModel {
    pub store: ParamStore,
    pub image: Option<Decoupler>,
    pub text: Option<Decoupler>,
    pub alpha_v: ParamId,
    pub alpha_t: ParamId,
    pub w_m: ParamId,
    pub w_s: ParamId,
    pub w_x: ParamId,
    pub n_v: usize,
    pub n_t: usize,
    pub d: usize,
}

impl CddsModel {
    pub fn new(cfg: &TrainConfig, n_v: usize, n_t: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let d = cfg.decoupler.d;
        let (image, text) = if cfg.has(Ablation::Dec) {
            (None, None)
        } else {
            (
                Some(Decoupler::new(&mut store, "image", cfg.decoupler.clone(), Init::Xavier, &mut rng)?),
                Some(Decoupler::new(&mut store, "text", cfg.decoupler.clone(), Init::Xavier, &mut rng)?),
            )
        };
        let alpha_v = store.add("alpha_v", Tensor::full(&[1, d], cfg.alpha_init));
        let alpha_t = store.add("alpha_t", Tensor::full(&[1, d], cfg.alpha_init));
        let w_m = store.add("w_m", Tensor::scalar(0.5));
        let w_s = store.add("w_s", Tensor::scalar(0.5));
        let w_x = store.add("w_x", Tensor::scalar(0.5));
        Ok(Self {
            store,
            image,
            text,
            alpha_v,
            alpha_t,
            w_m,
            w_s,
            w_x,
            n_v,
            n_t,
            d,
        })
    }

    pub fn group(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.n_v,
            Modality::Text => self.n_t,
        }
    }

    /// Noise-free components of stacked item rows.
    pub fn components(&self, rows: &Tensor, modality: Modality) -> Result<DecoupledSet> {
        let dec = match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        };
        match dec {
            Some(dec) => dec.decouple_frozen(&self.store, rows, self.group(modality)),
            None => Ok(DecoupledSet {
                semantic: rows.clone(),
                modal: Tensor::zeros(rows.shape()),
                x_semantic: None,
            }),
        }
    }

    pub fn semantic(&self, rows: &Tensor, modality: Modality) -> Result<Tensor> {
        Ok(self.components(rows, modality)?.semantic)
    }
}
