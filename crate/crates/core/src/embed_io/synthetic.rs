use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Parameters of the synthetic paired-embedding generator.
///
/// Every image draws a latent semantic vector; its patches and the words of
/// each paired text are noisy linear images of that latent under two
/// different maps, shifted by a per-modality offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Number of images (one latent each).
    pub n_pairs: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d: usize,
    pub d_latent: usize,
    pub texts_per_image: usize,
    pub noise_std: f64,
    /// Per-patch / per-word perturbation of the latent before mixing.
    pub jitter_std: f64,
    /// Standard deviation of the modality offset vectors.
    pub offset_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_pairs: 300,
            n_v: 4,
            n_t: 5,
            d: 32,
            d_latent: 4,
            texts_per_image: 1,
            noise_std: 0.05,
            jitter_std: 0.1,
            offset_std: 1.0,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_pairs", self.n_pairs),
            ("n_v", self.n_v),
            ("n_t", self.n_t),
            ("d", self.d),
            ("d_latent", self.d_latent),
            ("texts_per_image", self.texts_per_image),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_latent > self.d {
            return Err(Error::Config(format!("d_latent {} exceeds d {}", self.d_latent, self.d)));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("jitter_std", self.jitter_std),
            ("offset_std", self.offset_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

/// The factors the generator used, for checking what a model recovered.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGroundTruth {
    /// One row per image: `n_pairs × d_latent`.
    pub latent_semantics: Tensor,
    pub modality_offset_image: Vec<f64>,
    pub modality_offset_text: Vec<f64>,
    /// `d_latent × d`; a latent row vector `l` maps to `l · f_v`.
    pub mixing_image: Tensor,
    pub mixing_text: Tensor,
    pub noise_std: f64,
}

impl SyntheticGroundTruth {
    /// `latent · f_v` for image `i`, without jitter, offset or noise.
    pub fn clean_image_signal(&self, i: usize) -> Vec<f64> {
        let (dl, d) = (self.mixing_image.shape()[0], self.mixing_image.shape()[1]);
        gemm(self.latent_semantics.row(i), self.mixing_image.data(), 1, dl, d)
    }

    pub fn clean_text_signal(&self, i: usize) -> Vec<f64> {
        let (dl, d) = (self.mixing_text.shape()[0], self.mixing_text.shape()[1]);
        gemm(self.latent_semantics.row(i), self.mixing_text.data(), 1, dl, d)
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(EmbeddingBatch, SyntheticGroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |n: usize, scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| std_normal.sample(rng) * scale).collect()
    };

    let map_scale = 1.0 / (cfg.d_latent as f64).sqrt();
    let mixing_image = Tensor::matrix(cfg.d_latent, cfg.d, draw(cfg.d_latent * cfg.d, map_scale, &mut rng))?;
    let mixing_text = Tensor::matrix(cfg.d_latent, cfg.d, draw(cfg.d_latent * cfg.d, map_scale, &mut rng))?;
    let offset_image = draw(cfg.d, cfg.offset_std, &mut rng);
    let offset_text = draw(cfg.d, cfg.offset_std, &mut rng);
    let latents = draw(cfg.n_pairs * cfg.d_latent, 1.0, &mut rng);

    let render = |latent: &[f64], rows: usize, mixing: &Tensor, offset: &[f64], rng: &mut ChaCha8Rng| {
        let mut jittered = Vec::with_capacity(rows * cfg.d_latent);
        for _ in 0..rows {
            let j = draw(cfg.d_latent, cfg.jitter_std, rng);
            jittered.extend(latent.iter().zip(j).map(|(l, e)| l + e));
        }
        let mut out = gemm(&jittered, mixing.data(), rows, cfg.d_latent, cfg.d);
        let noise = draw(rows * cfg.d, cfg.noise_std, rng);
        for (r, row) in out.chunks_mut(cfg.d).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += offset[c] + noise[r * cfg.d + c];
            }
        }
        Tensor::matrix(rows, cfg.d, out)
    };

    let mut images = Vec::with_capacity(cfg.n_pairs);
    let mut texts = Vec::with_capacity(cfg.n_pairs * cfg.texts_per_image);
    let mut pairs = Vec::with_capacity(cfg.n_pairs * cfg.texts_per_image);
    for i in 0..cfg.n_pairs {
        let latent = &latents[i * cfg.d_latent..(i + 1) * cfg.d_latent];
        images.push(render(latent, cfg.n_v, &mixing_image, &offset_image, &mut rng)?);
        for _ in 0..cfg.texts_per_image {
            pairs.push((i as u32, texts.len() as u32));
            texts.push(render(latent, cfg.n_t, &mixing_text, &offset_text, &mut rng)?);
        }
    }

    let batch = EmbeddingBatch::new(images, texts, pairs)?;
    let truth = SyntheticGroundTruth {
        latent_semantics: Tensor::matrix(cfg.n_pairs, cfg.d_latent, latents)?,
        modality_offset_image: offset_image,
        modality_offset_text: offset_text,
        mixing_image,
        mixing_text,
        noise_std: cfg.noise_std,
    };
    Ok((batch, truth))
}
