//! Paired image/text embedding sets: the in-memory batch, the binary
//! container, its JSON sidecar, and a synthetic generator with known
//! semantic and modality factors.

mod container;
mod synthetic;

pub use container::{read_container, write_container, write_manifest, DatasetManifest, MAGIC, VERSION};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticGroundTruth};

use crate::error::{contract, dim_err, Result};
use crate::tensor::Tensor;

/// Image-patch and text-word embeddings plus the image↔text pairing.
///
/// Every image is `n_v × d`, every text `n_t × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub images: Vec<Tensor>,
    pub texts: Vec<Tensor>,
    /// `(image_id, text_id)`.
    pub pairs: Vec<(u32, u32)>,
    pub d: usize,
    pub n_v: usize,
    pub n_t: usize,
}

impl EmbeddingBatch {
    pub fn new(images: Vec<Tensor>, texts: Vec<Tensor>, pairs: Vec<(u32, u32)>) -> Result<Self> {
        let (n_v, d) = match images.first() {
            Some(t) => t.dims2()?,
            None => return dim_err("embedding_batch", "no images"),
        };
        let n_t = match texts.first() {
            Some(t) => t.rows()?,
            None => return dim_err("embedding_batch", "no texts"),
        };
        let batch = Self {
            images,
            texts,
            pairs,
            d,
            n_v,
            n_t,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_texts(&self) -> usize {
        self.texts.len()
    }

    /// Shape and id checks. An empty pair list is allowed here.
    pub fn validate(&self) -> Result<()> {
        for (i, img) in self.images.iter().enumerate() {
            if img.dims2()? != (self.n_v, self.d) {
                return dim_err("embedding_batch", format!("image {i} is {:?}", img.shape()));
            }
        }
        for (j, txt) in self.texts.iter().enumerate() {
            if txt.dims2()? != (self.n_t, self.d) {
                return dim_err("embedding_batch", format!("text {j} is {:?}", txt.shape()));
            }
        }
        for &(i, t) in &self.pairs {
            if i as usize >= self.images.len() || t as usize >= self.texts.len() {
                return contract(format!("pair ({i}, {t}) references a missing item"));
            }
        }
        Ok(())
    }

    /// Stricter check used before training and evaluation: at least one
    /// pair, and every image paired with at least one text.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.pairs.is_empty() {
            return contract("dataset has no image-text pairs");
        }
        let mut seen = vec![false; self.images.len()];
        for &(i, _) in &self.pairs {
            seen[i as usize] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return contract(format!("image {i} has no paired text"));
        }
        Ok(())
    }

    /// Text ids paired with each image.
    pub fn texts_of_image(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.images.len()];
        for &(i, t) in &self.pairs {
            out[i as usize].push(t as usize);
        }
        out
    }

    /// Image ids paired with each text.
    pub fn images_of_text(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.texts.len()];
        for &(i, t) in &self.pairs {
            out[t as usize].push(i as usize);
        }
        out
    }

    /// Keeps the listed images and every text paired with them, re-indexed
    /// densely in the given order.
    pub fn select_images(&self, image_ids: &[usize]) -> Result<Self> {
        let texts_of = self.texts_of_image();
        let mut images = Vec::with_capacity(image_ids.len());
        let mut texts = Vec::new();
        let mut pairs = Vec::new();
        for (new_i, &old_i) in image_ids.iter().enumerate() {
            let Some(img) = self.images.get(old_i) else {
                return contract(format!("image {old_i} does not exist"));
            };
            images.push(img.clone());
            for &old_t in &texts_of[old_i] {
                pairs.push((new_i as u32, texts.len() as u32));
                texts.push(self.texts[old_t].clone());
            }
        }
        Self::new(images, texts, pairs)
    }

    /// Splits into the first `n_first` images and the rest.
    pub fn split_images(&self, n_first: usize) -> Result<(Self, Self)> {
        if n_first == 0 || n_first >= self.images.len() {
            return contract(format!("cannot split {} images at {n_first}", self.images.len()));
        }
        let head: Vec<usize> = (0..n_first).collect();
        let tail: Vec<usize> = (n_first..self.images.len()).collect();
        Ok((self.select_images(&head)?, self.select_images(&tail)?))
    }

    /// All image rows stacked: `(n_images·n_v) × d`.
    pub fn stacked_images(&self) -> Result<Tensor> {
        Tensor::vstack(&self.images.iter().collect::<Vec<_>>())
    }

    pub fn stacked_texts(&self) -> Result<Tensor> {
        Tensor::vstack(&self.texts.iter().collect::<Vec<_>>())
    }

    /// Rounds every value through `f32`, as the container does.
    pub fn to_single_precision(&self) -> Self {
        let round = |t: &Tensor| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            t
        };
        Self {
            images: self.images.iter().map(round).collect(),
            texts: self.texts.iter().map(round).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EmbeddingBatch {
        let img = |v: f64| Tensor::full(&[2, 3], v);
        let txt = |v: f64| Tensor::full(&[1, 3], v);
        EmbeddingBatch::new(
            vec![img(0.0), img(1.0), img(2.0)],
            vec![txt(0.0), txt(0.5), txt(1.0), txt(2.0)],
            vec![(0, 0), (0, 1), (1, 2), (2, 3)],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_pair_ids() {
        let mut b = tiny();
        b.pairs.push((7, 0));
        assert!(b.validate().is_err());
    }

    #[test]
    fn empty_pairs_are_valid_but_not_trainable() {
        let mut b = tiny();
        b.pairs.clear();
        assert!(b.validate().is_ok());
        assert!(b.validate_for_training().is_err());
    }

    #[test]
    fn unpaired_image_is_not_trainable() {
        let mut b = tiny();
        b.pairs.retain(|p| p.0 != 1);
        assert!(b.validate_for_training().is_err());
    }

    #[test]
    fn split_keeps_texts_with_their_images() {
        let (head, tail) = tiny().split_images(1).unwrap();
        assert_eq!(head.n_images(), 1);
        assert_eq!(head.n_texts(), 2);
        assert_eq!(head.pairs, vec![(0, 0), (0, 1)]);
        assert_eq!(tail.n_images(), 2);
        assert_eq!(tail.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(tail.texts[1].data()[0], 2.0);
    }
}
