//! Retrieval evaluation on semantic components.
//!
//! An image and a text are scored by averaging, over the image's patches,
//! the best cosine similarity to any of the text's words. One score matrix
//! serves both retrieval directions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::embed_io::EmbeddingBatch;
use crate::error::{contract, dim_err, Result};
use crate::tensor::Tensor;
use crate::trainer::{CddsModel, Modality};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean over patches of the max over words.
    #[default]
    PatchToWord,
    /// Average of the patch-to-word and word-to-patch scores.
    Symmetric,
}

fn unit_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, _) = x.dims2()?;
    Ok((0..n)
        .map(|r| {
            let row = x.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
        })
        .collect())
}

fn mean_max(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|w| p.iter().zip(w).map(|(x, y)| x * y).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / a.len() as f64
}

/// Mean over rows of `v` of the max cosine similarity to any row of `t`.
pub fn similarity(v: &Tensor, t: &Tensor) -> Result<f64> {
    let (nv, dv) = v.dims2()?;
    let (nt, dt) = t.dims2()?;
    if nv == 0 || nt == 0 {
        return contract("similarity of empty inputs");
    }
    if dv != dt {
        return dim_err("similarity", format!("{dv} vs {dt} columns"));
    }
    Ok(mean_max(&unit_rows(v)?, &unit_rows(t)?))
}

/// `n_images × n_texts` scores.
pub fn similarity_matrix(images: &[Tensor], texts: &[Tensor], agg: Aggregation) -> Result<Tensor> {
    if images.is_empty() || texts.is_empty() {
        return contract("similarity matrix needs at least one image and one text");
    }
    let iu: Vec<_> = images.iter().map(unit_rows).collect::<Result<_>>()?;
    let tu: Vec<_> = texts.iter().map(unit_rows).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(images.len() * texts.len());
    for a in &iu {
        for b in &tu {
            out.push(match agg {
                Aggregation::PatchToWord => mean_max(a, b),
                Aggregation::Symmetric => 0.5 * (mean_max(a, b) + mean_max(b, a)),
            });
        }
    }
    Tensor::matrix(images.len(), texts.len(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl DirectionRecall {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        Self {
            r1: recall_at(ranks, 1),
            r5: recall_at(ranks, 5),
            r10: recall_at(ranks, 10),
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: DirectionRecall,
    pub text_to_image: DirectionRecall,
    pub rsum: f64,
    pub n_images: usize,
    pub n_texts: usize,
}

impl RetrievalReport {
    pub fn from_recalls(image_to_text: DirectionRecall, text_to_image: DirectionRecall, n_images: usize, n_texts: usize) -> Self {
        let all: Vec<f64> = image_to_text.values().into_iter().chain(text_to_image.values()).collect();
        Self {
            image_to_text,
            text_to_image,
            rsum: rsum(&all),
            n_images,
            n_texts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,r1,r5,r10\n");
        for (name, r) in [("image_to_text", &self.image_to_text), ("text_to_image", &self.text_to_image)] {
            let _ = writeln!(s, "{name},{},{},{}", r.r1, r.r5, r.r10);
        }
        let _ = writeln!(s, "rsum,{},,", self.rsum);
        s
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}

/// Percentage of queries whose 0-based rank is below `k`.
pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

pub fn rsum(recalls: &[f64]) -> f64 {
    recalls.iter().sum()
}

/// Rank of the best ground-truth candidate: how many candidates score
/// strictly higher than it.
fn best_rank(scores: &[f64], truth: &[usize]) -> usize {
    truth
        .iter()
        .map(|&g| scores.iter().filter(|&&s| s > scores[g]).count())
        .min()
        .unwrap_or(usize::MAX)
}

/// Recalls for both directions from an `n_images × n_texts` score matrix.
pub fn report_from_scores(scores: &Tensor, pairs: &[(u32, u32)]) -> Result<RetrievalReport> {
    let (ni, nt) = scores.dims2()?;
    let mut texts_of = vec![Vec::new(); ni];
    let mut images_of = vec![Vec::new(); nt];
    for &(i, t) in pairs {
        let (i, t) = (i as usize, t as usize);
        if i >= ni || t >= nt {
            return contract(format!("pair ({i}, {t}) outside a {ni}x{nt} score matrix"));
        }
        texts_of[i].push(t);
        images_of[t].push(i);
    }
    let i2t: Vec<usize> = (0..ni)
        .filter(|&i| !texts_of[i].is_empty())
        .map(|i| best_rank(scores.row(i), &texts_of[i]))
        .collect();
    let t2i: Vec<usize> = (0..nt)
        .filter(|&t| !images_of[t].is_empty())
        .map(|t| best_rank(&scores.column(t), &images_of[t]))
        .collect();
    if i2t.is_empty() {
        return contract("no paired queries to evaluate");
    }
    Ok(RetrievalReport::from_recalls(
        DirectionRecall::from_ranks(&i2t),
        DirectionRecall::from_ranks(&t2i),
        ni,
        nt,
    ))
}

/// Noise-free semantic components of every item, one tensor per item.
pub fn semantic_items(model: &CddsModel, data: &EmbeddingBatch) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let split = |rows: Tensor, group: usize, n: usize| -> Result<Vec<Tensor>> {
        (0..n).map(|k| rows.slice_rows(k * group, (k + 1) * group)).collect()
    };
    let vs = model.semantic(&data.stacked_images()?, Modality::Image)?;
    let ts = model.semantic(&data.stacked_texts()?, Modality::Text)?;
    Ok((split(vs, data.n_v, data.n_images())?, split(ts, data.n_t, data.n_texts())?))
}

pub fn evaluate(model: &CddsModel, data: &EmbeddingBatch, agg: Aggregation) -> Result<RetrievalReport> {
    data.validate_for_training()?;
    let (images, texts) = semantic_items(model, data)?;
    let scores = similarity_matrix(&images, &texts, agg)?;
    report_from_scores(&scores, &data.pairs)
}

/// Projection of the rows of `x` onto its two leading principal axes.
pub fn pca_2d(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if n < 2 || d < 2 {
        return contract("a 2-D projection needs at least two rows and two columns");
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| m[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Vec::with_capacity(n * 2);
    for r in 0..n {
        for &k in &order[..2] {
            let axis = eig.eigenvectors.column(k);
            // Fix the sign so the largest-magnitude loading is positive.
            let pivot = (0..d).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs())).unwrap_or(0);
            let sign = if axis[pivot] < 0.0 { -1.0 } else { 1.0 };
            out.push(sign * centered.row(r).iter().zip(axis.iter()).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::matrix(n, 2, out)
}
