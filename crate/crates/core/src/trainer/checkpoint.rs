//! Checkpoints: a binary tensor file plus a JSON header beside it.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic  "CDDC"
//! u16    version (1)
//! u32    tensor count
//! per tensor: u32 rank, u32 × rank dims, f64 × numel
//! ```
//!
//! Tensors are stored in double precision so a resumed run continues
//! bit-for-bit. Order: parameters, first moments, second moments, then the
//! frozen correlation state if there is one (score matrix, image columns,
//! text columns).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, CddsModel, Moments, TrainConfig, Trainer};
use crate::embed_io::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::semalign::{estimate_column, ColumnDistributions, CorrelationState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDDC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u16,
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub param_names: Vec<String>,
    pub adam_steps: Vec<u64>,
    /// Bin count of the stored correlation state, when present.
    pub correlation_bins: Option<usize>,
    pub correlation_calls: usize,
    pub correlation_refreshes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < 10 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut pos = 6;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?);
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

/// Path of the JSON header belonging to a checkpoint file.
pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensors(&ckpt.tensors)?)?;
    fs::write(header_path(path), serde_json::to_string_pretty(&ckpt.header)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let tensors = decode_tensors(&fs::read(path)?)?;
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(header_path(path))?)?;
    if header.config_hash != header.config.hash() {
        return Err(Error::Corrupt("checkpoint header config hash does not match its config".into()));
    }
    Ok(Checkpoint { header, tensors })
}

fn row_tensor(values: &[f64]) -> Result<Tensor> {
    Tensor::matrix(1, values.len(), values.to_vec())
}

impl Trainer {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let store = &self.model.store;
        let mut tensors: Vec<Tensor> = store.iter().map(|p| p.tensor.clone().with_requires_grad(false)).collect();
        for (p, mom) in store.iter().zip(&self.adam.moments) {
            tensors.push(Tensor::new(p.tensor.shape().to_vec(), mom.m.clone())?);
        }
        for (p, mom) in store.iter().zip(&self.adam.moments) {
            tensors.push(Tensor::new(p.tensor.shape().to_vec(), mom.v.clone())?);
        }
        if let Some(state) = &self.frozen {
            tensors.push(state.s.clone());
            for col in state.image.raw_values.iter().chain(&state.text.raw_values) {
                tensors.push(row_tensor(col)?);
            }
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step,
            n_v: self.model.n_v,
            n_t: self.model.n_t,
            param_names: store.iter().map(|p| p.name.clone()).collect(),
            adam_steps: self.adam.moments.iter().map(|m| m.t).collect(),
            correlation_bins: self.frozen.as_ref().map(|s| s.image.bins),
            correlation_calls: self.correlation_calls,
            correlation_refreshes: self.correlation_refreshes,
        };
        Ok(Checkpoint { header, tensors })
    }

    /// Rebuilds a trainer in the exact state the checkpoint was taken in.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &EmbeddingBatch) -> Result<Self> {
        let h = &ckpt.header;
        let mut trainer = Trainer::new(h.config.clone(), data)?;
        if (trainer.model.n_v, trainer.model.n_t) != (h.n_v, h.n_t) {
            return Err(Error::Config("checkpoint item sizes differ from the data".into()));
        }
        let names: Vec<String> = trainer.model.store.iter().map(|p| p.name.clone()).collect();
        if names != h.param_names || h.adam_steps.len() != names.len() {
            return Err(Error::Corrupt("checkpoint parameters do not match the model".into()));
        }
        let n = names.len();
        let base = 3 * n;
        let d = trainer.model.d;
        let expected = base + if h.correlation_bins.is_some() { 1 + 2 * d } else { 0 };
        if ckpt.tensors.len() != expected {
            return Err(Error::Corrupt(format!("expected {expected} tensors, found {}", ckpt.tensors.len())));
        }
        for (i, p) in trainer.model.store.iter_mut().enumerate() {
            let (value, m, v) = (&ckpt.tensors[i], &ckpt.tensors[n + i], &ckpt.tensors[2 * n + i]);
            if value.shape() != p.tensor.shape() || m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::Corrupt(format!("shape mismatch for {}", p.name)));
            }
            p.tensor = value.clone().with_requires_grad(true);
            trainer.adam.moments[i] = Moments {
                m: m.data().to_vec(),
                v: v.data().to_vec(),
                t: h.adam_steps[i],
            };
        }
        if let Some(bins) = h.correlation_bins {
            let s = ckpt.tensors[base].clone();
            let columns = |range: std::ops::Range<usize>| -> Result<ColumnDistributions> {
                let mut out = ColumnDistributions { bins, columns: Vec::new(), raw_values: Vec::new() };
                for t in &ckpt.tensors[range] {
                    let (hist, raw) = estimate_column(t.data().to_vec(), bins)?;
                    out.columns.push(hist);
                    out.raw_values.push(raw);
                }
                Ok(out)
            };
            let image = columns(base + 1..base + 1 + d)?;
            let text = columns(base + 1 + d..base + 1 + 2 * d)?;
            trainer.frozen = Some(CorrelationState { s, image, text });
        }
        trainer.step = h.step;
        trainer.correlation_calls = h.correlation_calls;
        trainer.correlation_refreshes = h.correlation_refreshes;
        Ok(trainer)
    }
}

impl CddsModel {
    /// Model parameters from a checkpoint, without optimizer state.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        let mut model = CddsModel::new(&h.config, h.n_v, h.n_t)?;
        if model.store.len() != h.param_names.len() || ckpt.tensors.len() < model.store.len() {
            return Err(Error::Corrupt("checkpoint parameters do not match the model".into()));
        }
        for (p, t) in model.store.iter_mut().zip(&ckpt.tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::Corrupt(format!("shape mismatch for {}", p.name)));
            }
            p.tensor = t.clone().with_requires_grad(true);
        }
        Ok(model)
    }
}

impl AdamState {
    pub fn total_updates(&self) -> u64 {
        self.moments.iter().map(|m| m.t).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoupler::DecouplerConfig;
    use crate::embed_io::{generate_synthetic, SyntheticConfig};
    use crate::trainer::CorrelationMode;

    fn setup(mode: CorrelationMode) -> (EmbeddingBatch, TrainConfig) {
        let data = generate_synthetic(&SyntheticConfig {
            n_pairs: 16,
            n_v: 3,
            n_t: 4,
            d: 6,
            d_latent: 2,
            seed: 4,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .0;
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            decoupler: DecouplerConfig { n_layers: 1, z: 2, noise_std: 0.1, d: 6 },
            bins: 6,
            correlation_mode: mode,
            ..TrainConfig::default()
        };
        (data, cfg)
    }

    #[test]
    fn resume_is_bit_identical() {
        for mode in CorrelationMode::ALL {
            let (data, cfg) = setup(mode);
            let mut straight = Trainer::new(cfg.clone(), &data).unwrap();
            straight.run(&data).unwrap();

            let mut first = Trainer::new(cfg, &data).unwrap();
            first.run_until(&data, 5).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&first.checkpoint().unwrap(), &path).unwrap();
            let mut resumed = Trainer::from_checkpoint(&load_checkpoint(&path).unwrap(), &data).unwrap();
            resumed.run(&data).unwrap();

            let tail: Vec<_> = straight.history[5..].iter().map(|r| r.loss).collect();
            let again: Vec<_> = resumed.history.iter().map(|r| r.loss).collect();
            assert_eq!(tail, again, "{mode}");
            assert_eq!(straight.correlation_calls, resumed.correlation_calls);
        }
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(matches!(decode_tensors(b"XXXX\x01\x00\0\0\0\0"), Err(Error::Format(_))));
        let good = encode_tensors(&[Tensor::scalar(1.0), Tensor::zeros(&[2, 3])]).unwrap();
        assert_eq!(decode_tensors(&good).unwrap().len(), 2);
        assert!(matches!(decode_tensors(&good[..good.len() - 1]), Err(Error::Corrupt(_))));
        let mut bumped = good.clone();
        bumped[4] = 2;
        assert!(matches!(decode_tensors(&bumped), Err(Error::Format(_))));
    }
}
