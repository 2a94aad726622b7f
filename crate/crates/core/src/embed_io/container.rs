//! Binary embedding container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "CDDS"
//! u16     version (1)
//! u32 × 6 n_images, n_texts, n_v, n_t, d, n_pairs
//! f32 ×   n_images·n_v·d   image rows, row-major, image by image
//! f32 ×   n_texts·n_t·d    text rows
//! u32 × 2 per pair         (image_id, text_id)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingBatch, SyntheticConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDDS";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 6 * 4;

pub fn encode_container(batch: &EmbeddingBatch) -> Result<Vec<u8>> {
    batch.validate()?;
    let counts = [
        batch.n_images(),
        batch.n_texts(),
        batch.n_v,
        batch.n_t,
        batch.d,
        batch.pairs.len(),
    ];
    let payload = (batch.n_images() * batch.n_v + batch.n_texts() * batch.n_t) * batch.d;
    let mut out = Vec::with_capacity(HEADER_LEN + payload * 4 + batch.pairs.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for c in counts {
        let c = u32::try_from(c).map_err(|_| Error::Format(format!("count {c} exceeds u32")))?;
        out.extend_from_slice(&c.to_le_bytes());
    }
    for t in batch.images.iter().chain(&batch.texts) {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &(i, t) in &batch.pairs {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn matrices(&mut self, count: usize, rows: usize, d: usize, what: &str) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = self.take(rows * d * 4, what)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            out.push(Tensor::matrix(rows, d, data)?);
        }
        Ok(out)
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<EmbeddingBatch> {
    if bytes.len() < 6 {
        return Err(Error::Format("file too short for a container header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut r = Reader { bytes, pos: 6 };
    let mut counts = [0usize; 6];
    for c in counts.iter_mut() {
        *c = r.u32("header")? as usize;
    }
    let [n_images, n_texts, n_v, n_t, d, n_pairs] = counts;
    if [n_images, n_texts, n_v, n_t, d].contains(&0) {
        return Err(Error::Corrupt(format!("zero dimension in header {counts:?}")));
    }
    let images = r.matrices(n_images, n_v, d, "image payload")?;
    let texts = r.matrices(n_texts, n_t, d, "text payload")?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        pairs.push((r.u32("pairs")?, r.u32("pairs")?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let batch = EmbeddingBatch {
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

pub fn write_container(batch: &EmbeddingBatch, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_container(batch)?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<EmbeddingBatch> {
    decode_container(&fs::read(path)?)
}

/// Human-readable sidecar describing a container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub container_version: u16,
    pub n_images: usize,
    pub n_texts: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d: usize,
    pub pairs: Vec<(u32, u32)>,
    pub seed: Option<u64>,
    pub generator: Option<SyntheticConfig>,
}

impl DatasetManifest {
    pub fn describe(batch: &EmbeddingBatch, generator: Option<&SyntheticConfig>) -> Self {
        Self {
            container_version: VERSION,
            n_images: batch.n_images(),
            n_texts: batch.n_texts(),
            n_v: batch.n_v,
            n_t: batch.n_t,
            d: batch.d,
            pairs: batch.pairs.clone(),
            seed: generator.map(|g| g.seed),
            generator: generator.cloned(),
        }
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}
