//! Checkpoint directory: `checkpoint.json` (header) and `params.bin` (all
//! parameters as one little-endian f64 blob, in header order).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::io::{f64_to_le_bytes, le_bytes_to_f64};
use crate::runner::config::RunConfig;

pub const HEADER: &str = "checkpoint.json";
pub const BLOB: &str = "params.bin";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte key as hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Config(format!("malformed RNG state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (k, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * k..2 * k + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: RunConfig,
    pub step: usize,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub blob_crc32: u32,
}

/// A trained detector with the run state that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub detector: Detector,
    pub step: usize,
    pub rng: RngState,
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ck.detector.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(&f64_to_le_bytes(t.data()));
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: ck.config.clone(),
        step: ck.step,
        rng: ck.rng.clone(),
        tensors,
        blob_bytes: blob.len(),
        blob_crc32: crc32fast::hash(&blob),
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let header_path = dir.join(HEADER);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let header_path = dir.join(HEADER);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&header_path, e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &header_path,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != header.blob_bytes || crc32fast::hash(&blob) != header.blob_crc32 {
        return Err(Error::format(&blob_path, "size or checksum does not match the header"));
    }
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let end = t.offset + len * 8;
        if end > blob.len() {
            return Err(Error::format(&blob_path, format!("tensor {} runs past the blob", t.name)));
        }
        let data = le_bytes_to_f64(&blob[t.offset..end]);
        params.insert(t.name.clone(), Tensor::new(&t.shape, data)?)?;
    }
    let detector = Detector::from_parts(header.config.detector.clone(), params)?;
    header.rng.restore()?;
    Ok(Checkpoint {
        config: header.config,
        detector,
        step: header.step,
        rng: header.rng,
    })
}
