//! Versioned, checksummed model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NLEAFCKP"
//! version    u32
//! header_len u64      JSON header bytes
//! payload_len u64     f64 payload bytes
//! header     JSON     spec, shape manifest, config echo, rng state
//! payload    f64 LE   weights, then optimizer moments when present
//! checksum   32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};
use crate::optim::{OptimizerState, TrainConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NLEAFCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8 + 8;
const CHECKSUM: usize = 32;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, decimal-encoded to stay JSON-safe.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::MalformedCheckpoint(format!("rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub train_config: Option<TrainConfig>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self {
            model,
            optimizer: None,
            train_config: None,
            rng: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ShapeEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    shapes: Vec<ShapeEntry>,
    optimizer_step: Option<u64>,
    train_config: Option<TrainConfig>,
    rng: Option<RngState>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let header = Header {
        spec: model.spec().clone(),
        shapes: model
            .param_info()
            .iter()
            .map(|p| ShapeEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        train_config: ckpt.train_config.clone(),
        rng: ckpt.rng.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let mut payload = Vec::new();
    for p in model.params() {
        push_f64s(&mut payload, p.data());
    }
    if let Some(opt) = &ckpt.optimizer {
        let sizes: Vec<usize> = model.params().iter().map(Tensor::len).collect();
        let matches = |bufs: &[Vec<f64>]| bufs.iter().map(Vec::len).eq(sizes.iter().copied());
        if !matches(&opt.first) || !matches(&opt.second) {
            return Err(Error::shape("optimizer buffers do not match model parameters"));
        }
        for buf in opt.first.iter().chain(&opt.second) {
            push_f64s(&mut payload, buf);
        }
    }

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() + CHECKSUM);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

/// Checks, in order: magic, version, declared length, checksum, contents.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::Truncated);
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    if bytes.len() < PREAMBLE + CHECKSUM {
        return Err(Error::Truncated);
    }
    let header_len = read_u64(bytes, 12) as u128;
    let payload_len = read_u64(bytes, 20) as u128;
    let expected = PREAMBLE as u128 + header_len + payload_len + CHECKSUM as u128;
    if (bytes.len() as u128) < expected {
        return Err(Error::Truncated);
    }
    if (bytes.len() as u128) > expected {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() as u128 - expected
        )));
    }
    let body_end = bytes.len() - CHECKSUM;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(Error::ChecksumMismatch);
    }
    let (header_len, payload_len) = (header_len as usize, payload_len as usize);
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + header_len])
        .map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
    let payload = &bytes[PREAMBLE + header_len..PREAMBLE + header_len + payload_len];
    if !payload.len().is_multiple_of(8) {
        return Err(Error::MalformedCheckpoint("payload is not a whole number of f64s".into()));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));

    let mut params = Vec::with_capacity(header.shapes.len());
    for entry in &header.shapes {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(Error::MalformedCheckpoint(format!("payload ends inside `{}`", entry.name)));
        }
        params.push(Tensor::new(&entry.shape, data)?);
    }
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let model = Model::from_parameters(&header.spec, params)
        .map_err(|e| Error::MalformedCheckpoint(format!("spec does not match weights: {e}")))?;
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut take = || -> Result<Vec<Vec<f64>>> {
                sizes
                    .iter()
                    .map(|&n| {
                        let buf: Vec<f64> = values.by_ref().take(n).collect();
                        if buf.len() == n {
                            Ok(buf)
                        } else {
                            Err(Error::MalformedCheckpoint("payload ends inside optimizer state".into()))
                        }
                    })
                    .collect()
            };
            let first = take()?;
            let second = take()?;
            Some(OptimizerState { step, first, second })
        }
        None => None,
    };
    if values.next().is_some() {
        return Err(Error::MalformedCheckpoint("payload has unused values".into()));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        train_config: header.train_config,
        rng: header.rng,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;
    use rand::{Rng, SeedableRng};

    fn model() -> Model {
        build_model(&ModelSpec::desk_scale(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(5);
        let _: u64 = rng.random();
        let mut opt = OptimizerState::for_params(m.params());
        opt.step = 12;
        opt.first[0][0] = 0.125;
        opt.second[3][1] = f64::MIN_POSITIVE;
        let ckpt = Checkpoint {
            model: m.clone(),
            optimizer: Some(opt.clone()),
            train_config: Some(TrainConfig::default()),
            rng: Some(RngState::capture(&rng)),
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
        for (a, b) in back.model.params().iter().zip(m.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.optimizer, Some(opt));
        assert_eq!(back.train_config, Some(TrainConfig::default()));
        let mut restored = back.rng.unwrap().restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn damage_is_detected() {
        let bytes = encode_checkpoint(&Checkpoint::from_model(model())).unwrap();
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 0x01;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::ChecksumMismatch)));

        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(decode_checkpoint(&bumped), Err(Error::VersionUnsupported(2))));

        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
        assert!(matches!(decode_checkpoint(&bytes[..6]), Err(Error::Truncated)));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::MalformedCheckpoint(_))));
    }
}
