//! Checkpoint file format.
//!
//! Layout: magic `SADC`, version byte, precision tag, length-prefixed UTF-8
//! config snapshot, named tensor table for the parameters, a second table
//! for the optimizer momentum buffers, the `u64` iteration counter, and the
//! training RNG state. All integers little-endian; tensors use the tensor
//! dump format.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SADC";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Serializable snapshot of the ChaCha training stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out.extend_from_slice(&self.stream.to_le_bytes());
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 56 {
            return Err(Error::Checkpoint(format!(
                "rng state must be 56 bytes, got {}",
                bytes.len()
            )));
        }
        Ok(Self {
            seed: bytes[..32].try_into().expect("32 bytes"),
            word_pos: u128::from_le_bytes(bytes[32..48].try_into().expect("16 bytes")),
            stream: u64::from_le_bytes(bytes[48..56].try_into().expect("8 bytes")),
        })
    }
}

/// Everything needed to resume training bit-identically.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor<S>)>,
    pub momentum: Vec<(String, Tensor<S>)>,
    pub iteration: u64,
    pub rng: RngState,
}

fn write_table<S: Scalar>(out: &mut Vec<u8>, table: &[(String, Tensor<S>)]) -> Result<()> {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, tensor) in table {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
        tensor.write_dump(out)?;
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_table<S: Scalar>(input: &mut impl Read) -> Result<Vec<(String, Tensor<S>)>> {
    let count = read_u32(input)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let tensor = Tensor::read_dump(input)?;
        out.push((name, tensor));
    }
    Ok(out)
}

impl<S: Scalar> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(S::PRECISION_TAG);
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        write_table(&mut out, &self.params)?;
        write_table(&mut out, &self.momentum)?;
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let rng = self.rng.to_bytes();
        out.extend_from_slice(&(rng.len() as u32).to_le_bytes());
        out.extend_from_slice(&rng);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut input = bytes.as_slice();
        let mut head = [0u8; 6];
        input.read_exact(&mut head)?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad checkpoint magic",
                path.display()
            )));
        }
        if head[4] != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                head[4]
            )));
        }
        if head[5] != S::PRECISION_TAG {
            return Err(Error::Checkpoint(format!(
                "precision mismatch: checkpoint is {}-byte, run is {}-byte",
                head[5],
                S::PRECISION_TAG
            )));
        }
        let cfg_len = read_u32(&mut input)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        input.read_exact(&mut cfg_bytes)?;
        let cfg_text = String::from_utf8(cfg_bytes)
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        let config = TrainConfig::parse_str(&cfg_text, &format!("{}#config", path.display()))?;
        let params = read_table(&mut input)?;
        let momentum = read_table(&mut input)?;
        let mut it = [0u8; 8];
        input.read_exact(&mut it)?;
        let iteration = u64::from_le_bytes(it);
        let rng_len = read_u32(&mut input)? as usize;
        let mut rng_bytes = vec![0u8; rng_len];
        input.read_exact(&mut rng_bytes)?;
        let rng = RngState::from_bytes(&rng_bytes)?;
        Ok(Self {
            config,
            params,
            momentum,
            iteration,
            rng,
        })
    }
}

/// Reads only the precision tag, so callers can pick the scalar type before
/// a full load.
pub fn peek_precision(path: &Path) -> Result<u8> {
    let mut file = std::fs::File::open(path)?;
    let mut head = [0u8; 6];
    file.read_exact(&mut head)?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    Ok(match head[5] {
        4 => 32,
        8 => 64,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown precision tag {other}"
            )))
        }
    })
}
