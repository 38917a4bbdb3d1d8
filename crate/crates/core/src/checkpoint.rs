//! `FBBSCKPT` parameter container shared by the velocity predictor and the
//! discriminative baseline.
//!
//! Layout (little-endian): magic, version `u32`, the seven model-config
//! fields, prompt-normalization mean/std `f64`, amplitude scale `f64`, tensor
//! count `u32`, then per tensor a `u16`-prefixed UTF-8 name, `u8` rank,
//! `u32` dims and `f32` row-major data. Raw tensors come first, EMA shadows
//! follow under the same names suffixed `.ema`.
//!
//! A discriminative checkpoint is tagged by `n_heads = 0`; its other config
//! fields describe the regressor (see `baselines`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters, PromptNorm};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FBBSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const EMA_SUFFIX: &str = ".ema";

/// Raw container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub norm: PromptNorm,
    pub amp_scale: f64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn is_discriminative(&self) -> bool {
        self.config.n_heads == 0
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(c.embed_dim as u32).to_le_bytes())?;
        w.write_all(&(c.n_blocks as u32).to_le_bytes())?;
        w.write_all(&(c.n_heads as u32).to_le_bytes())?;
        w.write_all(&c.ffn_multiplier.to_le_bytes())?;
        w.write_all(&(c.n_channels as u32).to_le_bytes())?;
        w.write_all(&(c.seq_len as u32).to_le_bytes())?;
        w.write_all(&(c.cond_dim as u32).to_le_bytes())?;
        w.write_all(&self.norm.mean.to_le_bytes())?;
        w.write_all(&self.norm.std.to_le_bytes())?;
        w.write_all(&self.amp_scale.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::format("tensor name too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[2u8])?;
            w.write_all(&(t.rows as u32).to_le_bytes())?;
            w.write_all(&(t.cols as u32).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader { inner: r };
        if &r.take::<8>()? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig {
            embed_dim: r.u32()? as usize,
            n_blocks: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            ffn_multiplier: r.f64()?,
            n_channels: r.u32()? as usize,
            seq_len: r.u32()? as usize,
            cond_dim: r.u32()? as usize,
        };
        let norm = PromptNorm { mean: r.f64()?, std: r.f64()? };
        let amp_scale = r.f64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take()?) as usize;
            let mut name = vec![0u8; len];
            r.fill(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let rank = r.take::<1>()?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [a, b] => (a, b),
                _ => return Err(Error::format(format!("tensor {name} has unsupported rank {rank}"))),
            };
            let n = rows.checked_mul(cols).ok_or_else(|| Error::format("tensor size overflow"))?;
            if n > (1 << 28) {
                return Err(Error::format(format!("tensor {name} implausibly large")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(r.take()?));
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe)? != 0 {
            return Err(Error::format("trailing bytes after last tensor"));
        }
        Ok(Self { config, norm, amp_scale, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format("file truncated"),
            _ => Error::Io(e),
        })
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// Trained velocity predictor with its EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub norm: PromptNorm,
    pub amp_scale: f64,
    pub raw: ModelParameters<f32>,
    pub ema: ModelParameters<f32>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.raw.config
    }

    /// Weights used for inference.
    pub fn weights(&self, use_ema: bool) -> &ModelParameters<f32> {
        if use_ema {
            &self.ema
        } else {
            &self.raw
        }
    }

    pub fn to_container(&self) -> Container {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.raw.names.iter().cloned().zip(self.raw.tensors.iter().cloned()).collect();
        tensors.extend(self.ema.names.iter().map(|n| format!("{n}{EMA_SUFFIX}")).zip(self.ema.tensors.iter().cloned()));
        Container { config: self.raw.config, norm: self.norm, amp_scale: self.amp_scale, tensors }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.is_discriminative() {
            return Err(Error::format("checkpoint holds a discriminative regressor, not a velocity model"));
        }
        c.config.validate()?;
        let (ema_part, raw_part): (Vec<_>, Vec<_>) = c.tensors.into_iter().partition(|(n, _)| n.ends_with(EMA_SUFFIX));
        let raw = ModelParameters {
            config: c.config,
            names: raw_part.iter().map(|(n, _)| n.clone()).collect(),
            tensors: raw_part.into_iter().map(|(_, t)| t).collect(),
        };
        let ema = ModelParameters {
            config: c.config,
            names: ema_part.iter().map(|(n, _)| n.trim_end_matches(EMA_SUFFIX).to_string()).collect(),
            tensors: ema_part.into_iter().map(|(_, t)| t).collect(),
        };
        raw.check_layout()?;
        ema.check_layout()?;
        Ok(Self { norm: c.norm, amp_scale: c.amp_scale, raw, ema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Hex SHA-256 of a file, recorded in sweep manifests.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
