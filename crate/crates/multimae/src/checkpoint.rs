//! Versioned binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "MMAE"
//! version u32      (currently 1)
//! seed    u64      base RNG seed of the run
//! step    u64      optimizer steps completed
//! config  u32 len + that many bytes of config text
//! count   u32      number of tensor records
//! record  u32 name len, name bytes, u8 dtype (0 = f32, 1 = f64),
//!         u32 rank, u32 extents..., raw element data
//! ```
//!
//! Model parameters are stored under their own names; optimizer moments under
//! `optim.m.<name>` / `optim.v.<name>`. The seed and step are the complete
//! RNG state: every random draw in training is a pure function of
//! `(seed, step, sample slot)`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MMAE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

/// Everything needed to resume a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<E: Scalar> {
    pub seed: u64,
    pub step: u64,
    pub config_text: String,
    pub tensors: std::collections::BTreeMap<String, Tensor<E>>,
}

fn dtype_tag<E: Scalar>() -> u8 {
    if std::mem::size_of::<E>() == 4 {
        0
    } else {
        1
    }
}

impl<E: Scalar> Checkpoint<E> {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let config = self.config_text.as_bytes();
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(config)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[dtype_tag::<E>()])?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &extent in tensor.shape() {
                w.write_all(&(extent as u32).to_le_bytes())?;
            }
            for &value in tensor.data() {
                let v = value.to_f64().unwrap();
                if dtype_tag::<E>() == 0 {
                    w.write_all(&(v as f32).to_le_bytes())?;
                } else {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor {
            bytes: &bytes,
            offset: 0,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let config_len = r.u32("config length")? as usize;
        let config_bytes = r.take(config_len, "config block")?;
        let config_text = String::from_utf8(config_bytes.to_vec()).map_err(|e| {
            CheckpointError::Format {
                offset: r.offset - config_len,
                message: format!("config block is not utf-8: {e}"),
            }
        })?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_bytes = r.take(name_len, "tensor name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| {
                CheckpointError::Format {
                    offset: r.offset - name_len,
                    message: format!("tensor name is not utf-8: {e}"),
                }
            })?;
            let tag = r.take(1, "dtype tag")?[0];
            if tag != dtype_tag::<E>() {
                return Err(CheckpointError::Format {
                    offset: r.offset - 1,
                    message: format!(
                        "tensor `{name}` has dtype tag {tag}, expected {}",
                        dtype_tag::<E>()
                    ),
                });
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel: usize = shape.iter().product();
            let elem = if tag == 0 { 4 } else { 8 };
            let raw = r.take(numel * elem, &format!("data of `{name}`"))?;
            let data: Vec<E> = raw
                .chunks_exact(elem)
                .map(|c| {
                    let v = if elem == 4 {
                        f32::from_le_bytes(c.try_into().unwrap()) as f64
                    } else {
                        f64::from_le_bytes(c.try_into().unwrap())
                    };
                    E::from_f64(v).unwrap()
                })
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Format {
                offset: r.offset,
                message: e.to_string(),
            })?;
            tensors.insert(name, tensor);
        }
        if r.offset != bytes.len() {
            return Err(CheckpointError::Format {
                offset: r.offset,
                message: format!("{} trailing bytes", bytes.len() - r.offset),
            });
        }
        Ok(Checkpoint {
            seed,
            step,
            config_text,
            tensors,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Format {
                offset: self.offset,
                message: format!(
                    "truncated reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
