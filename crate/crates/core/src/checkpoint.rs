//! Versioned little-endian binary checkpoint with a CRC-32 trailer.
//!
//! ```text
//! magic      8 bytes  "SSVICKPT"
//! version    u32      1
//! step       u64
//! n_rngs     u32
//!   seed     32 bytes     ChaCha8 key
//!   stream   u64
//!   word_pos u128
//! head tag   u8       0 = classification, 1 = regression
//!   classes u64 | noise_sigma f64
//! n_layers   u32
//!   out, in  u64, u64
//!   mu       out·in f64, row-major
//!   sigma    out·in f64, row-major
//!   bias     out f64
//!   mask     ceil(out·in / 8) bytes, row-major, LSB first
//! crc32      u32      over every preceding byte
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::layers::BayesLinear;
use crate::net::{Head, VariationalNet};

pub const MAGIC: &[u8; 8] = b"SSVICKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

/// Resumable position of one ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rngs: Vec<RngState>,
    pub net: VariationalNet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            b.extend_from_slice(&r.seed);
            b.extend_from_slice(&r.stream.to_le_bytes());
            b.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        match self.net.head {
            Head::Classification { classes } => {
                b.push(0);
                b.extend_from_slice(&(classes as u64).to_le_bytes());
            }
            Head::Regression { noise_sigma } => {
                b.push(1);
                b.extend_from_slice(&noise_sigma.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.net.layers.len() as u32).to_le_bytes());
        for l in &self.net.layers {
            b.extend_from_slice(&(l.outputs() as u64).to_le_bytes());
            b.extend_from_slice(&(l.inputs() as u64).to_le_bytes());
            for v in l.mu.iter().chain(l.sigma.iter()).chain(l.bias.iter()) {
                b.extend_from_slice(&v.to_le_bytes());
            }
            let mut bits = vec![0u8; l.len().div_ceil(8)];
            for (i, &on) in l.mask.iter().enumerate() {
                if on {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            b.extend_from_slice(&bits);
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let step = r.u64()?;
        let n_rngs = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rngs.min(64));
        for _ in 0..n_rngs {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            rngs.push(RngState {
                seed,
                stream,
                word_pos,
            });
        }
        let head = match r.take(1)?[0] {
            0 => Head::Classification {
                classes: r.u64()? as usize,
            },
            1 => Head::Regression {
                noise_sigma: r.f64()?,
            },
            t => return Err(CheckpointError::Invalid(format!("unknown head tag {t}"))),
        };
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(CheckpointError::Invalid("no layers".into()));
        }
        let mut layers = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let out = r.u64()? as usize;
            let inp = r.u64()? as usize;
            let n = out
                .checked_mul(inp)
                .filter(|&n| n <= body.len())
                .ok_or_else(|| CheckpointError::Invalid(format!("layer shape {out}x{inp}")))?;
            let mu = Array2::from_shape_vec((out, inp), r.f64s(n)?).expect("sized");
            let sigma = Array2::from_shape_vec((out, inp), r.f64s(n)?).expect("sized");
            let bias = Array1::from(r.f64s(out)?);
            let bits = r.take(n.div_ceil(8))?;
            let mask = Array2::from_shape_fn((out, inp), |(i, j)| {
                let k = i * inp + j;
                bits[k / 8] >> (k % 8) & 1 == 1
            });
            layers.push(BayesLinear {
                mu,
                sigma,
                bias,
                mask,
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Invalid(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(CheckpointError::Invalid("layer widths do not chain".into()));
            }
        }
        Ok(Self {
            step,
            rngs,
            net: VariationalNet { layers, head },
        })
    }

    /// Write via a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or(CheckpointError::Truncated(self.pos))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
