use std::fs;
use std::path::Path;

use crate::nn::{Adam, AdamConfig, CellType, ModelConfig, ModelParams, Scalar};

use super::TrainError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Parameters, optimizer moments and bookkeeping after `epoch` completed
/// epochs. Values are stored as f32, so an f32 trainer resumes bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Hash of the dataset file the run trained on.
    pub fingerprint: u64,
    pub epoch: u32,
    pub params: ModelParams<T>,
    pub adam: Adam<T>,
    /// Seed of the run's generator. Training itself draws no random numbers
    /// after initialization, so this is all the generator state there is.
    pub rng_state: u64,
}

fn cell_code(cell: CellType) -> u8 {
    match cell {
        CellType::Lstm => 0,
        CellType::Gru => 1,
    }
}

fn malformed(reason: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(reason.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(malformed(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Little-endian: magic, version u16, config (cell u8, hidden u32,
    /// layers u32, embedding u32, vocab u32, seed u64), fingerprint u64,
    /// epoch u32, adam step u64, rng state u64, block count u32, then per
    /// block: name length u16, name, ndim u8, dims u32 each, value count
    /// u64, values f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(cell_code(c.cell));
        for v in [c.hidden, c.layers, c.embedding, c.vocab] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());

        let groups = [
            ("", &self.params),
            ("adam.m.", &self.adam.m),
            ("adam.v.", &self.adam.v),
        ];
        let count: usize = groups.iter().map(|(_, p)| p.blocks().len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, p) in groups {
            for (name, shape, values) in p.blocks() {
                let name = format!("{prefix}{name}");
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.push(shape.len() as u8);
                for d in &shape {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a checkpoint; `adam` supplies the optimizer hyperparameters,
    /// which are not stored.
    pub fn from_bytes(bytes: &[u8], adam: AdamConfig) -> Result<Self, TrainError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let cell = match r.u8()? {
            0 => CellType::Lstm,
            1 => CellType::Gru,
            other => return Err(malformed(format!("unknown cell code {other}"))),
        };
        let config = ModelConfig {
            cell,
            hidden: r.u32()? as usize,
            layers: r.u32()? as usize,
            embedding: r.u32()? as usize,
            vocab: r.u32()? as usize,
            seed: r.u64()?,
        };
        config.validate()?;
        let fingerprint = r.u64()?;
        let epoch = r.u32()?;
        let t = r.u64()?;
        let rng_state = r.u64()?;

        let mut params = ModelParams::<T>::zeros(&config);
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        let count = r.u32()? as usize;
        let per_group = params.blocks().len();
        if count != 3 * per_group {
            return Err(malformed(format!(
                "expected {} blocks, found {count}",
                3 * per_group
            )));
        }
        for (prefix, target) in [("", &mut params), ("adam.m.", &mut m), ("adam.v.", &mut v)] {
            let expected: Vec<(String, Vec<usize>)> = target
                .blocks()
                .into_iter()
                .map(|(n, s, _)| (format!("{prefix}{n}"), s))
                .collect();
            for (slot, (want_name, want_shape)) in target.blocks_mut().into_iter().zip(expected) {
                let len = r.u16()? as usize;
                let name = String::from_utf8_lossy(r.take(len)?).into_owned();
                if name != want_name {
                    return Err(malformed(format!(
                        "expected block {want_name}, found {name}"
                    )));
                }
                let ndim = r.u8()? as usize;
                let shape = (0..ndim)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                if shape != want_shape {
                    return Err(malformed(format!(
                        "block {name} has shape {shape:?}, expected {want_shape:?}"
                    )));
                }
                let n = r.u64()? as usize;
                if n != slot.len() {
                    return Err(malformed(format!(
                        "block {name} holds {n} values, expected {}",
                        slot.len()
                    )));
                }
                let raw = r.take(n * 4)?;
                for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
                    *dst = T::from_f32(f32::from_le_bytes(chunk.try_into().unwrap()))
                        .expect("f32 fits scalar");
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            fingerprint,
            epoch,
            params,
            adam: Adam {
                config: adam,
                t,
                m,
                v,
            },
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path, adam: AdamConfig) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, adam)
    }

    /// Checks that this checkpoint belongs to `config` and the dataset with
    /// `fingerprint`.
    pub fn verify(&self, config: &ModelConfig, fingerprint: u64) -> Result<(), TrainError> {
        if self.config.vocab != config.vocab {
            return Err(TrainError::VocabMismatch {
                checkpoint: self.config.vocab,
                expected: config.vocab,
            });
        }
        if self.config != *config {
            return Err(TrainError::ConfigMismatch {
                checkpoint: self.config,
                expected: *config,
            });
        }
        if self.fingerprint != fingerprint {
            return Err(TrainError::FingerprintMismatch {
                checkpoint: self.fingerprint,
                expected: fingerprint,
            });
        }
        Ok(())
    }
}
