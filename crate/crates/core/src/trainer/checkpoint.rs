//! Versioned binary checkpoints.
//!
//! Layout, all little-endian: the magic `SLOC`, a `u32` format version, then
//! records of `[4-byte tag][u64 payload length][payload]` in this order:
//!
//! | tag    | payload                                              |
//! |--------|------------------------------------------------------|
//! | `CONF` | UTF-8 JSON of the training config                    |
//! | `SEED` | `u64` seed                                           |
//! | `STEP` | `u64` completed optimizer steps                      |
//! | `RNGS` | 32-byte ChaCha seed, `u64` stream, `u128` word position |
//! | `PARM` | one per tensor: `u32` name length, name, `u64` count, `f64` values |
//! | `ADMT` | `u64` optimizer step counter                         |
//! | `ADMM` | `u64` count, first moments                           |
//! | `ADMV` | `u64` count, second moments                          |
//!
//! Unknown tags are rejected so a reader never silently drops state.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::TwoStreamParams;
use crate::trainer::optim::AdamState;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SLOC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Serialized [`TrainConfig`], kept verbatim so re-saving is exact.
    pub config_echo: String,
    pub seed: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: TwoStreamParams,
    pub adam: AdamState,
}

fn record(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64_block(values: &[f64]) -> Vec<u8> {
    let mut p = Vec::with_capacity(8 + values.len() * 8);
    p.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        p.extend_from_slice(&v.to_le_bytes());
    }
    p
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!("block of {n} values overruns the record")));
        }
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn config(&self) -> Result<TrainConfig> {
        serde_json::from_str(&self.config_echo)
            .map_err(|e| Error::Checkpoint(format!("config record: {e}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        record(&mut out, b"CONF", self.config_echo.as_bytes());
        record(&mut out, b"SEED", &self.seed.to_le_bytes());
        record(&mut out, b"STEP", &self.step.to_le_bytes());
        let mut rng = Vec::with_capacity(56);
        rng.extend_from_slice(&self.rng.seed);
        rng.extend_from_slice(&self.rng.stream.to_le_bytes());
        rng.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        record(&mut out, b"RNGS", &rng);
        for (name, values) in self.params.tensors() {
            let mut p = Vec::new();
            p.extend_from_slice(&(name.len() as u32).to_le_bytes());
            p.extend_from_slice(name.as_bytes());
            p.extend_from_slice(&f64_block(values));
            record(&mut out, b"PARM", &p);
        }
        record(&mut out, b"ADMT", &self.adam.t.to_le_bytes());
        record(&mut out, b"ADMM", &f64_block(&self.adam.m));
        record(&mut out, b"ADMV", &f64_block(&self.adam.v));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut config_echo = None;
        let mut seed = None;
        let mut step = None;
        let mut rng = None;
        let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
        let mut adam_t = None;
        let mut adam_m = None;
        let mut adam_v = None;
        while !r.done() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            if len > bytes.len() - r.pos {
                return Err(Error::Checkpoint(format!(
                    "record {} overruns the file",
                    String::from_utf8_lossy(&tag)
                )));
            }
            let mut p = Reader {
                buf: r.take(len)?,
                pos: 0,
            };
            match &tag {
                b"CONF" => {
                    let s = std::str::from_utf8(p.buf)
                        .map_err(|_| Error::Checkpoint("config record is not UTF-8".into()))?;
                    config_echo = Some(s.to_string());
                    p.pos = p.buf.len();
                }
                b"SEED" => seed = Some(p.u64()?),
                b"STEP" => step = Some(p.u64()?),
                b"RNGS" => {
                    let s: [u8; 32] = p.take(32)?.try_into().unwrap();
                    rng = Some(RngState {
                        seed: s,
                        stream: p.u64()?,
                        word_pos: p.u128()?,
                    });
                }
                b"PARM" => {
                    let n = p.u32()? as usize;
                    let name = String::from_utf8(p.take(n)?.to_vec())
                        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
                    tensors.push((name, p.f64s()?));
                }
                b"ADMT" => adam_t = Some(p.u64()?),
                b"ADMM" => adam_m = Some(p.f64s()?),
                b"ADMV" => adam_v = Some(p.f64s()?),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown record tag {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
            if !p.done() {
                return Err(Error::Checkpoint(format!(
                    "record {} has trailing bytes",
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("missing {what} record"));
        let config_echo = config_echo.ok_or_else(|| missing("CONF"))?;
        let config: TrainConfig = serde_json::from_str(&config_echo)
            .map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
        config.model.validate()?;
        // Shapes come from the config; values from the records.
        let mut params = TwoStreamParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        {
            let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
            if names.len() != tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "{} parameter tensors for a model with {}",
                    tensors.len(),
                    names.len()
                )));
            }
            for ((dst, want), (name, values)) in params.tensors_mut().into_iter().zip(&names).zip(tensors) {
                if &name != want || values.len() != dst.len() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} ({} values) does not match {want} ({} values)",
                        values.len(),
                        dst.len()
                    )));
                }
                *dst = values;
            }
        }
        let adam = AdamState {
            m: adam_m.ok_or_else(|| missing("ADMM"))?,
            v: adam_v.ok_or_else(|| missing("ADMV"))?,
            t: adam_t.ok_or_else(|| missing("ADMT"))?,
        };
        let n = params.num_params();
        if adam.m.len() != n || adam.v.len() != n {
            return Err(Error::Checkpoint("optimizer moments do not match the model".into()));
        }
        Ok(Self {
            version,
            config_echo,
            seed: seed.ok_or_else(|| missing("SEED"))?,
            step: step.ok_or_else(|| missing("STEP"))?,
            rng: rng.ok_or_else(|| missing("RNGS"))?,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::decode(&std::fs::read(path)?)
    }
}
