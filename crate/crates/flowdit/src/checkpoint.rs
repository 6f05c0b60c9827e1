//! Checkpoint files: model configuration, named f32 tensors and optional
//! optimizer/trainer state and normalization statistics.
//!
//! Layout, all little-endian: `"FDCK"`, u32 version, u32 length + UTF-8
//! model config text, u32 record count, records of (u32 name length, name,
//! u32 rank, u64 extents, f32 data). Then a u8 flag for each optional
//! section: trainer state (scalars followed by `adam.m.*` / `adam.v.*`
//! records) and normalization statistics.

use std::fs;
use std::path::Path;

use flowdit_core::flowgen::NormStats;
use flowdit_core::model::{Dit, ModelConfig};
use flowdit_core::nn::ParamStore;
use flowdit_core::optim::AdamState;
use flowdit_core::train::TrainState;
use flowdit_core::Tensor;

use crate::dataset::Cursor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub train: Option<TrainState<f32>>,
    pub stats: Option<NormStats>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_opt(out: &mut Vec<u8>, v: Option<f64>) {
    out.push(u8::from(v.is_some()));
    out.extend_from_slice(&v.unwrap_or(0.0).to_bits().to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn get_record(cur: &mut Cursor) -> Result<(String, Tensor<f32>)> {
    let len = cur.u32()? as usize;
    let name = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
        .to_string();
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .filter(|&n| n <= cur.remaining() / 4)
        .ok_or_else(|| Error::Format(format!("tensor `{name}` of shape {shape:?} exceeds the file")))?;
    let data = cur.f32s(n)?;
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.len())?;
        for (_, name, t) in self.params.iter() {
            put_record(&mut out, name, t)?;
        }

        out.push(u8::from(self.train.is_some()));
        if let Some(st) = &self.train {
            for v in [st.step as u64, st.epoch as u64, st.seed, st.over_threshold as u64, st.adam.step] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&st.lr.to_bits().to_le_bytes());
            put_opt(&mut out, st.best_eval);
            put_opt(&mut out, st.initial_loss);
            for ((_, name, _), (m, v)) in self.params.iter().zip(st.adam.m.iter().zip(&st.adam.v)) {
                put_record(&mut out, &format!("adam.m.{name}"), m)?;
                put_record(&mut out, &format!("adam.v.{name}"), v)?;
            }
        }

        out.push(u8::from(self.stats.is_some()));
        if let Some(s) = &self.stats {
            put_u32(&mut out, s.mean.len())?;
            for v in s.mean.iter().chain(&s.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4).map_err(|_| Error::Version("not a checkpoint: too short".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Version(format!("not a checkpoint: magic {magic:02x?}")));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = cur.u32()? as usize;
        let text = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("model config is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text)?;

        // Parameter names and shapes come from the model built for `config`.
        let (_, mut params) = Dit::init::<f32>(&config, 0)?;
        let n = cur.u32()? as usize;
        if n != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n} tensors, the configured model has {}",
                params.len()
            )));
        }
        for _ in 0..n {
            let (name, t) = get_record(&mut cur)?;
            if params.id(&name).is_none() {
                return Err(Error::Format(format!("unexpected tensor `{name}`")));
            }
            params.set(&name, t)?;
        }

        let train = if cur.u8()? != 0 {
            let step = cur.u64()? as usize;
            let epoch = cur.u64()? as usize;
            let seed = cur.u64()?;
            let over_threshold = cur.u64()? as usize;
            let adam_step = cur.u64()?;
            let lr = cur.f64()?;
            let mut opt = || -> Result<Option<f64>> {
                let flag = cur.u8()?;
                let v = cur.f64()?;
                Ok((flag != 0).then_some(v))
            };
            let best_eval = opt()?;
            let initial_loss = opt()?;
            let mut adam = AdamState::new(&params);
            for (i, (_, name, t)) in params.iter().enumerate() {
                for (prefix, slot) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
                    let (rec, value) = get_record(&mut cur)?;
                    if rec != format!("{prefix}{name}") || value.shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "optimizer record `{rec}` {:?} does not match `{name}` {:?}",
                            value.shape(),
                            t.shape()
                        )));
                    }
                    *slot = value;
                }
            }
            adam.step = adam_step;
            Some(TrainState {
                step,
                epoch,
                adam,
                lr,
                seed,
                best_eval,
                initial_loss,
                over_threshold,
            })
        } else {
            None
        };

        let stats = if cur.u8()? != 0 {
            let c = cur.u32()? as usize;
            let mean = cur.f32s(c)?;
            let std = cur.f32s(c)?;
            Some(NormStats { mean, std })
        } else {
            None
        };
        if cur.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", cur.remaining())));
        }
        Ok(Self {
            config,
            params,
            train,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model structure for the stored configuration.
    pub fn model(&self) -> Result<Dit> {
        Ok(Dit::init::<f32>(&self.config, 0)?.0)
    }
}
