//! Versioned little-endian checkpoint format.
//!
//! ```text
//! "ZTTC" | version u32 | config_len u32 | config UTF-8
//! | count u32 | count × (name_len u32 | name | dtype u8 | ndim u8 | dims u64… | data)
//! ```
//!
//! Optimizer state, when present, is stored as ordinary tensors named
//! `optim.step`, `optim.m.<param>` and `optim.v.<param>`.

use std::collections::BTreeMap;

use thiserror::Error;
use ztt_core::model::{Model, ModelParams};
use ztt_core::numerics::{AdamW, AdamWConfig, DType, Scalar, Tensor};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"ZTTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("checkpoint contents: {0}")]
    Contents(#[from] ztt_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            StoredTensor::F32(t) => t.clone(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, StoredTensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), CheckpointError> {
    let len = u32::try_from(s.len()).map_err(|_| CheckpointError::Corrupt("string too long".into()))?;
    put_u32(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_data<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>, CheckpointError> {
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
        let size = T::DTYPE.size_of();
        let raw = self.take(numel.checked_mul(size).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Ok(Tensor::new(shape, data)?)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config_text)?;
        let count = u32::try_from(self.tensors.len()).map_err(|_| CheckpointError::Corrupt("too many tensors".into()))?;
        put_u32(&mut out, count);
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            out.push(t.dtype().code());
            let shape = t.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| CheckpointError::Corrupt(format!("{name}: rank too high")))?);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => put_data(&mut out, t),
                StoredTensor::F64(t) => put_data(&mut out, t),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_text = r.string()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let code = r.u8()?;
            let dtype =
                DType::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: dtype code {code}")))?;
            let ndim = r.u8()?;
            let shape = (0..ndim)
                .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| CheckpointError::Truncated)))
                .collect::<Result<Vec<_>, _>>()?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(r.tensor(shape)?),
                DType::F64 => StoredTensor::F64(r.tensor(shape)?),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_text, tensors })
    }

    /// Packs a model, and optionally its optimizer state.
    pub fn from_model(config: &RunConfig, model: &Model<f32>, optimizer: Option<&AdamW<f32>>) -> Self {
        let named = model.params.named();
        let mut tensors: Vec<(String, StoredTensor)> =
            named.iter().map(|(n, t)| (n.clone(), StoredTensor::F32((*t).clone()))).collect();
        if let Some(opt) = optimizer {
            tensors.push(("optim.step".into(), StoredTensor::F64(Tensor::new(vec![1], vec![opt.step_count() as f64]).expect("one element"))));
            for (prefix, moments) in [("m", opt.first_moments()), ("v", opt.second_moments())] {
                for ((name, t), m) in named.iter().zip(moments) {
                    let tensor = Tensor::new(t.shape().to_vec(), m.clone()).expect("moment matches parameter");
                    tensors.push((format!("optim.{prefix}.{name}"), StoredTensor::F32(tensor)));
                }
            }
        }
        Self { config_text: config.render(), tensors }
    }

    pub fn run_config(&self) -> Result<RunConfig, CheckpointError> {
        Ok(RunConfig::parse(&self.config_text)?)
    }

    pub fn model(&self) -> Result<Model<f32>, CheckpointError> {
        let config = self.run_config()?.model_config()?;
        let map: BTreeMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("optim."))
            .map(|(n, t)| (n.clone(), t.to_f32()))
            .collect();
        let params = ModelParams::from_named(&config, map)?;
        Ok(Model::new(config, params)?)
    }

    /// Saved optimizer state for `model`, if the checkpoint carries one.
    pub fn optimizer(&self, model: &Model<f32>, config: AdamWConfig) -> Result<Option<AdamW<f32>>, CheckpointError> {
        let find = |name: &str| self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let Some(step) = find("optim.step") else { return Ok(None) };
        let step = match step {
            StoredTensor::F64(t) if t.len() == 1 => t.data()[0] as u64,
            _ => return Err(CheckpointError::Corrupt("optim.step must be one f64".into())),
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, t) in model.params.named() {
            for (prefix, out) in [("m", &mut first), ("v", &mut second)] {
                let key = format!("optim.{prefix}.{name}");
                let m = find(&key).ok_or_else(|| CheckpointError::Corrupt(format!("missing {key}")))?;
                if m.shape() != t.shape() {
                    return Err(CheckpointError::Corrupt(format!("{key} does not match its parameter")));
                }
                out.push(m.to_f32().into_data());
            }
        }
        Ok(Some(AdamW::from_state(config, step, first, second)?))
    }
}
