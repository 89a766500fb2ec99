//! Binary checkpoint format.
//!
//! ```text
//! "NNCK" | version u8 | precision u8 (0 = f64, 1 = f32) | seed u64
//! header_len u32 | header JSON (model config + metadata)
//! param_count u32 | per param: name_len u16, name, ndim u8, dims u32.., values
//! has_optimizer u8 | [step u64, beta1 f64, beta2 f64, eps f64, m.., v.. as f64]
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::architectures::{ModelConfig, ResidualChainModel};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;
use crate::trainer::Adam;

const MAGIC: &[u8; 4] = b"NNCK";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    /// True when the layer plan is the built-in default for the variant.
    default_layer_plan: bool,
}

pub fn to_bytes(model: &ResidualChainModel, adam: Option<&Adam>, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(match precision {
        Precision::F64 => 0,
        Precision::F32 => 1,
    });
    out.extend_from_slice(&model.seed().to_le_bytes());
    let cfg = model.config();
    let header = Header { model: cfg.clone(), default_layer_plan: cfg.layers == ModelConfig::default_for(cfg.variant).layers };
    let json = serde_json::to_vec(&header).expect("header serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            match precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    match adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for x in [a.beta1, a.beta2, a.eps] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for t in a.m.iter().chain(&a.v) {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn values(&mut self, n: usize, precision: Precision) -> std::result::Result<Vec<f64>, CheckpointError> {
        let width = if precision == Precision::F64 { 8 } else { 4 };
        let bytes = self.take(n.checked_mul(width).ok_or(CheckpointError::Truncated)?)?;
        Ok(match precision {
            Precision::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Precision::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        })
    }
}

/// Model and optimizer state decoded from a checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: ResidualChainModel,
    pub adam: Option<Adam>,
    pub precision: Precision,
    pub default_layer_plan: bool,
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    Ok(parse(buf)?)
}

fn parse(buf: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 {
        return Err(if MAGIC.starts_with(buf) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let precision = match r.u8()? {
        0 => Precision::F64,
        1 => Precision::F32,
        p => return Err(CheckpointError::Malformed(format!("unknown precision flag {p}"))),
    };
    let seed = r.u64()?;
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let mut model = ResidualChainModel::build(header.model, seed)
        .map_err(|e| CheckpointError::Malformed(format!("stored config invalid: {e}")))?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(CheckpointError::Malformed(format!("{count} parameter tensors stored, model has {}", model.params().len())));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let expected = model.params().get(id).shape().to_vec();
        if name != model.params().name(id) || shape != expected {
            return Err(CheckpointError::ShapeMismatch { name, file: shape, model: expected });
        }
        let values = r.values(shape.iter().product(), precision)?;
        *model.params_mut().get_mut(id) = Tensor::new(shape, values).expect("length checked");
    }
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let mut adam = Adam::new(model.params());
            adam.step = r.u64()?;
            adam.beta1 = r.f64()?;
            adam.beta2 = r.f64()?;
            adam.eps = r.f64()?;
            for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
                let values = r.values(t.len(), Precision::F64)?;
                t.data_mut().copy_from_slice(&values);
            }
            Some(adam)
        }
        f => return Err(CheckpointError::Malformed(format!("unknown optimizer flag {f}"))),
    };
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { model, adam, precision, default_layer_plan: header.default_layer_plan })
}

pub fn save_checkpoint(path: &Path, model: &ResidualChainModel, adam: Option<&Adam>, precision: Precision) -> Result<()> {
    std::fs::write(path, to_bytes(model, adam, precision))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires its config to equal `expected`.
pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config() != expected {
        return Err(Error::Checkpoint(CheckpointError::ConfigMismatch(format!(
            "checkpoint holds {:?} with {} bits x {} iterations, expected {:?} with {} bits x {} iterations",
            ck.model.config().variant,
            ck.model.config().bits_per_iteration,
            ck.model.config().max_iterations,
            expected.variant,
            expected.bits_per_iteration,
            expected.max_iterations
        ))));
    }
    Ok(ck)
}
