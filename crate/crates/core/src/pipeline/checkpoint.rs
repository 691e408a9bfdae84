//! CFCK checkpoints.
//!
//! Layout: `"CFCK"` | version `u8 = 1` | `u32` LE entry count | entries of
//! (`u16` LE name length, UTF-8 name, CFT tensor blob). Parameters are
//! stored under their own names; optimizer state, when present, under
//! `opt.step`, `opt.m.<name>` and `opt.v.<name>`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::io::{self, AnyTensor};
use crate::ndgrad::{AdamW, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet<f32>) -> Self {
        Checkpoint { entries: params.iter().map(|(n, t)| (n.to_string(), AnyTensor::F32(t.clone()))).collect() }
    }

    /// Parameters plus AdamW moments and step count.
    pub fn with_optimizer(params: &ParamSet<f32>, opt: &AdamW<f32>) -> Self {
        let mut ck = Checkpoint::from_params(params);
        ck.push("opt.step", AnyTensor::F64(Tensor::scalar(opt.step_count() as f64)));
        for (name, m, v) in opt.state(params) {
            ck.push(&format!("opt.m.{name}"), AnyTensor::F32(m.clone()));
            ck.push(&format!("opt.v.{name}"), AnyTensor::F32(v.clone()));
        }
        ck
    }

    pub fn push(&mut self, name: &str, t: AnyTensor) {
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_f32(&self, name: &str) -> Option<&Tensor<f32>> {
        match self.get(name)? {
            AnyTensor::F32(t) => Some(t),
            _ => None,
        }
    }

    /// Parameter entries (everything outside the `opt.` and `meta.`
    /// namespaces).
    pub fn params(&self) -> Result<ParamSet<f32>> {
        let mut ps = ParamSet::new();
        for (n, t) in self.entries.iter().filter(|(n, _)| !n.starts_with("opt.") && !n.starts_with("meta.")) {
            ps.insert(n.clone(), t.clone().into_f32()?);
        }
        Ok(ps)
    }

    /// Overwrites every parameter of `params` from this checkpoint.
    pub fn restore_params(&self, params: &mut ParamSet<f32>) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let t = self
                .get_f32(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != params.value(id).shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name}: stored {:?}, model {:?}", t.shape(), params.value(id).shape()),
                ));
            }
            *params.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW<f32>, params: &ParamSet<f32>) -> Result<()> {
        let step = match self.get("opt.step") {
            Some(AnyTensor::F64(t)) => t.item() as u64,
            _ => return Err(Error::Format("checkpoint has no optimizer state".into())),
        };
        opt.restore(
            step,
            |name| Some((self.get_f32(&format!("opt.m.{name}"))?.clone(), self.get_f32(&format!("opt.v.{name}"))?.clone())),
            params,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        let n = u32::try_from(self.entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            io::encode(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("truncated CFCK file".into());
        if bytes.len() < 9 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad CFCK magic {:?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version { what: "CFCK", found: bytes[4], expected: VERSION });
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut cur = &bytes[9..];
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            if cur.len() < 2 {
                return Err(truncated());
            }
            let len = u16::from_le_bytes([cur[0], cur[1]]) as usize;
            cur = &cur[2..];
            if cur.len() < len {
                return Err(truncated());
            }
            let name = std::str::from_utf8(&cur[..len])
                .map_err(|_| Error::Format("non-UTF-8 entry name".into()))?
                .to_string();
            cur = &cur[len..];
            entries.push((name, io::decode(&mut cur)?));
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after CFCK entries", cur.len())));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput {
                path: path.to_path_buf(),
                hint: "run the stage that produces this checkpoint first".into(),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
