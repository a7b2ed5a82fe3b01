//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"DPGK"`, version `u32`, tensor count `u32`, then
//! per tensor a `u16` name length, the UTF-8 name, rank `u8`, `u32` dims,
//! dtype `u8` (0 = f32, 1 = f64) and raw data; finally a CRC32 of every
//! preceding byte.

use std::path::Path;

use dpgan_autograd::{DType, Float, ParamStore, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::trainer::{Adam, TrainState};

pub const MAGIC: &[u8; 4] = b"DPGK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            TensorData::F32(t) => t.clone(),
            TensorData::F64(t) => t.cast(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.clone(),
        }
    }
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, TensorData)>,
}

impl Archive {
    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), TensorData::F32(t)));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.tensors.push((name.into(), TensorData::F64(t)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&TensorData> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Adds every entry of `store` under `prefix`.
    pub fn push_store<T: Float>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for e in store.entries() {
            let name = format!("{prefix}{}", e.name);
            match T::DTYPE {
                DType::F32 => self.push_f32(name, e.tensor.cast()),
                DType::F64 => self.push_f64(name, e.tensor.cast()),
            }
        }
    }

    /// Overwrites every entry of `store` from `prefix`-named tensors, checking shapes.
    pub fn fill_store<T: Float>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.entry(id).name);
            let src = self.require(&name)?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::CheckpointShape { name, expected: dst.shape().to_vec(), found: src.shape().to_vec() });
            }
            *dst = match T::DTYPE {
                DType::F32 => src.to_f32().cast(),
                DType::F64 => src.to_f64().cast(),
            };
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = t.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match t {
                TensorData::F32(t) => {
                    out.push(0);
                    t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                TensorData::F64(t) => {
                    out.push(1);
                    t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a DPGK checkpoint)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch (file corrupt or truncated)".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = match r.u8()? {
                0 => TensorData::F32(Tensor::new(
                    &shape,
                    r.take(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )?),
                1 => TensorData::F64(Tensor::new(
                    &shape,
                    r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                )?),
                t => return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype tag {t}"))),
            };
            tensors.push((name, data));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Text stored as one f32 per byte (the container holds only float tensors).
pub fn text_tensor(text: &str) -> Tensor<f32> {
    let bytes = text.as_bytes();
    Tensor::new(&[bytes.len()], bytes.iter().map(|&b| b as f32).collect()).expect("1-D")
}

pub fn tensor_text(t: &TensorData) -> Result<String> {
    let bytes: Vec<u8> = t.to_f64().data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("embedded text is not UTF-8".into()))
}

fn push_adam(a: &mut Archive, prefix: &str, opt: &Adam<f32>, store: &ParamStore<f32>) {
    for (i, e) in store.entries().iter().enumerate() {
        a.push_f32(format!("{prefix}.m.{}", e.name), opt.m[i].clone());
        a.push_f32(format!("{prefix}.v.{}", e.name), opt.v[i].clone());
    }
}

fn fill_adam(a: &Archive, prefix: &str, opt: &mut Adam<f32>, store: &ParamStore<f32>, t: u64) -> Result<()> {
    for (i, e) in store.entries().iter().enumerate() {
        for (kind, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let name = format!("{prefix}.{kind}.{}", e.name);
            let src = a.require(&name)?;
            if src.shape() != dst.shape() {
                return Err(Error::CheckpointShape { name, expected: dst.shape().to_vec(), found: src.shape().to_vec() });
            }
            *dst = src.to_f32();
        }
    }
    opt.t = t;
    Ok(())
}

impl TrainState {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.push_f64("meta.step", Tensor::scalar(self.step as f64));
        a.push_f32("meta.config", text_tensor(&self.cfg.to_text()));
        a.push_store("g.", &self.g);
        a.push_store("d.", &self.d);
        a.push_store("ema.", &self.ema);
        push_adam(&mut a, "opt_g", &self.opt_g, &self.g);
        push_adam(&mut a, "opt_d", &self.opt_d, &self.d);
        a
    }

    /// Rebuilds a state from an archive. With `cfg` given, the models are
    /// built from it and every stored tensor must match its shape; otherwise
    /// the embedded config is used.
    pub fn from_archive(a: &Archive, cfg: Option<&TrainConfig>) -> Result<Self> {
        let cfg = match cfg {
            Some(c) => c.clone(),
            None => TrainConfig::from_text(&tensor_text(a.require("meta.config")?)?)?,
        };
        let step = a.require("meta.step")?.to_f64().item()? as u64;
        let mut s = TrainState::new(&cfg)?;
        a.fill_store("g.", &mut s.g)?;
        a.fill_store("d.", &mut s.d)?;
        a.fill_store("ema.", &mut s.ema)?;
        fill_adam(a, "opt_g", &mut s.opt_g, &s.g, step)?;
        fill_adam(a, "opt_d", &mut s.opt_d, &s.d, step)?;
        s.step = step;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path, cfg: Option<&TrainConfig>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, cfg)
    }
}
