//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FADVCKPT"
//! version    u32
//! dtype      u8       0 = f32, 1 = f64
//! config     u32 length + UTF-8 JSON of the ModelConfig
//! count      u32      number of tensors
//! per tensor:
//!   name     u16 length + UTF-8
//!   trainable u8
//!   ndim     u8, then ndim x u32 extents
//!   data     product(extents) values in dtype, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::autodiff::{DType, Element};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FADVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn write_checkpoint<F: Element>(model: &Model<F>, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(dtype_tag(F::DTYPE));
    let cfg = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.trainable as u8);
        buf.push(p.tensor.ndim() as u8);
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<F: Element>(mut input: impl Read) -> Result<Model<F>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tag = c.u8()?;
    if tag != dtype_tag(F::DTYPE) {
        return Err(Error::Format(format!(
            "checkpoint dtype tag {tag} does not match requested {:?}",
            F::DTYPE
        )));
    }
    let len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len)?)?;
    let mut model = Model::<F>::build(&config, 0)?;
    let count = c.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, architecture has {}",
            model.params().len()
        )));
    }
    let width = F::DTYPE.size_of();
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let trainable = c.u8()? != 0;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let expected = model
            .params()
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
        if expected.tensor.shape() != shape.as_slice() || expected.trainable != trainable {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {shape:?}, architecture expects {:?}",
                expected.tensor.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * width)?;
        let values = raw.chunks_exact(width).map(F::read_le).collect();
        model.set_param(&name, values)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<F: Element>(model: &Model<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load_checkpoint<F: Element>(path: &Path) -> Result<Model<F>> {
    read_checkpoint(std::fs::File::open(path)?)
}
