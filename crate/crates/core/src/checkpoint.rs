//! Binary checkpoint format.
//!
//! ```text
//! "MDCN"                       magic
//! u32                          format version
//! u32                          config field count
//!   { u8 len, tag bytes, u32 } per field
//! u32                          tensor count
//!   { u32 len, UTF-8 name, u8 dtype, 4 × u32 extents, f32 payload } per tensor
//! ```
//!
//! All integers and floats are little-endian. Payloads are always 32-bit.

use std::fs;
use std::path::Path;

use crate::arch::{ModelParams, NetConfig};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MDCN";
pub const VERSION: u32 = 1;

fn config_fields(cfg: &NetConfig) -> [(&'static str, u32); 7] {
    [
        ("feat", cfg.feat as u32),
        ("growth", cfg.growth as u32),
        ("blocks", cfg.blocks as u32),
        ("units", cfg.units as u32),
        ("scale", cfg.scale),
        ("in_channels", cfg.in_channels as u32),
        ("global_skip", cfg.global_skip as u32),
    ]
}

pub fn encode<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let fields = config_fields(&params.config);
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (tag, value) in fields {
        out.push(tag.len() as u8);
        out.extend_from_slice(tag.as_bytes());
        out.extend_from_slice(&value.to_le_bytes());
    }
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DType::F32.tag());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<X>(&self, reason: impl Into<String>) -> Result<X> {
        Err(Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str(&mut self, len: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let b = self.take(len, what)?;
        std::str::from_utf8(b).or_else(|_| {
            self.pos = start;
            self.fail(format!("{what} is not UTF-8"))
        })
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not an MDCN checkpoint");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }

    let mut cfg = NetConfig::reference();
    let n_fields = r.u32("config field count")?;
    for _ in 0..n_fields {
        let len = r.u8("config tag length")? as usize;
        let tag = r.str(len, "config tag")?;
        let v = r.u32("config value")?;
        match tag {
            "feat" => cfg.feat = v as usize,
            "growth" => cfg.growth = v as usize,
            "blocks" => cfg.blocks = v as usize,
            "units" => cfg.units = v as usize,
            "scale" => cfg.scale = v,
            "in_channels" => cfg.in_channels = v as usize,
            "global_skip" => cfg.global_skip = v != 0,
            other => {
                r.pos -= 4 + len;
                return r.fail(format!("unknown config field {other:?}"));
            }
        }
    }
    let config_end = r.pos;
    let mut params = ModelParams::<T>::zeros(cfg).or_else(|e| {
        r.pos = config_end;
        r.fail(format!("invalid config: {e}"))
    })?;
    let expected: Vec<(String, Shape)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();

    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        r.pos -= 4;
        return r.fail(format!("{count} tensors, config implies {}", expected.len()));
    }
    let slots = params.tensors_mut();
    for ((want_name, want_shape), slot) in expected.iter().zip(slots) {
        let record = r.pos;
        let len = r.u32("name length")? as usize;
        let name = r.str(len, "tensor name")?;
        if name != want_name {
            r.pos = record;
            return r.fail(format!("expected tensor {want_name}, found {name}"));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DType::F32.tag() {
            r.pos -= 1;
            return r.fail(format!("unsupported dtype tag {dtype}"));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("extent")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if shape != *want_shape {
            r.pos -= 16;
            return r.fail(format!("{name}: shape {shape}, expected {want_shape}"));
        }
        let payload = r.take(4 * shape.numel(), "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        *slot = Tensor::from_vec(shape, data)?;
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(params)
}

pub fn save<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    decode(&fs::read(path)?)
}
