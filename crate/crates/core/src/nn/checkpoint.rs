//! Binary checkpoint container.
//!
//! ```text
//! "MSRN"                         magic
//! u32                            format version (1)
//! u32 + bytes                    MsrNetConfig as JSON
//! u64                            iterations done
//! u32                            parameter count
//! per parameter, sorted by name:
//!   u32 + bytes                  name
//!   u32 × 4                      shape (out, in, kh, kw)
//!   f32 × numel                  values
//! u8                             1 if optimizer state follows
//! per parameter, same order:
//!   u64                          Adam step count
//!   f32 × numel                  first moment
//!   f32 × numel                  second moment
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MsrNet, MsrNetConfig};
use crate::nn::{ParamKind, Parameter};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MSRN";
pub const VERSION: u32 = 1;

/// Serializes `model` (and its optimizer state when `with_optimizer`).
pub fn write_checkpoint<W: Write>(mut w: W, model: &MsrNet, with_optimizer: bool) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(model.config())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(model.iterations_done as u64).to_le_bytes())?;

    let mut params: Vec<&Parameter> = model.params().iter().collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in &params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        for d in p.shape().dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_floats(&mut w, p.value.data())?;
    }
    w.write_all(&[with_optimizer as u8])?;
    if with_optimizer {
        for p in &params {
            w.write_all(&p.step_count.to_le_bytes())?;
            write_floats(&mut w, p.adam_m.data())?;
            write_floats(&mut w, p.adam_v.data())?;
        }
    }
    Ok(())
}

fn write_floats<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save(path: impl AsRef<Path>, model: &MsrNet, with_optimizer: bool) -> Result<()> {
    let path = path.as_ref();
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, model, with_optimizer)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses a checkpoint. Optimizer state is restored when present.
pub fn read_checkpoint<R: Read>(r: R) -> Result<MsrNet> {
    let mut r = Reader { inner: r };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let config: MsrNetConfig = serde_json::from_slice(&r.bytes(len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let iterations_done = r.u64("iteration count")? as usize;
    let count = r.u32("parameter count")? as usize;
    if count > 4096 {
        return Err(Error::Checkpoint(format!("implausible parameter count {count}")));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        if nlen > 256 {
            return Err(Error::Checkpoint(format!("implausible name length {nlen}")));
        }
        let name = String::from_utf8(r.bytes(nlen, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("shape")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if shape.numel() > 1 << 28 {
            return Err(Error::Checkpoint(format!("implausible shape {shape} for {name}")));
        }
        let value = Tensor::from_vec(shape, r.floats(shape.numel(), &name)?)?;
        let kind = if name.ends_with(".bias") {
            ParamKind::Bias
        } else {
            ParamKind::Weight
        };
        params.push(Parameter::new(name, kind, value));
    }
    let has_opt = r.bytes(1, "optimizer flag")?[0];
    if has_opt == 1 {
        for p in &mut params {
            p.step_count = r.u64("step count")?;
            let n = p.shape().numel();
            p.adam_m = Tensor::from_vec(p.shape(), r.floats(n, "adam m")?)?;
            p.adam_v = Tensor::from_vec(p.shape(), r.floats(n, "adam v")?)?;
        }
    } else if has_opt != 0 {
        return Err(Error::Checkpoint(format!("bad optimizer flag {has_opt}")));
    }
    MsrNet::from_params(config, params, iterations_done)
        .map_err(|e| Error::Checkpoint(format!("architecture mismatch: {e}")))
}

pub fn load(path: impl AsRef<Path>) -> Result<MsrNet> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Loads a checkpoint and checks it against an expected architecture.
pub fn load_expecting(path: impl AsRef<Path>, expected: &MsrNetConfig) -> Result<MsrNet> {
    let model = load(path)?;
    if model.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match requested {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
