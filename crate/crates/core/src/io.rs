//! Binary tensor files and model files.
//!
//! Tensor layout (all integers little-endian):
//!
//! ```text
//! b"BXL1" | version: u16 = 1 | ndim: u16 | dims: ndim × u64 | payload: f64 × prod(dims) | xxh64(payload bytes, seed 0): u64
//! ```
//!
//! A model file is one line of JSON describing the [`Architecture`],
//! followed by a 1-d tensor holding the flat parameter vector.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};
use crate::models::{Architecture, Model, Trainable};

pub const MAGIC: &[u8; 4] = b"BXL1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                expected: n,
                actual: data.len(),
            });
        }
        if dims.len() > u16::MAX as usize {
            return Err(Error::Format("too many dimensions".into()));
        }
        Ok(Self { dims, data })
    }

    /// Rows of a tensor whose first axis indexes examples.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        let (&n, rest) = self
            .dims
            .split_first()
            .ok_or_else(|| Error::Format("scalar tensor has no rows".into()))?;
        let width: usize = rest.iter().product();
        if n == 0 {
            return Ok(Vec::new());
        }
        Ok(self
            .data
            .chunks(width.max(1))
            .map(<[f64]>::to_vec)
            .collect())
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.dims.len() as u16).to_le_bytes())?;
    for &d in &t.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(8 * t.data.len());
    for v in &t.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.write_all(&xxh64(&payload, 0).to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    if &read_exact::<_, 4>(r)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let ndim = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut n: u64 = 1;
    for _ in 0..ndim {
        let d = u64::from_le_bytes(read_exact(r)?);
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        dims.push(usize::try_from(d).map_err(|_| Error::Format("dimension too large".into()))?);
    }
    let bytes = n
        .checked_mul(8)
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    let mut payload = Vec::new();
    r.take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(Error::Format("truncated tensor payload".into()));
    }
    let checksum = u64::from_le_bytes(read_exact(r)?);
    if xxh64(&payload, 0) != checksum {
        return Err(Error::Format("tensor checksum mismatch".into()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(dims, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn write_model<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    let header =
        serde_json::to_string(&model.architecture()).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{header}")?;
    let params = model.params();
    write_tensor(w, &Tensor::new(vec![params.len()], params)?)
}

pub fn read_model<R: BufRead>(r: &mut R) -> Result<Model> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let arch: Architecture = serde_json::from_str(header.trim_end())
        .map_err(|e| Error::Format(format!("model header: {e}")))?;
    let t = read_tensor(r)?;
    if t.dims.len() != 1 {
        return Err(Error::Format(
            "model parameters must be a 1-d tensor".into(),
        ));
    }
    Model::from_parts(&arch, &t.data)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_model(&mut BufReader::new(File::open(path)?))
}
