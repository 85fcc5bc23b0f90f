//! `AXFT` tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "AXFT"            4 bytes magic
//! version: u16      = 1
//! dtype:   u8       = 1 (f32)
//! rank:    u8
//! dims:    rank × u32
//! payload: prod(dims) × f32, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AXFT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

/// N-dimensional `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} exceeds 255", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dimension {d} exceeds u32 range")));
        }
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dims: Vec<usize>,
    /// Byte length of the header, i.e. the payload offset.
    pub header_len: usize,
}

impl TensorHeader {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn file_len(&self) -> usize {
        self.header_len + 4 * self.numel()
    }
}

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.dims.len() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &tensor.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<TensorHeader> {
    if bytes.len() < 8 {
        return Err(Error::Corruption(format!(
            "header truncated: {} of 8 fixed bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype code {}",
            bytes[6]
        )));
    }
    let rank = bytes[7] as usize;
    let header_len = 8 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::Corruption(format!(
            "dims truncated: need {header_len} header bytes, have {}",
            bytes.len()
        )));
    }
    let dims = bytes[8..header_len]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    Ok(TensorHeader { dims, header_len })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes)?;
    let expected = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Corruption(format!("dims {:?} overflow", header.dims)))?;
    let payload = &bytes[header.header_len..];
    if payload.len() < expected {
        return Err(Error::Corruption(format!(
            "payload truncated: {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite payload value at index {i}"
        )));
    }
    Ok(Tensor {
        dims: header.dims,
        values,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = tensor.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to write non-finite value at index {i}"
        )));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_tensor(tensor))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| annotate(path, e))
}

/// Reads only the header and checks that the file length matches it.
pub fn read_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut fixed = [0u8; 8];
    let got = read_up_to(&mut file, &mut fixed).map_err(|e| Error::io(path, e))?;
    let rank = if got == 8 { fixed[7] as usize } else { 0 };
    let mut buf = fixed[..got].to_vec();
    if got == 8 {
        let mut dims = vec![0u8; 4 * rank];
        let n = read_up_to(&mut file, &mut dims).map_err(|e| Error::io(path, e))?;
        buf.extend_from_slice(&dims[..n]);
    }
    let header = parse_header(&buf).map_err(|e| annotate(path, e))?;
    if header.file_len() != len {
        return Err(Error::Corruption(format!(
            "{}: file is {len} bytes, header implies {}",
            path.display(),
            header.file_len()
        )));
    }
    Ok(header)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

fn annotate(path: &Path, e: Error) -> Error {
    let p = path.display();
    match e {
        Error::Format(m) => Error::Format(format!("{p}: {m}")),
        Error::Corruption(m) => Error::Corruption(format!("{p}: {m}")),
        Error::Validation(m) => Error::Validation(format!("{p}: {m}")),
        other => other,
    }
}
