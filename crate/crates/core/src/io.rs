//! Binary tensor files and the multi-tensor container used for checkpoints.
//!
//! Tensor file layout (little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `HDT1` |
//! | 2 | version, `1` |
//! | 1 | dtype: 0 = f64, 1 = complex f64 (re, im interleaved), 2 = u8 mask |
//! | 1 | ndim |
//! | 4·ndim | dims, u32 each |
//! | … | payload, row-major |
//! | 4 | CRC-32 of the payload |
//!
//! Mask payloads hold one byte per element, each 0 or 1.
//!
//! The container (`HDC1`) is a list of named tensor files followed by a
//! CRC-32 over everything before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::C64;

const MAGIC: &[u8; 4] = b"HDT1";
const CONTAINER_MAGIC: &[u8; 4] = b"HDC1";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    Real(Vec<f64>),
    Complex(Vec<C64>),
    Mask(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::Real(v) => v.len(),
            TensorData::Complex(v) => v.len(),
            TensorData::Mask(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::Real(_) => 0,
            TensorData::Complex(_) => 1,
            TensorData::Mask(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!("unsupported dims {dims:?}")));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {count} elements, payload has {}",
                data.len()
            )));
        }
        if let TensorData::Mask(m) = &data {
            if m.iter().any(|&b| b > 1) {
                return Err(Error::Format("mask bytes must be 0 or 1".into()));
            }
        }
        Ok(Self { dims, data })
    }

    pub fn real(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::Real(data))
    }

    pub fn complex(dims: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        Self::new(dims, TensorData::Complex(data))
    }

    pub fn mask(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::Mask(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_real(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::Real(v) => Ok(v),
            _ => Err(Error::Format("expected a real tensor".into())),
        }
    }

    pub fn as_complex(&self) -> Result<&[C64]> {
        match &self.data {
            TensorData::Complex(v) => Ok(v),
            _ => Err(Error::Format("expected a complex tensor".into())),
        }
    }

    pub fn as_mask(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::Mask(v) => Ok(v),
            _ => Err(Error::Format("expected a mask tensor".into())),
        }
    }

    /// Checks the dims and returns them, for callers that expect a shape.
    pub fn expect_dims(&self, expected: &[usize]) -> Result<()> {
        if self.dims != expected {
            return Err(Error::Shape(format!("tensor has dims {:?}, expected {expected:?}", self.dims)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        match &self.data {
            TensorData::Real(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            TensorData::Complex(v) => v.iter().for_each(|z| {
                payload.extend_from_slice(&z.re.to_le_bytes());
                payload.extend_from_slice(&z.im.to_le_bytes());
            }),
            TensorData::Mask(v) => payload.extend_from_slice(v),
        }
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let dtype = r.take(1)?[0];
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let width = match dtype {
            0 => 8,
            1 => 16,
            2 => 1,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        let payload = r.take(count.checked_mul(width).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let crc = r.u32()?;
        if !r.rest().is_empty() {
            return Err(Error::Format("trailing bytes after tensor".into()));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::Format("CRC mismatch".into()));
        }
        let f64_at = |i: usize| f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        let data = match dtype {
            0 => TensorData::Real((0..count).map(f64_at).collect()),
            1 => TensorData::Complex((0..count).map(|i| C64::new(f64_at(2 * i), f64_at(2 * i + 1))).collect()),
            _ => TensorData::Mask(payload.to_vec()),
        };
        Self::new(dims, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

/// Ordered collection of named tensors in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, TensorFile)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, name: &str, tensor: TensorFile) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name.to_string(), tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&TensorFile> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("container has no entry '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let bytes = t.to_bytes();
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format("truncated container".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Format("container CRC mismatch".into()));
        }
        let mut r = Reader::new(body);
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let size = r.u64()? as usize;
            let t = TensorFile::from_bytes(r.take(size)?)?;
            c.insert(&name, t);
        }
        if !r.rest().is_empty() {
            return Err(Error::Format("trailing bytes in container".into()));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// CRC-32 of a whole file, used for reproducibility checks.
pub fn file_crc(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}
