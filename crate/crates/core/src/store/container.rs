//! Minimal binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MLRQ" | version: u32 | entry count: u32
//! per entry: name len: u16 | name bytes | dtype: u8 | ndim: u8 | dims: u64 * ndim | data
//! ```
//!
//! Entries are written in insertion order, so identical containers always
//! serialize to identical bytes.

use std::collections::HashSet;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLRQ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    I32 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::I32),
            other => Err(Error::UnknownDType(other)),
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

/// A single row-major tensor with its raw little-endian payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<u64>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<u64>, data: Vec<u8>) -> Result<Self> {
        let expected = element_count(&shape) * dtype.size();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} bytes for shape {:?} ({} expected)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_f32(shape: &[usize], values: &[f32]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Tensor::new(DType::F32, shape.iter().map(|&d| d as u64).collect(), data)
    }

    pub fn from_i32(shape: &[usize], values: &[i32]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Tensor::new(DType::I32, shape.iter().map(|&d| d as u64).collect(), data)
    }

    /// Stores a matrix as a row-major f32 tensor of shape `[rows, cols]`.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut values = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                values.push(m[(i, j)] as f32);
            }
        }
        Tensor::from_f32(&[m.nrows(), m.ncols()], &values).expect("shape matches by construction")
    }

    pub fn from_f64_vec(v: &[f64]) -> Self {
        let values: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        Tensor::from_f32(&[v.len()], &values).expect("shape matches by construction")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        element_count(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        if self.dtype != DType::F32 {
            return Err(Error::ShapeMismatch("expected an f32 tensor".into()));
        }
        Ok(self
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_i32(&self) -> Result<Vec<i32>> {
        if self.dtype != DType::I32 {
            return Err(Error::ShapeMismatch("expected an i32 tensor".into()));
        }
        Ok(self
            .data
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Interprets a 2-D f32 tensor as a matrix, widening to f64.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected a 2-D tensor, found shape {:?}",
                self.shape
            )));
        }
        let values = self.to_f32()?;
        let (rows, cols) = (self.shape[0] as usize, self.shape[1] as usize);
        Ok(DMatrix::from_row_iterator(
            rows,
            cols,
            values.into_iter().map(f64::from),
        ))
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(self.to_f32()?.into_iter().map(f64::from).collect())
    }
}

fn element_count(shape: &[u64]) -> usize {
    shape.iter().product::<u64>() as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorContainer {
    pub entries: Vec<NamedTensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry, rejecting duplicate or invalid names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.entries.push(NamedTensor { name, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            validate_name(&e.name)?;
            if !seen.insert(e.name.as_str()) {
                return Err(Error::DuplicateName(e.name.clone()));
            }
            if e.tensor.data.len() != e.tensor.len() * e.tensor.dtype.size() {
                return Err(Error::TruncatedBuffer(e.name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for e in &self.entries {
            out.write_u16::<LittleEndian>(e.name.len() as u16)?;
            out.write_all(e.name.as_bytes())?;
            out.write_u8(e.tensor.dtype as u8)?;
            out.write_u8(e.tensor.shape.len() as u8)?;
            for &d in &e.tensor.shape {
                out.write_u64::<LittleEndian>(d)?;
            }
            out.write_all(&e.tensor.data)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut cur = Cursor::new(&bytes[4..]);
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::TruncatedBuffer("<header>".into()))?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::TruncatedBuffer("<header>".into()))?;

        let mut container = TensorContainer::new();
        for idx in 0..count {
            let trunc = || Error::TruncatedBuffer(format!("<entry {idx}>"));
            let name_len = cur.read_u16::<LittleEndian>().map_err(|_| trunc())? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(|_| trunc())?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::InvalidName(format!("entry {idx} is not valid UTF-8")))?;
            let trunc = || Error::TruncatedBuffer(name.clone());
            let dtype = DType::from_code(cur.read_u8().map_err(|_| trunc())?)?;
            let ndim = cur.read_u8().map_err(|_| trunc())? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.read_u64::<LittleEndian>().map_err(|_| trunc())?);
            }
            let nbytes = shape
                .iter()
                .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(trunc)?;
            let remaining = cur.get_ref().len() as u64 - cur.position();
            if nbytes > remaining {
                return Err(trunc());
            }
            let mut data = vec![0u8; nbytes as usize];
            cur.read_exact(&mut data).map_err(|_| trunc())?;
            let tensor = Tensor { dtype, shape, data };
            container.insert(name, tensor)?;
        }
        Ok(container)
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::InvalidName("empty name".into()));
    }
    if name.len() > u16::MAX as usize {
        return Err(Error::InvalidName(format!("name of {} bytes", name.len())));
    }
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let bytes = fs::read(path)?;
    TensorContainer::from_bytes(&bytes)
}

pub fn write_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let bytes = container.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}
