//! Dense row-major tensors and the UBT binary layout.
//!
//! Layout (little-endian):
//! - bytes 0..4: magic `UBT1`
//! - byte 4: dtype code (1 = f32, 2 = f64, 3 = i32)
//! - byte 5: rank `r` (0..=8)
//! - bytes 6..8: zero padding
//! - `r` x u64 dims
//! - row-major payload

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::TensorError;

pub const MAGIC: &[u8; 4] = b"UBT1";
pub const MAX_RANK: usize = 8;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::I32),
            other => Err(TensorError::UnknownDType(other)),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// Equality is bitwise on the payload, so `NaN == NaN` when the bits agree and
/// `0.0 != -0.0`.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            _ => false,
        }
    }
}

/// A dense row-major tensor.
///
/// Tensors carrying probabilities or embeddings must hold finite values.
/// Logit-like tensors may be flagged as raw scores, which lifts the
/// finiteness requirement on save.
#[derive(Debug, Clone)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
    raw_scores: bool,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if dims.len() > MAX_RANK {
            return Err(TensorError::RankTooLarge(dims.len()));
        }
        let expected = checked_numel(&dims)?;
        if expected != data.len() {
            return Err(TensorError::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            dims,
            data,
            raw_scores: false,
        })
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::I32(data))
    }

    pub fn scalar_f64(value: f64) -> Self {
        Self {
            dims: Vec::new(),
            data: TensorData::F64(vec![value]),
            raw_scores: false,
        }
    }

    /// Marks the tensor as holding raw scores (e.g. logits), which may
    /// contain non-finite values.
    pub fn into_raw_scores(mut self) -> Self {
        self.raw_scores = true;
        self
    }

    pub fn is_raw_scores(&self) -> bool {
        self.raw_scores
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::I32(_) => true,
        }
    }

    /// Values upcast to f64 (integers converted exactly).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn to_array1(&self) -> Result<Array1<f64>, TensorError> {
        if self.rank() != 1 {
            return Err(TensorError::Shape(format!(
                "expected rank 1, found dims {:?}",
                self.dims
            )));
        }
        Ok(Array1::from(self.to_f64_vec()))
    }

    pub fn to_array2(&self) -> Result<Array2<f64>, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::Shape(format!(
                "expected rank 2, found dims {:?}",
                self.dims
            )));
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.to_f64_vec())
            .map_err(|e| TensorError::Shape(e.to_string()))
    }

    /// Integer payload as i64 values; float tensors are rejected.
    pub fn to_int_vec(&self) -> Result<Vec<i64>, TensorError> {
        match &self.data {
            TensorData::I32(v) => Ok(v.iter().map(|&x| i64::from(x)).collect()),
            other => Err(TensorError::Shape(format!(
                "expected an i32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Self {
            dims: vec![r, c],
            data: TensorData::F64(a.iter().copied().collect()),
            raw_scores: false,
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Self {
            dims: vec![a.len()],
            data: TensorData::F64(a.to_vec()),
            raw_scores: false,
        }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        Self {
            dims: vec![labels.len()],
            data: TensorData::I32(labels.iter().map(|&l| l as i32).collect()),
            raw_scores: false,
        }
    }

    /// Encodes the tensor in the UBT layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        if !self.raw_scores && !self.all_finite() {
            return Err(TensorError::NonFinite);
        }
        let mut out =
            Vec::with_capacity(HEADER_LEN + 8 * self.rank() + self.numel() * self.dtype().size_of());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.rank() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    /// Decodes a UBT buffer, validating the header and payload length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < HEADER_LEN || &bytes[0..4] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let dtype = DType::from_code(bytes[4])?;
        let rank = bytes[5] as usize;
        if rank > MAX_RANK {
            return Err(TensorError::RankTooLarge(rank));
        }
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(TensorError::BadPadding);
        }
        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(TensorError::Truncated);
        }
        let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| {
                let d = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
                usize::try_from(d).map_err(|_| TensorError::DimOverflow)
            })
            .collect::<Result<_, _>>()?;
        let numel = checked_numel(&dims)?;
        let payload = &bytes[dims_end..];
        let width = dtype.size_of();
        if payload.len() % width != 0 || payload.len() / width != numel {
            return Err(TensorError::SizeMismatch {
                expected: numel,
                found: payload.len() / width,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
        };
        let mut t = Tensor::new(dims, data)?;
        t.raw_scores = !t.all_finite();
        Ok(t)
    }
}

fn checked_numel(dims: &[usize]) -> Result<usize, TensorError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(TensorError::DimOverflow)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| TensorError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| TensorError::io(path, e))?;
    Ok(())
}

/// Loads a UBT tensor. Tensors containing non-finite values come back
/// flagged as raw scores.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TensorError::io(path, e))?;
    Tensor::from_bytes(&bytes)
}
