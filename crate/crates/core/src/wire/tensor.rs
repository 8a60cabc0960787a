use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Element encoding on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireDType {
    F32,
    F16,
}

impl WireDType {
    pub fn code(self) -> u8 {
        match self {
            WireDType::F32 => 0,
            WireDType::F16 => 1,
        }
    }

    pub fn from_code(b: u8) -> Option<WireDType> {
        match b {
            0 => Some(WireDType::F32),
            1 => Some(WireDType::F16),
            _ => None,
        }
    }

    pub fn bits(self) -> u64 {
        match self {
            WireDType::F32 => 32,
            WireDType::F16 => 16,
        }
    }

    pub fn from_bits(bits: u32) -> Result<WireDType> {
        match bits {
            32 => Ok(WireDType::F32),
            16 => Ok(WireDType::F16),
            _ => Err(Error::Config(format!("unsupported wire width {bits} bits"))),
        }
    }

    fn size(self) -> usize {
        self.bits() as usize / 8
    }
}

/// Narrows with round-to-nearest-even; finite values beyond the binary16 range
/// become infinities.
pub fn f32_to_f16_rne(x: f32) -> u16 {
    f16::from_f32(x).to_bits()
}

/// Exact widening.
pub fn f16_to_f32(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// A decoded tensor. Matrices travel with `ndims = 2`; a training batch of
/// embeddings travels as `[bs, l, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flattens all leading dimensions into rows.
    pub fn into_matrix(self) -> Result<Matrix> {
        let cols = self.dims.last().copied().unwrap_or(1) as usize;
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        Matrix::from_vec(rows, cols, self.data)
    }
}

/// Size in bytes of the dtype/ndims/dims prefix of one tensor.
pub fn descriptor_len(ndims: usize) -> usize {
    2 + 4 * ndims
}

/// Appends one tensor payload. Returns how many finite values overflowed to
/// infinity when narrowing.
pub fn encode_tensor(dims: &[u32], data: &[f32], dtype: WireDType, out: &mut Vec<u8>) -> Result<u64> {
    let numel: u64 = dims.iter().map(|&d| d as u64).product();
    if numel != data.len() as u64 || dims.len() > u8::MAX as usize {
        return Err(Error::input(format!(
            "tensor dims {dims:?} do not describe {} values",
            data.len()
        )));
    }
    out.push(dtype.code());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    let mut overflow = 0;
    match dtype {
        WireDType::F32 => {
            out.reserve(data.len() * 4);
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WireDType::F16 => {
            out.reserve(data.len() * 2);
            for &v in data {
                let h = f16::from_f32(v);
                if h.is_infinite() && v.is_finite() {
                    overflow += 1;
                }
                out.extend_from_slice(&h.to_bits().to_le_bytes());
            }
        }
    }
    Ok(overflow)
}

pub fn encode_matrix(m: &Matrix, dtype: WireDType, out: &mut Vec<u8>) -> Result<u64> {
    encode_tensor(&[m.rows() as u32, m.cols() as u32], m.data(), dtype, out)
}

/// Metadata of one tensor inside a payload, without its values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: WireDType,
    pub dims: Vec<u32>,
    pub numel: u64,
    /// Byte range of the raw values within the payload.
    pub data: std::ops::Range<usize>,
}

/// Walks the tensor descriptors of a payload holding one or more tensors.
pub fn scan_tensors(payload: &[u8]) -> Result<Vec<TensorInfo>> {
    let mut at = 0;
    let mut out = Vec::new();
    while at < payload.len() {
        if payload.len() - at < 2 {
            return Err(Error::Framing("truncated tensor descriptor".into()));
        }
        let dtype = WireDType::from_code(payload[at])
            .ok_or_else(|| Error::Protocol(format!("unknown tensor dtype {}", payload[at])))?;
        let ndims = payload[at + 1] as usize;
        let desc = descriptor_len(ndims);
        if payload.len() - at < desc {
            return Err(Error::Framing("truncated tensor dims".into()));
        }
        let dims: Vec<u32> = payload[at + 2..at + desc]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let numel = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let bytes = numel
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .filter(|&b| b <= (payload.len() - at - desc) as u64)
            .ok_or_else(|| Error::Framing(format!("tensor {dims:?} overruns its payload")))?;
        let start = at + desc;
        let end = start + bytes as usize;
        out.push(TensorInfo {
            dtype,
            dims,
            numel: numel.unwrap_or(0),
            data: start..end,
        });
        at = end;
    }
    Ok(out)
}

/// Decodes every tensor in a payload.
pub fn decode_tensors(payload: &[u8]) -> Result<Vec<Tensor>> {
    scan_tensors(payload)?
        .into_iter()
        .map(|info| {
            let raw = &payload[info.data];
            let data: Vec<f32> = match info.dtype {
                WireDType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                WireDType::F16 => raw.chunks_exact(2).map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]]))).collect(),
            };
            if data.iter().any(|v| !v.is_finite()) && info.dtype == WireDType::F32 {
                return Err(Error::Protocol("non-finite value in tensor payload".into()));
            }
            Ok(Tensor { dims: info.dims, data })
        })
        .collect()
}
