//! Element types understood by the container and the conversions between
//! them and the f32 working precision used by every merge kernel.

use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Element encoding of a stored tensor. All encodings are little-endian.
///
/// `F64` is only produced for Gram matrices; model weights are one of the
/// three narrower types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    F32,
    F16,
    BF16,
    F64,
}

impl Dtype {
    pub const fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F64 => 8,
        }
    }

    /// Header spelling.
    pub const fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F64 => "F64",
        }
    }

    /// Widen raw little-endian bytes to f32.
    pub fn decode_f32(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                .collect(),
            Dtype::F64 => self.decode_f64(bytes).into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn decode_f64(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
            _ => self.decode_f32(bytes).into_iter().map(f64::from).collect(),
        }
    }

    /// Narrow f32 values into this encoding, rounding to nearest-even.
    pub fn encode_f32(self, values: &[f32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        match self {
            Dtype::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes())),
            Dtype::BF16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_bits().to_le_bytes())),
            Dtype::F64 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&f64::from(*v).to_le_bytes())),
        }
        out
    }

    pub fn encode_f64(self, values: &[f64]) -> Vec<u8> {
        match self {
            Dtype::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            _ => {
                let narrowed: Vec<f32> = values.iter().map(|v| *v as f32).collect();
                self.encode_f32(&narrowed)
            }
        }
    }

    /// Map element `i` of a byte buffer to a monotone integer so that the
    /// difference between two encodings counts representable values (ulps).
    pub(crate) fn ordered_bits(self, bytes: &[u8], i: usize) -> i128 {
        let w = self.size();
        let c = &bytes[i * w..(i + 1) * w];
        let (raw, sign_bit) = match self {
            Dtype::F32 => (u32::from_le_bytes(c.try_into().unwrap()) as u64, 1u64 << 31),
            Dtype::F16 | Dtype::BF16 => (u16::from_le_bytes([c[0], c[1]]) as u64, 1u64 << 15),
            Dtype::F64 => (u64::from_le_bytes(c.try_into().unwrap()), 1u64 << 63),
        };
        let magnitude = (raw & !sign_bit) as i128;
        if raw & sign_bit != 0 {
            -magnitude
        } else {
            magnitude
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unsupported dtype {other:?}"))),
        }
    }
}

/// Output precision of a merge. `Keep` reuses the dtype of the reference
/// input tensor (the first model of the job, or `m1` for selective attention merging).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutDtype {
    #[default]
    Keep,
    F32,
    F16,
    Bf16,
}

impl OutDtype {
    pub fn resolve(self, reference: Dtype) -> Dtype {
        match self {
            OutDtype::Keep => reference,
            OutDtype::F32 => Dtype::F32,
            OutDtype::F16 => Dtype::F16,
            OutDtype::Bf16 => Dtype::BF16,
        }
    }
}

impl FromStr for OutDtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "keep" => Ok(OutDtype::Keep),
            "f32" => Ok(OutDtype::F32),
            "f16" => Ok(OutDtype::F16),
            "bf16" => Ok(OutDtype::Bf16),
            other => Err(Error::Config(format!(
                "unknown out_dtype {other:?} (expected keep, f32, f16 or bf16)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_encodes_as_ieee_bytes() {
        assert_eq!(Dtype::F32.encode_f32(&[1.0]), vec![0x00, 0x00, 0x80, 0x3F]);
        assert_eq!(Dtype::BF16.encode_f32(&[1.0]), vec![0x80, 0x3F]);
        assert_eq!(Dtype::F16.encode_f32(&[1.0]), vec![0x00, 0x3C]);
    }

    #[test]
    fn bf16_is_upper_half_of_f32() {
        for v in [1.5f32, -2.25, 65536.0, -0.0] {
            let f = v.to_le_bytes();
            assert_eq!(Dtype::BF16.encode_f32(&[v]), vec![f[2], f[3]]);
        }
    }

    #[test]
    fn ordered_bits_cross_zero() {
        let b = Dtype::F32.encode_f32(&[-f32::MIN_POSITIVE, 0.0, f32::MIN_POSITIVE]);
        let o: Vec<i128> = (0..3).map(|i| Dtype::F32.ordered_bits(&b, i)).collect();
        assert!(o[0] < o[1] && o[1] < o[2]);
    }
}
