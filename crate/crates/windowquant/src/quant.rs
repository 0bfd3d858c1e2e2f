//! Asymmetric round-to-nearest group-wise quantization to INT4/INT2 with
//! bit-exact packing.
//!
//! One group shares a single scale and zero point. Codes live in the unsigned
//! space `[0, 2^bits - 1]` and pack little-endian within each byte: element
//! `i` occupies bits `[(i % k) * bits, (i % k + 1) * bits)` of byte `i / k`
//! where `k = 8 / bits`. Trailing bits of the final byte are zero. This
//! layout is a stable format; see the golden byte tests below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage width of a KV-cache window. FP16 is an accounting label here
/// (2 bytes per element); quantized widths hold real packed codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitWidth {
    Fp16,
    Int4,
    Int2,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Fp16 => 16,
            BitWidth::Int4 => 4,
            BitWidth::Int2 => 2,
        }
    }

    pub fn is_quantized(self) -> bool {
        !matches!(self, BitWidth::Fp16)
    }

    /// Rank used for tie-breaking toward higher precision: FP16 > INT4 > INT2.
    pub fn precision_rank(self) -> u8 {
        match self {
            BitWidth::Fp16 => 2,
            BitWidth::Int4 => 1,
            BitWidth::Int2 => 0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BitWidth::Fp16 => "fp16",
            BitWidth::Int4 => "int4",
            BitWidth::Int2 => "int2",
        }
    }
}

/// Floor applied to a degenerate (constant) group range so the scale stays
/// positive.
const MIN_RANGE: f64 = 1e-8;

/// Per-group quantization parameters for the unsigned asymmetric scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Scale factor, always positive.
    pub scale: f64,
    /// Zero point: `q_min - round(x_min / scale)`. Kept as i64 so tiny
    /// scales on offset data cannot overflow it.
    pub zero_point: i64,
    /// Code width, 2 or 4.
    pub bits: u32,
}

impl QuantParams {
    pub fn q_max(&self) -> i64 {
        (1i64 << self.bits) - 1
    }
}

/// One quantized group: packed codes plus the shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedGroup {
    pub params: QuantParams,
    pub count: usize,
    pub bytes: Vec<u8>,
}

impl PackedGroup {
    /// Exact packed size for `count` codes at `bits` per code.
    pub fn packed_len(count: usize, bits: u32) -> usize {
        (count * bits as usize).div_ceil(8)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 2 || bits == 4 {
        Ok(())
    } else {
        Err(Error::UnsupportedBits(bits))
    }
}

/// Round to nearest with ties away from zero (deterministic across
/// platforms; this is `f64::round` semantics).
fn round_ties_away(x: f64) -> f64 {
    x.round()
}

/// Derive scale and zero point from a group of values.
///
/// `s = max(x_max - x_min, 1e-8) / (q_max - q_min)` and
/// `z = q_min - round(x_min / s)` with `q_min = 0`, `q_max = 2^bits - 1`.
pub fn compute_params(values: &[f64], bits: u32) -> Result<QuantParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::EmptyInput("compute_params"));
    }
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "compute_params",
            index: idx,
        });
    }
    let x_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q_max = ((1i64 << bits) - 1) as f64;
    let scale = (x_max - x_min).max(MIN_RANGE) / q_max;
    let zero_point = -(round_ties_away(x_min / scale) as i64);
    Ok(QuantParams {
        scale,
        zero_point,
        bits,
    })
}

/// Quantize a group: `code_i = clamp(round(v_i / s) + z, 0, q_max)`,
/// packed per the stable byte layout.
pub fn quantize_group(values: &[f64], bits: u32) -> Result<PackedGroup> {
    let params = compute_params(values, bits)?;
    let q_max = params.q_max();
    let codes: Vec<u8> = values
        .iter()
        .map(|&v| {
            let code = round_ties_away(v / params.scale) as i64 + params.zero_point;
            code.clamp(0, q_max) as u8
        })
        .collect();
    let bytes = pack_codes(&codes, bits)?;
    Ok(PackedGroup {
        params,
        count: values.len(),
        bytes,
    })
}

/// Reconstruct `v̂_i = s * (code_i - z)` for every element of the group.
pub fn dequantize_group(group: &PackedGroup) -> Result<Vec<f64>> {
    let expected = PackedGroup::packed_len(group.count, group.params.bits);
    if group.bytes.len() != expected {
        return Err(Error::BufferLength {
            expected,
            got: group.bytes.len(),
        });
    }
    let codes = unpack_codes(&group.bytes, group.count, group.params.bits)?;
    Ok(codes
        .iter()
        .map(|&c| group.params.scale * (c as f64 - group.params.zero_point as f64))
        .collect())
}

/// Pack codes at 2 or 4 bits each, little-endian within each byte.
pub fn pack_codes(codes: &[u8], bits: u32) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let max = (1u32 << bits) - 1;
    let per_byte = (8 / bits) as usize;
    let mut bytes = vec![0u8; PackedGroup::packed_len(codes.len(), bits)];
    for (i, &code) in codes.iter().enumerate() {
        if code as u32 > max {
            return Err(Error::CodeOutOfRange {
                code: code as u32,
                bits,
                max,
            });
        }
        let shift = (i % per_byte) as u32 * bits;
        bytes[i / per_byte] |= code << shift;
    }
    Ok(bytes)
}

/// Exact inverse of [`pack_codes`]. The buffer length must match the count.
pub fn unpack_codes(bytes: &[u8], count: usize, bits: u32) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let expected = PackedGroup::packed_len(count, bits);
    if bytes.len() != expected {
        return Err(Error::BufferLength {
            expected,
            got: bytes.len(),
        });
    }
    let per_byte = (8 / bits) as usize;
    let mask = ((1u32 << bits) - 1) as u8;
    let mut codes = Vec::with_capacity(count);
    for i in 0..count {
        let shift = (i % per_byte) as u32 * bits;
        codes.push((bytes[i / per_byte] >> shift) & mask);
    }
    Ok(codes)
}
