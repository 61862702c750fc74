//! Quantized numeric formats.
//!
//! Weights are stored as 1-bit (sign) or 3-bit (symmetric −3..+3) codes with
//! one positive scale per output channel; activations are unsigned 5-bit
//! codes with one scale per tensor. Codes pack little-endian into bytes: code
//! `i` occupies bits `i·b .. (i+1)·b` of the stream, least significant bit
//! first, and the final byte is zero-padded.

use alloc::vec;
use alloc::vec::Vec;

use crate::round_half_away;

/// Largest 5-bit activation code.
pub const ACT_MAX_CODE: u8 = 31;
/// Bits per activation code.
pub const ACT_BITS: u32 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("bad shape {got:?}: expected {expected}")]
    BadShape { got: Vec<usize>, expected: &'static str },
    #[error("code {code} out of range for {bits}-bit field")]
    CodeOutOfRange { code: i32, bits: u32 },
    #[error("unsupported bit width {0}")]
    UnsupportedBits(u32),
    #[error("scale must be positive and finite, got {0}")]
    NonPositiveScale(f32),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("packed stream too short: {got} bytes, need {need}")]
    Truncated { got: usize, need: usize },
}

/// A dense real-valued tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self, QuantError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(QuantError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (C, H, W) of a rank-3 tensor.
    pub fn chw(&self) -> Option<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Some((c, h, w)),
            _ => None,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightBits {
    One,
    Three,
}

impl WeightBits {
    pub fn bits(self) -> u32 {
        match self {
            WeightBits::One => 1,
            WeightBits::Three => 3,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self, QuantError> {
        match bits {
            1 => Ok(WeightBits::One),
            3 => Ok(WeightBits::Three),
            other => Err(QuantError::UnsupportedBits(other)),
        }
    }
}

/// Maps a signed code onto its raw `bits`-wide field value.
fn encode_field(code: i32, bits: u32) -> Result<u8, QuantError> {
    let out_of_range = || QuantError::CodeOutOfRange { code, bits };
    match bits {
        1 => match code {
            1 => Ok(1),
            -1 => Ok(0),
            _ => Err(out_of_range()),
        },
        3 => {
            if (-3..=3).contains(&code) {
                Ok((code as u8) & 0b111)
            } else {
                Err(out_of_range())
            }
        }
        5 => {
            if (0..=ACT_MAX_CODE as i32).contains(&code) {
                Ok(code as u8)
            } else {
                Err(out_of_range())
            }
        }
        other => Err(QuantError::UnsupportedBits(other)),
    }
}

fn decode_field(raw: u8, bits: u32) -> Result<i32, QuantError> {
    match bits {
        1 => Ok(if raw & 1 == 1 { 1 } else { -1 }),
        3 => {
            let v = (raw & 0b111) as i32;
            let signed = if v >= 4 { v - 8 } else { v };
            if signed == -4 {
                Err(QuantError::CodeOutOfRange { code: -4, bits })
            } else {
                Ok(signed)
            }
        }
        5 => Ok((raw & 0x1f) as i32),
        other => Err(QuantError::UnsupportedBits(other)),
    }
}

/// Byte length of `count` packed codes of `bits` bits each.
pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes (1-bit: ±1, 3-bit: −3..=3, 5-bit: 0..=31).
pub fn pack_codes(codes: &[i32], bits: u32) -> Result<Vec<u8>, QuantError> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (i, &code) in codes.iter().enumerate() {
        let raw = encode_field(code, bits)? as u16;
        let bit = i * bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = raw << shift;
        out[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
    }
    Ok(out)
}

/// Unpacks `count` codes from a packed stream.
pub fn unpack_codes(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<i32>, QuantError> {
    if !matches!(bits, 1 | 3 | 5) {
        return Err(QuantError::UnsupportedBits(bits));
    }
    let need = packed_len(count, bits);
    if bytes.len() < need {
        return Err(QuantError::Truncated {
            got: bytes.len(),
            need,
        });
    }
    let mask = (1u16 << bits) - 1;
    (0..count)
        .map(|i| {
            let bit = i * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let lo = bytes[byte] as u16;
            let hi = if shift + bits as usize > 8 {
                (bytes[byte + 1] as u16) << 8
            } else {
                0
            };
            decode_field((((lo | hi) >> shift) & mask) as u8, bits)
        })
        .collect()
}

/// Bit-packed convolution coefficients with per-output-channel scales and
/// accumulator-domain biases. Codes are kept unpacked in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantWeights {
    bits: WeightBits,
    c_out: usize,
    c_in: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
    bias: Vec<i32>,
}

fn check_weight_shape(w: &FloatTensor) -> Result<(usize, usize), QuantError> {
    match w.shape()[..] {
        [c_out, c_in, 3, 3] if c_out > 0 && c_in > 0 => Ok((c_out, c_in)),
        _ => Err(QuantError::BadShape {
            got: w.shape().to_vec(),
            expected: "(C_out, C_in, 3, 3)",
        }),
    }
}

impl QuantWeights {
    pub fn new(
        bits: WeightBits,
        c_out: usize,
        c_in: usize,
        codes: Vec<i8>,
        scales: Vec<f32>,
        bias: Vec<i32>,
    ) -> Result<Self, QuantError> {
        if codes.len() != c_out * c_in * 9 {
            return Err(QuantError::LengthMismatch {
                len: codes.len(),
                shape: vec![c_out, c_in, 3, 3],
            });
        }
        if scales.len() != c_out || bias.len() != c_out {
            return Err(QuantError::LengthMismatch {
                len: scales.len().min(bias.len()),
                shape: vec![c_out],
            });
        }
        for &code in &codes {
            encode_field(code as i32, bits.bits())?;
        }
        if let Some(&s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(QuantError::NonPositiveScale(s));
        }
        Ok(Self {
            bits,
            c_out,
            c_in,
            codes,
            scales,
            bias,
        })
    }

    pub fn from_packed(
        bits: WeightBits,
        c_out: usize,
        c_in: usize,
        packed: &[u8],
        scales: Vec<f32>,
        bias: Vec<i32>,
    ) -> Result<Self, QuantError> {
        let codes = unpack_codes(packed, bits.bits(), c_out * c_in * 9)?
            .into_iter()
            .map(|c| c as i8)
            .collect();
        Self::new(bits, c_out, c_in, codes, scales, bias)
    }

    pub fn bits(&self) -> WeightBits {
        self.bits
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    /// Codes in (C_out, C_in, 3, 3) row-major order.
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn bias(&self) -> &[i32] {
        &self.bias
    }

    pub fn with_bias(mut self, bias: Vec<i32>) -> Self {
        assert_eq!(bias.len(), self.c_out);
        self.bias = bias;
        self
    }

    pub fn packed(&self) -> Vec<u8> {
        let codes: Vec<i32> = self.codes.iter().map(|&c| c as i32).collect();
        pack_codes(&codes, self.bits.bits()).expect("codes validated on construction")
    }

    pub fn packed_len(&self) -> usize {
        packed_len(self.codes.len(), self.bits.bits())
    }

    /// Real-valued weights, code·scale per output channel.
    pub fn dequantize(&self) -> FloatTensor {
        let per = self.c_in * 9;
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f32 * self.scales[i / per])
            .collect();
        FloatTensor {
            shape: vec![self.c_out, self.c_in, 3, 3],
            data,
        }
    }
}

/// Binary weights: code = sign(w) with sign(0) = +1, scale = mean |w| per
/// output channel (1 for an all-zero channel).
pub fn quantize_weights_1bit(w: &FloatTensor) -> Result<QuantWeights, QuantError> {
    let (c_out, c_in) = check_weight_shape(w)?;
    let per = c_in * 9;
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(c_out);
    for ch in w.data().chunks_exact(per) {
        let mean = ch.iter().map(|v| v.abs() as f64).sum::<f64>() / per as f64;
        scales.push(if mean > 0.0 { mean as f32 } else { 1.0 });
        codes.extend(ch.iter().map(|&v| if v >= 0.0 { 1i8 } else { -1 }));
    }
    QuantWeights::new(WeightBits::One, c_out, c_in, codes, scales, vec![0; c_out])
}

/// Symmetric 7-level weights: scale = max |w| / 3 per output channel,
/// code = clamp(round(w / scale), −3, 3) rounding half away from zero.
pub fn quantize_weights_3bit(w: &FloatTensor) -> Result<QuantWeights, QuantError> {
    let (c_out, c_in) = check_weight_shape(w)?;
    let per = c_in * 9;
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(c_out);
    for ch in w.data().chunks_exact(per) {
        let max = ch.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if max == 0.0 {
            scales.push(1.0);
            codes.extend(core::iter::repeat_n(0i8, per));
            continue;
        }
        let scale = max / 3.0;
        scales.push(scale);
        codes.extend(
            ch.iter()
                .map(|&v| round_half_away(v as f64 / scale as f64).clamp(-3.0, 3.0) as i8),
        );
    }
    QuantWeights::new(WeightBits::Three, c_out, c_in, codes, scales, vec![0; c_out])
}

pub fn quantize_weights(w: &FloatTensor, bits: WeightBits) -> Result<QuantWeights, QuantError> {
    match bits {
        WeightBits::One => quantize_weights_1bit(w),
        WeightBits::Three => quantize_weights_3bit(w),
    }
}

/// Unsigned 5-bit activation codes with a per-tensor scale; the real value
/// of a code is `code · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantActivations {
    channels: usize,
    height: usize,
    width: usize,
    codes: Vec<u8>,
    scale: f32,
}

pub(crate) fn check_scale(scale: f32) -> Result<(), QuantError> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(QuantError::NonPositiveScale(scale))
    }
}

/// Quantizes one real value to an activation code.
#[inline]
pub fn activation_code(x: f64, scale: f64) -> u8 {
    round_half_away(x / scale).clamp(0.0, ACT_MAX_CODE as f64) as u8
}

impl QuantActivations {
    pub fn new(
        shape: (usize, usize, usize),
        codes: Vec<u8>,
        scale: f32,
    ) -> Result<Self, QuantError> {
        let (c, h, w) = shape;
        if codes.len() != c * h * w {
            return Err(QuantError::LengthMismatch {
                len: codes.len(),
                shape: vec![c, h, w],
            });
        }
        if let Some(&bad) = codes.iter().find(|&&v| v > ACT_MAX_CODE) {
            return Err(QuantError::CodeOutOfRange {
                code: bad as i32,
                bits: ACT_BITS,
            });
        }
        check_scale(scale)?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            codes,
            scale,
        })
    }

    /// Internal constructor for codes already known to be in range.
    pub(crate) fn from_parts(shape: (usize, usize, usize), codes: Vec<u8>, scale: f32) -> Self {
        debug_assert_eq!(codes.len(), shape.0 * shape.1 * shape.2);
        debug_assert!(codes.iter().all(|&c| c <= ACT_MAX_CODE));
        Self {
            channels: shape.0,
            height: shape.1,
            width: shape.2,
            codes,
            scale,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn dequantize(&self) -> FloatTensor {
        FloatTensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.codes.iter().map(|&c| c as f32 * self.scale).collect(),
        }
    }

    pub fn packed(&self) -> Vec<u8> {
        let codes: Vec<i32> = self.codes.iter().map(|&c| c as i32).collect();
        pack_codes(&codes, ACT_BITS).expect("activation codes are 5-bit")
    }

    pub fn packed_len(&self) -> usize {
        packed_len(self.codes.len(), ACT_BITS)
    }
}

/// code = clamp(round(x / scale), 0, 31).
pub fn quantize_activations(x: &FloatTensor, scale: f32) -> Result<QuantActivations, QuantError> {
    check_scale(scale)?;
    let (c, h, w) = x.chw().ok_or_else(|| QuantError::BadShape {
        got: x.shape().to_vec(),
        expected: "(C, H, W)",
    })?;
    let codes = x
        .data()
        .iter()
        .map(|&v| activation_code(v as f64, scale as f64))
        .collect();
    Ok(QuantActivations::from_parts((c, h, w), codes, scale))
}
