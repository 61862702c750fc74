//! Simulated CNN accelerator.
//!
//! The chip executes exactly three operators: 3×3 stride-1 convolution with
//! zero padding of 0 or 1, ReLU fused into the convolution's requantization,
//! and 2×2 stride-2 max-pooling. Coefficients are 1-bit or 3-bit, activations
//! 5-bit, and coefficients plus live activations must fit the on-chip memory.
//!
//! Every network runs in two modes: an exact float reference and the
//! integer datapath. In integer mode each output element is
//! `acc = Σ x_code·w_code + bias` in an `i32` accumulator, rescaled by
//! `x_scale·w_scale[c]`, optionally rectified and requantized to 5 bits with
//! round-half-away-from-zero. A final convolution without ReLU returns the
//! rescaled real values instead (raw class scores).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::qtensor::{
    activation_code, packed_len, quantize_weights, FloatTensor, QuantActivations, QuantError,
    QuantWeights, WeightBits, ACT_BITS,
};
use crate::round_half_away;

/// On-chip memory for coefficients and activations: 9 MiB.
pub const CHIP_BUDGET_BYTES: usize = 9 * 1024 * 1024;

pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid scale {0}")]
    ScaleInvalid(f32),
    #[error("max-pool input has odd spatial size {h}x{w}")]
    OddSpatialDim { h: usize, w: usize },
    #[error("operator {0} is not supported by the accelerator")]
    UnsupportedOp(String),
    #[error("layer {layer} has no {mode} weights")]
    MissingWeights { layer: usize, mode: &'static str },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

fn conv_out_dim(n: usize, padding: usize) -> Option<usize> {
    (n + 2 * padding).checked_sub(2).filter(|&d| d >= 1)
}

fn conv_out_shape(
    (c, h, w): Shape,
    c_in: usize,
    c_out: usize,
    padding: usize,
) -> Result<Shape, LayerError> {
    if padding > 1 {
        return Err(LayerError::ShapeMismatch(format!("padding {padding} not in {{0, 1}}")));
    }
    if c != c_in {
        return Err(LayerError::ShapeMismatch(format!(
            "input has {c} channels, weights expect {c_in}"
        )));
    }
    match (conv_out_dim(h, padding), conv_out_dim(w, padding)) {
        (Some(oh), Some(ow)) => Ok((c_out, oh, ow)),
        _ => Err(LayerError::ShapeMismatch(format!(
            "{h}x{w} input with padding {padding} leaves no output"
        ))),
    }
}

/// Valid output columns `ox` for kernel column `k`: those with
/// `0 <= ox + k - pad < in_w`.
#[inline]
fn tap_range(k: usize, pad: usize, in_len: usize, out_len: usize) -> core::ops::Range<usize> {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    lo..hi.max(lo)
}

#[inline(always)]
fn tap_const<const W: i32>(dst: &mut [i32], src: &[u8]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += v as i32 * W;
    }
}

/// `dst += wv·src`. Weight codes lie in -3..=3; a constant multiplier per
/// loop lets the compiler use shifts and adds and vectorize without a
/// packed 32-bit multiply.
#[inline]
fn tap(dst: &mut [i32], src: &[u8], wv: i32) {
    match wv {
        1 => tap_const::<1>(dst, src),
        -1 => tap_const::<-1>(dst, src),
        2 => tap_const::<2>(dst, src),
        -2 => tap_const::<-2>(dst, src),
        3 => tap_const::<3>(dst, src),
        -3 => tap_const::<-3>(dst, src),
        _ => {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v as i32 * wv;
            }
        }
    }
}

/// Integer accumulators of one output channel (no saturation).
fn accumulate_int(
    x: &QuantActivations,
    w: &QuantWeights,
    co: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Vec<i32> {
    let (c_in, h, wd) = x.shape();
    let codes = x.codes();
    let mut acc = vec![w.bias()[co]; oh * ow];
    let kernel = &w.codes()[co * c_in * 9..(co + 1) * c_in * 9];
    let col_ranges = [0, 1, 2].map(|kx| tap_range(kx, padding, wd, ow));
    // one output row at a time keeps its accumulators in L1
    for oy in 0..oh {
        let dst = &mut acc[oy * ow..(oy + 1) * ow];
        for ky in 0..3 {
            let Some(iy) = (oy + ky).checked_sub(padding).filter(|&iy| iy < h) else {
                continue;
            };
            for ci in 0..c_in {
                let src = &codes[(ci * h + iy) * wd..][..wd];
                for (kx, cols) in col_ranges.iter().enumerate() {
                    let wv = kernel[ci * 9 + ky * 3 + kx] as i32;
                    if wv == 0 {
                        continue;
                    }
                    let src = &src[cols.start + kx - padding..cols.end + kx - padding];
                    tap(&mut dst[cols.clone()], src, wv);
                }
            }
        }
    }
    acc
}

/// Input width from which the channel-last path is used.
const HWC_MIN_CHANNELS: usize = 4;

/// Zero-padded channel-last copy of the input. The three input pixels under
/// a kernel row are then `3·C` contiguous values, so each output is three
/// dot products against a kernel laid out as (ky, kx, c).
struct HwcInput {
    data: Vec<i16>,
    channels: usize,
    padded_w: usize,
}

impl HwcInput {
    fn new(x: &QuantActivations, padding: usize) -> Self {
        let (c, h, w) = x.shape();
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        let mut data = vec![0i16; ph * pw * c];
        for (ci, plane) in x.codes().chunks_exact(h * w).enumerate() {
            for (y, row) in plane.chunks_exact(w).enumerate() {
                let base = ((y + padding) * pw + padding) * c + ci;
                for (xx, &v) in row.iter().enumerate() {
                    data[base + xx * c] = v as i16;
                }
            }
        }
        Self { data, channels: c, padded_w: pw }
    }

    fn accumulate(&self, w: &QuantWeights, co: usize, (oh, ow): (usize, usize)) -> Vec<i32> {
        let c = self.channels;
        let run = 3 * c;
        let kernel = &w.codes()[co * c * 9..(co + 1) * c * 9];
        let mut k = vec![0i16; 9 * c];
        for ci in 0..c {
            for t in 0..9 {
                k[t * c + ci] = kernel[ci * 9 + t] as i16;
            }
        }
        let bias = w.bias()[co];
        let mut acc = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = bias;
                for ky in 0..3 {
                    let start = ((oy + ky) * self.padded_w + ox) * c;
                    sum += dot_i16(&self.data[start..start + run], &k[ky * run..(ky + 1) * run]);
                }
                acc.push(sum);
            }
        }
        acc
    }
}

#[inline]
fn dot_i16(a: &[i16], b: &[i16]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

#[cfg(feature = "parallel")]
fn per_channel<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn per_channel<T>(n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

fn check_int_operands(
    x: &QuantActivations,
    w: &QuantWeights,
    padding: usize,
) -> Result<Shape, LayerError> {
    crate::qtensor::check_scale(x.scale()).map_err(|_| LayerError::ScaleInvalid(x.scale()))?;
    conv_out_shape(x.shape(), w.c_in(), w.c_out(), padding)
}

/// Rescaled real value of each output element: acc·x_scale·w_scale[c],
/// rectified when `relu` is set.
fn int_conv_real(
    x: &QuantActivations,
    w: &QuantWeights,
    padding: usize,
    relu: bool,
    out_shape: Shape,
) -> Vec<Vec<f64>> {
    let (c_out, oh, ow) = out_shape;
    let hwc = (x.shape().0 >= HWC_MIN_CHANNELS).then(|| HwcInput::new(x, padding));
    per_channel(c_out, |co| {
        let step = x.scale() as f64 * w.scales()[co] as f64;
        let acc = match &hwc {
            Some(input) => input.accumulate(w, co, (oh, ow)),
            None => accumulate_int(x, w, co, padding, (oh, ow)),
        };
        acc.into_iter()
            .map(|a| {
                let r = a as f64 * step;
                if relu {
                    r.max(0.0)
                } else {
                    r
                }
            })
            .collect()
    })
}

/// Integer 3×3 convolution with fused ReLU and 5-bit requantization.
pub fn conv3x3_int(
    x: &QuantActivations,
    w: &QuantWeights,
    padding: usize,
    relu: bool,
    out_scale: f32,
) -> Result<QuantActivations, LayerError> {
    let shape = check_int_operands(x, w, padding)?;
    if !(out_scale.is_finite() && out_scale > 0.0) {
        return Err(LayerError::ScaleInvalid(out_scale));
    }
    let codes = int_conv_real(x, w, padding, relu, shape)
        .into_iter()
        .flatten()
        .map(|r| activation_code(r, out_scale as f64))
        .collect();
    Ok(QuantActivations::from_parts(shape, codes, out_scale))
}

/// Integer 3×3 convolution returning the rescaled real outputs without
/// requantization; used for the scoring layer.
pub fn conv3x3_int_scores(
    x: &QuantActivations,
    w: &QuantWeights,
    padding: usize,
    relu: bool,
) -> Result<FloatTensor, LayerError> {
    let shape = check_int_operands(x, w, padding)?;
    let data = int_conv_real(x, w, padding, relu, shape)
        .into_iter()
        .flatten()
        .map(|r| r as f32)
        .collect();
    Ok(FloatTensor::new(&[shape.0, shape.1, shape.2], data)?)
}

/// Reference float 3×3 cross-correlation, stride 1.
pub fn conv3x3_float(
    x: &FloatTensor,
    w: &FloatTensor,
    bias: &[f32],
    padding: usize,
    relu: bool,
) -> Result<FloatTensor, LayerError> {
    let in_shape = x
        .chw()
        .ok_or_else(|| LayerError::ShapeMismatch(format!("input shape {:?} is not (C,H,W)", x.shape())))?;
    let (c_out, c_in) = match w.shape()[..] {
        [o, i, 3, 3] => (o, i),
        _ => {
            return Err(LayerError::ShapeMismatch(format!(
                "weight shape {:?} is not (C_out, C_in, 3, 3)",
                w.shape()
            )))
        }
    };
    if bias.len() != c_out {
        return Err(LayerError::ShapeMismatch(format!(
            "{} biases for {c_out} output channels",
            bias.len()
        )));
    }
    let (_, oh, ow) = conv_out_shape(in_shape, c_in, c_out, padding)?;
    let (_, h, wd) = in_shape;
    let xd = x.data();
    let wdata = w.data();
    let planes = per_channel(c_out, |co| {
        let mut acc = vec![bias[co] as f64; oh * ow];
        for ci in 0..c_in {
            let plane = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..3 {
                let rows = tap_range(ky, padding, h, oh);
                for kx in 0..3 {
                    let wv = wdata[((co * c_in + ci) * 3 + ky) * 3 + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = tap_range(kx, padding, wd, ow);
                    for oy in rows.clone() {
                        let src = &plane[(oy + ky - padding) * wd..][..wd];
                        for ox in cols.clone() {
                            acc[oy * ow + ox] += src[ox + kx - padding] as f64 * wv;
                        }
                    }
                }
            }
        }
        acc.into_iter()
            .map(|v| if relu { v.max(0.0) } else { v } as f32)
            .collect::<Vec<f32>>()
    });
    Ok(FloatTensor::new(&[c_out, oh, ow], planes.concat())?)
}

/// Tensors that the 2×2 stride-2 max-pool operates on.
pub trait MaxPool2x2: Sized {
    fn maxpool2x2(&self) -> Result<Self, LayerError>;
}

fn pool_plane<T: Copy + PartialOrd>(data: &[T], (c, h, w): Shape) -> Result<Vec<T>, LayerError> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(LayerError::OddSpatialDim { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in data.chunks_exact(h * w) {
        for oy in 0..oh {
            let top = &ch[2 * oy * w..][..w];
            let bot = &ch[(2 * oy + 1) * w..][..w];
            for ox in 0..ow {
                let mut m = top[2 * ox];
                for v in [top[2 * ox + 1], bot[2 * ox], bot[2 * ox + 1]] {
                    if v > m {
                        m = v;
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(out)
}

impl MaxPool2x2 for QuantActivations {
    fn maxpool2x2(&self) -> Result<Self, LayerError> {
        let (c, h, w) = self.shape();
        let codes = pool_plane(self.codes(), (c, h, w))?;
        Ok(QuantActivations::from_parts((c, h / 2, w / 2), codes, self.scale()))
    }
}

impl MaxPool2x2 for FloatTensor {
    fn maxpool2x2(&self) -> Result<Self, LayerError> {
        let shape = self
            .chw()
            .ok_or_else(|| LayerError::ShapeMismatch(format!("{:?} is not (C,H,W)", self.shape())))?;
        let data = pool_plane(self.data(), shape)?;
        Ok(FloatTensor::new(&[shape.0, shape.1 / 2, shape.2 / 2], data)?)
    }
}

pub fn maxpool2x2<T: MaxPool2x2>(x: &T) -> Result<T, LayerError> {
    x.maxpool2x2()
}

/// Float weights of a convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatConv {
    pub weights: FloatTensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: usize,
    pub relu: bool,
    pub bits: WeightBits,
    /// Scale of the 5-bit output codes, normally set by calibration.
    pub out_act_scale: f32,
    pub float: Option<FloatConv>,
    pub quant: Option<QuantWeights>,
}

impl ConvLayer {
    /// A structure-only layer without weights.
    pub fn new(in_channels: usize, out_channels: usize, padding: usize, relu: bool, bits: WeightBits) -> Self {
        Self {
            in_channels,
            out_channels,
            padding,
            relu,
            bits,
            out_act_scale: 1.0,
            float: None,
            quant: None,
        }
    }

    pub fn coefficient_count(&self) -> usize {
        self.in_channels * self.out_channels * 9
    }

    pub fn packed_bytes(&self) -> usize {
        packed_len(self.coefficient_count(), self.bits.bits())
    }

    pub fn with_float(mut self, weights: FloatTensor, bias: Vec<f32>) -> Self {
        self.float = Some(FloatConv { weights, bias });
        self
    }

    pub fn with_quant(mut self, q: QuantWeights) -> Self {
        self.quant = Some(q);
        self
    }

    pub fn with_out_scale(mut self, scale: f32) -> Self {
        self.out_act_scale = scale;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    MaxPool,
    /// An inner-product layer. Representable so that graphs containing one
    /// can be reported, but the accelerator cannot execute it.
    FullyConnected { in_features: usize, out_features: usize },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv3x3",
            Layer::MaxPool => "maxpool2x2",
            Layer::FullyConnected { .. } => "fully_connected",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunMode {
    Int,
    Float,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutput {
    Codes(QuantActivations),
    Real(FloatTensor),
}

impl RunOutput {
    pub fn to_float(&self) -> FloatTensor {
        match self {
            RunOutput::Codes(q) => q.dequantize(),
            RunOutput::Real(t) => t.clone(),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            RunOutput::Codes(q) => q.shape(),
            RunOutput::Real(t) => t.chw().expect("layer outputs are (C,H,W)"),
        }
    }
}

/// Per-layer record of one inference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionTrace {
    pub output_shapes: Vec<Shape>,
    /// 5-bit packed size of each layer's output.
    pub activation_bytes: Vec<usize>,
    /// Largest input+output footprint of any single layer.
    pub peak_activation_bytes: usize,
    pub layer_nanos: Vec<u64>,
}

impl ExecutionTrace {
    fn push(&mut self, in_bytes: usize, shape: Shape, nanos: u64) {
        let bytes = activation_bytes(shape);
        self.output_shapes.push(shape);
        self.activation_bytes.push(bytes);
        self.peak_activation_bytes = self.peak_activation_bytes.max(in_bytes + bytes);
        self.layer_nanos.push(nanos);
    }

    pub fn total_nanos(&self) -> u64 {
        self.layer_nanos.iter().sum()
    }
}

/// Packed 5-bit size of an activation map.
pub fn activation_bytes((c, h, w): Shape) -> usize {
    packed_len(c * h * w, ACT_BITS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnsupportedOp { layer: usize, op: String },
    BadPadding { layer: usize, padding: usize },
    ChannelMismatch { layer: usize, expected: usize, got: usize },
    ShapeCollapse { layer: usize, input: Shape },
    OddPoolInput { layer: usize, h: usize, w: usize },
    InvalidScale { layer: Option<usize> },
    WeightShape { layer: usize },
    BudgetExceeded { required: usize, budget: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedOp { layer, op } => write!(f, "layer {layer}: UnsupportedOp {op}"),
            Violation::BadPadding { layer, padding } => {
                write!(f, "layer {layer}: padding {padding} not supported (0 or 1)")
            }
            Violation::ChannelMismatch { layer, expected, got } => {
                write!(f, "layer {layer}: expects {expected} input channels, receives {got}")
            }
            Violation::ShapeCollapse { layer, input } => {
                write!(f, "layer {layer}: input {input:?} leaves an empty output")
            }
            Violation::OddPoolInput { layer, h, w } => {
                write!(f, "layer {layer}: max-pool input {h}x{w} is not even")
            }
            Violation::InvalidScale { layer: Some(l) } => write!(f, "layer {l}: invalid activation scale"),
            Violation::InvalidScale { layer: None } => write!(f, "input: invalid activation scale"),
            Violation::WeightShape { layer } => write!(f, "layer {layer}: weights do not match layer shape"),
            Violation::BudgetExceeded { required, budget } => {
                write!(f, "BudgetExceeded: {required} bytes required, {budget} available")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Output shape of each layer, as far as shapes could be propagated.
    pub shapes: Vec<Shape>,
    pub coefficient_bytes: usize,
    pub peak_activation_bytes: usize,
    pub budget_bytes: usize,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn output_shape(&self) -> Option<Shape> {
        self.shapes.last().copied()
    }

    pub fn required_bytes(&self) -> usize {
        self.coefficient_bytes + self.peak_activation_bytes
    }
}

/// A chip-legal operator chain with optional float and quantized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub input_shape: Shape,
    pub input_act_scale: f32,
    pub layers: Vec<Layer>,
}

impl NetworkGraph {
    pub fn new(input_shape: Shape, input_act_scale: f32) -> Self {
        Self {
            input_shape,
            input_act_scale,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        self.layers.iter().filter_map(Layer::as_conv)
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Packed coefficient bytes over all convolutions.
    pub fn coefficient_bytes(&self) -> usize {
        self.convs().map(ConvLayer::packed_bytes).sum()
    }

    /// Output shape of the final layer, if the chain is well formed.
    pub fn output_shape(&self) -> Option<Shape> {
        let report = self.validate(usize::MAX);
        let structural = report
            .violations
            .iter()
            .all(|v| matches!(v, Violation::InvalidScale { .. } | Violation::BudgetExceeded { .. }));
        structural.then(|| report.output_shape().unwrap_or(self.input_shape))
    }

    /// Checks the graph against the accelerator's rules and `budget_bytes`
    /// of on-chip memory. Every violation found is listed.
    pub fn validate(&self, budget_bytes: usize) -> ValidationReport {
        let mut violations = Vec::new();
        let mut shapes = Vec::new();
        let mut shape = Some(self.input_shape);
        let mut peak = 0usize;
        if !(self.input_act_scale.is_finite() && self.input_act_scale > 0.0) {
            violations.push(Violation::InvalidScale { layer: None });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match (layer, shape) {
                (Layer::FullyConnected { .. }, _) => {
                    violations.push(Violation::UnsupportedOp {
                        layer: i,
                        op: String::from(layer.name()),
                    });
                    None
                }
                (_, None) => None,
                (Layer::MaxPool, Some((c, h, w))) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        violations.push(Violation::OddPoolInput { layer: i, h, w });
                        None
                    } else if h < 2 || w < 2 {
                        violations.push(Violation::ShapeCollapse { layer: i, input: (c, h, w) });
                        None
                    } else {
                        Some((c, h / 2, w / 2))
                    }
                }
                (Layer::Conv(conv), Some((c, h, w))) => {
                    if conv.padding > 1 {
                        violations.push(Violation::BadPadding { layer: i, padding: conv.padding });
                    }
                    if !(conv.out_act_scale.is_finite() && conv.out_act_scale > 0.0) {
                        violations.push(Violation::InvalidScale { layer: Some(i) });
                    }
                    if conv_weights_mismatch(conv) {
                        violations.push(Violation::WeightShape { layer: i });
                    }
                    if c != conv.in_channels {
                        violations.push(Violation::ChannelMismatch {
                            layer: i,
                            expected: conv.in_channels,
                            got: c,
                        });
                    }
                    let pad = conv.padding.min(1);
                    match (conv_out_dim(h, pad), conv_out_dim(w, pad)) {
                        (Some(oh), Some(ow)) => Some((conv.out_channels, oh, ow)),
                        _ => {
                            violations.push(Violation::ShapeCollapse { layer: i, input: (c, h, w) });
                            None
                        }
                    }
                }
            };
            if let (Some(prev), Some(out)) = (shape, next) {
                peak = peak.max(activation_bytes(prev) + activation_bytes(out));
                shapes.push(out);
            }
            shape = next;
        }
        let coefficient_bytes = self.coefficient_bytes();
        let required = coefficient_bytes.saturating_add(peak);
        if required > budget_bytes {
            violations.push(Violation::BudgetExceeded {
                required,
                budget: budget_bytes,
            });
        }
        ValidationReport {
            violations,
            shapes,
            coefficient_bytes,
            peak_activation_bytes: peak,
            budget_bytes,
        }
    }

    /// Quantizes every convolution's float weights at its bit width and
    /// converts float biases into the accumulator domain of the layer's
    /// input scale.
    pub fn quantize(&mut self) -> Result<(), LayerError> {
        let mut in_scale = self.input_act_scale;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(conv) => {
                    let fc = conv
                        .float
                        .as_ref()
                        .ok_or(LayerError::MissingWeights { layer: i, mode: "float" })?;
                    let q = quantize_weights(&fc.weights, conv.bits)?;
                    let bias = q
                        .scales()
                        .iter()
                        .zip(&fc.bias)
                        .map(|(&ws, &b)| accumulator_bias(b, in_scale, ws))
                        .collect();
                    conv.quant = Some(q.with_bias(bias));
                    in_scale = conv.out_act_scale;
                }
                Layer::MaxPool => {}
                Layer::FullyConnected { .. } => return Err(LayerError::UnsupportedOp(String::from(layer.name()))),
            }
        }
        Ok(())
    }

    /// Runs the network on real-valued input (pixel values). In integer mode
    /// the input is first quantized at `input_act_scale`.
    pub fn run(&self, x: &FloatTensor, mode: RunMode) -> Result<(RunOutput, ExecutionTrace), LayerError> {
        self.run_timed(x, mode, &|| 0)
    }

    /// As [`run`](Self::run), timing each layer with `clock` (nanoseconds).
    pub fn run_timed(
        &self,
        x: &FloatTensor,
        mode: RunMode,
        clock: &dyn Fn() -> u64,
    ) -> Result<(RunOutput, ExecutionTrace), LayerError> {
        match mode {
            RunMode::Float => {
                let (y, trace) = self.run_float_observed(x, clock, &mut |_, _| {})?;
                Ok((RunOutput::Real(y), trace))
            }
            RunMode::Int => {
                let q = crate::qtensor::quantize_activations(x, self.input_act_scale)
                    .map_err(|_| LayerError::ScaleInvalid(self.input_act_scale))?;
                self.run_int_timed(&q, clock)
            }
        }
    }

    fn check_input(&self, shape: Shape) -> Result<(), LayerError> {
        if shape != self.input_shape {
            return Err(LayerError::ShapeMismatch(format!(
                "input {shape:?}, graph expects {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn run_int(&self, x: &QuantActivations) -> Result<(RunOutput, ExecutionTrace), LayerError> {
        self.run_int_timed(x, &|| 0)
    }

    pub fn run_int_timed(
        &self,
        x: &QuantActivations,
        clock: &dyn Fn() -> u64,
    ) -> Result<(RunOutput, ExecutionTrace), LayerError> {
        self.check_input(x.shape())?;
        let mut trace = ExecutionTrace::default();
        let mut cur = RunOutput::Codes(x.clone());
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let t0 = clock();
            let RunOutput::Codes(input) = &cur else {
                return Err(LayerError::ShapeMismatch(format!(
                    "layer {i} follows a real-valued scoring layer"
                )));
            };
            let in_bytes = input.packed_len();
            let next = match layer {
                Layer::MaxPool => RunOutput::Codes(input.maxpool2x2()?),
                Layer::Conv(conv) => {
                    let q = conv
                        .quant
                        .as_ref()
                        .ok_or(LayerError::MissingWeights { layer: i, mode: "quantized" })?;
                    if i == last && !conv.relu {
                        RunOutput::Real(conv3x3_int_scores(input, q, conv.padding, false)?)
                    } else {
                        RunOutput::Codes(conv3x3_int(input, q, conv.padding, conv.relu, conv.out_act_scale)?)
                    }
                }
                Layer::FullyConnected { .. } => return Err(LayerError::UnsupportedOp(String::from(layer.name()))),
            };
            let t1 = clock();
            trace.push(in_bytes, next.shape(), t1.saturating_sub(t0));
            cur = next;
        }
        Ok((cur, trace))
    }

    /// Float reference run, handing every layer's output to `observe`.
    pub fn run_float_observed(
        &self,
        x: &FloatTensor,
        clock: &dyn Fn() -> u64,
        observe: &mut dyn FnMut(usize, &FloatTensor),
    ) -> Result<(FloatTensor, ExecutionTrace), LayerError> {
        let shape = x
            .chw()
            .ok_or_else(|| LayerError::ShapeMismatch(format!("{:?} is not (C,H,W)", x.shape())))?;
        self.check_input(shape)?;
        let mut trace = ExecutionTrace::default();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let t0 = clock();
            let in_bytes = activation_bytes(cur.chw().expect("rank 3"));
            let next = match layer {
                Layer::MaxPool => cur.maxpool2x2()?,
                Layer::Conv(conv) => {
                    let fc = conv
                        .float
                        .as_ref()
                        .ok_or(LayerError::MissingWeights { layer: i, mode: "float" })?;
                    conv3x3_float(&cur, &fc.weights, &fc.bias, conv.padding, conv.relu)?
                }
                Layer::FullyConnected { .. } => return Err(LayerError::UnsupportedOp(String::from(layer.name()))),
            };
            let t1 = clock();
            observe(i, &next);
            trace.push(in_bytes, next.chw().expect("rank 3"), t1.saturating_sub(t0));
            cur = next;
        }
        Ok((cur, trace))
    }
}

fn conv_weights_mismatch(conv: &ConvLayer) -> bool {
    let float_bad = conv.float.as_ref().is_some_and(|f| {
        f.weights.shape() != [conv.out_channels, conv.in_channels, 3, 3] || f.bias.len() != conv.out_channels
    });
    let quant_bad = conv.quant.as_ref().is_some_and(|q| {
        q.c_out() != conv.out_channels || q.c_in() != conv.in_channels || q.bits() != conv.bits
    });
    float_bad || quant_bad
}

/// Float bias expressed in accumulator units of `in_scale·w_scale`.
pub fn accumulator_bias(bias: f32, in_scale: f32, w_scale: f32) -> i32 {
    let v = round_half_away(bias as f64 / (in_scale as f64 * w_scale as f64));
    v.clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

#[cfg(test)]
mod tests {
    use super::*;

    // 3-bit so that the off-centre taps can be zero
    fn identity_weights(c: usize) -> QuantWeights {
        let mut codes = vec![0i8; c * c * 9];
        for ch in 0..c {
            codes[(ch * c + ch) * 9 + 4] = 1;
        }
        QuantWeights::new(WeightBits::Three, c, c, codes, vec![1.0; c], vec![0; c]).unwrap()
    }

    #[test]
    fn identity_convolution_preserves_codes() {
        let codes: Vec<u8> = (0..2 * 5 * 5).map(|i| (i * 7 % 32) as u8).collect();
        let x = QuantActivations::new((2, 5, 5), codes.clone(), 0.5).unwrap();
        let w = identity_weights(2);
        let y = conv3x3_int(&x, &w, 1, true, 0.5).unwrap();
        assert_eq!(y.codes(), &codes[..]);
    }

    #[test]
    fn channel_last_path_matches_planar() {
        let mut state = 0x2545_f491_u32;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            state
        };
        for &(c, h, w, padding) in &[(4, 6, 5, 1), (7, 5, 9, 0), (64, 9, 9, 1), (64, 5, 5, 0)] {
            let codes = (0..c * h * w).map(|_| (next() % 32) as u8).collect();
            let x = QuantActivations::new((c, h, w), codes, 1.0).unwrap();
            let wc = (0..3 * c * 9).map(|_| (next() % 7) as i8 - 3).collect();
            let bias = (0..3).map(|_| (next() % 200) as i32 - 100).collect();
            let wq = QuantWeights::new(WeightBits::Three, 3, c, wc, vec![1.0; 3], bias).unwrap();
            let out = (h + 2 * padding - 2, w + 2 * padding - 2);
            let hwc = HwcInput::new(&x, padding);
            for co in 0..3 {
                assert_eq!(hwc.accumulate(&wq, co, out), accumulate_int(&x, &wq, co, padding, out));
            }
        }
    }

    #[test]
    fn valid_chain_shrinks_by_two() {
        let x = QuantActivations::new((1, 7, 7), vec![1; 49], 1.0).unwrap();
        let w = identity_weights(1);
        let a = conv3x3_int(&x, &w, 0, true, 1.0).unwrap();
        let b = conv3x3_int(&a, &w, 0, true, 1.0).unwrap();
        let c = conv3x3_int(&b, &w, 0, true, 1.0).unwrap();
        assert_eq!([a.shape(), b.shape(), c.shape()], [(1, 5, 5), (1, 3, 3), (1, 1, 1)]);
        assert!(conv3x3_int(&c, &w, 0, true, 1.0).is_err());
    }

    #[test]
    fn conv_errors() {
        let x = QuantActivations::new((2, 4, 4), vec![0; 32], 1.0).unwrap();
        let w = identity_weights(1);
        assert!(matches!(conv3x3_int(&x, &w, 1, true, 1.0), Err(LayerError::ShapeMismatch(_))));
        let x1 = QuantActivations::new((1, 4, 4), vec![0; 16], 1.0).unwrap();
        assert!(matches!(conv3x3_int(&x1, &w, 1, true, 0.0), Err(LayerError::ScaleInvalid(_))));
        assert!(matches!(conv3x3_int(&x1, &w, 2, true, 1.0), Err(LayerError::ShapeMismatch(_))));
    }

    #[test]
    fn float_conv_constant_and_zero() {
        let x = FloatTensor::new(&[1, 4, 4], vec![2.5; 16]).unwrap();
        let ones = FloatTensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv3x3_float(&x, &ones, &[0.0], 0, false).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 22.5));
        let zero = FloatTensor::zeros(&[3, 1, 3, 3]);
        let y = conv3x3_float(&x, &zero, &[0.0; 3], 1, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(conv3x3_float(&x, &zero, &[0.0], 1, false).is_err());
    }

    #[test]
    fn maxpool_definition() {
        let x = QuantActivations::new((1, 2, 2), vec![5, 3, 2, 7], 1.0).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().codes(), &[7]);
        let c = FloatTensor::new(&[2, 4, 4], vec![3.0; 32]).unwrap();
        let p = maxpool2x2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 3.0));
        let odd = QuantActivations::new((1, 3, 2), vec![0; 6], 1.0).unwrap();
        assert!(matches!(maxpool2x2(&odd), Err(LayerError::OddSpatialDim { h: 3, w: 2 })));
    }

    #[test]
    fn five_pools_reach_seven() {
        let mut g = NetworkGraph::new((3, 224, 224), 1.0);
        for _ in 0..5 {
            g.push(Layer::MaxPool);
        }
        let report = g.validate(CHIP_BUDGET_BYTES);
        assert!(report.is_valid());
        assert_eq!(report.output_shape(), Some((3, 7, 7)));
    }

    #[test]
    fn validation_lists_violations() {
        let mut g = NetworkGraph::new((3, 6, 6), 1.0);
        g.push(Layer::Conv(ConvLayer::new(4, 8, 1, true, WeightBits::One)))
            .push(Layer::FullyConnected { in_features: 8, out_features: 2 });
        let report = g.validate(CHIP_BUDGET_BYTES);
        assert!(report.violations.contains(&Violation::ChannelMismatch { layer: 0, expected: 4, got: 3 }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnsupportedOp { layer: 1, .. })));

        let mut odd = NetworkGraph::new((1, 6, 6), 1.0);
        odd.push(Layer::MaxPool).push(Layer::MaxPool);
        assert_eq!(
            odd.validate(CHIP_BUDGET_BYTES).violations,
            vec![Violation::OddPoolInput { layer: 1, h: 3, w: 3 }]
        );

        let mut big = NetworkGraph::new((512, 8, 8), 1.0);
        for _ in 0..20 {
            big.push(Layer::Conv(ConvLayer::new(512, 512, 1, true, WeightBits::Three)));
        }
        let report = big.validate(CHIP_BUDGET_BYTES);
        assert!(report.coefficient_bytes > CHIP_BUDGET_BYTES);
        assert!(matches!(report.violations[..], [Violation::BudgetExceeded { .. }]));
    }

    #[test]
    fn empty_graph_is_identity() {
        let g = NetworkGraph::new((1, 2, 2), 1.0);
        let x = FloatTensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (y, trace) = g.run(&x, RunMode::Int).unwrap();
        assert_eq!(y.to_float(), x);
        assert!(trace.output_shapes.is_empty());
        let (y, _) = g.run(&x, RunMode::Float).unwrap();
        assert_eq!(y, RunOutput::Real(x));
    }

    #[test]
    fn scoring_layer_returns_real_values() {
        let mut g = NetworkGraph::new((1, 3, 3), 1.0);
        let w = FloatTensor::new(&[1, 1, 3, 3], vec![-1.0; 9]).unwrap();
        g.push(Layer::Conv(
            ConvLayer::new(1, 1, 0, false, WeightBits::One).with_float(w, vec![0.0]),
        ));
        g.quantize().unwrap();
        let x = FloatTensor::new(&[1, 3, 3], vec![2.0; 9]).unwrap();
        let (y, trace) = g.run(&x, RunMode::Int).unwrap();
        assert_eq!(y, RunOutput::Real(FloatTensor::new(&[1, 1, 1], vec![-18.0]).unwrap()));
        assert_eq!(trace.output_shapes, vec![(1, 1, 1)]);
        assert!(trace.peak_activation_bytes >= *trace.activation_bytes.iter().max().unwrap());
    }

    #[test]
    fn bias_is_carried_in_accumulator_units() {
        assert_eq!(accumulator_bias(1.0, 0.5, 0.25), 8);
        assert_eq!(accumulator_bias(-0.5, 1.0, 0.25), -2);
    }
}
