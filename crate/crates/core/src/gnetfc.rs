//! GnetFC: a VGG-style stack of five padded 3×3 major layers with max-pooling,
//! followed by a sixth major layer of three unpadded 3×3 convolutions that
//! stand in for the fully connected classifier (7×7 → 5×5 → 3×3 → 1×1).
//!
//! Also here: the exact FC ≡ k×k-valid-convolution identity, activation scale
//! calibration and coefficient memory accounting.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::engine::{
    activation_bytes, ConvLayer, Layer, LayerError, NetworkGraph, CHIP_BUDGET_BYTES,
};
use crate::qtensor::{packed_len, FloatTensor, WeightBits, ACT_MAX_CODE};

/// Spatial side of the last pooled map at the reference input size.
pub const FINAL_POOLED_SIDE: usize = 7;
/// Decimal megabyte, the unit of the published model sizes.
pub const MEGABYTE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
}

fn invalid(msg: impl Into<String>) -> SpecError {
    SpecError::InvalidSpec(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_side: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// Channel width of majors 1–5.
    pub major_channels: Vec<usize>,
    /// Convolutions in each of majors 1–5.
    pub major_sublayers: Vec<usize>,
    /// Widths of the three unpadded convolutions of major 6; the last one
    /// equals `num_classes`.
    pub major6_channels: Vec<usize>,
    /// Weight bits for each of the six majors.
    pub bits_per_major: Vec<u32>,
    /// Divides the input side and every hidden width.
    pub scale_divisor: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::with_classes(14)
    }
}

impl ArchSpec {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            input_side: 224,
            input_channels: 3,
            num_classes,
            major_channels: vec![64, 128, 256, 512, 256],
            major_sublayers: vec![2, 2, 3, 3, 3],
            major6_channels: vec![256, 256, num_classes],
            bits_per_major: vec![3, 3, 1, 1, 1, 1],
            scale_divisor: 1,
        }
    }

    /// A narrow variant for desk-scale experiments: one convolution per
    /// major, small widths, the same pooling depth and major-6 geometry.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            major_channels: vec![8, 8, 16, 16, 16],
            major_sublayers: vec![1, 1, 1, 1, 1],
            major6_channels: vec![16, 16, num_classes],
            ..Self::with_classes(num_classes)
        }
    }

    /// Input side after applying the divisor.
    pub fn effective_side(&self) -> usize {
        self.input_side / self.scale_divisor.max(1)
    }

    fn hidden(&self, width: usize) -> usize {
        width / self.scale_divisor.max(1)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if !matches!(self.scale_divisor, 1 | 2 | 4) {
            return Err(invalid(format!("scale_divisor {} not in {{1, 2, 4}}", self.scale_divisor)));
        }
        if self.major_channels.len() != 5 || self.major_sublayers.len() != 5 {
            return Err(invalid("majors 1-5 need exactly 5 channel widths and 5 sublayer counts"));
        }
        if self.major6_channels.len() != 3 {
            return Err(invalid("major 6 has exactly 3 sublayers"));
        }
        if self.bits_per_major.len() != 6 {
            return Err(invalid("bits_per_major needs 6 entries"));
        }
        if let Some(b) = self.bits_per_major.iter().find(|&&b| b != 1 && b != 3) {
            return Err(invalid(format!("weight bits {b} not in {{1, 3}}")));
        }
        if self.major_sublayers.contains(&0) {
            return Err(invalid("every major needs at least one convolution"));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(invalid("num_classes and input_channels must be positive"));
        }
        if self.major6_channels[2] != self.num_classes {
            return Err(invalid(format!(
                "final major-6 width {} differs from num_classes {}",
                self.major6_channels[2], self.num_classes
            )));
        }
        let d = self.scale_divisor;
        for &c in self.major_channels.iter().chain(&self.major6_channels[..2]) {
            if c == 0 || c % d != 0 {
                return Err(invalid(format!("channel width {c} is not a positive multiple of {d}")));
            }
        }
        if !self.input_side.is_multiple_of(d) {
            return Err(invalid(format!("input side {} not divisible by {d}", self.input_side)));
        }
        let side = self.effective_side();
        if !side.is_multiple_of(32) {
            return Err(invalid(format!(
                "input side {side} is not divisible by 32: five pools give {}x{} ",
                side as f64 / 32.0,
                side as f64 / 32.0
            )));
        }
        let k = side / 32;
        if k != FINAL_POOLED_SIDE {
            return Err(invalid(format!(
                "five pools leave a {k}x{k} map; the unpadded major-6 chain needs exactly 7x7 to end at 1x1"
            )));
        }
        Ok(())
    }

    /// Serializes as `key=value` lines.
    pub fn to_kv_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let bits: Vec<usize> = self.bits_per_major.iter().map(|&b| b as usize).collect();
        let mut out = String::new();
        let _ = writeln!(out, "input_side={}", self.input_side);
        let _ = writeln!(out, "input_channels={}", self.input_channels);
        let _ = writeln!(out, "num_classes={}", self.num_classes);
        let _ = writeln!(out, "major_channels={}", list(&self.major_channels));
        let _ = writeln!(out, "major_sublayers={}", list(&self.major_sublayers));
        let _ = writeln!(out, "major6_channels={}", list(&self.major6_channels));
        let _ = writeln!(out, "bits_per_major={}", list(&bits));
        let _ = writeln!(out, "scale_divisor={}", self.scale_divisor);
        out
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors. Setting `num_classes`
    /// without `major6_channels` also resizes the scoring layer.
    pub fn from_kv_str(text: &str) -> Result<Self, SpecError> {
        let mut spec = Self::default();
        let mut saw_major6 = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| SpecError::Config {
                line,
                reason: String::from("expected key=value"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.trim().parse::<usize>().map_err(|_| SpecError::Config {
                    line,
                    reason: format!("{key}: {v:?} is not a non-negative integer"),
                })
            };
            let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<_>, _>>();
            match key {
                "input_side" => spec.input_side = num(value)?,
                "input_channels" => spec.input_channels = num(value)?,
                "num_classes" => spec.num_classes = num(value)?,
                "major_channels" => spec.major_channels = list(value)?,
                "major_sublayers" => spec.major_sublayers = list(value)?,
                "major6_channels" => {
                    spec.major6_channels = list(value)?;
                    saw_major6 = true;
                }
                "bits_per_major" => {
                    spec.bits_per_major = list(value)?.into_iter().map(|b| b as u32).collect()
                }
                "scale_divisor" => spec.scale_divisor = num(value)?,
                other => {
                    return Err(SpecError::Config {
                        line,
                        reason: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        if !saw_major6 && spec.major6_channels.len() == 3 {
            spec.major6_channels[2] = spec.num_classes;
        }
        Ok(spec)
    }
}

/// Default input activation scale: pixel 255 maps to code 31.
pub const PIXEL_ACT_SCALE: f32 = 255.0 / 31.0;

fn bits_of(b: u32) -> WeightBits {
    WeightBits::from_bits(b).expect("bits validated")
}

/// Builds the structure-only GnetFC graph (no weights).
pub fn build_gnetfc(spec: &ArchSpec) -> Result<NetworkGraph, SpecError> {
    spec.validate()?;
    let side = spec.effective_side();
    let mut g = NetworkGraph::new((spec.input_channels, side, side), PIXEL_ACT_SCALE);
    let mut c_in = spec.input_channels;
    for m in 0..5 {
        let width = spec.hidden(spec.major_channels[m]);
        for _ in 0..spec.major_sublayers[m] {
            g.push(Layer::Conv(ConvLayer::new(c_in, width, 1, true, bits_of(spec.bits_per_major[m]))));
            c_in = width;
        }
        g.push(Layer::MaxPool);
    }
    for (j, &w) in spec.major6_channels.iter().enumerate() {
        let width = if j == 2 { w } else { spec.hidden(w) };
        let last = j == 2;
        g.push(Layer::Conv(ConvLayer::new(c_in, width, 0, !last, bits_of(spec.bits_per_major[5]))));
        c_in = width;
    }
    Ok(g)
}

/// The thirteen convolutions of VGG16 with the same bit assignment by major
/// (3, 3, 1, 1, 1) and its five pools.
pub fn vgg16_conv_stack() -> NetworkGraph {
    let mut g = NetworkGraph::new((3, 224, 224), PIXEL_ACT_SCALE);
    let mut c_in = 3;
    for (width, subs, bits) in [
        (64, 2, WeightBits::Three),
        (128, 2, WeightBits::Three),
        (256, 3, WeightBits::One),
        (512, 3, WeightBits::One),
        (512, 3, WeightBits::One),
    ] {
        for _ in 0..subs {
            g.push(Layer::Conv(ConvLayer::new(c_in, width, 1, true, bits)));
            c_in = width;
        }
        g.push(Layer::MaxPool);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FcError {
    #[error("FC input dimension {got} is not C·k·k = {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Reshapes FC weights (D × C·k·k) into a (D, C, k, k) kernel. A valid k×k
/// convolution over a C×k×k map with this kernel reproduces the FC layer.
pub fn fc_as_single_conv(fc: &FloatTensor, k: usize, channels: usize) -> Result<FloatTensor, FcError> {
    let expected = channels * k * k;
    let (d, din) = match fc.shape()[..] {
        [d, din] => (d, din),
        _ => {
            return Err(FcError::DimensionMismatch {
                got: fc.len(),
                expected,
            })
        }
    };
    if din != expected {
        return Err(FcError::DimensionMismatch { got: din, expected });
    }
    // (c, y, x) flattening order is already row-major (C, k, k)
    Ok(FloatTensor::new(&[d, channels, k, k], fc.data().to_vec()).expect("same length"))
}

/// Unpadded stride-1 convolution with an arbitrary square kernel
/// (D, C, k, k) over a (C, H, W) map.
pub fn conv_valid_float(x: &FloatTensor, w: &FloatTensor) -> Result<FloatTensor, LayerError> {
    let (c, h, wd) = x
        .chw()
        .ok_or_else(|| LayerError::ShapeMismatch(format!("{:?} is not (C,H,W)", x.shape())))?;
    let (d, wc, k) = match w.shape()[..] {
        [d, wc, k, k2] if k == k2 => (d, wc, k),
        _ => return Err(LayerError::ShapeMismatch(format!("{:?} is not (D,C,k,k)", w.shape()))),
    };
    if wc != c || k == 0 || k > h || k > wd {
        return Err(LayerError::ShapeMismatch(format!(
            "kernel {:?} does not fit input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = Vec::with_capacity(d * oh * ow);
    for o in 0..d {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += xd[(ci * h + oy + ky) * wd + ox + kx] as f64
                                * wdat[((o * c + ci) * k + ky) * k + kx] as f64;
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Ok(FloatTensor::new(&[d, oh, ow], out)?)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("calibration needs at least one sample")]
    EmptySampleSet,
    #[error(transparent)]
    Layer(#[from] LayerError),
}

/// Observes float-mode activations over `samples` and returns one output
/// scale per convolution (in graph order): the largest rectified output
/// divided by 31, or 1 when the layer never produced a positive value.
pub fn calibrate_scales(g: &NetworkGraph, samples: &[FloatTensor]) -> Result<Vec<f32>, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::EmptySampleSet);
    }
    let mut max = vec![0.0f32; g.layers.len()];
    for x in samples {
        g.run_float_observed(x, &|| 0, &mut |i, y| {
            if matches!(g.layers[i], Layer::Conv(_)) {
                max[i] = y.data().iter().fold(max[i], |m, &v| m.max(v));
            }
        })?;
    }
    Ok(g
        .layers
        .iter()
        .zip(max)
        .filter(|(l, _)| matches!(l, Layer::Conv(_)))
        .map(|(_, m)| if m > 0.0 { m / ACT_MAX_CODE as f32 } else { 1.0 })
        .collect())
}

/// Writes per-convolution output scales into the graph.
pub fn apply_scales(g: &mut NetworkGraph, scales: &[f32]) -> Result<(), LayerError> {
    let n = g.convs().count();
    if scales.len() != n {
        return Err(LayerError::ShapeMismatch(format!("{} scales for {n} convolutions", scales.len())));
    }
    for (conv, &s) in g.convs_mut().zip(scales) {
        conv.out_act_scale = s;
    }
    Ok(())
}

/// Calibrates on `samples`, applies the scales and quantizes the weights.
pub fn calibrate_and_quantize(g: &mut NetworkGraph, samples: &[FloatTensor]) -> Result<Vec<f32>, CalibrationError> {
    let scales = calibrate_scales(g, samples)?;
    apply_scales(g, &scales)?;
    g.quantize()?;
    Ok(scales)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum StorageMode {
    /// True bit-packing: `bits/8` bytes per coefficient.
    #[default]
    Packed,
    /// Accounting with the accelerator's stated compression factors against
    /// an 8-bit baseline: 2 stored bits per 1-bit coefficient, 4 per 3-bit.
    Paper,
}

impl StorageMode {
    pub fn stored_bits(self, bits: WeightBits) -> u32 {
        match (self, bits) {
            (StorageMode::Packed, b) => b.bits(),
            (StorageMode::Paper, WeightBits::One) => 2,
            (StorageMode::Paper, WeightBits::Three) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory {
    pub layer: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bits: WeightBits,
    pub coefficients: usize,
    pub float32_bytes: usize,
    pub packed_bytes: usize,
    pub paper_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub storage_mode: StorageMode,
    pub layers: Vec<LayerMemory>,
    pub activation_peak_bytes: usize,
    pub budget_bytes: usize,
}

impl MemoryReport {
    pub fn coefficients(&self) -> usize {
        self.layers.iter().map(|l| l.coefficients).sum()
    }

    pub fn float32_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.float32_bytes).sum()
    }

    pub fn packed_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.packed_bytes).sum()
    }

    pub fn paper_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.paper_bytes).sum()
    }

    /// Coefficient bytes under the report's storage mode.
    pub fn model_bytes(&self) -> usize {
        match self.storage_mode {
            StorageMode::Packed => self.packed_bytes(),
            StorageMode::Paper => self.paper_bytes(),
        }
    }

    fn ratio(&self, bytes: usize) -> f64 {
        if bytes == 0 {
            0.0
        } else {
            self.float32_bytes() as f64 / bytes as f64
        }
    }

    pub fn packed_compression(&self) -> f64 {
        self.ratio(self.packed_bytes())
    }

    pub fn paper_compression(&self) -> f64 {
        self.ratio(self.paper_bytes())
    }

    /// Packed coefficients plus peak live activations.
    pub fn on_chip_bytes(&self) -> usize {
        self.packed_bytes() + self.activation_peak_bytes
    }

    pub fn fits_budget(&self) -> bool {
        self.on_chip_bytes() <= self.budget_bytes
    }
}

/// Coefficient accounting for every convolution plus the activation peak of
/// a dry shape pass.
pub fn memory_report(g: &NetworkGraph, storage_mode: StorageMode) -> MemoryReport {
    let layers = g
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.as_conv().map(|c| (i, c)))
        .map(|(i, c)| {
            let n = c.coefficient_count();
            LayerMemory {
                layer: i,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                bits: c.bits,
                coefficients: n,
                float32_bytes: 4 * n,
                packed_bytes: packed_len(n, c.bits.bits()),
                paper_bytes: packed_len(n, StorageMode::Paper.stored_bits(c.bits)),
            }
        })
        .collect();
    let shapes = g.validate(usize::MAX);
    let activation_peak_bytes = if g.layers.is_empty() {
        0
    } else {
        shapes.peak_activation_bytes.max(activation_bytes(g.input_shape))
    };
    MemoryReport {
        storage_mode,
        layers,
        activation_peak_bytes,
        budget_bytes: CHIP_BUDGET_BYTES,
    }
}
