//! The `GNFC` model file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GNFC"
//! 4       4     version (u32) = 1
//! 8       4     payload length N (u32)
//! 12      N     payload
//! 12+N    4     CRC-32 (IEEE) of the payload
//!
//! payload:
//!   u32 len, bytes   architecture block (key=value text; empty for custom graphs)
//!   u32 C, H, W      input shape
//!   u32 count        label table, then per label: u32 len, UTF-8 bytes
//!   u32 count        layer records, then per layer:
//!     u8 kind        0 = conv3x3, 1 = maxpool2x2
//!     conv only:
//!       u8 bits (1|3), u8 padding (0|1), u8 relu (0|1)
//!       u32 c_out, u32 c_in
//!       f32 out_act_scale
//!       f32 × c_out  weight scales
//!       i32 × c_out  biases (accumulator domain)
//!       u32 len, bytes  packed weight codes, (c_out, c_in, 3, 3) row-major
//!   f32 input_act_scale
//! ```

use std::path::Path;

use supergnet_core::engine::{ConvLayer, Layer, NetworkGraph};
use supergnet_core::gnetfc::{build_gnetfc, ArchSpec};
use supergnet_core::qtensor::{packed_len, QuantWeights, WeightBits};

pub const MAGIC: &[u8; 4] = b"GNFC";
pub const VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_POOL: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file version {0} is not supported")]
    VersionUnsupported(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("cannot save: {0}")]
    Unsavable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Invalid(msg.into())
}

/// A quantized network with its class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub graph: NetworkGraph,
    pub labels: Vec<String>,
    pub arch: Option<ArchSpec>,
}

impl Model {
    pub fn new(graph: NetworkGraph, labels: Vec<String>, arch: Option<ArchSpec>) -> Self {
        Self { graph, labels, arch }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.graph.output_shape().map(|(c, _, _)| c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        save_model(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, save_model(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        load_model(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<(), ModelError> {
        let v = u32::try_from(n).map_err(|_| ModelError::Unsavable(format!("length {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<(), ModelError> {
        self.len(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
}

/// Serializes a model whose convolutions all carry quantized weights.
pub fn save_model(model: &Model) -> Result<Vec<u8>, ModelError> {
    let g = &model.graph;
    let mut p = Writer(Vec::new());
    let arch = model.arch.as_ref().map(ArchSpec::to_kv_string).unwrap_or_default();
    p.bytes(arch.as_bytes())?;
    let (c, h, w) = g.input_shape;
    p.len(c)?;
    p.len(h)?;
    p.len(w)?;
    p.len(model.labels.len())?;
    for label in &model.labels {
        p.bytes(label.as_bytes())?;
    }
    p.len(g.layers.len())?;
    for (i, layer) in g.layers.iter().enumerate() {
        match layer {
            Layer::MaxPool => p.u8(KIND_POOL),
            Layer::Conv(conv) => {
                let q = conv
                    .quant
                    .as_ref()
                    .ok_or_else(|| ModelError::Unsavable(format!("layer {i} has no quantized weights")))?;
                p.u8(KIND_CONV);
                p.u8(conv.bits.bits() as u8);
                p.u8(conv.padding as u8);
                p.u8(conv.relu as u8);
                p.len(conv.out_channels)?;
                p.len(conv.in_channels)?;
                p.f32(conv.out_act_scale);
                q.scales().iter().for_each(|&s| p.f32(s));
                q.bias().iter().for_each(|&b| p.i32(b));
                p.bytes(&q.packed())?;
            }
            Layer::FullyConnected { .. } => {
                return Err(ModelError::Unsavable(format!("layer {i} is not an accelerator operator")))
            }
        }
    }
    p.f32(g.input_act_scale);
    let payload = p.0;

    let mut out = Writer(Vec::with_capacity(payload.len() + 16));
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.len(payload.len())?;
    out.0.extend_from_slice(&payload);
    out.u32(crc32fast::hash(&payload));
    Ok(out.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        self.array().map(u32::from_le_bytes)
    }
    fn usize(&mut self) -> Result<usize, ModelError> {
        self.u32().map(|v| v as usize)
    }
    fn i32(&mut self) -> Result<i32, ModelError> {
        self.array().map(i32::from_le_bytes)
    }
    fn f32(&mut self) -> Result<f32, ModelError> {
        self.array().map(f32::from_le_bytes)
    }
    fn bytes(&mut self) -> Result<&'a [u8], ModelError> {
        let n = self.usize()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, ModelError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| invalid("string is not UTF-8"))
    }
    /// Bounds a count by the bytes left, so corrupt counts cannot force
    /// huge allocations.
    fn count(&mut self, min_item_bytes: usize) -> Result<usize, ModelError> {
        let n = self.usize()?;
        if n.saturating_mul(min_item_bytes) > self.buf.len() - self.pos {
            return Err(ModelError::Truncated);
        }
        Ok(n)
    }
}

pub fn load_model(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| ModelError::BadMagic)? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::VersionUnsupported(version));
    }
    let len = r.usize()?;
    let payload = r.take(len)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ModelError::ChecksumMismatch { stored, computed });
    }
    parse_payload(payload)
}

fn parse_payload(payload: &[u8]) -> Result<Model, ModelError> {
    let mut r = Reader { buf: payload, pos: 0 };
    let arch_text = r.string()?;
    let arch = if arch_text.is_empty() {
        None
    } else {
        Some(ArchSpec::from_kv_str(&arch_text).map_err(|e| invalid(e.to_string()))?)
    };
    let input_shape = (r.usize()?, r.usize()?, r.usize()?);
    let n_labels = r.count(4)?;
    let labels = (0..n_labels).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
    let n_layers = r.count(1)?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let layer = match r.u8()? {
            KIND_POOL => Layer::MaxPool,
            KIND_CONV => {
                let bits = WeightBits::from_bits(r.u8()? as u32).map_err(|e| invalid(format!("layer {i}: {e}")))?;
                let padding = r.u8()? as usize;
                let relu = match r.u8()? {
                    0 => false,
                    1 => true,
                    v => return Err(invalid(format!("layer {i}: relu flag {v}"))),
                };
                let c_out = r.usize()?;
                let c_in = r.usize()?;
                let out_scale = r.f32()?;
                if c_out.saturating_mul(8) > payload.len() - r.pos {
                    return Err(ModelError::Truncated);
                }
                let scales = (0..c_out).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
                let bias = (0..c_out).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?;
                let packed = r.bytes()?;
                let expected = packed_len(c_out * c_in * 9, bits.bits());
                if packed.len() != expected {
                    return Err(invalid(format!(
                        "layer {i}: {} packed bytes, expected {expected}",
                        packed.len()
                    )));
                }
                let q = QuantWeights::from_packed(bits, c_out, c_in, packed, scales, bias)
                    .map_err(|e| invalid(format!("layer {i}: {e}")))?;
                Layer::Conv(
                    ConvLayer::new(c_in, c_out, padding, relu, bits)
                        .with_out_scale(out_scale)
                        .with_quant(q),
                )
            }
            kind => return Err(invalid(format!("layer {i}: unknown kind {kind}"))),
        };
        layers.push(layer);
    }
    let input_act_scale = r.f32()?;
    if r.pos != payload.len() {
        return Err(invalid("trailing bytes after payload"));
    }
    let graph = NetworkGraph {
        input_shape,
        input_act_scale,
        layers,
    };
    let model = Model { graph, labels, arch };
    check_consistency(&model)?;
    Ok(model)
}

/// Layer records must match the architecture block (when present), chain
/// correctly and agree with the label table.
fn check_consistency(model: &Model) -> Result<(), ModelError> {
    let g = &model.graph;
    if let Some(spec) = &model.arch {
        let reference = build_gnetfc(spec).map_err(|e| invalid(e.to_string()))?;
        let same_structure = reference.input_shape == g.input_shape
            && reference.layers.len() == g.layers.len()
            && reference.layers.iter().zip(&g.layers).all(|(a, b)| match (a, b) {
                (Layer::MaxPool, Layer::MaxPool) => true,
                (Layer::Conv(a), Layer::Conv(b)) => {
                    (a.in_channels, a.out_channels, a.padding, a.relu, a.bits)
                        == (b.in_channels, b.out_channels, b.padding, b.relu, b.bits)
                }
                _ => false,
            });
        if !same_structure {
            return Err(invalid("layer records do not match the architecture block"));
        }
    }
    let shape = g
        .output_shape()
        .ok_or_else(|| invalid("layer records do not chain"))?;
    if !model.labels.is_empty() && model.labels.len() != shape.0 {
        return Err(invalid(format!(
            "{} labels for {} output channels",
            model.labels.len(),
            shape.0
        )));
    }
    Ok(())
}
