//! Core of the Super Characters on-device classifier.
//!
//! Text is rendered into a two-dimensional embedding image ([`superchar`]),
//! using bitmap glyphs from [`fontkit`], and classified by a GnetFC network
//! ([`gnetfc`]) executed on a simulated CNN accelerator ([`engine`]) whose
//! operator set is limited to 3×3 convolution, ReLU and 2×2 max-pooling with
//! 1/3-bit coefficients and 5-bit activations ([`qtensor`]).
//!
//! The crate is `no_std` and needs only `alloc`. File formats, timing and
//! the command line live in the `supergnet` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod engine;
pub mod fontkit;
pub mod gnetfc;
pub mod qtensor;
pub mod superchar;

pub use engine::{
    ExecutionTrace, Layer, LayerError, NetworkGraph, RunMode, RunOutput, ValidationReport,
    Violation,
};
pub use fontkit::{BitmapFont, BitmapGlyph, FontError};
pub use gnetfc::{ArchSpec, MemoryReport, StorageMode};
pub use qtensor::{FloatTensor, QuantActivations, QuantError, QuantWeights, WeightBits};
pub use superchar::{CanvasSpec, LayoutPlan, Mode, SuperImage};

/// Round half away from zero.
#[inline]
pub(crate) fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}
