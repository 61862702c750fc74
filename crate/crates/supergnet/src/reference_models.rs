//! Hand-built and randomly initialised models.
//!
//! # The ink-counting model
//!
//! A 2-class network whose scores compare how much ink sits in the left and
//! right parts of a 224×224 canvas. It only uses chip operators:
//!
//! 1. the input scale maps pixel 255 to code 1, and five 2×2 max-pools shrink
//!    the image to 3×7×7: a pooled code is 1 if its 32×32 block holds ink;
//! 2. a valid 3×3 conv with all-ones weights on channel 0 (the channels are
//!    identical) counts inked cells in each neighbourhood → 1×5×5, codes 0..=9;
//! 3. a second all-ones valid conv → 1×3×3, output scale halving the sum
//!    (codes round(sum/2), clamped at 31);
//! 4. a final valid conv with two linear outputs: class 0 ("left") weighs
//!    the kernel columns (+1, 0, −1) and class 1 ("right") (−1, 0, +1).
//!
//! For ink confined to pooled columns 0–2, every pooled cell in column 2
//! reaches the left column of the 3×3 map three times as often as the right
//! one, so per row `left ≥ 3·right` before halving. Halving keeps the left
//! code strictly larger whenever the row holds ink (a lone cell still gives
//! round(1/2) = 1), and the right column never exceeds 14, so clamping at 31
//! cannot tie them. Class 0 thus scores strictly higher; right-side ink is
//! the mirror image.
//!
//! With the default 8×8 grid of 28 px cells, grid columns 0–2 cover pixels
//! 0..84 (pooled columns 0–2) and grid columns 5–7 cover pixels 140..224
//! (pooled columns 4–6). Text drawn only in the left three grid columns
//! therefore scores class 0 strictly higher, and right-only text class 1.
//!
//! [`ink_font`] draws `#` as a solid block and `.` as a blank, so CJK-mode
//! strings of those two characters address grid cells directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supergnet_core::engine::{ConvLayer, Layer, NetworkGraph};
use supergnet_core::fontkit::BitmapFont;
use supergnet_core::gnetfc::{build_gnetfc, ArchSpec, SpecError};
use supergnet_core::qtensor::{QuantWeights, WeightBits};

use crate::model_file::Model;

const INK_FONT_BDF: &str = "STARTFONT 2.1
FONT ink-test
SIZE 8 75 75
FONTBOUNDINGBOX 8 8 0 0
CHARS 2
STARTCHAR numbersign
ENCODING 35
BBX 8 8 0 0
BITMAP
FF
FF
FF
FF
FF
FF
FF
FF
ENDCHAR
STARTCHAR period
ENCODING 46
BBX 8 8 0 0
BITMAP
00
00
00
00
00
00
00
00
ENDCHAR
ENDFONT
";

/// `#` is solid ink, `.` is blank.
pub fn ink_font() -> BitmapFont {
    BitmapFont::parse_bdf(INK_FONT_BDF.as_bytes()).expect("embedded test font parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InkSide {
    Left,
    Right,
}

impl InkSide {
    pub fn class_index(self) -> usize {
        match self {
            InkSide::Left => 0,
            InkSide::Right => 1,
        }
    }
}

/// A 64-character CJK-mode text for the 8×8 grid with ink only in the three
/// outer grid columns of `side`. Bit `3·row + j` of `mask` inks column `j`
/// of that band; an empty mask inks one cell.
pub fn ink_text(side: InkSide, mask: u32) -> String {
    let mask = if mask & 0xFF_FFFF == 0 { 1 } else { mask };
    let base = match side {
        InkSide::Left => 0,
        InkSide::Right => 5,
    };
    let mut s = String::with_capacity(64);
    for r in 0..8 {
        for c in 0..8 {
            let inked = (base..base + 3).contains(&c) && mask >> (3 * r + c - base) & 1 == 1;
            s.push(if inked { '#' } else { '.' });
        }
    }
    s
}

fn ones_conv(c_in: usize, use_channels: usize, out_scale: f32) -> ConvLayer {
    let codes = (0..c_in * 9).map(|i| i8::from(i / 9 < use_channels)).collect();
    let q = QuantWeights::new(WeightBits::Three, 1, c_in, codes, vec![1.0], vec![0]).expect("valid codes");
    ConvLayer::new(c_in, 1, 0, true, WeightBits::Three)
        .with_out_scale(out_scale)
        .with_quant(q)
}

/// The documented 2-class ink-counting model on a 3×224×224 input.
pub fn ink_model() -> Model {
    let s0 = 255.0;
    let s1 = s0;
    let s2 = 2.0 * s0;
    let mut g = NetworkGraph::new((3, 224, 224), s0);
    for _ in 0..5 {
        g.push(Layer::MaxPool);
    }
    g.push(Layer::Conv(ones_conv(3, 1, s1)));
    g.push(Layer::Conv(ones_conv(1, 1, s2)));
    let column = |sign: i8| (0..9).map(move |i| [sign, 0, -sign][i % 3]);
    let codes = column(1).chain(column(-1)).collect();
    let q = QuantWeights::new(WeightBits::Three, 2, 1, codes, vec![1.0, 1.0], vec![0, 0]).expect("valid codes");
    g.push(Layer::Conv(
        ConvLayer::new(1, 2, 0, false, WeightBits::Three).with_quant(q),
    ));
    Model::new(g, vec!["left".into(), "right".into()], None)
}

/// A GnetFC-shaped model with seeded random sign weights, for exercising the
/// CLI and file format without a trained network. Output scales are set so
/// that a layer fed mid-range codes produces mid-range codes; the scores carry
/// no meaning.
pub fn random_gnetfc(spec: &ArchSpec, labels: Vec<String>, seed: u64) -> Result<Model, SpecError> {
    let mut g = build_gnetfc(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act_scale = g.input_act_scale;
    for conv in g.convs_mut() {
        let n = conv.coefficient_count();
        let codes: Vec<i8> = match conv.bits {
            WeightBits::One => (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
            WeightBits::Three => (0..n).map(|_| rng.gen_range(-3..=3)).collect(),
        };
        let w_scale = 1.0 / (9.0 * conv.in_channels as f32).sqrt();
        let q = QuantWeights::new(
            conv.bits,
            conv.out_channels,
            conv.in_channels,
            codes,
            vec![w_scale; conv.out_channels],
            vec![0; conv.out_channels],
        )
        .expect("codes drawn from the valid range");
        conv.quant = Some(q);
        conv.out_act_scale = act_scale;
    }
    Ok(Model::new(g, labels, Some(spec.clone())))
}

/// The fourteen DBpedia ontology classes, in dataset index order.
pub const DBPEDIA_LABELS: [&str; 14] = [
    "Company",
    "EducationalInstitution",
    "Artist",
    "Athlete",
    "OfficeHolder",
    "MeanOfTransportation",
    "Building",
    "NaturalPlace",
    "Village",
    "Animal",
    "Plant",
    "Album",
    "Film",
    "WrittenWork",
];
