//! Two-dimensional text embedding.
//!
//! Text is split into tokens and laid out on a square grid of `l`×`l` cells,
//! one token per cell, row-major. In CJK mode a token is a single character
//! drawn over its whole cell. In SEW (squared English word) mode a token of
//! `N` letters is drawn as a `k`×`k` sub-grid with `k = ⌈√N⌉`, each letter in a
//! `⌊l/k⌋`-pixel square, filled row-major.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::fontkit::{scale_glyph, BitmapFont};
use crate::qtensor::{activation_code, QuantActivations, QuantError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    /// Squared English words.
    #[default]
    Sew,
    /// One character per cell.
    Cjk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Polarity {
    /// Ink = 255 on a 0 background.
    #[default]
    WhiteOnBlack,
    /// Ink = 0 on a 255 background.
    BlackOnWhite,
}

impl Polarity {
    fn levels(self) -> (u8, u8) {
        match self {
            Polarity::WhiteOnBlack => (255, 0),
            Polarity::BlackOnWhite => (0, 255),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanvasError {
    #[error("cell side {0} is below the minimum of 4 pixels")]
    CellTooSmall(usize),
    #[error("grid of {rows}x{cols} cells of {cell} px with margin {margin} does not fit a {side} px canvas")]
    GridOverflow {
        rows: usize,
        cols: usize,
        cell: usize,
        margin: usize,
        side: usize,
    },
    #[error("canvas needs at least one channel and one grid cell")]
    Empty,
}

/// Canvas geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CanvasSpec {
    pub side: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Side `l` of one token cell.
    pub cell_side: usize,
    pub margin: usize,
    pub channels: usize,
    pub polarity: Polarity,
}

impl Default for CanvasSpec {
    fn default() -> Self {
        Self {
            side: 224,
            grid_rows: 8,
            grid_cols: 8,
            cell_side: 28,
            margin: 0,
            channels: 3,
            polarity: Polarity::WhiteOnBlack,
        }
    }
}

impl CanvasSpec {
    /// A `rows`×`cols` grid with the largest cell that fits `side`.
    pub fn with_grid(side: usize, rows: usize, cols: usize) -> Result<Self, CanvasError> {
        if rows == 0 || cols == 0 {
            return Err(CanvasError::Empty);
        }
        let spec = Self {
            side,
            grid_rows: rows,
            grid_cols: cols,
            cell_side: side / rows.max(cols),
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CanvasError> {
        if self.channels == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(CanvasError::Empty);
        }
        if self.cell_side < 4 {
            return Err(CanvasError::CellTooSmall(self.cell_side));
        }
        let fits = |n: usize| n * self.cell_side + 2 * self.margin <= self.side;
        if !fits(self.grid_rows) || !fits(self.grid_cols) {
            return Err(CanvasError::GridOverflow {
                rows: self.grid_rows,
                cols: self.grid_cols,
                cell: self.cell_side,
                margin: self.margin,
                side: self.side,
            });
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x00a1..=0x00bf      // Latin-1 punctuation and symbols
            | 0x2010..=0x2027    // dashes, quotes, ellipsis
            | 0x2030..=0x205e
            | 0x3001..=0x3003    // CJK comma and full stop
            | 0x3008..=0x3011    // CJK brackets
            | 0xff01..=0xff0f    // fullwidth forms
            | 0xff1a..=0xff20
            | 0xff3b..=0xff40
            | 0xff5b..=0xff65)
}

/// Splits text into tokens.
///
/// SEW: whitespace-delimited words; punctuation at either edge of a word is
/// split off into one token per character, inner punctuation (hyphens,
/// apostrophes) stays in the word. CJK: one token per non-whitespace char.
pub fn tokenize(text: &str, mode: Mode) -> Vec<String> {
    match mode {
        Mode::Cjk => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        Mode::Sew => {
            let mut out = Vec::new();
            for word in text.split_whitespace() {
                let core_start = word
                    .char_indices()
                    .find(|&(_, c)| !is_punctuation(c))
                    .map(|(i, _)| i);
                let Some(start) = core_start else {
                    out.extend(word.chars().map(String::from));
                    continue;
                };
                let end = word
                    .char_indices()
                    .rev()
                    .find(|&(_, c)| !is_punctuation(c))
                    .map(|(i, c)| i + c.len_utf8())
                    .unwrap_or(word.len());
                out.extend(word[..start].chars().map(String::from));
                out.push(String::from(&word[start..end]));
                out.extend(word[end..].chars().map(String::from));
            }
            out
        }
    }
}

/// Sub-grid order `k = ⌈√n⌉` for a word of `n` letters (1 for an empty word).
pub fn subgrid_order(n: usize) -> usize {
    // integer ceil(sqrt(n)) without floating point
    let mut k = libm::sqrt(n as f64) as usize;
    while k * k < n {
        k += 1;
    }
    while k > 1 && (k - 1) * (k - 1) >= n {
        k -= 1;
    }
    k.max(1)
}

/// Pixel rectangle, half-open on the right and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl Rect {
    pub fn intersects(&self, other: &Rect) -> bool {
        self.side > 0
            && other.side > 0
            && self.left < other.left + other.side
            && other.left < self.left + self.side
            && self.top < other.top + other.side
            && other.top < self.top + self.side
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.side && col >= self.left && col < self.left + self.side
    }
}

/// One token placed in a grid cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacedToken {
    pub text: String,
    pub cell_row: usize,
    pub cell_col: usize,
    /// Sub-grid order `k`; letters fill at most `k` per row.
    pub subgrid: usize,
    pub letter_side: usize,
}

impl PlacedToken {
    pub fn letter_count(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutPlan {
    pub mode: Mode,
    pub cell_side: usize,
    pub margin: usize,
    pub tokens: Vec<PlacedToken>,
    pub truncated: bool,
}

impl LayoutPlan {
    pub fn cell_rect(&self, token: &PlacedToken) -> Rect {
        Rect {
            top: self.margin + token.cell_row * self.cell_side,
            left: self.margin + token.cell_col * self.cell_side,
            side: self.cell_side,
        }
    }

    /// The letter cells of `token`, in reading order, paired with their
    /// characters.
    pub fn letter_cells<'a>(&self, token: &'a PlacedToken) -> impl Iterator<Item = (char, Rect)> + 'a {
        let cell = self.cell_rect(token);
        let (k, s) = (token.subgrid, token.letter_side);
        token.text.chars().enumerate().map(move |(i, ch)| {
            (
                ch,
                Rect {
                    top: cell.top + (i / k) * s,
                    left: cell.left + (i % k) * s,
                    side: s,
                },
            )
        })
    }

    /// Token sequence in placement order.
    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Reconstructs the token sequence from cell positions and letter
    /// geometry alone, scanning cells in row-major order.
    pub fn recover_tokens(&self) -> Vec<String> {
        let mut cells: Vec<&PlacedToken> = self.tokens.iter().collect();
        cells.sort_by_key(|t| (t.cell_row, t.cell_col));
        cells
            .into_iter()
            .map(|t| {
                let mut letters: Vec<(Rect, char)> = self.letter_cells(t).map(|(c, r)| (r, c)).collect();
                letters.sort_by_key(|(r, _)| (r.top, r.left));
                letters.into_iter().map(|(_, c)| c).collect()
            })
            .collect()
    }
}

/// Places tokens row-major on the grid, dropping any beyond capacity.
pub fn layout<S: AsRef<str>>(tokens: &[S], spec: &CanvasSpec, mode: Mode) -> LayoutPlan {
    let l = spec.cell_side;
    let capacity = spec.capacity();
    let placed = tokens
        .iter()
        .take(capacity)
        .enumerate()
        .map(|(i, tok)| {
            let text = String::from(tok.as_ref());
            let n = text.chars().count();
            let k = match mode {
                Mode::Sew => subgrid_order(n),
                Mode::Cjk => 1,
            };
            PlacedToken {
                text,
                cell_row: i / spec.grid_cols,
                cell_col: i % spec.grid_cols,
                subgrid: k,
                letter_side: l / k,
            }
        })
        .collect();
    LayoutPlan {
        mode,
        cell_side: l,
        margin: spec.margin,
        tokens: placed,
        truncated: tokens.len() > capacity,
    }
}

/// A binary image with identical channel planes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SuperImage {
    side: usize,
    channels: usize,
    plane: Vec<u8>,
}

impl SuperImage {
    pub fn filled(side: usize, channels: usize, value: u8) -> Self {
        Self {
            side,
            channels,
            plane: vec![value; side * side],
        }
    }

    /// Builds an image from one grayscale plane replicated over `channels`.
    pub fn from_plane(side: usize, channels: usize, plane: Vec<u8>) -> Option<Self> {
        (plane.len() == side * side && channels > 0).then_some(Self {
            side,
            channels,
            plane,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The grayscale plane shared by every channel.
    pub fn plane(&self) -> &[u8] {
        &self.plane
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.plane[row * self.side + col]
    }

    /// Channel-major bytes, `channels` copies of the plane.
    pub fn to_chw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.plane.len() * self.channels);
        for _ in 0..self.channels {
            out.extend_from_slice(&self.plane);
        }
        out
    }

    /// 5-bit activation codes of the pixel values at `scale`.
    pub fn to_activations(&self, scale: f32) -> Result<QuantActivations, QuantError> {
        crate::qtensor::check_scale(scale)?;
        let lut: Vec<u8> = (0..=255u32)
            .map(|v| activation_code(v as f64, scale as f64))
            .collect();
        let plane: Vec<u8> = self.plane.iter().map(|&p| lut[p as usize]).collect();
        let mut codes = Vec::with_capacity(plane.len() * self.channels);
        for _ in 0..self.channels {
            codes.extend_from_slice(&plane);
        }
        Ok(QuantActivations::from_parts(
            (self.channels, self.side, self.side),
            codes,
            scale,
        ))
    }

    pub fn to_float_tensor(&self) -> crate::qtensor::FloatTensor {
        let data: Vec<f32> = self.to_chw_bytes().into_iter().map(f32::from).collect();
        crate::qtensor::FloatTensor::new(&[self.channels, self.side, self.side], data)
            .expect("shape matches data")
    }
}

/// Stamps every letter of the plan into a fresh canvas.
pub fn render(plan: &LayoutPlan, spec: &CanvasSpec, font: &BitmapFont) -> SuperImage {
    let (ink, background) = spec.polarity.levels();
    let mut img = SuperImage::filled(spec.side, spec.channels, background);
    for token in &plan.tokens {
        for (ch, rect) in plan.letter_cells(token) {
            if rect.side == 0 {
                continue;
            }
            let glyph = scale_glyph(font.glyph_for(ch), rect.side);
            for r in 0..rect.side {
                let row = &mut img.plane[(rect.top + r) * spec.side + rect.left..][..rect.side];
                for (c, px) in glyph.row(r).enumerate() {
                    if px {
                        row[c] = ink;
                    }
                }
            }
        }
    }
    img
}

/// tokenize → layout → render.
pub fn render_text(text: &str, mode: Mode, spec: &CanvasSpec, font: &BitmapFont) -> (LayoutPlan, SuperImage) {
    let tokens = tokenize(text, mode);
    let plan = layout(&tokens, spec, mode);
    let img = render(&plan, spec, font);
    (plan, img)
}
