//! Bitmap fonts: BDF 2.1 parsing, glyph lookup with fallback, and
//! nearest-neighbour glyph scaling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FontError {
    #[error("malformed font at line {line}: {reason}")]
    MalformedFont { line: usize, reason: String },
}

fn malformed(line: usize, reason: impl Into<String>) -> FontError {
    FontError::MalformedFont {
        line,
        reason: reason.into(),
    }
}

/// A fixed-size 1-bit glyph. Pixels are stored row-major, one byte per
/// pixel, `1` meaning ink.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitmapGlyph {
    codepoint: u32,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BitmapGlyph {
    /// Builds a glyph from row bit vectors. Every row must be `width` long.
    pub fn from_rows(codepoint: u32, rows: &[Vec<bool>]) -> Option<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 || height == 0 || rows.iter().any(|r| r.len() != width) {
            return None;
        }
        let pixels = rows.iter().flatten().map(|&b| b as u8).collect();
        Some(Self {
            codepoint,
            width,
            height,
            pixels,
        })
    }

    pub fn blank(codepoint: u32, width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "glyph dimensions must be positive");
        Self {
            codepoint,
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// A one-pixel hollow rectangle, used for unmapped code points.
    pub fn hollow_box(codepoint: u32, width: usize, height: usize) -> Self {
        let mut g = Self::blank(codepoint, width, height);
        for r in 0..height {
            for c in 0..width {
                if r == 0 || c == 0 || r + 1 == height || c + 1 == width {
                    g.pixels[r * width + c] = 1;
                }
            }
        }
        g
    }

    pub fn codepoint(&self) -> u32 {
        self.codepoint
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] != 0
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = bool> + '_ {
        self.pixels[row * self.width..(row + 1) * self.width]
            .iter()
            .map(|&p| p != 0)
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        (0..self.height).map(|r| self.row(r).collect()).collect()
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn is_blank(&self) -> bool {
        self.ink_count() == 0
    }

    /// Copies this glyph into a `width`×`height` box with its top-left
    /// corner at (`top`, `left`). The box must contain the glyph.
    fn placed(&self, width: usize, height: usize, top: usize, left: usize) -> Self {
        debug_assert!(top + self.height <= height && left + self.width <= width);
        let mut out = Self::blank(self.codepoint, width, height);
        for r in 0..self.height {
            let dst = (top + r) * width + left;
            out.pixels[dst..dst + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        out
    }
}

/// Resamples `glyph` to a `side`×`side` square with nearest-neighbour
/// sampling: output (r, c) reads input (⌊r·h/side⌋, ⌊c·w/side⌋).
pub fn scale_glyph(glyph: &BitmapGlyph, side: usize) -> BitmapGlyph {
    assert!(side >= 1, "scale side must be at least 1");
    let (w, h) = (glyph.width, glyph.height);
    let cols: Vec<usize> = (0..side).map(|c| c * w / side).collect();
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        let src = (r * h / side) * w;
        pixels.extend(cols.iter().map(|&c| glyph.pixels[src + c]));
    }
    BitmapGlyph {
        codepoint: glyph.codepoint,
        width: side,
        height: side,
        pixels,
    }
}

/// An immutable set of equally sized glyphs keyed by code point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitmapFont {
    name: String,
    width: usize,
    height: usize,
    /// Baseline offset of the bounding box (BDF `FONTBOUNDINGBOX` x/y offsets).
    offset_x: i32,
    offset_y: i32,
    glyphs: BTreeMap<u32, BitmapGlyph>,
    fallback: BitmapGlyph,
    blank: BitmapGlyph,
}

impl BitmapFont {
    /// The built-in 8×8 ASCII font (printable range U+0020..U+007E).
    pub fn embedded() -> Self {
        let glyphs = (0x20u32..0x7f)
            .map(|cp| {
                let rows = font8x8::legacy::BASIC_LEGACY[cp as usize];
                let pixels = rows
                    .iter()
                    .flat_map(|&byte| (0..8).map(move |bit| (byte >> bit) & 1))
                    .collect();
                (
                    cp,
                    BitmapGlyph {
                        codepoint: cp,
                        width: 8,
                        height: 8,
                        pixels,
                    },
                )
            })
            .collect();
        Self::from_parts("font8x8-basic", 8, 8, 0, 0, glyphs)
    }

    fn from_parts(
        name: &str,
        width: usize,
        height: usize,
        offset_x: i32,
        offset_y: i32,
        glyphs: BTreeMap<u32, BitmapGlyph>,
    ) -> Self {
        Self {
            name: name.to_string(),
            width,
            height,
            offset_x,
            offset_y,
            glyphs,
            fallback: BitmapGlyph::hollow_box(0xfffd, width, height),
            blank: BitmapGlyph::blank(0x20, width, height),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Width and height of every glyph in the font.
    pub fn nominal_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn contains(&self, cp: u32) -> bool {
        self.glyphs.contains_key(&cp)
    }

    pub fn glyphs(&self) -> impl Iterator<Item = &BitmapGlyph> {
        self.glyphs.values()
    }

    pub fn fallback(&self) -> &BitmapGlyph {
        &self.fallback
    }

    /// Never fails: whitespace without a mapped glyph renders blank and any
    /// other unmapped code point renders the hollow-box fallback.
    pub fn glyph_for(&self, cp: char) -> &BitmapGlyph {
        match self.glyphs.get(&(cp as u32)) {
            Some(g) => g,
            None if cp.is_whitespace() => &self.blank,
            None => &self.fallback,
        }
    }

    /// Parses a BDF 2.1 font. Glyphs with negative encodings are skipped;
    /// every glyph is padded into a common bounding box (the font box grown
    /// to cover any glyph that overhangs it, so ink is never cropped).
    pub fn parse_bdf(bytes: &[u8]) -> Result<Self, FontError> {
        let text = core::str::from_utf8(bytes).map_err(|e| {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            malformed(line, "invalid UTF-8")
        })?;
        BdfParser::default().parse(text)
    }

    /// Serializes the (normalized) font back to BDF 2.1.
    pub fn to_bdf(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "STARTFONT 2.1");
        let _ = writeln!(out, "FONT {}", self.name);
        let _ = writeln!(out, "SIZE {} 75 75", self.height);
        let _ = writeln!(
            out,
            "FONTBOUNDINGBOX {} {} {} {}",
            self.width, self.height, self.offset_x, self.offset_y
        );
        let _ = writeln!(out, "CHARS {}", self.glyphs.len());
        let row_bytes = self.width.div_ceil(8);
        for g in self.glyphs.values() {
            let _ = writeln!(out, "STARTCHAR U+{:04X}", g.codepoint);
            let _ = writeln!(out, "ENCODING {}", g.codepoint);
            let _ = writeln!(out, "SWIDTH 500 0");
            let _ = writeln!(out, "DWIDTH {} 0", self.width);
            let _ = writeln!(
                out,
                "BBX {} {} {} {}",
                self.width, self.height, self.offset_x, self.offset_y
            );
            let _ = writeln!(out, "BITMAP");
            for r in 0..g.height {
                let mut bytes = vec![0u8; row_bytes];
                for (c, ink) in g.row(r).enumerate() {
                    if ink {
                        bytes[c / 8] |= 0x80 >> (c % 8);
                    }
                }
                for b in bytes {
                    let _ = write!(out, "{b:02X}");
                }
                out.push('\n');
            }
            let _ = writeln!(out, "ENDCHAR");
        }
        let _ = writeln!(out, "ENDFONT");
        out
    }
}

/// A glyph as read from the file, before normalization.
struct RawGlyph {
    codepoint: u32,
    bbx: (usize, usize, i32, i32),
    rows: Vec<Vec<bool>>,
}

#[derive(Default)]
struct BdfParser {
    name: Option<String>,
    font_box: Option<(usize, usize, i32, i32)>,
    glyphs: Vec<RawGlyph>,
}

fn fields(line: &str) -> (&str, Vec<&str>) {
    let mut it = line.split_whitespace();
    let key = it.next().unwrap_or("");
    (key, it.collect())
}

fn parse_num<T: core::str::FromStr>(lineno: usize, s: Option<&&str>, what: &str) -> Result<T, FontError> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| malformed(lineno, format!("bad or missing {what}")))
}

fn parse_box(lineno: usize, args: &[&str], what: &str) -> Result<(usize, usize, i32, i32), FontError> {
    if args.len() < 4 {
        return Err(malformed(lineno, format!("{what} needs 4 values")));
    }
    let w: usize = parse_num(lineno, args.first(), what)?;
    let h: usize = parse_num(lineno, args.get(1), what)?;
    let x: i32 = parse_num(lineno, args.get(2), what)?;
    let y: i32 = parse_num(lineno, args.get(3), what)?;
    Ok((w, h, x, y))
}

/// Decodes one hex BITMAP row MSB-first, keeping the first `width` bits.
fn decode_hex_row(lineno: usize, row: &str, width: usize) -> Result<Vec<bool>, FontError> {
    let mut bits = Vec::with_capacity(row.len() * 4);
    for ch in row.chars() {
        let nibble = ch
            .to_digit(16)
            .ok_or_else(|| malformed(lineno, format!("non-hex character {ch:?} in bitmap row")))?;
        bits.extend((0..4).rev().map(|b| (nibble >> b) & 1 == 1));
    }
    if bits.len() < width {
        return Err(malformed(
            lineno,
            format!("bitmap row has {} bits, glyph width is {width}", bits.len()),
        ));
    }
    bits.truncate(width);
    Ok(bits)
}

impl BdfParser {
    fn parse(mut self, text: &str) -> Result<BitmapFont, FontError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut saw_start = false;
        let mut saw_end = false;
        let mut last_line = 0;

        while let Some((lineno, line)) = lines.next() {
            last_line = lineno;
            if line.is_empty() {
                continue;
            }
            let (key, args) = fields(line);
            if !saw_start {
                if key != "STARTFONT" {
                    return Err(malformed(lineno, "expected STARTFONT"));
                }
                saw_start = true;
                continue;
            }
            match key {
                "FONT" => self.name = Some(line[4..].trim().to_string()),
                "FONTBOUNDINGBOX" => self.font_box = Some(parse_box(lineno, &args, "FONTBOUNDINGBOX")?),
                "STARTCHAR" => self.parse_char(lineno, &mut lines)?,
                "ENDFONT" => {
                    saw_end = true;
                    break;
                }
                _ => {}
            }
        }
        if !saw_start {
            return Err(malformed(last_line.max(1), "missing STARTFONT"));
        }
        if !saw_end {
            return Err(malformed(last_line, "missing ENDFONT"));
        }
        Ok(self.normalize())
    }

    fn parse_char<'a>(
        &mut self,
        start_line: usize,
        lines: &mut impl Iterator<Item = (usize, &'a str)>,
    ) -> Result<(), FontError> {
        let mut encoding: Option<i64> = None;
        let mut bbx = None;
        let mut rows = None;
        loop {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| malformed(start_line, "STARTCHAR without ENDCHAR"))?;
            let (key, args) = fields(line);
            match key {
                "ENCODING" => encoding = Some(parse_num(lineno, args.first(), "ENCODING")?),
                "BBX" => bbx = Some(parse_box(lineno, &args, "BBX")?),
                "BITMAP" => {
                    let (w, h, _, _) =
                        bbx.ok_or_else(|| malformed(lineno, "BITMAP before BBX"))?;
                    let mut decoded = Vec::with_capacity(h);
                    for _ in 0..h {
                        let (rl, row) = lines
                            .next()
                            .ok_or_else(|| malformed(lineno, "truncated BITMAP"))?;
                        if row == "ENDCHAR" {
                            return Err(malformed(
                                rl,
                                format!("BITMAP has {} rows, BBX height is {h}", decoded.len()),
                            ));
                        }
                        decoded.push(decode_hex_row(rl, row, w)?);
                    }
                    rows = Some(decoded);
                }
                "ENDCHAR" => {
                    if bbx.is_some() && rows.is_none() {
                        return Err(malformed(lineno, "glyph has BBX but no BITMAP"));
                    }
                    break;
                }
                _ if rows.is_some() => {
                    return Err(malformed(lineno, "BITMAP row count exceeds BBX height"));
                }
                _ => {}
            }
        }
        let encoding = encoding.ok_or_else(|| malformed(start_line, "glyph without ENCODING"))?;
        let (Some(bbx), Some(rows)) = (bbx, rows) else {
            return Err(malformed(start_line, "glyph without BBX/BITMAP"));
        };
        if encoding >= 0 && encoding <= u32::MAX as i64 {
            self.glyphs.push(RawGlyph {
                codepoint: encoding as u32,
                bbx,
                rows,
            });
        }
        Ok(())
    }

    /// Pads every glyph into the union of the font box and all glyph boxes,
    /// anchored by baseline (y offset) and left bearing (x offset).
    fn normalize(self) -> BitmapFont {
        let (mut left, mut bottom, mut right, mut top) = match self.font_box {
            Some((w, h, x, y)) => (x, y, x + w as i32, y + h as i32),
            None => (0, 0, 0, 0),
        };
        for g in &self.glyphs {
            let (w, h, x, y) = g.bbx;
            left = left.min(x);
            bottom = bottom.min(y);
            right = right.max(x + w as i32);
            top = top.max(y + h as i32);
        }
        let width = ((right - left).max(1)) as usize;
        let height = ((top - bottom).max(1)) as usize;

        let glyphs = self
            .glyphs
            .into_iter()
            .map(|g| {
                let (w, h, x, y) = g.bbx;
                let placed = if w == 0 || h == 0 {
                    BitmapGlyph::blank(g.codepoint, width, height)
                } else {
                    let raw = BitmapGlyph::from_rows(g.codepoint, &g.rows)
                        .expect("rows decoded to BBX width");
                    let col = (x - left) as usize;
                    let row = (top - (y + h as i32)) as usize;
                    raw.placed(width, height, row, col)
                };
                (g.codepoint, placed)
            })
            .collect();
        BitmapFont::from_parts(
            self.name.as_deref().unwrap_or("unnamed"),
            width,
            height,
            left,
            bottom,
            glyphs,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_GLYPH: &str = "STARTFONT 2.1
FONT test
SIZE 8 75 75
FONTBOUNDINGBOX 8 8 0 0
CHARS 1
STARTCHAR A
ENCODING 65
BBX 8 8 0 0
BITMAP
18
24
42
42
7E
42
42
FF
ENDCHAR
ENDFONT
";

    #[test]
    fn parses_single_glyph() {
        let font = BitmapFont::parse_bdf(ONE_GLYPH.as_bytes()).unwrap();
        assert_eq!(font.len(), 1);
        let a = font.glyph_for('A');
        assert_eq!((a.width(), a.height()), (8, 8));
        assert_eq!(a.row(7).collect::<Vec<_>>(), vec![true; 8]);
        assert_eq!(font.name(), "test");
    }

    #[test]
    fn hex_rows_are_msb_first() {
        assert_eq!(decode_hex_row(1, "FF", 8).unwrap(), vec![true; 8]);
        assert_eq!(decode_hex_row(1, "80", 3).unwrap(), vec![true, false, false]);
        assert_eq!(
            decode_hex_row(1, "A5", 8).unwrap(),
            vec![true, false, true, false, false, true, false, true]
        );
    }

    #[test]
    fn rejects_missing_startfont_and_endfont() {
        let err = BitmapFont::parse_bdf(b"FONT x\nENDFONT\n").unwrap_err();
        assert!(matches!(err, FontError::MalformedFont { line: 1, .. }));
        let truncated = ONE_GLYPH.replace("ENDFONT\n", "");
        assert!(BitmapFont::parse_bdf(truncated.as_bytes()).is_err());
    }

    #[test]
    fn rejects_row_count_mismatch_with_line_number() {
        let short = ONE_GLYPH.replace("7E\n", "");
        match BitmapFont::parse_bdf(short.as_bytes()).unwrap_err() {
            FontError::MalformedFont { line, .. } => assert_eq!(line, 17),
        }
        let long = ONE_GLYPH.replace("FF\n", "FF\n00\n");
        assert!(BitmapFont::parse_bdf(long.as_bytes()).is_err());
    }

    #[test]
    fn rejects_non_hex_row() {
        let bad = ONE_GLYPH.replace("7E\n", "7G\n");
        match BitmapFont::parse_bdf(bad.as_bytes()).unwrap_err() {
            FontError::MalformedFont { line, reason } => {
                assert_eq!(line, 14);
                assert!(reason.contains("non-hex"));
            }
        }
    }

    #[test]
    fn negative_encodings_are_skipped() {
        let src = ONE_GLYPH.replace("ENCODING 65", "ENCODING -1");
        let font = BitmapFont::parse_bdf(src.as_bytes()).unwrap();
        assert!(font.is_empty());
    }

    #[test]
    fn small_glyphs_are_padded_on_baseline() {
        let src = "STARTFONT 2.1
FONTBOUNDINGBOX 4 6 0 -2
STARTCHAR dot
ENCODING 46
BBX 1 1 1 0
BITMAP
80
ENDCHAR
ENDFONT
";
        let font = BitmapFont::parse_bdf(src.as_bytes()).unwrap();
        let g = font.glyph_for('.');
        assert_eq!((g.width(), g.height()), (4, 6));
        assert_eq!(g.ink_count(), 1);
        // baseline sits 2 rows above the bottom of a 6-row box
        assert!(g.pixel(3, 1));
    }

    #[test]
    fn overhanging_glyph_grows_the_box() {
        let src = "STARTFONT 2.1
FONTBOUNDINGBOX 2 2 0 0
STARTCHAR wide
ENCODING 87
BBX 4 1 0 0
BITMAP
F0
ENDCHAR
ENDFONT
";
        let font = BitmapFont::parse_bdf(src.as_bytes()).unwrap();
        assert_eq!(font.nominal_size(), (4, 2));
        assert_eq!(font.glyph_for('W').ink_count(), 4);
    }

    #[test]
    fn lookup_fallbacks() {
        let font = BitmapFont::embedded();
        assert!(font.glyph_for('A').ink_count() > 0);
        assert_eq!(font.glyph_for('\u{E000}'), font.fallback());
        assert!(font.glyph_for(' ').is_blank());
        assert!(font.glyph_for('\u{3000}').is_blank());
        let fb = font.fallback();
        assert!(fb.pixel(0, 0) && fb.pixel(7, 7) && !fb.pixel(3, 3));
    }

    #[test]
    fn scale_identity_and_constant() {
        let font = BitmapFont::embedded();
        let a = font.glyph_for('a');
        assert_eq!(&scale_glyph(a, 8), a);
        let full = BitmapGlyph::from_rows(1, &vec![vec![true; 8]; 8]).unwrap();
        let small = scale_glyph(&full, 4);
        assert_eq!(small.ink_count(), 16);
        let blank = BitmapGlyph::blank(0, 8, 8);
        assert!(scale_glyph(&blank, 13).is_blank());
    }

    #[test]
    fn checkerboard_upscale_replicates_pixels() {
        let rows: Vec<Vec<bool>> = (0..8).map(|r| (0..8).map(|c| (r + c) % 2 == 0).collect()).collect();
        let g = BitmapGlyph::from_rows(0, &rows).unwrap();
        let up = scale_glyph(&g, 16);
        // direct pixel-replication oracle
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(up.pixel(r, c), rows[r / 2][c / 2]);
            }
        }
    }

    #[test]
    fn embedded_font_round_trips_through_bdf() {
        let font = BitmapFont::embedded();
        let again = BitmapFont::parse_bdf(font.to_bdf().as_bytes()).unwrap();
        assert_eq!(again.len(), font.len());
        for g in font.glyphs() {
            let cp = char::from_u32(g.codepoint()).unwrap();
            assert_eq!(again.glyph_for(cp).rows(), g.rows());
        }
    }
}
