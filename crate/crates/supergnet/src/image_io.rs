//! PGM (P5) and PNG encoding of Super Characters images.
//!
//! Both formats store the single grayscale plane; channels are replicated on
//! import.

use std::io::Cursor;
use std::str::FromStr;

use supergnet_core::superchar::SuperImage;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("unsupported image format {0:?} (expected pgm or png)")]
    UnsupportedFormat(String),
    #[error("malformed PGM: {0}")]
    MalformedPgm(String),
    #[error("PNG decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("PNG encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("image must be square 8-bit grayscale, got {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl FromStr for ImageFormat {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(ImageFormat::Pgm),
            "png" => Ok(ImageFormat::Png),
            other => Err(ImageError::UnsupportedFormat(other.to_string())),
        }
    }
}

impl ImageFormat {
    /// Picks the format from a file extension.
    pub fn from_path(path: &std::path::Path) -> Result<Self, ImageError> {
        path.extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .parse()
    }
}

pub fn export_image(img: &SuperImage, format: ImageFormat) -> Result<Vec<u8>, ImageError> {
    match format {
        ImageFormat::Pgm => Ok(encode_pgm(img)),
        ImageFormat::Png => encode_png(img),
    }
}

/// Binary PGM: `P5\n<w> <h>\n255\n` followed by row-major bytes.
pub fn encode_pgm(img: &SuperImage) -> Vec<u8> {
    let side = img.side();
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(img.plane());
    out
}

fn encode_png(img: &SuperImage) -> Result<Vec<u8>, ImageError> {
    let mut buf = Vec::new();
    {
        let side = img.side() as u32;
        let mut enc = png::Encoder::new(&mut buf, side, side);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(img.plane())?;
    }
    Ok(buf)
}

pub fn import_image(bytes: &[u8], channels: usize) -> Result<SuperImage, ImageError> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes, channels)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes, channels)
    } else {
        Err(ImageError::UnsupportedFormat(String::from("unknown signature")))
    }
}

/// Reads a square 8-bit P5 image. Header comments (`#`) are skipped.
pub fn decode_pgm(bytes: &[u8], channels: usize) -> Result<SuperImage, ImageError> {
    let bad = |m: &str| ImageError::MalformedPgm(m.to_string());
    if !bytes.starts_with(b"P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(ImageError::Unsupported(format!("maxval {maxval}")));
    }
    if w != h {
        return Err(ImageError::Unsupported(format!("{w}x{h}")));
    }
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("raster shorter than width*height"))?;
    SuperImage::from_plane(w, channels, raster.to_vec()).ok_or_else(|| bad("zero channels"))
}

fn decode_png(bytes: &[u8], channels: usize) -> Result<SuperImage, ImageError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale
        || info.bit_depth != png::BitDepth::Eight
        || info.width != info.height
    {
        return Err(ImageError::Unsupported(format!(
            "{:?} {:?} {}x{}",
            info.color_type, info.bit_depth, info.width, info.height
        )));
    }
    buf.truncate(info.buffer_size());
    SuperImage::from_plane(info.width as usize, channels, buf)
        .ok_or_else(|| ImageError::Unsupported(String::from("zero channels")))
}
