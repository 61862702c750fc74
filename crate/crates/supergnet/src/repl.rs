//! Line-oriented interactive classification.
//!
//! Every input line produces exactly one output line. `:quit` ends the
//! session and `:dump <path>` writes the last rendered image (format from the
//! extension, PGM when there is none).

use std::io::{BufRead, Write};
use std::path::Path;

use supergnet_core::superchar::SuperImage;

use crate::image_io::{export_image, ImageFormat};
use crate::pipeline::{Classification, Classifier};

pub fn format_result(c: &Classification) -> String {
    let scores: Vec<String> = c.scores.iter().map(|s| format!("{s:.4}")).collect();
    let t = &c.timings;
    format!(
        "label={} index={} scores=[{}] preprocess_ms={:.3} inference_ms={:.3} postprocess_ms={:.3} total_ms={:.3}",
        c.label,
        c.index,
        scores.join(","),
        t.preprocess_ms,
        t.inference_ms,
        t.postprocess_ms,
        t.total_ms
    )
}

fn dump(img: Option<&SuperImage>, path: &str) -> String {
    let Some(img) = img else {
        return String::from("error: nothing to dump yet");
    };
    if path.is_empty() {
        return String::from("error: usage :dump <path>");
    }
    let p = Path::new(path);
    let fmt = if p.extension().is_none() {
        Ok(ImageFormat::Pgm)
    } else {
        ImageFormat::from_path(p)
    };
    match fmt.and_then(|f| export_image(img, f)) {
        Ok(bytes) => match std::fs::write(p, bytes) {
            Ok(()) => format!("wrote {path}"),
            Err(e) => format!("error: {path}: {e}"),
        },
        Err(e) => format!("error: {e}"),
    }
}

/// Runs until `:quit` or end of input. Only I/O failures on the streams
/// themselves are errors; classification problems are reported inline.
pub fn run_repl<R: BufRead, W: Write>(classifier: &Classifier, input: R, mut output: W) -> std::io::Result<()> {
    let mut last: Option<SuperImage> = None;
    for line in input.lines() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim() == ":quit" {
            break;
        }
        let reply = if let Some(rest) = trimmed.strip_prefix(":dump") {
            dump(last.as_ref(), rest.trim())
        } else {
            match classifier.classify(trimmed) {
                Ok(c) => {
                    let s = format_result(&c);
                    last = Some(c.image);
                    s
                }
                Err(e) => format!("error: {e}"),
            }
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}
