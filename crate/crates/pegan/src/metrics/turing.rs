//! Visual-Turing-sheet tooling: a randomized grid of real and generated
//! glyphs with a hidden answer key, plus keyed grading of responses.
//! Collecting human responses is out of scope; this module only produces the
//! materials and grades filled-in answers.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::GlyphImage;
use crate::error::{Error, Result};

const GUTTER: usize = 4;

/// Origin of one sheet tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuringLabel {
    Real,
    Generated,
}

impl TuringLabel {
    pub fn name(&self) -> &'static str {
        match self {
            TuringLabel::Real => "real",
            TuringLabel::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Result<TuringLabel> {
        match s {
            "real" => Ok(TuringLabel::Real),
            "generated" => Ok(TuringLabel::Generated),
            other => Err(Error::Data(format!("bad label {other:?}"))),
        }
    }
}

/// Composes the sheet: equally many real and generated tiles in a
/// seed-determined random order on a uniform white grid (no visual cue of
/// origin). Returns the sheet and the answer key, indexed by tile position
/// (row-major).
pub fn turing_sheet(
    real: &[GlyphImage],
    generated: &[GlyphImage],
    rng: &mut ChaCha8Rng,
) -> Result<(GlyphImage, Vec<TuringLabel>)> {
    if real.is_empty() || real.len() != generated.len() {
        return Err(Error::Config(format!(
            "turing sheet needs equally many real and generated images, got {} and {}",
            real.len(),
            generated.len()
        )));
    }
    let (tw, th) = (real[0].width, real[0].height);
    for img in real.iter().chain(generated) {
        if img.width != tw || img.height != th {
            return Err(Error::Shape(format!(
                "turing sheet tiles must share one size; {}x{} vs {tw}x{th}",
                img.width, img.height
            )));
        }
    }

    let total = real.len() + generated.len();
    // Fisher-Yates permutation of tile slots.
    let mut order: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let cols = (total as f64).sqrt().ceil() as usize;
    let rows = total.div_ceil(cols);
    let sheet_w = cols * tw + (cols + 1) * GUTTER;
    let sheet_h = rows * th + (rows + 1) * GUTTER;
    let mut sheet = GlyphImage::blank(sheet_w, sheet_h);
    let mut key = Vec::with_capacity(total);
    for (tile, &source_idx) in order.iter().enumerate() {
        let (img, label) = if source_idx < real.len() {
            (&real[source_idx], TuringLabel::Real)
        } else {
            (&generated[source_idx - real.len()], TuringLabel::Generated)
        };
        key.push(label);
        let (r, c) = (tile / cols, tile % cols);
        let ox = GUTTER + c * (tw + GUTTER);
        let oy = GUTTER + r * (th + GUTTER);
        for y in 0..th {
            let dst = (oy + y) * sheet_w + ox;
            sheet.pixels[dst..dst + tw].copy_from_slice(&img.pixels[y * tw..(y + 1) * tw]);
        }
    }
    Ok((sheet, key))
}

/// Writes the answer key CSV: `tile_index,label`.
pub fn write_answer_key(path: &Path, key: &[TuringLabel]) -> Result<()> {
    let mut text = String::from("tile_index,label\n");
    for (i, label) in key.iter().enumerate() {
        text.push_str(&format!("{i},{}\n", label.name()));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses an answer key (or a respondent's filled-in sheet in the same
/// format). Tiles must be consecutive from 0.
pub fn parse_answer_key(text: &str) -> Result<Vec<TuringLabel>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "tile_index,label" {
                return Err(Error::Data(format!("bad answer-key header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (idx, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("answer-key line {}: no comma", lineno + 1)))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("answer-key line {}: bad index", lineno + 1)))?;
        if idx != out.len() {
            return Err(Error::Data(format!(
                "answer-key line {}: tile {idx} out of order",
                lineno + 1
            )));
        }
        out.push(TuringLabel::parse(label.trim())?);
    }
    Ok(out)
}

/// Fraction of responses matching the key.
pub fn grade_responses(key: &[TuringLabel], responses: &[TuringLabel]) -> Result<f64> {
    if key.len() != responses.len() || key.is_empty() {
        return Err(Error::Config(format!(
            "grading {} responses against a key of {}",
            responses.len(),
            key.len()
        )));
    }
    let correct = key
        .iter()
        .zip(responses)
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / key.len() as f64)
}
