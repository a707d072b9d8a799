//! Glyph-image ingestion, cross-font pairing, and the evaluation-set builder.
//!
//! Images are 8-bit grayscale PNG or PGM files named `U+XXXX.png` (hex
//! codepoint) under one directory per font. Pixels live in [0,1] in memory
//! (1.0 = white background); the model-facing conversion to (-1,1) is
//! `2p - 1`. Character metadata is TSV:
//! `codepoint<TAB>stroke_count<TAB>frequency_rank`, UTF-8, `#` comments.
//!
//! Everything is deterministically ordered (codepoint-sorted), so dataset
//! iteration is reproducible run to run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::{DynamicImage, GrayImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A grayscale glyph image, pixels in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GlyphImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<GlyphImage> {
        if pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Data("pixel outside [0,1]".into()));
        }
        Ok(GlyphImage {
            width,
            height,
            pixels,
        })
    }

    /// A white (background) canvas.
    pub fn blank(width: usize, height: usize) -> GlyphImage {
        GlyphImage {
            width,
            height,
            pixels: vec![1.0; width * height],
        }
    }
}

/// Formats a codepoint as `U+XXXX` (at least four hex digits, uppercase).
pub fn format_codepoint(cp: u32) -> String {
    format!("U+{cp:04X}")
}

/// Parses `U+XXXX` (case-insensitive hex after the prefix).
pub fn parse_codepoint(s: &str) -> Result<u32> {
    let hex = s
        .strip_prefix("U+")
        .or_else(|| s.strip_prefix("u+"))
        .ok_or_else(|| Error::Data(format!("codepoint {s:?} lacks the U+ prefix")))?;
    u32::from_str_radix(hex, 16).map_err(|_| Error::Data(format!("bad codepoint {s:?}")))
}

/// Loads an 8-bit grayscale PNG or PGM file as-is (no resizing).
pub fn load_image(path: &Path) -> Result<GlyphImage> {
    let img = image::open(path)?;
    let gray: GrayImage = match img {
        DynamicImage::ImageLuma8(g) => g,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageRgb16(_) => {
            return Err(Error::Data(format!(
                "{}: unsupported bit depth (8-bit grayscale required)",
                path.display()
            )))
        }
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported pixel format {:?} (8-bit grayscale required)",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let pixels = gray.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
    GlyphImage::new(w, h, pixels)
}

/// Saves as 8-bit grayscale; the format follows the extension (.png or .pgm).
pub fn save_image(img: &GlyphImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let gray = GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("length checked at construction");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    gray.save(path)?;
    Ok(())
}

/// Bilinear resampling (half-pixel-centre coordinate mapping).
pub fn resize_bilinear(img: &GlyphImage, new_width: usize, new_height: usize) -> GlyphImage {
    if new_width == img.width && new_height == img.height {
        return img.clone();
    }
    let sx = img.width as f64 / new_width as f64;
    let sy = img.height as f64 / new_height as f64;
    let mut pixels = vec![0.0; new_width * new_height];
    for y in 0..new_height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..new_width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let p00 = img.pixels[y0 * img.width + x0];
            let p01 = img.pixels[y0 * img.width + x1];
            let p10 = img.pixels[y1 * img.width + x0];
            let p11 = img.pixels[y1 * img.width + x1];
            pixels[y * new_width + x] = p00 * (1.0 - wy) * (1.0 - wx)
                + p01 * (1.0 - wy) * wx
                + p10 * wy * (1.0 - wx)
                + p11 * wy * wx;
        }
    }
    GlyphImage {
        width: new_width,
        height: new_height,
        pixels,
    }
}

/// Center-pads a non-square image to a white square, then resizes to
/// `size x size` (resize skipped when already that size).
pub fn normalize_glyph(img: &GlyphImage, size: usize) -> GlyphImage {
    let side = img.width.max(img.height);
    let squared = if img.width == img.height {
        img.clone()
    } else {
        let mut canvas = GlyphImage::blank(side, side);
        let ox = (side - img.width) / 2;
        let oy = (side - img.height) / 2;
        for y in 0..img.height {
            let dst = (y + oy) * side + ox;
            canvas.pixels[dst..dst + img.width]
                .copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
        }
        canvas
    };
    resize_bilinear(&squared, size, size)
}

/// Loads and normalizes one glyph to the model input size.
pub fn load_glyph(path: &Path, size: usize) -> Result<GlyphImage> {
    Ok(normalize_glyph(&load_image(path)?, size))
}

/// Stacks same-sized glyphs into a [B,1,H,W] tensor in (-1,1) model range.
pub fn batch_to_tensor(images: &[&GlyphImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {w}x{h} images",
                img.width, img.height
            )));
        }
        data.extend(img.pixels.iter().map(|&p| 2.0 * p - 1.0));
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Converts a [B,1,H,W] model-range tensor back to glyph images, clamping
/// into [0,1].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<GlyphImage>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("expected [B,1,H,W], got {s:?}")));
    }
    let (bsz, h, w) = (s[0], s[2], s[3]);
    let d = t.data();
    let mut out = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let pixels = d[b * h * w..(b + 1) * h * w]
            .iter()
            .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect();
        out.push(GlyphImage {
            width: w,
            height: h,
            pixels,
        });
    }
    Ok(out)
}

/// One training sample: a source-font glyph, the same character in the
/// target font, and the target font's category id.
#[derive(Debug, Clone)]
pub struct GlyphPair {
    pub source: GlyphImage,
    pub target: GlyphImage,
    pub codepoint: u32,
    pub category_id: usize,
}

/// Result of pairing two font directories.
pub struct PairLoad {
    pub pairs: Vec<GlyphPair>,
    /// Files present on only one side, reported but not fatal.
    pub unmatched: Vec<String>,
}

fn glyph_files(dir: &Path) -> Result<BTreeMap<u32, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
    {
        let entry = entry?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png") | Some("pgm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Ok(cp) = parse_codepoint(stem) {
                out.insert(cp, path);
            }
        }
    }
    Ok(out)
}

/// Pairs glyphs by codepoint intersection of two font directories, loading
/// and normalizing both sides to `size x size`. Pairs come back
/// codepoint-sorted; one-sided files are listed in `unmatched`.
pub fn load_pairs(
    source_dir: &Path,
    target_dir: &Path,
    category_id: usize,
    size: usize,
) -> Result<PairLoad> {
    let sources = glyph_files(source_dir)?;
    let targets = glyph_files(target_dir)?;
    let source_cps: BTreeSet<u32> = sources.keys().copied().collect();
    let target_cps: BTreeSet<u32> = targets.keys().copied().collect();

    let mut unmatched = Vec::new();
    for cp in source_cps.symmetric_difference(&target_cps) {
        let side = if source_cps.contains(cp) {
            source_dir
        } else {
            target_dir
        };
        unmatched.push(format!("{}/{}", side.display(), format_codepoint(*cp)));
    }

    let mut pairs = Vec::new();
    for cp in source_cps.intersection(&target_cps) {
        pairs.push(GlyphPair {
            source: load_glyph(&sources[cp], size)?,
            target: load_glyph(&targets[cp], size)?,
            codepoint: *cp,
            category_id,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no common codepoints between {} and {}",
            source_dir.display(),
            target_dir.display()
        )));
    }
    Ok(PairLoad { pairs, unmatched })
}

/// Stroke count and usage rank for one character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharacterMeta {
    pub codepoint: u32,
    pub stroke_count: u32,
    /// 1 = most frequent.
    pub frequency_rank: u32,
}

/// Parses the character metadata TSV. Malformed lines error with their line
/// number; duplicate codepoints and duplicate ranks are rejected.
pub fn parse_metadata_tsv(text: &str) -> Result<Vec<CharacterMeta>> {
    let mut out = Vec::new();
    let mut seen_cp = BTreeSet::new();
    let mut seen_rank = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "metadata line {lineno}: expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let codepoint = parse_codepoint(fields[0])
            .map_err(|e| Error::Data(format!("metadata line {lineno}: {e}")))?;
        let stroke_count: u32 = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("metadata line {lineno}: bad stroke count {:?}", fields[1])))?;
        let frequency_rank: u32 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("metadata line {lineno}: bad frequency rank {:?}", fields[2])))?;
        if stroke_count == 0 {
            return Err(Error::Data(format!(
                "metadata line {lineno}: stroke count must be >= 1"
            )));
        }
        if frequency_rank == 0 {
            return Err(Error::Data(format!(
                "metadata line {lineno}: frequency rank must be >= 1"
            )));
        }
        if !seen_cp.insert(codepoint) {
            return Err(Error::Data(format!(
                "metadata line {lineno}: duplicate codepoint {}",
                format_codepoint(codepoint)
            )));
        }
        if !seen_rank.insert(frequency_rank) {
            return Err(Error::Data(format!(
                "metadata line {lineno}: duplicate frequency rank {frequency_rank}"
            )));
        }
        out.push(CharacterMeta {
            codepoint,
            stroke_count,
            frequency_rank,
        });
    }
    Ok(out)
}

pub fn load_metadata_tsv(path: &Path) -> Result<Vec<CharacterMeta>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_metadata_tsv(&text)
}

/// Difficulty bands by stroke count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Easy,
    Mid,
    Hard,
}

impl Band {
    pub fn of_stroke_count(strokes: u32) -> Band {
        match strokes {
            0..=5 => Band::Easy,
            6..=9 => Band::Mid,
            _ => Band::Hard,
        }
    }

    pub fn all() -> [Band; 3] {
        [Band::Easy, Band::Mid, Band::Hard]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Band::Easy => "easy",
            Band::Mid => "mid",
            Band::Hard => "hard",
        }
    }
}

mod codepoint_list {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(cps: &[u32], ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_seq(cps.iter().map(|&cp| super::format_codepoint(cp)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u32>, D::Error> {
        let strings = Vec::<String>::deserialize(de)?;
        strings
            .iter()
            .map(|s| super::parse_codepoint(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// The three-band evaluation character set: per band, the `per_band` most
/// frequent characters satisfying the band's stroke predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSet {
    #[serde(with = "codepoint_list")]
    pub easy: Vec<u32>,
    #[serde(with = "codepoint_list")]
    pub mid: Vec<u32>,
    #[serde(with = "codepoint_list")]
    pub hard: Vec<u32>,
    /// Bands that had fewer candidates than requested.
    pub shortfall: Vec<Band>,
}

impl EvalSet {
    pub fn band_members(&self, band: Band) -> &[u32] {
        match band {
            Band::Easy => &self.easy,
            Band::Mid => &self.mid,
            Band::Hard => &self.hard,
        }
    }

    pub fn band_of(&self, codepoint: u32) -> Option<Band> {
        for band in Band::all() {
            if self.band_members(band).contains(&codepoint) {
                return Some(band);
            }
        }
        None
    }

    pub fn contains(&self, codepoint: u32) -> bool {
        self.band_of(codepoint).is_some()
    }

    pub fn len(&self) -> usize {
        self.easy.len() + self.mid.len() + self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalSet> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Builds the evaluation set: per band, the `per_band` lowest frequency
/// ranks, ties broken by ascending codepoint. Bands short on candidates
/// return everything they have and get flagged.
pub fn build_eval_set(meta: &[CharacterMeta], per_band: usize) -> Result<EvalSet> {
    if meta.is_empty() {
        return Err(Error::Data("empty character metadata".into()));
    }
    let mut selected: BTreeMap<&'static str, Vec<u32>> = BTreeMap::new();
    let mut shortfall = Vec::new();
    for band in Band::all() {
        let mut candidates: Vec<&CharacterMeta> = meta
            .iter()
            .filter(|m| Band::of_stroke_count(m.stroke_count) == band)
            .collect();
        candidates.sort_by_key(|m| (m.frequency_rank, m.codepoint));
        if candidates.len() < per_band {
            shortfall.push(band);
        }
        candidates.truncate(per_band);
        // Stored codepoint-sorted for stable set semantics.
        let mut cps: Vec<u32> = candidates.iter().map(|m| m.codepoint).collect();
        cps.sort_unstable();
        selected.insert(band.name(), cps);
    }
    Ok(EvalSet {
        easy: selected.remove("easy").unwrap(),
        mid: selected.remove("mid").unwrap(),
        hard: selected.remove("hard").unwrap(),
        shortfall,
    })
}

/// Splits pairs into (train, eval): eval holds exactly the pairs whose
/// codepoints appear in the evaluation set.
pub fn split_dataset(pairs: Vec<GlyphPair>, eval_set: &EvalSet) -> (Vec<GlyphPair>, Vec<GlyphPair>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for pair in pairs {
        if eval_set.contains(pair.codepoint) {
            eval.push(pair);
        } else {
            train.push(pair);
        }
    }
    (train, eval)
}
