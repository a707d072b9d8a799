//! Shared fixtures: deterministic synthetic glyphs and desk-scale configs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pegan::data::{GlyphImage, GlyphPair};
use pegan::model::{DiscriminatorConfig, GeneratorConfig};
use pegan::train::{PerceptionConfig, Stage, TrainConfig};

/// A deterministic stroke-like pattern derived from the codepoint: dark
/// rectangles on a white canvas.
pub fn synthetic_glyph(codepoint: u32, size: usize) -> GlyphImage {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA5E ^ codepoint as u64);
    let mut pixels = vec![1.0; size * size];
    let strokes = 3 + (codepoint % 4) as usize;
    for _ in 0..strokes {
        let horizontal: bool = rng.random();
        let thickness = 1 + size / 16;
        let pos = rng.random_range(0..size - thickness);
        let start = rng.random_range(0..size / 2);
        let len = rng.random_range(size / 3..=size - start);
        for t in 0..thickness {
            for l in 0..len {
                let (y, x) = if horizontal {
                    (pos + t, start + l)
                } else {
                    (start + l, pos + t)
                };
                pixels[y * size + x] = 0.05;
            }
        }
    }
    GlyphImage::new(size, size, pixels).unwrap()
}

/// Deterministic per-category restyling of a glyph, so each category is a
/// distinct learnable image-to-image mapping.
pub fn stylize(img: &GlyphImage, category: usize) -> GlyphImage {
    let (w, h) = (img.width, img.height);
    let mut pixels = vec![1.0; w * h];
    match category % 2 {
        // Bolder: min over a 2x2 neighborhood.
        0 => {
            for y in 0..h {
                for x in 0..w {
                    let mut v: f64 = 1.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let yy = (y + dy).min(h - 1);
                            let xx = (x + dx).min(w - 1);
                            v = v.min(img.pixels[yy * w + xx]);
                        }
                    }
                    pixels[y * w + x] = v;
                }
            }
        }
        // Lighter, shifted one pixel down-right.
        _ => {
            for y in 0..h {
                for x in 0..w {
                    let src = img.pixels[y.saturating_sub(1) * w + x.saturating_sub(1)];
                    pixels[y * w + x] = (0.35 + 0.65 * src).min(1.0);
                }
            }
        }
    }
    GlyphImage::new(w, h, pixels).unwrap()
}

/// `per_category` pairs for each of `categories` target fonts, all sharing
/// the same source font.
pub fn synthetic_dataset(categories: usize, per_category: usize, size: usize) -> Vec<GlyphPair> {
    let mut out = Vec::new();
    for cat in 0..categories {
        for i in 0..per_category {
            let cp = 0x4E00 + i as u32;
            let source = synthetic_glyph(cp, size);
            let target = stylize(&source, cat);
            out.push(GlyphPair {
                source,
                target,
                codepoint: cp,
                category_id: cat,
            });
        }
    }
    out
}

pub fn tiny_gen_cfg(depth: usize, size: usize, channels: &[usize], n: usize) -> GeneratorConfig {
    GeneratorConfig {
        depth,
        input_size: [size, size],
        encoder_channels: channels.to_vec(),
        embedding_dim: 8,
        dropout_p: 0.5,
        num_categories: n,
        leaky_slope: 0.2,
    }
}

pub fn tiny_disc_cfg(size: usize, channels: &[usize], n: usize) -> DiscriminatorConfig {
    DiscriminatorConfig {
        channels: channels.to_vec(),
        num_categories: n,
        input_size: [size, size],
        conditional: false,
        leaky_slope: 0.2,
    }
}

pub fn tiny_train_cfg(seed: u64, steps: u64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size,
        steps,
        seed,
        stage: Stage::Pretrain,
        checkpoint_every: 0,
        perception: PerceptionConfig::Fallback { seed: 0 },
        ..TrainConfig::default()
    }
}
