//! A small convolutional character classifier, trained on real target-font
//! glyphs and used as an evaluation instrument: generated glyphs that keep
//! their basic shape stay recognizable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::archive::Archive;
use crate::data::{batch_to_tensor, format_codepoint, normalize_glyph, GlyphImage, GlyphPair};
use crate::error::{Error, Result};
use crate::model::{BatchNorm, Conv};
use crate::tensor::{no_grad, Mode, Tensor};
use crate::train::{augment, batch_indices, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    /// Output channels of the three conv-BN-LReLU blocks.
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Training-set accuracy the model must reach to be usable.
    pub min_train_accuracy: f64,
    pub enlarge_factor: f64,
    pub leaky_slope: f64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            channels: vec![16, 32, 64],
            image_size: 32,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 600,
            seed: 0,
            min_train_accuracy: 0.9,
            enlarge_factor: 1.125,
            leaky_slope: 0.2,
        }
    }
}

impl RecognizerConfig {
    fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "recognizer takes exactly three conv blocks with positive widths".into(),
            ));
        }
        if self.image_size >> 3 == 0 {
            return Err(Error::Config(format!(
                "image_size {} leaves no extent after three stride-2 convs",
                self.image_size
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("recognizer batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// conv-BN-LReLU x3, then a fully connected softmax head over the class set.
pub struct Recognizer {
    cfg: RecognizerConfig,
    blocks: Vec<(Conv, BatchNorm)>,
    fc_weight: Tensor,
    fc_bias: Tensor,
    classes: Vec<u32>,
    train_accuracy: f64,
}

impl Recognizer {
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.cfg
    }

    fn logits(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = images.clone();
        for (conv, bn) in &self.blocks {
            x = conv.forward(&x)?;
            x = bn.forward(&x, mode)?;
            x = x.leaky_relu(self.cfg.leaky_slope);
        }
        let bsz = images.shape()[0];
        let flat = x.numel() / bsz;
        x.reshape(&[bsz, flat])?.linear(&self.fc_weight, &self.fc_bias)
    }

    /// Top-1 class indices for a batch of normalized glyph images.
    fn predict_indices(&self, images: &[GlyphImage]) -> Result<Vec<usize>> {
        let normalized: Vec<GlyphImage> = images
            .iter()
            .map(|g| normalize_glyph(g, self.cfg.image_size))
            .collect();
        let refs: Vec<&GlyphImage> = normalized.iter().collect();
        let logits = no_grad(|| -> Result<Tensor> {
            self.logits(&batch_to_tensor(&refs)?, Mode::Eval)
        })?;
        let c = self.classes.len();
        let d = logits.data();
        Ok((0..images.len())
            .map(|b| {
                let row = &d[b * c..(b + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Top-1 predicted codepoint for one glyph.
    pub fn classify(&self, image: &GlyphImage) -> Result<u32> {
        Ok(self.classes[self.predict_indices(std::slice::from_ref(image))?[0]])
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (j, (conv, bn)) in self.blocks.iter().enumerate() {
            let p = format!("rec.block{}", j + 1);
            out.push((format!("{p}.conv.weight"), conv.weight.clone()));
            out.push((format!("{p}.conv.bias"), conv.bias.clone()));
            out.push((format!("{p}.bn.gamma"), bn.gamma.clone()));
            out.push((format!("{p}.bn.beta"), bn.beta.clone()));
        }
        out.push(("rec.fc.weight".into(), self.fc_weight.clone()));
        out.push(("rec.fc.bias".into(), self.fc_bias.clone()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        for (name, t) in self.named_parameters() {
            ar.put_tensor(&name, &t)?;
        }
        for (j, (_, bn)) in self.blocks.iter().enumerate() {
            let p = format!("rec.block{}", j + 1);
            let stats = bn.stats.borrow();
            ar.put_f64s(&format!("{p}.bn.running_mean"), &[stats.mean.len()], &stats.mean)?;
            ar.put_f64s(&format!("{p}.bn.running_var"), &[stats.var.len()], &stats.var)?;
        }
        ar.put_json(
            "rec.meta",
            &serde_json::json!({
                "config": self.cfg,
                "classes": self.classes.iter().map(|&c| format_codepoint(c)).collect::<Vec<_>>(),
                "train_accuracy": self.train_accuracy,
            }),
        )?;
        ar.save(path)
    }

    pub fn load(path: &Path) -> Result<Recognizer> {
        let ar = Archive::load(path)?;
        let meta: serde_json::Value = ar.json("rec.meta")?;
        let cfg: RecognizerConfig = serde_json::from_value(meta["config"].clone())?;
        let classes: Vec<u32> = meta["classes"]
            .as_array()
            .ok_or_else(|| Error::Archive("rec.meta.classes missing".into()))?
            .iter()
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| Error::Archive("bad class entry".into()))
                    .and_then(|s| crate::data::parse_codepoint(s).map_err(|e| Error::Archive(e.to_string())))
            })
            .collect::<Result<_>>()?;
        let train_accuracy = meta["train_accuracy"]
            .as_f64()
            .ok_or_else(|| Error::Archive("rec.meta.train_accuracy missing".into()))?;
        let mut rec = build_recognizer(&cfg, classes.len())?;
        rec.classes = classes;
        rec.train_accuracy = train_accuracy;
        for (name, t) in rec.named_parameters() {
            let (shape, data) = ar.f64s(&name)?;
            if shape != t.shape() {
                return Err(Error::Archive(format!("{name}: shape mismatch")));
            }
            t.set_data(&data)?;
        }
        for (j, (_, bn)) in rec.blocks.iter().enumerate() {
            let p = format!("rec.block{}", j + 1);
            let (_, mean) = ar.f64s(&format!("{p}.bn.running_mean"))?;
            let (_, var) = ar.f64s(&format!("{p}.bn.running_var"))?;
            let mut stats = bn.stats.borrow_mut();
            stats.mean = mean;
            stats.var = var;
        }
        Ok(rec)
    }
}

fn build_recognizer(cfg: &RecognizerConfig, num_classes: usize) -> Result<Recognizer> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut blocks = Vec::with_capacity(3);
    let mut prev = 1usize;
    for &c in &cfg.channels {
        blocks.push((Conv::init(prev, c, &mut rng), BatchNorm::init(c, &mut rng)));
        prev = c;
    }
    let flat = prev * (cfg.image_size >> 3) * (cfg.image_size >> 3);
    let fc_weight = Tensor::randn(&[num_classes, flat], 0.0, 0.02, &mut rng);
    let fc_bias = Tensor::zeros(&[num_classes]);
    fc_weight.set_requires_grad(true);
    fc_bias.set_requires_grad(true);
    Ok(Recognizer {
        cfg: cfg.clone(),
        blocks,
        fc_weight,
        fc_bias,
        classes: Vec::new(),
        train_accuracy: 0.0,
    })
}

/// Trains the classifier on the target-font glyphs of `real_pairs` for the
/// given class set (enlarge-then-crop augmentation supplies variation).
/// Deterministic under the config seed; errors if any class has no sample,
/// or if the final training-set accuracy misses the configured floor.
pub fn train_recognizer(
    real_pairs: &[GlyphPair],
    classes: &[u32],
    cfg: &RecognizerConfig,
) -> Result<Recognizer> {
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "recognizer needs >= 2 classes, got {}",
            classes.len()
        )));
    }
    let mut class_index: BTreeMap<u32, usize> = BTreeMap::new();
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(Error::Config("duplicate codepoints in the class set".into()));
    }
    for (i, &cp) in sorted.iter().enumerate() {
        class_index.insert(cp, i);
    }

    let mut samples: Vec<(GlyphImage, usize)> = Vec::new();
    for pair in real_pairs {
        if let Some(&idx) = class_index.get(&pair.codepoint) {
            samples.push((normalize_glyph(&pair.target, cfg.image_size), idx));
        }
    }
    for (&cp, &idx) in &class_index {
        if !samples.iter().any(|(_, i)| *i == idx) {
            return Err(Error::Data(format!(
                "class {} has no training sample",
                format_codepoint(cp)
            )));
        }
    }
    if samples.len() < 2 {
        return Err(Error::Data("recognizer needs at least 2 samples".into()));
    }

    let mut rec = build_recognizer(cfg, sorted.len())?;
    rec.classes = sorted;
    let params = rec.named_parameters();
    let mut adam = Adam::new(cfg.learning_rate, 0.9, 0.999, 1e-8);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(u64::MAX);
    let batch_size = cfg.batch_size.min(samples.len());

    for step in 0..cfg.steps {
        let idxs = batch_indices(cfg.seed, step, samples.len(), batch_size);
        let mut images = Vec::with_capacity(batch_size);
        let mut labels = Vec::with_capacity(batch_size);
        for &i in &idxs {
            images.push(augment(&samples[i].0, cfg.enlarge_factor, &mut aug_rng, Mode::Train));
            labels.push(samples[i].1);
        }
        let refs: Vec<&GlyphImage> = images.iter().collect();
        let batch = batch_to_tensor(&refs)?;
        let loss = rec.logits(&batch, Mode::Train)?.softmax_cross_entropy(&labels)?;
        if !loss.item()?.is_finite() {
            return Err(Error::Numeric(format!(
                "recognizer step {step}: non-finite loss"
            )));
        }
        for (_, p) in &params {
            p.zero_grad();
        }
        loss.backward()?;
        adam.step(&params)?;
    }

    // Training-set accuracy, eval mode, no augmentation.
    let images: Vec<GlyphImage> = samples.iter().map(|(g, _)| g.clone()).collect();
    let predictions = rec.predict_indices(&images)?;
    let correct = predictions
        .iter()
        .zip(samples.iter())
        .filter(|(p, (_, label))| *p == label)
        .count();
    rec.train_accuracy = correct as f64 / samples.len() as f64;
    if rec.train_accuracy < cfg.min_train_accuracy {
        return Err(Error::Numeric(format!(
            "recognizer reached train accuracy {:.3}, below the {:.3} floor",
            rec.train_accuracy, cfg.min_train_accuracy
        )));
    }
    Ok(rec)
}

/// Fraction of top-1 correct predictions over (image, codepoint) items.
/// Empty input and codepoints outside the class set are errors.
pub fn recognition_accuracy(rec: &Recognizer, generated: &[(GlyphImage, u32)]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Data(
            "recognition_accuracy over an empty list is undefined".into(),
        ));
    }
    for (_, cp) in generated {
        if !rec.classes.contains(cp) {
            return Err(Error::Lookup(format!(
                "codepoint {} is not in the recognizer's class set",
                format_codepoint(*cp)
            )));
        }
    }
    let images: Vec<GlyphImage> = generated.iter().map(|(g, _)| g.clone()).collect();
    let predictions = rec.predict_indices(&images)?;
    let correct = predictions
        .iter()
        .zip(generated.iter())
        .filter(|(pred, (_, cp))| rec.classes[**pred] == *cp)
        .count();
    Ok(correct as f64 / generated.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    /// Synthetic glyph classes: distinct block patterns per class, jittered.
    pub(crate) fn synthetic_class_image(class: usize, jitter: u64, size: usize) -> GlyphImage {
        let mut rng = ChaCha8Rng::seed_from_u64(jitter.wrapping_mul(0x9E37) ^ class as u64);
        let mut pixels = vec![1.0; size * size];
        // A class-specific arrangement of dark cells on a 4x4 grid.
        let cell = size / 4;
        for gy in 0..4 {
            for gx in 0..4 {
                let on = (class >> ((gy * 4 + gx) % 10)) & 1 == 1 || (gx + gy * 3) % (class + 2) == 0;
                if !on {
                    continue;
                }
                for y in 0..cell {
                    for x in 0..cell {
                        let noise: f64 = rng.random_range(0.0..0.15);
                        pixels[(gy * cell + y) * size + gx * cell + x] = noise;
                    }
                }
            }
        }
        GlyphImage::new(size, size, pixels).unwrap()
    }

    pub(crate) fn synthetic_pairs(classes: usize, per_class: usize, size: usize) -> Vec<GlyphPair> {
        let mut out = Vec::new();
        for c in 0..classes {
            for j in 0..per_class {
                let img = synthetic_class_image(c, j as u64, size);
                out.push(GlyphPair {
                    source: img.clone(),
                    target: img,
                    codepoint: 0x4E00 + c as u32,
                    category_id: 0,
                });
            }
        }
        out
    }

    #[test]
    fn one_class_is_config_error() {
        let pairs = synthetic_pairs(1, 2, 16);
        let cfg = RecognizerConfig {
            image_size: 16,
            steps: 1,
            ..RecognizerConfig::default()
        };
        assert!(matches!(
            train_recognizer(&pairs, &[0x4E00], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_class_sample_is_data_error() {
        let pairs = synthetic_pairs(2, 2, 16);
        let cfg = RecognizerConfig {
            image_size: 16,
            steps: 1,
            min_train_accuracy: 0.0,
            ..RecognizerConfig::default()
        };
        assert!(matches!(
            train_recognizer(&pairs, &[0x4E00, 0x4E01, 0x9999], &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let pairs = synthetic_pairs(3, 3, 16);
        let classes = [0x4E00, 0x4E01, 0x4E02];
        let cfg = RecognizerConfig {
            image_size: 16,
            steps: 12,
            batch_size: 4,
            min_train_accuracy: 0.0,
            ..RecognizerConfig::default()
        };
        let a = train_recognizer(&pairs, &classes, &cfg).unwrap();
        let b = train_recognizer(&pairs, &classes, &cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.named_parameters().iter().zip(b.named_parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na}");
        }
        assert_eq!(a.train_accuracy(), b.train_accuracy());
    }

    #[test]
    fn accuracy_on_training_images_matches_report() {
        let pairs = synthetic_pairs(3, 4, 16);
        let classes = [0x4E00, 0x4E01, 0x4E02];
        let cfg = RecognizerConfig {
            image_size: 16,
            steps: 150,
            batch_size: 6,
            min_train_accuracy: 0.0,
            seed: 1,
            ..RecognizerConfig::default()
        };
        let rec = train_recognizer(&pairs, &classes, &cfg).unwrap();
        let items: Vec<(GlyphImage, u32)> = pairs
            .iter()
            .map(|p| (normalize_glyph(&p.target, 16), p.codepoint))
            .collect();
        let acc = recognition_accuracy(&rec, &items).unwrap();
        assert_eq!(acc, rec.train_accuracy());
    }

    #[test]
    fn empty_list_and_unknown_class_error() {
        let pairs = synthetic_pairs(2, 3, 16);
        let cfg = RecognizerConfig {
            image_size: 16,
            steps: 30,
            batch_size: 4,
            min_train_accuracy: 0.0,
            ..RecognizerConfig::default()
        };
        let rec = train_recognizer(&pairs, &[0x4E00, 0x4E01], &cfg).unwrap();
        assert!(matches!(
            recognition_accuracy(&rec, &[]),
            Err(Error::Data(_))
        ));
        let img = synthetic_class_image(0, 0, 16);
        assert!(matches!(
            recognition_accuracy(&rec, &[(img, 0xFFFF)]),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn save_load_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic_pairs(3, 3, 16);
        let cfg = RecognizerConfig {
            image_size: 16,
            steps: 40,
            batch_size: 4,
            min_train_accuracy: 0.0,
            ..RecognizerConfig::default()
        };
        let rec = train_recognizer(&pairs, &[0x4E00, 0x4E01, 0x4E02], &cfg).unwrap();
        let path = dir.path().join("rec.ar");
        rec.save(&path).unwrap();
        let back = Recognizer::load(&path).unwrap();
        assert_eq!(back.classes(), rec.classes());
        assert_eq!(back.train_accuracy(), rec.train_accuracy());
        for p in &pairs {
            assert_eq!(
                back.classify(&p.target).unwrap(),
                rec.classify(&p.target).unwrap()
            );
        }
    }
}
