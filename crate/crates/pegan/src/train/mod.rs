//! Adam optimization, the alternating GAN step, the two-stage protocol
//! (one-to-many pre-training, frozen-encoder tuning), augmentation and
//! checkpointing.
//!
//! Determinism contract: a run is a pure function of (seed, data, config).
//! All stochastic state lives in one master ChaCha stream (dropout masks,
//! crop offsets) whose position is checkpointed, plus per-epoch shuffle
//! streams derived from (seed, epoch) alone, so an interrupted and resumed
//! run replays the unbroken one bit for bit. `steps` is the absolute target
//! step count: resuming (or tuning) continues the global step counter.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::data::{batch_to_tensor, GlyphImage, GlyphPair};
use crate::error::{Error, Result};
use crate::loss::{
    adv_loss_d, adv_loss_g, category_loss_batch, l1_loss, perceptual_loss, total_generator_loss,
    AdvFormulation, LossWeights, PerceptualLayerWeights,
};
use crate::model::{
    build_discriminator, build_generator, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, PerceptionNet,
};
use crate::tensor::{Mode, Tensor};

/// Which training stage a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Tune,
}

/// Which perception net backs the perceptual loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerceptionConfig {
    Fallback { seed: u64 },
    Vgg19 { path: PathBuf },
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig::Fallback { seed: 0 }
    }
}

impl PerceptionConfig {
    pub fn build(&self) -> Result<PerceptionNet> {
        match self {
            PerceptionConfig::Fallback { seed } => Ok(PerceptionNet::fallback(*seed)),
            PerceptionConfig::Vgg19 { path } => PerceptionNet::load_vgg19(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Absolute target for the global step counter.
    pub steps: u64,
    pub seed: u64,
    pub stage: Stage,
    pub enlarge_factor: f64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub loss_weights: LossWeights,
    pub perceptual_layer_weights: PerceptualLayerWeights,
    pub adv_formulation: AdvFormulation,
    pub perception: PerceptionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            steps: 1,
            seed: 0,
            stage: Stage::Pretrain,
            enlarge_factor: 1.125,
            checkpoint_every: 0,
            loss_weights: LossWeights::default(),
            perceptual_layer_weights: PerceptualLayerWeights::default(),
            adv_formulation: AdvFormulation::default(),
            perception: PerceptionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0,1)")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 (batchnorm needs a population)".into(),
            ));
        }
        if self.enlarge_factor < 1.0 {
            return Err(Error::Config(format!(
                "enlarge_factor {} must be >= 1",
                self.enlarge_factor
            )));
        }
        self.loss_weights.validate()?;
        self.perceptual_layer_weights.validate()?;
        Ok(())
    }
}

/// Bias-corrected Adam over named parameter tensors. Parameters whose
/// `requires_grad` flag is off (frozen or non-trainable) are untouched, as
/// are parameters that received no gradient.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Adam {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Adam {
        Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step over every updatable parameter, then grads are
    /// cleared. NaN gradients abort naming the offending parameter.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad() else { continue };
            if grad.iter().any(|g| g.is_nan()) {
                return Err(Error::Numeric(format!("NaN gradient in parameter {name}")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let mut delta = vec![0.0; p.numel()];
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                delta[i] = m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.add_assign_scaled(&delta, -self.learning_rate)?;
            p.zero_grad();
        }
        Ok(())
    }

    fn save_state(&self, prefix: &str, ar: &mut Archive) -> Result<()> {
        for (name, m) in &self.m {
            ar.put_f64s(&format!("{prefix}.m.{name}"), &[m.len()], m)?;
        }
        for (name, v) in &self.v {
            ar.put_f64s(&format!("{prefix}.v.{name}"), &[v.len()], v)?;
        }
        Ok(())
    }

    fn load_state(&mut self, prefix: &str, t: u64, ar: &Archive) -> Result<()> {
        self.t = t;
        self.m.clear();
        self.v.clear();
        let m_prefix = format!("{prefix}.m.");
        let v_prefix = format!("{prefix}.v.");
        let names: Vec<String> = ar.names().map(String::from).collect();
        for name in names {
            if let Some(param) = name.strip_prefix(&m_prefix) {
                let (_, data) = ar.f64s(&name)?;
                self.m.insert(param.to_string(), data);
            } else if let Some(param) = name.strip_prefix(&v_prefix) {
                let (_, data) = ar.f64s(&name)?;
                self.v.insert(param.to_string(), data);
            }
        }
        Ok(())
    }
}

/// Enlarge-then-crop augmentation. Train mode resizes to
/// `round(extent * factor)` and crops a uniform-random window back to the
/// original extent; factor 1 and eval mode are exact identity. The crop
/// offset is drawn as (x, then y) from the given stream.
pub fn augment(
    img: &GlyphImage,
    enlarge_factor: f64,
    rng: &mut ChaCha8Rng,
    mode: Mode,
) -> GlyphImage {
    let offsets = augment_offsets(img.width, img.height, enlarge_factor, rng, mode);
    apply_augment(img, enlarge_factor, offsets)
}

/// Source and target of a pair share one crop offset.
pub fn augment_pair(
    source: &GlyphImage,
    target: &GlyphImage,
    enlarge_factor: f64,
    rng: &mut ChaCha8Rng,
    mode: Mode,
) -> (GlyphImage, GlyphImage) {
    let offsets = augment_offsets(source.width, source.height, enlarge_factor, rng, mode);
    (
        apply_augment(source, enlarge_factor, offsets),
        apply_augment(target, enlarge_factor, offsets),
    )
}

fn augment_offsets(
    width: usize,
    height: usize,
    factor: f64,
    rng: &mut ChaCha8Rng,
    mode: Mode,
) -> Option<(usize, usize)> {
    if mode == Mode::Eval || factor == 1.0 {
        return None;
    }
    let new_w = (width as f64 * factor).round() as usize;
    let new_h = (height as f64 * factor).round() as usize;
    let ox = rng.random_range(0..=new_w - width);
    let oy = rng.random_range(0..=new_h - height);
    Some((ox, oy))
}

fn apply_augment(img: &GlyphImage, factor: f64, offsets: Option<(usize, usize)>) -> GlyphImage {
    let Some((ox, oy)) = offsets else {
        return img.clone();
    };
    let new_w = (img.width as f64 * factor).round() as usize;
    let new_h = (img.height as f64 * factor).round() as usize;
    let big = crate::data::resize_bilinear(img, new_w, new_h);
    let mut pixels = vec![0.0; img.width * img.height];
    for y in 0..img.height {
        let src = (y + oy) * new_w + ox;
        pixels[y * img.width..(y + 1) * img.width]
            .copy_from_slice(&big.pixels[src..src + img.width]);
    }
    GlyphImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Every loss component of one alternating step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_d: f64,
    pub loss_adv_g: f64,
    pub loss_l1: f64,
    pub loss_perp: f64,
    pub loss_cate: f64,
    pub loss_total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss_d,loss_adv_g,loss_l1,loss_perp,loss_cate,loss_total";

impl StepReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss_d,
            self.loss_adv_g,
            self.loss_l1,
            self.loss_perp,
            self.loss_cate,
            self.loss_total
        )
    }
}

/// Appends one report line, writing the header when the file is new.
pub fn append_loss_csv(path: &Path, report: &StepReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOSS_CSV_HEADER}")?;
    }
    writeln!(f, "{}", report.csv_line())?;
    Ok(())
}

/// A training run: both networks, both optimizers, the master rng stream and
/// the global step counter.
pub struct Trainer {
    pub gen: Generator,
    pub disc: Discriminator,
    pub perception: PerceptionNet,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub train_cfg: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    adam_g_t: u64,
    adam_d_t: u64,
    seed: u64,
    rng_word_pos: String,
    encoder_frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    model: GeneratorConfig,
    disc: DiscriminatorConfig,
    train: TrainConfig,
}

impl Trainer {
    /// Fresh trainer: models initialized from the run seed.
    pub fn init(
        gen_cfg: &GeneratorConfig,
        disc_cfg: &DiscriminatorConfig,
        train_cfg: &TrainConfig,
    ) -> Result<Trainer> {
        train_cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let gen = build_generator(gen_cfg, &mut init_rng)?;
        let disc = build_discriminator(disc_cfg, &mut init_rng)?;
        let perception = train_cfg.perception.build()?;
        // The master stream is separate from the init draws so that
        // architecture size does not shift training randomness.
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(Trainer {
            gen,
            disc,
            perception,
            adam_g: Adam::from_config(train_cfg),
            adam_d: Adam::from_config(train_cfg),
            step: 0,
            rng,
            gen_cfg: gen_cfg.clone(),
            disc_cfg: disc_cfg.clone(),
            train_cfg: train_cfg.clone(),
        })
    }

    /// One alternating step: a discriminator update on (real, detached
    /// generated) followed by a generator update on the combined objective.
    /// During the discriminator update no generator parameter receives a
    /// gradient (the generated batch is detached); during the generator
    /// update the discriminator's parameters are gradient-masked.
    pub fn train_step(&mut self, batch: &[GlyphPair]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let (w0, h0) = (batch[0].source.width, batch[0].source.height);
        if batch
            .iter()
            .any(|p| p.source.width != w0 || p.source.height != h0
                || p.target.width != w0 || p.target.height != h0)
        {
            return Err(Error::Shape("training batch mixes image sizes".into()));
        }
        let cfg = &self.train_cfg;
        let categories: Vec<usize> = batch.iter().map(|p| p.category_id).collect();

        // Augmentation: one crop offset per pair, in batch order.
        let mut sources = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for pair in batch {
            let (s, t) = augment_pair(
                &pair.source,
                &pair.target,
                cfg.enlarge_factor,
                &mut self.rng,
                Mode::Train,
            );
            sources.push(s);
            targets.push(t);
        }
        let source = batch_to_tensor(&sources.iter().collect::<Vec<_>>())?;
        let target = batch_to_tensor(&targets.iter().collect::<Vec<_>>())?;

        // One generator forward serves both updates (single dropout draw).
        let fake = self
            .gen
            .generate(&source, &categories, Mode::Train, Some(&mut self.rng))?;
        if !fake.has_finite_data() {
            return Err(Error::Numeric(format!(
                "step {}: generator produced non-finite values",
                self.step + 1
            )));
        }

        // Discriminator update.
        let fake_detached = fake.detach();
        let (p_real, cate_real) = self.disc.discriminate(&target, None, Mode::Train)?;
        let (p_fake, cate_fake) = self.disc.discriminate(&fake_detached, None, Mode::Train)?;
        let adv_d = adv_loss_d(&p_real, &p_fake)?;
        let cate_d = category_loss_batch(&cate_real, &categories)?
            .add(&category_loss_batch(&cate_fake, &categories)?)?;
        let loss_d = adv_d.add(&cate_d.mul_scalar(cfg.loss_weights.cate))?;
        let loss_d_value = loss_d.item()?;
        if !loss_d_value.is_finite() {
            return Err(Error::Numeric(format!(
                "step {}: discriminator loss is {loss_d_value}",
                self.step + 1
            )));
        }
        let disc_params = self.disc.named_parameters();
        for (_, p) in &disc_params {
            p.zero_grad();
        }
        loss_d.backward()?;
        self.adam_d.step(&disc_params)?;

        // Generator update: gradient flows through D into the generated
        // batch, but not into D's parameters.
        for (_, p) in &disc_params {
            p.set_requires_grad(false);
        }
        let result = (|| -> Result<(StepReport, Tensor)> {
            let (p_fake_g, cate_fake_g) = self.disc.discriminate(&fake, None, Mode::Train)?;
            let adv_g = adv_loss_g(&p_fake_g, cfg.adv_formulation)?;
            let l1 = l1_loss(&target, &fake)?;
            let feat_real = self.perception.features(&target)?;
            let feat_fake = self.perception.features(&fake)?;
            let perp = perceptual_loss(&feat_real, &feat_fake, &cfg.perceptual_layer_weights)?;
            let cate_g = category_loss_batch(&cate_fake_g, &categories)?;
            let total = total_generator_loss(&adv_g, &l1, &perp, &cate_g, &cfg.loss_weights)?;
            let report = StepReport {
                step: self.step + 1,
                loss_d: loss_d_value,
                loss_adv_g: adv_g.item()?,
                loss_l1: l1.item()?,
                loss_perp: perp.item()?,
                loss_cate: cate_g.item()?,
                loss_total: total.item()?,
            };
            Ok((report, total))
        })();
        let (report, total) = match result {
            Ok(ok) => ok,
            Err(e) => {
                for (_, p) in &disc_params {
                    p.set_requires_grad(true);
                }
                return Err(e);
            }
        };
        if !report.loss_total.is_finite() {
            for (_, p) in &disc_params {
                p.set_requires_grad(true);
            }
            return Err(Error::Numeric(format!(
                "step {}: generator loss is non-finite \
                 (adv {}, l1 {}, perp {}, cate {})",
                self.step + 1,
                report.loss_adv_g,
                report.loss_l1,
                report.loss_perp,
                report.loss_cate
            )));
        }
        let gen_params = self.gen.named_parameters();
        for (_, p) in &gen_params {
            p.zero_grad();
        }
        total.backward()?;
        self.adam_g.step(&gen_params)?;
        for (_, p) in &disc_params {
            p.set_requires_grad(true);
        }

        self.step += 1;
        Ok(report)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        self.gen.save_state(&mut ar)?;
        self.disc.save_state(&mut ar)?;
        self.adam_g.save_state("opt_g", &mut ar)?;
        self.adam_d.save_state("opt_d", &mut ar)?;
        ar.put_json(
            "meta",
            &CheckpointMeta {
                step: self.step,
                adam_g_t: self.adam_g.step_count(),
                adam_d_t: self.adam_d.step_count(),
                seed: self.train_cfg.seed,
                rng_word_pos: self.rng.get_word_pos().to_string(),
                encoder_frozen: self.gen.encoder_frozen(),
            },
        )?;
        ar.put_json(
            "config",
            &CheckpointConfig {
                model: self.gen_cfg.clone(),
                disc: self.disc_cfg.clone(),
                train: self.train_cfg.clone(),
            },
        )?;
        ar.save(path)
    }

    /// Rebuilds a trainer from a checkpoint, restoring parameters, optimizer
    /// moments, the step counter, the rng position and the freeze flag.
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let ar = Archive::load(path)?;
        let config: CheckpointConfig = ar.json("config")?;
        let meta: CheckpointMeta = ar.json("meta")?;
        let mut trainer = Trainer::init(&config.model, &config.disc, &config.train)?;
        trainer.gen.load_state(&ar)?;
        trainer.disc.load_state(&ar)?;
        trainer.adam_g.load_state("opt_g", meta.adam_g_t, &ar)?;
        trainer.adam_d.load_state("opt_d", meta.adam_d_t, &ar)?;
        trainer.step = meta.step;
        let word_pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Archive("bad rng_word_pos in checkpoint meta".into()))?;
        trainer.rng.set_word_pos(word_pos);
        trainer.gen.set_encoder_frozen(meta.encoder_frozen);
        Ok(trainer)
    }
}

/// The per-epoch shuffle: a permutation of 0..n derived from (seed, epoch)
/// alone, so any resume point can reconstruct it.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// The batch of pair indices consumed at global step `step` (0-based).
pub(crate) fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let batches_per_epoch = (n / batch_size) as u64;
    let epoch = step / batches_per_epoch;
    let slot = (step % batches_per_epoch) as usize;
    let perm = epoch_permutation(seed, epoch, n);
    perm[slot * batch_size..(slot + 1) * batch_size].to_vec()
}

fn run_steps(
    trainer: &mut Trainer,
    pairs: &[GlyphPair],
    out_dir: &Path,
) -> Result<PathBuf> {
    let cfg = trainer.train_cfg.clone();
    if pairs.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} pairs cannot fill a batch of {}",
            pairs.len(),
            cfg.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("loss.csv");
    let ckpt_path = |step: u64| out_dir.join(format!("checkpoint_{step:06}.ar"));

    while trainer.step < cfg.steps {
        let indices = batch_indices(cfg.seed, trainer.step, pairs.len(), cfg.batch_size);
        let batch: Vec<GlyphPair> = indices.iter().map(|&i| pairs[i].clone()).collect();
        let report = trainer.train_step(&batch)?;
        append_loss_csv(&csv_path, &report)?;
        if cfg.checkpoint_every > 0
            && trainer.step % cfg.checkpoint_every == 0
            && trainer.step < cfg.steps
        {
            trainer.save_checkpoint(&ckpt_path(trainer.step))?;
        }
    }
    let final_path = ckpt_path(trainer.step);
    trainer.save_checkpoint(&final_path)?;
    Ok(final_path)
}

/// Stage 1: one-to-many pre-training over category-mixed shuffled batches.
/// Every category the generator is configured for must appear in the data.
pub fn pretrain(trainer: &mut Trainer, pairs: &[GlyphPair], out_dir: &Path) -> Result<PathBuf> {
    let n_categories = trainer.gen.config().num_categories;
    for cat in 0..n_categories {
        if !pairs.iter().any(|p| p.category_id == cat) {
            return Err(Error::Data(format!(
                "category {cat} is configured but absent from the training data"
            )));
        }
    }
    if let Some(bad) = pairs.iter().find(|p| p.category_id >= n_categories) {
        return Err(Error::Data(format!(
            "pair {} carries category {} outside 0..{n_categories}",
            crate::data::format_codepoint(bad.codepoint),
            bad.category_id
        )));
    }
    run_steps(trainer, pairs, out_dir)
}

/// Stage 2: frozen-encoder tuning on a single target category. Only pairs of
/// that category are consumed; every encoder tensor and the embedding table
/// stay bit-identical. The global step counter continues from the loaded
/// checkpoint.
pub fn tune(
    trainer: &mut Trainer,
    target_category: usize,
    pairs: &[GlyphPair],
    out_dir: &Path,
) -> Result<PathBuf> {
    let n_categories = trainer.gen.config().num_categories;
    if target_category >= n_categories {
        return Err(Error::Config(format!(
            "tune category {target_category} was not present in pre-training (0..{n_categories})"
        )));
    }
    let filtered: Vec<GlyphPair> = pairs
        .iter()
        .filter(|p| p.category_id == target_category)
        .cloned()
        .collect();
    if filtered.is_empty() {
        return Err(Error::Data(format!(
            "no pairs with category {target_category} to tune on"
        )));
    }
    trainer.gen.set_encoder_frozen(true);
    run_steps(trainer, &filtered, out_dir)
}

/// FNV-1a over the raw bits of a float slice; used to compare parameter
/// snapshots cheaply (freeze verification).
pub fn digest_f64s(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_magnitude() {
        // First step: m_hat = g, v_hat = g^2, update = lr * g/(|g| + eps).
        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        p.accumulate_grad(&[2.0]);
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        adam.step(&[("p".into(), p.clone())]).unwrap();
        let moved = 1.0 - p.data()[0];
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let p = Tensor::scalar(3.5);
        p.set_requires_grad(true);
        p.accumulate_grad(&[0.0]);
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        adam.step(&[("p".into(), p.clone())]).unwrap();
        assert_eq!(p.data()[0], 3.5);
    }

    #[test]
    fn adam_skips_frozen_and_gradless() {
        let frozen = Tensor::scalar(1.0);
        frozen.set_requires_grad(false);
        frozen.accumulate_grad(&[5.0]); // ignored: no requires_grad
        let gradless = Tensor::scalar(2.0);
        gradless.set_requires_grad(true);
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        adam.step(&[("a".into(), frozen.clone()), ("b".into(), gradless.clone())])
            .unwrap();
        assert_eq!(frozen.data()[0], 1.0);
        assert_eq!(gradless.data()[0], 2.0);
    }

    #[test]
    fn adam_nan_grad_names_parameter() {
        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        p.with_grad_mut(|g| g[0] = f64::NAN);
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        let err = adam.step(&[("gen.e1.conv.weight".into(), p)]).unwrap_err();
        assert!(err.to_string().contains("gen.e1.conv.weight"), "{err}");
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        // 10 steps on f(theta) = theta^2 from theta = 1: |theta| strictly
        // decreases, matching a hand-rolled Adam to 1e-12.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        let mut adam = Adam::new(lr, b1, b2, eps);

        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let loss = p.mul(&p).unwrap();
            loss.backward().unwrap();
            adam.step(&[("p".into(), p.clone())]).unwrap();

            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            let prev = theta.abs();
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p.data()[0] - theta).abs() < 1e-12, "step {t}");
            assert!(theta.abs() < prev, "step {t}: |theta| did not decrease");
        }
    }

    #[test]
    fn augment_factor_one_is_exact_identity() {
        let img = GlyphImage::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = rng.clone().random::<u64>();
        let out = augment(&img, 1.0, &mut rng, Mode::Train);
        assert_eq!(out, img);
        // No randomness consumed.
        assert_eq!(rng.random::<u64>(), before);
    }

    #[test]
    fn augment_eval_is_identity() {
        let img = GlyphImage::new(4, 4, vec![0.5; 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, 1.5, &mut rng, Mode::Eval), img);
    }

    #[test]
    fn augment_offsets_cover_expected_range() {
        // 256 -> 288 -> crop 256: offsets live in [0,32]^2 and hit both ends.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen_zero = false;
        let mut seen_max = false;
        for _ in 0..2000 {
            let o = augment_offsets(256, 256, 1.125, &mut rng, Mode::Train).unwrap();
            assert!(o.0 <= 32 && o.1 <= 32, "offset {o:?}");
            seen_zero |= o.0 == 0 || o.1 == 0;
            seen_max |= o.0 == 32 || o.1 == 32;
        }
        assert!(seen_zero && seen_max);
    }

    #[test]
    fn epoch_permutation_is_reproducible_and_valid() {
        let a = epoch_permutation(3, 5, 16);
        let b = epoch_permutation(3, 5, 16);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
        assert_ne!(epoch_permutation(3, 6, 16), a);
    }

    #[test]
    fn digest_distinguishes_values() {
        assert_ne!(digest_f64s(&[1.0, 2.0]), digest_f64s(&[1.0, 2.000001]));
        assert_eq!(digest_f64s(&[1.0, 2.0]), digest_f64s(&[1.0, 2.0]));
    }
}
