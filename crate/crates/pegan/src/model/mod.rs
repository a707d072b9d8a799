//! The pyramid-embedded U-Net generator and the two-headed discriminator.
//!
//! The generator is an encoder-decoder with two kinds of shortcut:
//!
//! - *cascaded refinement connections*: every interior encoder module
//!   receives the source image, block-averaged down to its working
//!   resolution, channel-concatenated with the previous feature map;
//! - *mirror skip connections*: decoder module `d_{i+1}` receives the
//!   concatenation of `d_i`'s output with encoder feature `F_{n-i}` of equal
//!   spatial extent.
//!
//! A fixed Gaussian embedding row per font category is injected at the
//! bottleneck, broadcast over the bottleneck's spatial extent. The embedding
//! table is excluded from the trainable parameter set.
//!
//! All convolutions are 5x5 with stride 2 (spatial halving in the encoder,
//! exact doubling in the decoder via output padding 1).

pub mod perception;

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::{batchnorm2d, Mode, RunningStats, Tensor};

pub use perception::{perception_features, PerceptionNet};

const KERNEL: usize = 5;
const STRIDE: usize = 2;
const PAD: usize = 2;
const OUTPUT_PAD: usize = 1;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

fn is_pow2(v: usize) -> bool {
    v != 0 && v & (v - 1) == 0
}

/// Shape of the pyramid-embedded generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of encoder (and decoder) modules.
    pub depth: usize,
    /// Input extent `[w, h]`; both must be powers of two with `w/2^depth >= 1`.
    pub input_size: [usize; 2],
    /// Output channels of each encoder module, length `depth`.
    pub encoder_channels: Vec<usize>,
    /// Width of the fixed per-category style embedding.
    pub embedding_dim: usize,
    /// Dropout probability in decoder modules `d_1..d_{n-1}`.
    pub dropout_p: f64,
    /// Number of font categories the model serves simultaneously.
    pub num_categories: usize,
    /// Negative-branch slope of every leaky ReLU.
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 8,
            input_size: [256, 256],
            encoder_channels: vec![64, 128, 256, 512, 512, 512, 512, 512],
            embedding_dim: 128,
            dropout_p: 0.5,
            num_categories: 20,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.input_size;
        if self.depth == 0 {
            return Err(Error::Config("generator depth must be >= 1".into()));
        }
        if self.encoder_channels.len() != self.depth {
            return Err(Error::Config(format!(
                "encoder_channels has {} entries for depth {}",
                self.encoder_channels.len(),
                self.depth
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("encoder channel widths must be positive".into()));
        }
        if !is_pow2(w) || !is_pow2(h) {
            return Err(Error::Config(format!(
                "input size {w}x{h} must be powers of two"
            )));
        }
        if w >> self.depth == 0 || h >> self.depth == 0 {
            return Err(Error::Config(format!(
                "depth {} leaves no bottleneck pixel for input {w}x{h}",
                self.depth
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("num_categories must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0,1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Spatial extent (h, w) of encoder feature `F_i`, 1-based.
    fn feature_extent(&self, i: usize) -> (usize, usize) {
        (self.input_size[1] >> i, self.input_size[0] >> i)
    }
}

/// Shape of the discriminator: one plain conv block, then `channels.len()-1`
/// conv+batchnorm blocks, all leaky-ReLU activated, then a fully connected
/// layer emitting one real/fake logit and `num_categories` category logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub num_categories: usize,
    pub input_size: [usize; 2],
    /// When set, the source glyph is concatenated to the judged image
    /// (conditional variant); the default judges the image alone.
    pub conditional: bool,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: vec![64, 128, 256, 512],
            num_categories: 20,
            input_size: [256, 256],
            conditional: false,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("discriminator needs at least one conv block".into()));
        }
        let [w, h] = self.input_size;
        if !is_pow2(w) || !is_pow2(h) {
            return Err(Error::Config(format!(
                "input size {w}x{h} must be powers of two"
            )));
        }
        if w >> self.channels.len() == 0 || h >> self.channels.len() == 0 {
            return Err(Error::Config(format!(
                "{} discriminator blocks leave no spatial extent for input {w}x{h}",
                self.channels.len()
            )));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("num_categories must be >= 1".into()));
        }
        Ok(())
    }
}

pub(crate) struct Conv {
    pub(crate) weight: Tensor, // [Cout, Cin, k, k]
    pub(crate) bias: Tensor,   // [Cout]
}

impl Conv {
    pub(crate) fn init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Conv {
        let weight = Tensor::randn(&[cout, cin, KERNEL, KERNEL], 0.0, INIT_STD, rng);
        let bias = Tensor::zeros(&[cout]);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Conv { weight, bias }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, &self.bias, STRIDE, PAD)
    }
}

struct Deconv {
    weight: Tensor, // [Cin, Cout, k, k]
    bias: Tensor,
}

impl Deconv {
    fn init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Deconv {
        let weight = Tensor::randn(&[cin, cout, KERNEL, KERNEL], 0.0, INIT_STD, rng);
        let bias = Tensor::zeros(&[cout]);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Deconv { weight, bias }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d_transpose(&self.weight, &self.bias, STRIDE, PAD, OUTPUT_PAD)
    }
}

pub(crate) struct BatchNorm {
    pub(crate) gamma: Tensor,
    pub(crate) beta: Tensor,
    pub(crate) stats: RefCell<RunningStats>,
}

impl BatchNorm {
    pub(crate) fn init(channels: usize, rng: &mut ChaCha8Rng) -> BatchNorm {
        let gamma = Tensor::randn(&[channels], 1.0, INIT_STD, rng);
        let beta = Tensor::zeros(&[channels]);
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        BatchNorm {
            gamma,
            beta,
            stats: RefCell::new(RunningStats::new(channels)),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut stats = self.stats.borrow_mut();
        batchnorm2d(x, &self.gamma, &self.beta, mode, &mut stats, BN_MOMENTUM, BN_EPSILON)
    }
}

struct EncoderBlock {
    conv: Conv,
    bn: Option<BatchNorm>,
    lrelu: bool,
}

struct DecoderBlock {
    deconv: Deconv,
    bn: Option<BatchNorm>,
    dropout: bool,
    tanh: bool,
}

/// Pyramid-embedded U-Net generator.
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    embedding: Tensor, // [N, embedding_dim], non-trainable
    encoder_frozen: bool,
}

/// Builds a generator with Gaussian-initialized weights. The embedding table
/// is drawn once from N(0,1) and flagged non-trainable; two builds from the
/// same rng state are bit-identical.
pub fn build_generator(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Generator> {
    cfg.validate()?;
    let n = cfg.depth;
    let ch = &cfg.encoder_channels;

    let mut encoder = Vec::with_capacity(n);
    encoder.push(EncoderBlock {
        conv: Conv::init(1, ch[0], rng),
        bn: None,
        lrelu: false,
    });
    for i in 2..=n {
        let cin = if i < n { 1 + ch[i - 2] } else { ch[i - 2] };
        encoder.push(EncoderBlock {
            conv: Conv::init(cin, ch[i - 1], rng),
            bn: Some(BatchNorm::init(ch[i - 1], rng)),
            lrelu: true,
        });
    }

    let mut decoder = Vec::with_capacity(n);
    for i in 1..=n {
        let cin = if i == 1 {
            ch[n - 1] + cfg.embedding_dim
        } else {
            2 * ch[n - i]
        };
        let cout = if i == n { 1 } else { ch[n - i - 1] };
        let last = i == n;
        decoder.push(DecoderBlock {
            deconv: Deconv::init(cin, cout, rng),
            bn: if last { None } else { Some(BatchNorm::init(cout, rng)) },
            dropout: !last,
            tanh: last,
        });
    }

    let embedding = Tensor::randn(&[cfg.num_categories, cfg.embedding_dim], 0.0, 1.0, rng);
    embedding.set_requires_grad(false);

    Ok(Generator {
        cfg: cfg.clone(),
        encoder,
        decoder,
        embedding,
        encoder_frozen: false,
    })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// The fixed style embedding row for one category.
    pub fn category_embedding(&self, category_id: usize) -> Result<Vec<f64>> {
        if category_id >= self.cfg.num_categories {
            return Err(Error::Lookup(format!(
                "category {category_id} out of range 0..{}",
                self.cfg.num_categories
            )));
        }
        let e = self.cfg.embedding_dim;
        Ok(self.embedding.data()[category_id * e..(category_id + 1) * e].to_vec())
    }

    pub fn embedding_table(&self) -> &Tensor {
        &self.embedding
    }

    /// Freezes (or thaws) every encoder tensor: gradients stop flowing into
    /// them and their batchnorm layers run on frozen running statistics.
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
        for block in &self.encoder {
            block.conv.weight.set_requires_grad(!frozen);
            block.conv.bias.set_requires_grad(!frozen);
            if let Some(bn) = &block.bn {
                bn.gamma.set_requires_grad(!frozen);
                bn.beta.set_requires_grad(!frozen);
            }
        }
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    fn check_source(&self, source: &Tensor) -> Result<()> {
        let s = source.shape();
        let [w, h] = self.cfg.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "generator expects source [B,1,{h},{w}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Runs the encoder, returning features `F_1..F_n`.
    ///
    /// `F_1 = e_1(source)`; each interior module sees the source block-averaged
    /// to `F_{i-1}`'s extent concatenated with `F_{i-1}`; the bottleneck module
    /// `e_n` sees `F_{n-1}` alone.
    pub fn encode(&self, source: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        self.check_source(source)?;
        let mode = if self.encoder_frozen { Mode::Eval } else { mode };
        let n = self.cfg.depth;
        let mut features: Vec<Tensor> = Vec::with_capacity(n);

        let f1 = self.encoder[0].conv.forward(source)?;
        features.push(f1);
        for i in 2..=n {
            let block = &self.encoder[i - 1];
            let input = if i < n {
                let pyramid = source.avg_downsample(1 << (i - 1))?;
                pyramid.concat_channels(&features[i - 2])?
            } else {
                features[i - 2].clone()
            };
            let mut x = if block.lrelu {
                input.leaky_relu(self.cfg.leaky_slope)
            } else {
                input
            };
            x = block.conv.forward(&x)?;
            if let Some(bn) = &block.bn {
                x = bn.forward(&x, mode)?;
            }
            features.push(x);
        }
        Ok(features)
    }

    /// Runs the decoder on encoder features, injecting one embedding row per
    /// batch item at the bottleneck. Output is tanh-bounded in (-1, 1).
    ///
    /// `rng` supplies dropout masks and is required in train mode when
    /// `dropout_p > 0`; eval mode never consumes randomness.
    pub fn decode(
        &self,
        features: &[Tensor],
        categories: &[usize],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let n = self.cfg.depth;
        if features.len() != n {
            return Err(Error::Shape(format!(
                "decode expects {n} features, got {}",
                features.len()
            )));
        }
        let bottleneck = &features[n - 1];
        let bsz = bottleneck.shape()[0];
        if categories.len() != bsz {
            return Err(Error::Shape(format!(
                "decode: {} category ids for batch of {bsz}",
                categories.len()
            )));
        }
        if let Some(&bad) = categories.iter().find(|&&c| c >= self.cfg.num_categories) {
            return Err(Error::Lookup(format!(
                "category {bad} out of range 0..{}",
                self.cfg.num_categories
            )));
        }

        let (hs, ws) = (bottleneck.shape()[2], bottleneck.shape()[3]);
        let embed = self
            .embedding
            .gather_rows(categories)?
            .broadcast_spatial(hs, ws)?;
        let mut x = bottleneck.concat_channels(&embed)?;

        for i in 1..=n {
            let block = &self.decoder[i - 1];
            x = x.relu();
            x = block.deconv.forward(&x)?;
            if let Some(bn) = &block.bn {
                x = bn.forward(&x, mode)?;
            }
            if block.dropout && self.cfg.dropout_p > 0.0 {
                match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) => {
                        x = x.dropout(self.cfg.dropout_p, Mode::Train, r)?;
                    }
                    (Mode::Train, None) => {
                        return Err(Error::Usage(
                            "decode in train mode with dropout needs an rng".into(),
                        ))
                    }
                    (Mode::Eval, _) => {}
                }
            }
            if block.tanh {
                x = x.tanh();
            }
            if i < n {
                x = x.concat_channels(&features[n - i - 1])?;
            }
        }
        Ok(x)
    }

    /// encode + decode: source glyphs to target-styled glyphs in (-1, 1).
    pub fn generate(
        &self,
        source: &Tensor,
        categories: &[usize],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let features = self.encode(source, mode)?;
        self.decode(&features, categories, mode, rng)
    }

    /// Trainable tensors keyed by checkpoint entry name. Excludes the
    /// embedding table and batchnorm running statistics.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            let p = format!("gen.e{}", i + 1);
            out.push((format!("{p}.conv.weight"), b.conv.weight.clone()));
            out.push((format!("{p}.conv.bias"), b.conv.bias.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("{p}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("{p}.bn.beta"), bn.beta.clone()));
            }
        }
        for (i, b) in self.decoder.iter().enumerate() {
            let p = format!("gen.d{}", i + 1);
            out.push((format!("{p}.deconv.weight"), b.deconv.weight.clone()));
            out.push((format!("{p}.deconv.bias"), b.deconv.bias.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("{p}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("{p}.bn.beta"), bn.beta.clone()));
            }
        }
        out
    }

    /// Names of all encoder-owned tensors (the freeze set of the tuning
    /// stage), including running statistics.
    pub fn encoder_entry_names(&self) -> Vec<String> {
        self.state_entries()
            .into_iter()
            .map(|(name, _, _)| name)
            .filter(|n| n.starts_with("gen.e"))
            .collect()
    }

    fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, t) in self.named_parameters() {
            out.push((name, t.shape().to_vec(), t.to_vec()));
        }
        for (i, b) in self.encoder.iter().enumerate() {
            if let Some(bn) = &b.bn {
                let p = format!("gen.e{}", i + 1);
                let stats = bn.stats.borrow();
                out.push((
                    format!("{p}.bn.running_mean"),
                    vec![stats.mean.len()],
                    stats.mean.clone(),
                ));
                out.push((
                    format!("{p}.bn.running_var"),
                    vec![stats.var.len()],
                    stats.var.clone(),
                ));
            }
        }
        for (i, b) in self.decoder.iter().enumerate() {
            if let Some(bn) = &b.bn {
                let p = format!("gen.d{}", i + 1);
                let stats = bn.stats.borrow();
                out.push((
                    format!("{p}.bn.running_mean"),
                    vec![stats.mean.len()],
                    stats.mean.clone(),
                ));
                out.push((
                    format!("{p}.bn.running_var"),
                    vec![stats.var.len()],
                    stats.var.clone(),
                ));
            }
        }
        out.push((
            "gen.embed.table".into(),
            self.embedding.shape().to_vec(),
            self.embedding.to_vec(),
        ));
        out
    }

    /// Writes every parameter, running statistic and the embedding table
    /// into `ar` under their `gen.*` names.
    pub fn save_state(&self, ar: &mut Archive) -> Result<()> {
        for (name, shape, data) in self.state_entries() {
            ar.put_f64s(&name, &shape, &data)?;
        }
        Ok(())
    }

    /// Restores state saved by [`Generator::save_state`]. Shapes must match
    /// the built configuration exactly.
    pub fn load_state(&mut self, ar: &Archive) -> Result<()> {
        let load_into = |name: &str, t: &Tensor| -> Result<()> {
            let (shape, data) = ar.f64s(name)?;
            if shape != t.shape() {
                return Err(Error::Archive(format!(
                    "{name}: archive shape {shape:?} vs model shape {:?}",
                    t.shape()
                )));
            }
            t.set_data(&data)
        };
        for (name, t) in self.named_parameters() {
            load_into(&name, &t)?;
        }
        let load_stats = |prefix: String, bn: &BatchNorm| -> Result<()> {
            let (_, mean) = ar.f64s(&format!("{prefix}.bn.running_mean"))?;
            let (_, var) = ar.f64s(&format!("{prefix}.bn.running_var"))?;
            let mut stats = bn.stats.borrow_mut();
            if mean.len() != stats.mean.len() || var.len() != stats.var.len() {
                return Err(Error::Archive(format!("{prefix}: running stats length mismatch")));
            }
            stats.mean = mean;
            stats.var = var;
            Ok(())
        };
        for (i, b) in self.encoder.iter().enumerate() {
            if let Some(bn) = &b.bn {
                load_stats(format!("gen.e{}", i + 1), bn)?;
            }
        }
        for (i, b) in self.decoder.iter().enumerate() {
            if let Some(bn) = &b.bn {
                load_stats(format!("gen.d{}", i + 1), bn)?;
            }
        }
        load_into("gen.embed.table", &self.embedding)?;
        Ok(())
    }

    /// Structural plan of the built network, computed from stored kernel
    /// shapes and config arithmetic alone (no forward pass).
    pub fn layer_plan(&self) -> LayerPlan {
        let n = self.cfg.depth;
        let [w, h] = self.cfg.input_size;
        let mut encoder = Vec::with_capacity(n);
        for (i, b) in self.encoder.iter().enumerate() {
            let ks = b.conv.weight.shape();
            let (ih, iw) = self.cfg.feature_extent(i);
            encoder.push(ModulePlan {
                in_channels: ks[1],
                out_channels: ks[0],
                in_extent: (ih, iw),
                out_extent: (ih / 2, iw / 2),
            });
        }
        let mut decoder = Vec::with_capacity(n);
        for (i, b) in self.decoder.iter().enumerate() {
            let ks = b.deconv.weight.shape();
            let (ih, iw) = self.cfg.feature_extent(n - i);
            decoder.push(ModulePlan {
                in_channels: ks[0],
                out_channels: ks[1],
                in_extent: (ih, iw),
                out_extent: (ih * 2, iw * 2),
            });
        }
        LayerPlan {
            depth: n,
            input_extent: (h, w),
            embedding_dim: self.cfg.embedding_dim,
            encoder_channels: self.cfg.encoder_channels.clone(),
            encoder,
            decoder,
        }
    }
}

/// Channel and extent arithmetic for one module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModulePlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_extent: (usize, usize),
    pub out_extent: (usize, usize),
}

/// Structural description of a built generator, used to assert the mirror,
/// pyramid and skip invariants without running a forward pass.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub depth: usize,
    pub input_extent: (usize, usize),
    pub embedding_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder: Vec<ModulePlan>,
    pub decoder: Vec<ModulePlan>,
}

impl LayerPlan {
    /// Checks the three architecture invariants exactly:
    /// pyramid concatenation, mirror output shape, and skip channel counts.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.depth;
        let ch = &self.encoder_channels;
        for i in 1..=n {
            let m = &self.encoder[i - 1];
            let want_in = if i == 1 {
                1
            } else if i < n {
                1 + ch[i - 2]
            } else {
                ch[i - 2]
            };
            if m.in_channels != want_in {
                return Err(Error::Config(format!(
                    "pyramid invariant violated at e{i}: {} input channels, expected {want_in}",
                    m.in_channels
                )));
            }
            if m.out_channels != ch[i - 1] {
                return Err(Error::Config(format!(
                    "e{i} emits {} channels, expected {}",
                    m.out_channels,
                    ch[i - 1]
                )));
            }
            let want_extent = (
                self.input_extent.0 >> (i - 1),
                self.input_extent.1 >> (i - 1),
            );
            if m.in_extent != want_extent {
                return Err(Error::Config(format!(
                    "e{i} input extent {:?}, expected {want_extent:?}",
                    m.in_extent
                )));
            }
        }
        for i in 1..=n {
            let m = &self.decoder[i - 1];
            let want_in = if i == 1 {
                ch[n - 1] + self.embedding_dim
            } else {
                // skip invariant: previous decoder output + F_{n-i+1}
                self.decoder[i - 2].out_channels + ch[n - i]
            };
            if m.in_channels != want_in {
                return Err(Error::Config(format!(
                    "skip invariant violated at d{i}: {} input channels, expected {want_in}",
                    m.in_channels
                )));
            }
        }
        let out = self.decoder[n - 1].out_extent;
        if out != self.input_extent || self.decoder[n - 1].out_channels != 1 {
            return Err(Error::Config(format!(
                "mirror invariant violated: output {}x{:?} vs input {:?}",
                self.decoder[n - 1].out_channels,
                out,
                self.input_extent
            )));
        }
        Ok(())
    }
}

struct DiscBlock {
    conv: Conv,
    bn: Option<BatchNorm>,
}

/// Two-headed discriminator: a real/fake probability and per-category logits.
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    blocks: Vec<DiscBlock>,
    fc_weight: Tensor, // [1 + N, flat]
    fc_bias: Tensor,   // [1 + N]
}

pub fn build_discriminator(
    cfg: &DiscriminatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Discriminator> {
    cfg.validate()?;
    let in_ch = if cfg.conditional { 2 } else { 1 };
    let mut blocks = Vec::with_capacity(cfg.channels.len());
    let mut prev = in_ch;
    for (j, &c) in cfg.channels.iter().enumerate() {
        blocks.push(DiscBlock {
            conv: Conv::init(prev, c, rng),
            bn: if j == 0 { None } else { Some(BatchNorm::init(c, rng)) },
        });
        prev = c;
    }
    let [w, h] = cfg.input_size;
    let l = cfg.channels.len();
    let flat = prev * (h >> l) * (w >> l);
    let heads = 1 + cfg.num_categories;
    let fc_weight = Tensor::randn(&[heads, flat], 0.0, INIT_STD, rng);
    let fc_bias = Tensor::zeros(&[heads]);
    fc_weight.set_requires_grad(true);
    fc_bias.set_requires_grad(true);
    Ok(Discriminator {
        cfg: cfg.clone(),
        blocks,
        fc_weight,
        fc_bias,
    })
}

impl Discriminator {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Judges a batch of images. Returns the real/fake probability (sigmoid
    /// applied, values in (0,1)) and the raw category logits; the category
    /// loss applies its own sigmoid in stable logit form.
    ///
    /// `source` must be given exactly when the conditional variant is
    /// configured.
    pub fn discriminate(
        &self,
        image: &Tensor,
        source: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(Tensor, Tensor)> {
        let s = image.shape();
        let [w, h] = self.cfg.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "discriminator expects [B,1,{h},{w}], got {s:?}"
            )));
        }
        let mut x = match (self.cfg.conditional, source) {
            (true, Some(src)) => image.concat_channels(src)?,
            (true, None) => {
                return Err(Error::Usage(
                    "conditional discriminator needs the source image".into(),
                ))
            }
            (false, None) => image.clone(),
            (false, Some(_)) => {
                return Err(Error::Usage(
                    "unconditional discriminator takes no source image".into(),
                ))
            }
        };
        for block in &self.blocks {
            x = block.conv.forward(&x)?;
            if let Some(bn) = &block.bn {
                x = bn.forward(&x, mode)?;
            }
            x = x.leaky_relu(self.cfg.leaky_slope);
        }
        let bsz = s[0];
        let flat = x.numel() / bsz;
        let x = x.reshape(&[bsz, flat])?;
        let logits = x.linear(&self.fc_weight, &self.fc_bias)?;
        let real_prob = logits.slice_cols(0, 1)?.sigmoid();
        let category_logits = logits.slice_cols(1, self.cfg.num_categories)?;
        Ok((real_prob, category_logits))
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (j, b) in self.blocks.iter().enumerate() {
            let p = format!("disc.block{}", j + 1);
            out.push((format!("{p}.conv.weight"), b.conv.weight.clone()));
            out.push((format!("{p}.conv.bias"), b.conv.bias.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("{p}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("{p}.bn.beta"), bn.beta.clone()));
            }
        }
        out.push(("disc.fc.weight".into(), self.fc_weight.clone()));
        out.push(("disc.fc.bias".into(), self.fc_bias.clone()));
        out
    }

    pub fn save_state(&self, ar: &mut Archive) -> Result<()> {
        for (name, t) in self.named_parameters() {
            ar.put_tensor(&name, &t)?;
        }
        for (j, b) in self.blocks.iter().enumerate() {
            if let Some(bn) = &b.bn {
                let p = format!("disc.block{}", j + 1);
                let stats = bn.stats.borrow();
                ar.put_f64s(&format!("{p}.bn.running_mean"), &[stats.mean.len()], &stats.mean)?;
                ar.put_f64s(&format!("{p}.bn.running_var"), &[stats.var.len()], &stats.var)?;
            }
        }
        Ok(())
    }

    pub fn load_state(&mut self, ar: &Archive) -> Result<()> {
        for (name, t) in self.named_parameters() {
            let (shape, data) = ar.f64s(&name)?;
            if shape != t.shape() {
                return Err(Error::Archive(format!(
                    "{name}: archive shape {shape:?} vs model shape {:?}",
                    t.shape()
                )));
            }
            t.set_data(&data)?;
        }
        for (j, b) in self.blocks.iter().enumerate() {
            if let Some(bn) = &b.bn {
                let p = format!("disc.block{}", j + 1);
                let (_, mean) = ar.f64s(&format!("{p}.bn.running_mean"))?;
                let (_, var) = ar.f64s(&format!("{p}.bn.running_var"))?;
                let mut stats = bn.stats.borrow_mut();
                stats.mean = mean;
                stats.var = var;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            depth: 3,
            input_size: [16, 16],
            encoder_channels: vec![4, 8, 8],
            embedding_dim: 6,
            dropout_p: 0.5,
            num_categories: 2,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn full_depth_bottleneck_is_one_pixel() {
        let cfg = GeneratorConfig::default();
        let gen = build_generator(&cfg, &mut rng(1)).unwrap();
        let plan = gen.layer_plan();
        assert_eq!(plan.encoder[7].out_extent, (1, 1));
        // All F_i extents form the exact halving sequence 128..1.
        let extents: Vec<usize> = plan.encoder.iter().map(|m| m.out_extent.0).collect();
        assert_eq!(extents, vec![128, 64, 32, 16, 8, 4, 2, 1]);
        plan.check_invariants().unwrap();
    }

    #[test]
    fn depth_one_degenerates() {
        let cfg = GeneratorConfig {
            depth: 1,
            input_size: [2, 2],
            encoder_channels: vec![4],
            embedding_dim: 3,
            num_categories: 1,
            dropout_p: 0.0,
            ..GeneratorConfig::default()
        };
        let gen = build_generator(&cfg, &mut rng(2)).unwrap();
        let source = Tensor::zeros(&[1, 1, 2, 2]);
        let out = gen.generate(&source, &[0], Mode::Eval, None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        gen.layer_plan().check_invariants().unwrap();
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_cfg();
        let g1 = build_generator(&cfg, &mut rng(7)).unwrap();
        let g2 = build_generator(&cfg, &mut rng(7)).unwrap();
        for ((n1, t1), (n2, t2)) in g1.named_parameters().iter().zip(g2.named_parameters().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "{n1}");
        }
        assert_eq!(g1.embedding.to_vec(), g2.embedding.to_vec());
    }

    #[test]
    fn encoder_pyramid_feeds_halved_source() {
        // e_3 consumes the source downsampled to F_2's extent.
        let cfg = GeneratorConfig {
            depth: 8,
            input_size: [256, 256],
            encoder_channels: vec![4, 4, 4, 4, 4, 4, 4, 4],
            embedding_dim: 4,
            num_categories: 2,
            ..GeneratorConfig::default()
        };
        let gen = build_generator(&cfg, &mut rng(3)).unwrap();
        let plan = gen.layer_plan();
        assert_eq!(plan.encoder[2].in_extent, (64, 64));
        assert_eq!(plan.encoder[2].in_channels, 1 + 4);
        plan.check_invariants().unwrap();
    }

    #[test]
    fn zero_source_f1_is_bias_broadcast() {
        let cfg = tiny_cfg();
        let gen = build_generator(&cfg, &mut rng(4)).unwrap();
        let source = Tensor::zeros(&[1, 1, 16, 16]);
        let features = gen.encode(&source, Mode::Eval).unwrap();
        let bias = gen.encoder[0].conv.bias.to_vec();
        let f1 = features[0].data();
        for c in 0..cfg.encoder_channels[0] {
            for i in 0..64 {
                assert_eq!(f1[c * 64 + i], bias[c]);
            }
        }
    }

    #[test]
    fn eval_generation_is_deterministic_and_bounded() {
        let cfg = tiny_cfg();
        let gen = build_generator(&cfg, &mut rng(5)).unwrap();
        let source = Tensor::randn(&[2, 1, 16, 16], 0.0, 0.5, &mut rng(6));
        let a = gen.generate(&source, &[0, 1], Mode::Eval, None).unwrap();
        let b = gen.generate(&source, &[0, 1], Mode::Eval, None).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(a.shape(), source.shape());
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn different_categories_differ() {
        let cfg = tiny_cfg();
        let gen = build_generator(&cfg, &mut rng(8)).unwrap();
        let source = Tensor::randn(&[1, 1, 16, 16], 0.0, 0.5, &mut rng(9));
        let f = gen.encode(&source, Mode::Eval).unwrap();
        let a = gen.decode(&f, &[0], Mode::Eval, None).unwrap();
        let f = gen.encode(&source, Mode::Eval).unwrap();
        let b = gen.decode(&f, &[1], Mode::Eval, None).unwrap();
        assert_ne!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn unknown_category_is_lookup_error() {
        let cfg = tiny_cfg();
        let gen = build_generator(&cfg, &mut rng(10)).unwrap();
        let source = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(
            gen.generate(&source, &[2], Mode::Eval, None),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(gen.category_embedding(2), Err(Error::Lookup(_))));
    }

    #[test]
    fn embedding_rows_distinct_and_stable() {
        let cfg = tiny_cfg();
        let g1 = build_generator(&cfg, &mut rng(11)).unwrap();
        let g2 = build_generator(&cfg, &mut rng(11)).unwrap();
        assert_eq!(g1.category_embedding(0).unwrap(), g2.category_embedding(0).unwrap());
        assert_ne!(g1.category_embedding(0).unwrap(), g1.category_embedding(1).unwrap());
    }

    #[test]
    fn generator_state_roundtrip() {
        let cfg = tiny_cfg();
        let gen = build_generator(&cfg, &mut rng(12)).unwrap();
        let mut ar = Archive::new();
        gen.save_state(&mut ar).unwrap();
        let mut other = build_generator(&cfg, &mut rng(99)).unwrap();
        other.load_state(&ar).unwrap();
        let src = Tensor::randn(&[1, 1, 16, 16], 0.0, 0.5, &mut rng(13));
        let a = gen.generate(&src, &[1], Mode::Eval, None).unwrap();
        let b = other.generate(&src, &[1], Mode::Eval, None).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn discriminator_two_heads() {
        let cfg = DiscriminatorConfig {
            channels: vec![4, 8, 8, 8],
            num_categories: 3,
            input_size: [16, 16],
            ..DiscriminatorConfig::default()
        };
        let disc = build_discriminator(&cfg, &mut rng(14)).unwrap();
        let img = Tensor::randn(&[4, 1, 16, 16], 0.0, 0.5, &mut rng(15));
        let (p, logits) = disc.discriminate(&img, None, Mode::Train).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(logits.shape(), &[4, 3]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conditional_discriminator_needs_source() {
        let cfg = DiscriminatorConfig {
            channels: vec![4, 8],
            num_categories: 2,
            input_size: [16, 16],
            conditional: true,
            ..DiscriminatorConfig::default()
        };
        let disc = build_discriminator(&cfg, &mut rng(16)).unwrap();
        let img = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(
            disc.discriminate(&img, None, Mode::Eval),
            Err(Error::Usage(_))
        ));
        let (p, _) = disc.discriminate(&img, Some(&img), Mode::Eval).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_cfg();
        cfg.encoder_channels = vec![4, 8]; // wrong length
        assert!(matches!(
            build_generator(&cfg, &mut rng(17)),
            Err(Error::Config(_))
        ));
        let mut cfg = tiny_cfg();
        cfg.input_size = [48, 48]; // not a power of two
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.depth = 5; // 16 / 2^5 < 1
        cfg.encoder_channels = vec![4; 5];
        assert!(cfg.validate().is_err());
    }
}
