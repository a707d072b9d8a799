//! Fixed perception networks for the perceptual loss.
//!
//! The loss compares activations at five tap depths with spatial extents
//! full, 1/2, 1/4, 1/8 and 1/16 of the input. Two backends provide those
//! taps:
//!
//! - [`PerceptionNet::load_vgg19`] runs the conv stack of VGG-19 from an
//!   archive of pretrained weights and taps the ReLU outputs of `conv1_2`,
//!   `conv2_2`, `conv3_2`, `conv4_2` and `conv5_2`. Weights are not bundled;
//!   the expected archive entries are `vgg19.conv{b}_{i}.weight` with shape
//!   `[Cout, Cin, 3, 3]` and matching `.bias` (f32 or f64 payloads).
//! - [`PerceptionNet::fallback`] is a small CNN with Gaussian weights drawn
//!   from a fixed seed, tapping the same five depths. It keeps the perceptual
//!   term exercised end to end when no VGG-19 archive is available.
//!
//! Either way the network is non-trainable: gradients flow through it into
//! the generator but never into its weights. Inputs are model-range images
//! `[B,1,H,W]` in (-1,1); each backend applies its own input convention
//! (VGG-19 replicates the channel to RGB and standardizes with the usual
//! ImageNet statistics).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tap count of every perception backend.
pub const TAP_COUNT: usize = 5;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

struct ConvWeights {
    weight: Tensor,
    bias: Tensor,
}

impl ConvWeights {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, &self.bias, 1, 1)
    }
}

/// VGG-19 conv layers up to `conv5_2`, grouped per block.
/// `(block, convs_in_block)`; taps sit after conv index 1 of each block.
const VGG_LAYOUT: [(usize, usize); 5] = [(1, 2), (2, 2), (3, 4), (4, 4), (5, 2)];
const VGG_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

pub struct Vgg19 {
    blocks: Vec<Vec<ConvWeights>>,
}

pub struct FallbackNet {
    taps: Vec<ConvWeights>,
    seed: u64,
}

pub enum PerceptionNet {
    Vgg19(Vgg19),
    Fallback(FallbackNet),
}

impl PerceptionNet {
    /// Deterministic random perception net. Channels are kept narrow; the
    /// taps only need to span scales, not encode semantics.
    pub fn fallback(seed: u64) -> PerceptionNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = [8usize, 8, 16, 16, 16];
        let mut taps = Vec::with_capacity(TAP_COUNT);
        let mut prev = 1usize;
        for &c in &channels {
            let fan_in = prev * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = Tensor::randn(&[c, prev, 3, 3], 0.0, std, &mut rng);
            let bias = Tensor::zeros(&[c]);
            taps.push(ConvWeights { weight, bias });
            prev = c;
        }
        PerceptionNet::Fallback(FallbackNet { taps, seed })
    }

    /// Loads pretrained VGG-19 weights (through `conv5_2`) from a tensor
    /// archive. Missing or mis-shaped entries surface as archive errors.
    pub fn load_vgg19(path: &Path) -> Result<PerceptionNet> {
        let ar = Archive::load(path)?;
        let mut blocks = Vec::with_capacity(VGG_LAYOUT.len());
        let mut prev = 3usize;
        for (bi, &(block, convs)) in VGG_LAYOUT.iter().enumerate() {
            let cout = VGG_CHANNELS[bi];
            let mut layer = Vec::with_capacity(convs);
            for ci in 1..=convs {
                let weight = ar.tensor(&format!("vgg19.conv{block}_{ci}.weight"))?;
                let bias = ar.tensor(&format!("vgg19.conv{block}_{ci}.bias"))?;
                let cin = if ci == 1 { prev } else { cout };
                if weight.shape() != [cout, cin, 3, 3] {
                    return Err(Error::Archive(format!(
                        "vgg19.conv{block}_{ci}.weight: shape {:?}, expected [{cout},{cin},3,3]",
                        weight.shape()
                    )));
                }
                if bias.shape() != [cout] {
                    return Err(Error::Archive(format!(
                        "vgg19.conv{block}_{ci}.bias: shape {:?}, expected [{cout}]",
                        bias.shape()
                    )));
                }
                layer.push(ConvWeights { weight, bias });
            }
            blocks.push(layer);
            prev = cout;
        }
        Ok(PerceptionNet::Vgg19(Vgg19 { blocks }))
    }

    pub fn describe(&self) -> String {
        match self {
            PerceptionNet::Vgg19(_) => "vgg19[conv1_2..conv5_2]".into(),
            PerceptionNet::Fallback(f) => format!("fallback(seed={})", f.seed),
        }
    }

    /// The five tap activations for a batch of model-range glyph images.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!(
                "perception net expects [B,1,H,W], got {s:?}"
            )));
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::Shape(format!(
                "perception taps reach 1/16 scale; {}x{} is not divisible by 16",
                s[2], s[3]
            )));
        }
        match self {
            PerceptionNet::Fallback(net) => {
                let mut taps = Vec::with_capacity(TAP_COUNT);
                let mut x = image.clone();
                for (i, conv) in net.taps.iter().enumerate() {
                    let act = conv.forward(&x)?.relu();
                    taps.push(act.clone());
                    if i + 1 < net.taps.len() {
                        x = act.avg_downsample(2)?;
                    }
                }
                Ok(taps)
            }
            PerceptionNet::Vgg19(net) => {
                // (-1,1) grayscale -> RGB standardized with ImageNet stats.
                let unit = image.mul_scalar(0.5).add_scalar(0.5);
                let rgb = unit.concat_channels(&unit)?.concat_channels(&unit)?;
                let (bsz, h, w) = (s[0], s[2], s[3]);
                let plane = h * w;
                let mut mean = vec![0.0; bsz * 3 * plane];
                let mut inv_std = vec![0.0; bsz * 3 * plane];
                for b in 0..bsz {
                    for c in 0..3 {
                        let base = (b * 3 + c) * plane;
                        mean[base..base + plane].fill(IMAGENET_MEAN[c]);
                        inv_std[base..base + plane].fill(1.0 / IMAGENET_STD[c]);
                    }
                }
                let mean = Tensor::new(&[bsz, 3, h, w], mean)?;
                let inv_std = Tensor::new(&[bsz, 3, h, w], inv_std)?;
                let mut x = rgb.sub(&mean)?.mul(&inv_std)?;

                let mut taps = Vec::with_capacity(TAP_COUNT);
                for (bi, block) in net.blocks.iter().enumerate() {
                    for (ci, conv) in block.iter().enumerate() {
                        x = conv.forward(&x)?.relu();
                        if ci == 1 {
                            taps.push(x.clone());
                        }
                    }
                    if bi + 1 < net.blocks.len() {
                        x = x.maxpool2x2()?;
                    }
                }
                Ok(taps)
            }
        }
    }
}

/// Activations of the perception net at its five designated tap depths.
pub fn perception_features(net: &PerceptionNet, image: &Tensor) -> Result<Vec<Tensor>> {
    net.features(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fallback_taps_shrink_monotonically() {
        let net = PerceptionNet::fallback(0);
        let img = Tensor::zeros(&[1, 1, 32, 32]);
        let taps = net.features(&img).unwrap();
        assert_eq!(taps.len(), TAP_COUNT);
        let mut prev = usize::MAX;
        for t in &taps {
            let extent = t.shape()[2];
            assert!(extent <= prev);
            prev = extent;
        }
        assert_eq!(taps[0].shape()[2], 32);
        assert_eq!(taps[4].shape()[2], 2);
    }

    #[test]
    fn identical_images_identical_features() {
        let net = PerceptionNet::fallback(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::randn(&[1, 1, 16, 16], 0.0, 0.5, &mut rng);
        let a = net.features(&img).unwrap();
        let b = net.features(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn fallback_is_rebuild_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Tensor::randn(&[1, 1, 16, 16], 0.0, 0.5, &mut rng);
        let a = PerceptionNet::fallback(7).features(&img).unwrap();
        let b = PerceptionNet::fallback(7).features(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn vgg_archive_roundtrip_and_taps() {
        // Build a synthetic (random-weight) VGG-19 archive, load it, and
        // check tap shapes against the documented layout.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg19.ar");
        let mut ar = Archive::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut prev = 3usize;
        for (bi, &(block, convs)) in VGG_LAYOUT.iter().enumerate() {
            let cout = VGG_CHANNELS[bi];
            for ci in 1..=convs {
                let cin = if ci == 1 { prev } else { cout };
                let w = Tensor::randn(&[cout, cin, 3, 3], 0.0, 0.05, &mut rng);
                let b = Tensor::zeros(&[cout]);
                ar.put_tensor(&format!("vgg19.conv{block}_{ci}.weight"), &w).unwrap();
                ar.put_tensor(&format!("vgg19.conv{block}_{ci}.bias"), &b).unwrap();
            }
            prev = cout;
        }
        ar.save(&path).unwrap();

        let net = PerceptionNet::load_vgg19(&path).unwrap();
        let img = Tensor::zeros(&[1, 1, 16, 16]);
        let taps = net.features(&img).unwrap();
        let extents: Vec<usize> = taps.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(extents, vec![16, 8, 4, 2, 1]);
        let channels: Vec<usize> = taps.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(channels, VGG_CHANNELS.to_vec());
    }

    #[test]
    fn missing_weights_surface_as_archive_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ar");
        Archive::new().save(&path).unwrap();
        assert!(matches!(
            PerceptionNet::load_vgg19(&path),
            Err(Error::Archive(_))
        ));
    }
}
