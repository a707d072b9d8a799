//! Central finite-difference verification of every differentiable primitive
//! and of the combined training objective on a tiny pyramid GAN.
//!
//! The harness is independent of the analytic backward path by construction:
//! it re-evaluates the forward closure at perturbed leaf values and compares
//! the slope against the recorded gradient, entry by entry, using
//! [`rel_err`](crate::tensor::rel_err) (epsilon-guarded relative error).
//!
//! `run_all` powers the `gradcheck` CLI command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{
    adv_loss_d, adv_loss_g, category_loss_batch, l1_loss, perceptual_loss, total_generator_loss,
    AdvFormulation, LossWeights, PerceptualLayerWeights,
};
use crate::model::{
    build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig, PerceptionNet,
};
use crate::tensor::{no_grad, rel_err, Mode, Tensor};

/// Central-difference step for per-primitive checks (double precision).
pub const FD_STEP: f64 = 1e-5;

/// Step for the end-to-end objective. The composite surface is piecewise
/// smooth (leaky ReLU, ReLU, |.|); a finer step keeps the probe interval from
/// straddling a kink, where a central difference disagrees with the
/// subgradient no matter how correct the backward pass is.
pub const FD_STEP_COMPOSITE: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Which leaf entries to probe.
enum Probe {
    /// Every entry of every leaf.
    All,
    /// The k entries of largest analytic gradient magnitude per leaf. Deep
    /// graphs leave entries with near-zero gradients dominated by rounding
    /// noise in the finite differences; the strongest entries still expose
    /// any systematic backward error (wrong scale, wrong index arithmetic).
    LargestPerLeaf(usize),
}

/// Compares analytic gradients of `build()`'s scalar output against central
/// finite differences at the given leaves. Returns the worst relative error.
///
/// `build` must be a pure function of the leaf data (reseed any rng inside).
fn finite_diff(
    leaves: &[&Tensor],
    probe: Probe,
    step: f64,
    build: &mut dyn FnMut() -> Result<Tensor>,
) -> Result<f64> {
    for leaf in leaves {
        leaf.zero_grad();
        leaf.set_requires_grad(true);
    }
    let loss = build()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let indices: Vec<usize> = match probe {
            Probe::All => (0..n).collect(),
            Probe::LargestPerLeaf(k) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    analytic[li][b]
                        .abs()
                        .partial_cmp(&analytic[li][a].abs())
                        .unwrap()
                });
                order.truncate(k.min(n));
                order
            }
        };
        for idx in indices {
            let original = leaf.data()[idx];
            let mut eval_at = |v: f64| -> Result<f64> {
                let mut d = leaf.to_vec();
                d[idx] = v;
                leaf.set_data(&d)?;
                no_grad(|| build()).and_then(|t| t.item())
            };
            let plus = eval_at(original + step)?;
            let minus = eval_at(original - step)?;
            let mut d = leaf.to_vec();
            d[idx] = original;
            leaf.set_data(&d)?;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic[li][idx], numeric));
        }
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    Ok(worst)
}

fn check(
    name: &str,
    tolerance: f64,
    leaves: &[&Tensor],
    probe: Probe,
    mut build: impl FnMut() -> Result<Tensor>,
) -> Result<CheckResult> {
    let max_rel_err = finite_diff(leaves, probe, FD_STEP, &mut build)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err,
        tolerance,
    })
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 0.0, std, rng)
}

/// A fixed random weighting of the output, so the backward path is probed
/// with a non-uniform adjoint rather than the all-ones gradient of `sum`.
fn weighted_sum(out: &Tensor, rng_seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = randn(out.shape(), 1.0, &mut rng);
    Ok(out.mul(&w)?.sum())
}

/// Every tensor primitive, each gradient entry checked.
pub fn primitive_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut out = Vec::new();

    // conv2d: input, kernel and bias gradients under stride/padding combos.
    for (stride, pad) in [(1usize, 1usize), (2, 2)] {
        let x = randn(&[2, 2, 6, 6], 1.0, &mut rng);
        let k = randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = randn(&[3], 0.5, &mut rng);
        out.push(check(
            &format!("conv2d[s{stride},p{pad}]"),
            1e-4,
            &[&x, &k, &b],
            Probe::All,
            || weighted_sum(&x.conv2d(&k, &b, stride, pad)?, 1),
        )?);
    }

    // conv2d_transpose under the exact-doubling configuration.
    {
        let x = randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let k = randn(&[2, 3, 5, 5], 0.5, &mut rng);
        let b = randn(&[3], 0.5, &mut rng);
        out.push(check(
            "conv2d_transpose[s2,p2,op1]",
            1e-4,
            &[&x, &k, &b],
            Probe::All,
            || weighted_sum(&x.conv2d_transpose(&k, &b, 2, 2, 1)?, 2),
        )?);
    }

    // batchnorm, train and eval modes (batch statistics differentiate too).
    {
        let x = randn(&[3, 2, 4, 4], 1.0, &mut rng);
        let gamma = randn(&[2], 0.5, &mut rng);
        let beta = randn(&[2], 0.5, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let label = match mode {
                Mode::Train => "batchnorm2d[train]",
                Mode::Eval => "batchnorm2d[eval]",
            };
            out.push(check(label, 1e-4, &[&x, &gamma, &beta], Probe::All, || {
                let mut stats = crate::tensor::RunningStats::new(2);
                stats.mean = vec![0.1, -0.2];
                stats.var = vec![1.3, 0.7];
                let y = crate::tensor::batchnorm2d(&x, &gamma, &beta, mode, &mut stats, 0.1, 1e-5)?;
                weighted_sum(&y, 3)
            })?);
        }
    }

    // Activations at 100 random points, tighter tolerance. Unit-scale points
    // keep sigmoid/tanh off their saturated tails, where the true gradient
    // underflows toward the finite-difference noise floor.
    {
        let x = randn(&[100], 1.0, &mut rng);
        let slope = 0.2;
        out.push(check("leaky_relu", 1e-6, &[&x], Probe::All, || {
            weighted_sum(&x.leaky_relu(slope), 4)
        })?);
        out.push(check("relu", 1e-6, &[&x], Probe::All, || {
            weighted_sum(&x.relu(), 5)
        })?);
        out.push(check("sigmoid", 1e-6, &[&x], Probe::All, || {
            weighted_sum(&x.sigmoid(), 6)
        })?);
        out.push(check("tanh", 1e-6, &[&x], Probe::All, || {
            weighted_sum(&x.tanh(), 7)
        })?);
    }

    // dropout with the mask pinned by reseeding per evaluation.
    {
        let x = randn(&[1, 1, 8, 8], 1.0, &mut rng);
        out.push(check("dropout[p=0.4]", 1e-4, &[&x], Probe::All, || {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
            weighted_sum(&x.dropout(0.4, Mode::Train, &mut drop_rng)?, 8)
        })?);
    }

    {
        let a = randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let b = randn(&[1, 1, 3, 3], 1.0, &mut rng);
        out.push(check("concat_channels", 1e-4, &[&a, &b], Probe::All, || {
            weighted_sum(&a.concat_channels(&b)?, 9)
        })?);
        out.push(check("slice_channels", 1e-4, &[&a], Probe::All, || {
            weighted_sum(&a.slice_channels(1, 1)?, 10)
        })?);
    }

    {
        let x = randn(&[2, 2, 4, 4], 1.0, &mut rng);
        out.push(check("avg_downsample", 1e-4, &[&x], Probe::All, || {
            weighted_sum(&x.avg_downsample(2)?, 11)
        })?);
        out.push(check("maxpool2x2", 1e-4, &[&x], Probe::All, || {
            weighted_sum(&x.maxpool2x2()?, 12)
        })?);
    }

    {
        let x = randn(&[3, 4], 1.0, &mut rng);
        let w = randn(&[2, 4], 0.7, &mut rng);
        let b = randn(&[2], 0.7, &mut rng);
        out.push(check("linear", 1e-4, &[&x, &w, &b], Probe::All, || {
            weighted_sum(&x.linear(&w, &b)?, 13)
        })?);
        out.push(check("reshape", 1e-4, &[&x], Probe::All, || {
            weighted_sum(&x.reshape(&[2, 6])?, 14)
        })?);
        out.push(check("slice_cols", 1e-4, &[&x], Probe::All, || {
            weighted_sum(&x.slice_cols(1, 2)?, 15)
        })?);
    }

    {
        let table = randn(&[4, 3], 1.0, &mut rng);
        out.push(check("gather_rows", 1e-4, &[&table], Probe::All, || {
            weighted_sum(&table.gather_rows(&[2, 0, 2])?, 16)
        })?);
        let v = randn(&[2, 3], 1.0, &mut rng);
        out.push(check("broadcast_spatial", 1e-4, &[&v], Probe::All, || {
            weighted_sum(&v.broadcast_spatial(2, 2)?, 17)
        })?);
    }

    // Elementwise arithmetic and reductions.
    {
        let a = randn(&[3, 3], 1.0, &mut rng);
        let b = randn(&[3, 3], 1.0, &mut rng);
        out.push(check("add", 1e-4, &[&a, &b], Probe::All, || {
            weighted_sum(&a.add(&b)?, 18)
        })?);
        out.push(check("sub", 1e-4, &[&a, &b], Probe::All, || {
            weighted_sum(&a.sub(&b)?, 19)
        })?);
        out.push(check("mul", 1e-4, &[&a, &b], Probe::All, || {
            weighted_sum(&a.mul(&b)?, 20)
        })?);
        out.push(check("neg", 1e-4, &[&a], Probe::All, || {
            weighted_sum(&a.neg(), 21)
        })?);
        out.push(check("scalar_affine", 1e-4, &[&a], Probe::All, || {
            weighted_sum(&a.mul_scalar(1.7).add_scalar(-0.3), 22)
        })?);
        out.push(check("abs", 1e-6, &[&a], Probe::All, || {
            weighted_sum(&a.abs(), 23)
        })?);
        out.push(check("sum", 1e-4, &[&a], Probe::All, || Ok(a.sum()))?);
        out.push(check("mean", 1e-4, &[&a], Probe::All, || Ok(a.mean()))?);
    }

    {
        // log_clamped probed away from the clamp floor.
        let vals: Vec<f64> = (0..9).map(|_| rng.random_range(0.05..0.95)).collect();
        let p = Tensor::new(&[9], vals)?;
        out.push(check("log_clamped", 1e-6, &[&p], Probe::All, || {
            weighted_sum(&p.log_clamped(1e-12), 24)
        })?);
    }

    {
        let logits = randn(&[3, 4], 2.0, &mut rng);
        let onehot = vec![
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, 0.0,
        ];
        out.push(check(
            "sigmoid_bce_with_logits",
            1e-4,
            &[&logits],
            Probe::All,
            || weighted_sum(&logits.sigmoid_bce_with_logits(&onehot)?, 25),
        )?);
        out.push(check(
            "softmax_cross_entropy",
            1e-4,
            &[&logits],
            Probe::All,
            || logits.softmax_cross_entropy(&[0, 2, 1]),
        )?);
    }

    Ok(out)
}

/// The loss surfaces themselves, differentiated against their inputs.
pub fn loss_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let mut out = Vec::new();

    let uniform = |shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    };

    {
        let px = uniform(&[4, 1], 0.1, 0.9, &mut rng);
        let pg = uniform(&[4, 1], 0.1, 0.9, &mut rng);
        out.push(check("adv_loss_d", 1e-5, &[&px, &pg], Probe::All, || {
            adv_loss_d(&px, &pg)
        })?);
        out.push(check("adv_loss_g[minimax]", 1e-5, &[&pg], Probe::All, || {
            adv_loss_g(&pg, AdvFormulation::Minimax)
        })?);
        out.push(check(
            "adv_loss_g[non_saturating]",
            1e-5,
            &[&pg],
            Probe::All,
            || adv_loss_g(&pg, AdvFormulation::NonSaturating),
        )?);
    }

    {
        let x = randn(&[2, 1, 4, 4], 1.0, &mut rng);
        let g = randn(&[2, 1, 4, 4], 1.0, &mut rng);
        out.push(check("l1_loss", 1e-5, &[&x, &g], Probe::All, || {
            l1_loss(&x, &g)
        })?);
    }

    {
        let logits = randn(&[3, 4], 2.0, &mut rng);
        out.push(check("category_loss", 1e-5, &[&logits], Probe::All, || {
            category_loss_batch(&logits, &[1, 0, 3])
        })?);
    }

    {
        let fx: Vec<Tensor> = (0..5).map(|_| randn(&[1, 2, 2, 2], 1.0, &mut rng)).collect();
        let fg: Vec<Tensor> = (0..5).map(|_| randn(&[1, 2, 2, 2], 1.0, &mut rng)).collect();
        let leaves: Vec<&Tensor> = fx.iter().chain(fg.iter()).collect();
        let weights = PerceptualLayerWeights::default();
        out.push(check("perceptual_loss", 1e-5, &leaves, Probe::All, || {
            perceptual_loss(&fx, &fg, &weights)
        })?);
    }

    Ok(out)
}

/// The generator objective of a depth-3, 16x16, 2-category pyramid GAN,
/// differentiated against sampled entries of every parameter tensor of both
/// networks.
pub fn end_to_end_check() -> Result<CheckResult> {
    let gen_cfg = GeneratorConfig {
        depth: 3,
        input_size: [16, 16],
        encoder_channels: vec![4, 6, 8],
        embedding_dim: 5,
        dropout_p: 0.5,
        num_categories: 2,
        ..GeneratorConfig::default()
    };
    let disc_cfg = DiscriminatorConfig {
        channels: vec![4, 6, 8],
        num_categories: 2,
        input_size: [16, 16],
        ..DiscriminatorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x600D);
    let gen = build_generator(&gen_cfg, &mut rng)?;
    let disc = build_discriminator(&disc_cfg, &mut rng)?;
    let perception = PerceptionNet::fallback(0);
    let source = Tensor::randn(&[2, 1, 16, 16], 0.0, 0.5, &mut rng);
    let target = Tensor::randn(&[2, 1, 16, 16], 0.0, 0.5, &mut rng);
    let categories = [0usize, 1];
    let weights = LossWeights::default();
    let layer_weights = PerceptualLayerWeights::default();

    let params: Vec<(String, Tensor)> = gen
        .named_parameters()
        .into_iter()
        .chain(disc.named_parameters())
        .collect();
    let leaves: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();

    let mut build = || -> Result<Tensor> {
        let mut step_rng = ChaCha8Rng::seed_from_u64(0xD1CE);
        let fake = gen.generate(&source, &categories, Mode::Train, Some(&mut step_rng))?;
        let (prob_fake, cate_fake) = disc.discriminate(&fake, None, Mode::Train)?;
        let adv = adv_loss_g(&prob_fake, AdvFormulation::NonSaturating)?;
        let l1 = l1_loss(&target, &fake)?;
        let fx = perception.features(&target)?;
        let fg = perception.features(&fake)?;
        let perp = perceptual_loss(&fx, &fg, &layer_weights)?;
        let cate = category_loss_batch(&cate_fake, &categories)?;
        total_generator_loss(&adv, &l1, &perp, &cate, &weights)
    };

    let max_rel_err = finite_diff(&leaves, Probe::LargestPerLeaf(3), FD_STEP_COMPOSITE, &mut build)?;
    Ok(CheckResult {
        name: "pegan_objective[depth3,16x16,N2]".into(),
        max_rel_err,
        tolerance: 1e-4,
    })
}

/// A deliberately wrong gradient (forward x^2, backward claims 3x); the
/// harness must flag it. Exercised by `gradcheck --corrupt`.
fn corrupted_check() -> Result<CheckResult> {
    let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 1.5])?;
    check("corrupted_square[test hook]", 1e-4, &[&x], Probe::All, || {
        let xs = x.to_vec();
        let data: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let parent = x.clone();
        let saved = xs;
        let y = Tensor::from_op(vec![4], data, vec![x.clone()], move |g| {
            parent.with_grad_mut(|gp| {
                for i in 0..gp.len() {
                    gp[i] += g[i] * 3.0 * saved[i]; // wrong on purpose
                }
            });
        });
        weighted_sum(&y, 26)
    })
}

/// The full suite: primitives, loss surfaces, end-to-end objective, plus the
/// corrupted-gradient canary when `corrupt` is set.
pub fn run_all(corrupt: bool) -> Result<Vec<CheckResult>> {
    let mut results = primitive_checks()?;
    results.extend(loss_checks()?);
    results.push(end_to_end_check()?);
    if corrupt {
        results.push(corrupted_check()?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in primitive_checks().unwrap() {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn losses_pass() {
        for r in loss_checks().unwrap() {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn end_to_end_passes() {
        let r = end_to_end_check().unwrap();
        assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let r = corrupted_check().unwrap();
        assert!(!r.passed(), "harness failed to flag a wrong gradient");
    }
}
