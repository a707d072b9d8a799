//! The four training loss terms and their weighted combination.
//!
//! All reductions are means, not sums, so the published weights are
//! independent of image resolution and batch size. Log arguments are clamped
//! at 1e-12, keeping every term finite even for saturated probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-12;

/// Weights of the combined generator objective:
/// `w_adv * adv + w_l1 * L1 + w_perp * perceptual + w_cate * category`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adv: f64,
    pub l1: f64,
    pub perp: f64,
    pub cate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            l1: 100.0,
            perp: 1.0,
            cate: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("adv", self.adv),
            ("l1", self.l1),
            ("perp", self.perp),
            ("cate", self.cate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-tap weights of the perceptual term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptualLayerWeights(pub [f64; 5]);

impl Default for PerceptualLayerWeights {
    fn default() -> Self {
        PerceptualLayerWeights([1.0, 1.0, 1.0, 1.0, 10.0])
    }
}

impl PerceptualLayerWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "perceptual layer weights {:?} must be >= 0",
                self.0
            )));
        }
        Ok(())
    }
}

/// Which adversarial objective the generator minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvFormulation {
    /// `mean log(1 - D(G(z)))`: the literal minimax objective.
    Minimax,
    /// `-mean log D(G(z))`: same fixed points, stronger early gradients.
    NonSaturating,
}

impl Default for AdvFormulation {
    fn default() -> Self {
        AdvFormulation::NonSaturating
    }
}

fn check_probabilities(name: &str, t: &Tensor) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Domain(format!(
            "{name} contains {bad}, outside the open interval (0,1)"
        )));
    }
    Ok(())
}

/// The discriminator's adversarial loss
/// `-[mean log D(x) + mean log(1 - D(G(z)))]`, negated so the discriminator
/// trains by minimization.
pub fn adv_loss_d(real_prob_on_x: &Tensor, real_prob_on_gz: &Tensor) -> Result<Tensor> {
    check_probabilities("D(x)", real_prob_on_x)?;
    check_probabilities("D(G(z))", real_prob_on_gz)?;
    let real_term = real_prob_on_x.log_clamped(LOG_FLOOR).mean();
    let fake_term = real_prob_on_gz
        .neg()
        .add_scalar(1.0)
        .log_clamped(LOG_FLOOR)
        .mean();
    Ok(real_term.add(&fake_term)?.neg())
}

/// The generator's adversarial term, in either formulation.
pub fn adv_loss_g(real_prob_on_gz: &Tensor, formulation: AdvFormulation) -> Result<Tensor> {
    check_probabilities("D(G(z))", real_prob_on_gz)?;
    match formulation {
        AdvFormulation::Minimax => Ok(real_prob_on_gz
            .neg()
            .add_scalar(1.0)
            .log_clamped(LOG_FLOOR)
            .mean()),
        AdvFormulation::NonSaturating => {
            Ok(real_prob_on_gz.log_clamped(LOG_FLOOR).mean().neg())
        }
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    if x.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "l1_loss: shape {:?} vs {:?}",
            x.shape(),
            g.shape()
        )));
    }
    Ok(x.sub(g)?.abs().mean())
}

/// Multi-label sigmoid cross entropy of category logits against one one-hot
/// target per row, averaged over classes and batch.
pub fn category_loss_batch(category_logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let s = category_logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "category_loss expects [B,N] logits, got {s:?}"
        )));
    }
    let (bsz, n) = (s[0], s[1]);
    if targets.len() != bsz {
        return Err(Error::Shape(format!(
            "category_loss: {} targets for batch {bsz}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Lookup(format!("category {bad} out of range 0..{n}")));
    }
    let mut onehot = vec![0.0; bsz * n];
    for (b, &t) in targets.iter().enumerate() {
        onehot[b * n + t] = 1.0;
    }
    Ok(category_logits.sigmoid_bce_with_logits(&onehot)?.mean())
}

/// [`category_loss_batch`] with one target category for the whole batch.
pub fn category_loss(category_logits: &Tensor, target_category: usize) -> Result<Tensor> {
    let bsz = category_logits.shape().first().copied().unwrap_or(0);
    category_loss_batch(category_logits, &vec![target_category; bsz])
}

/// Weighted sum of per-tap mean absolute feature distances.
pub fn perceptual_loss(
    features_x: &[Tensor],
    features_g: &[Tensor],
    weights: &PerceptualLayerWeights,
) -> Result<Tensor> {
    if features_x.len() != 5 || features_g.len() != 5 {
        return Err(Error::Shape(format!(
            "perceptual_loss expects 5 feature tensors per image, got {} and {}",
            features_x.len(),
            features_g.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (l, (fx, fg)) in features_x.iter().zip(features_g).enumerate() {
        if fx.shape() != fg.shape() {
            return Err(Error::Shape(format!(
                "perceptual_loss layer {l}: shape {:?} vs {:?}",
                fx.shape(),
                fg.shape()
            )));
        }
        let term = fx.sub(fg)?.abs().mean().mul_scalar(weights.0[l]);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("five layers"))
}

/// The combined generator objective: the exact weighted sum of the four
/// components. Every component must be finite.
pub fn total_generator_loss(
    adv_g: &Tensor,
    l1: &Tensor,
    perp: &Tensor,
    cate: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    for (name, t) in [("adv", adv_g), ("l1", l1), ("perp", perp), ("cate", cate)] {
        let v = t.item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    adv_g
        .mul_scalar(w.adv)
        .add(&l1.mul_scalar(w.l1))?
        .add(&perp.mul_scalar(w.perp))?
        .add(&cate.mul_scalar(w.cate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn adv_d_at_half() {
        // D(x) = D(G(z)) = 0.5 -> 2 ln 2.
        let loss = adv_loss_d(&probs(&[0.5]), &probs(&[0.5])).unwrap();
        assert!((loss.item().unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adv_d_perfect_discriminator_tends_to_zero() {
        let loss = adv_loss_d(&probs(&[1.0 - 1e-9]), &probs(&[1e-9])).unwrap();
        assert!(loss.item().unwrap() < 1e-8);
    }

    #[test]
    fn adv_d_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px: Vec<f64> = (0..16).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let pg: Vec<f64> = (0..16).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let loss = adv_loss_d(&probs(&px), &probs(&pg)).unwrap().item().unwrap();
        // Brute-force per-element BCE mean.
        let want = -(px.iter().map(|p| p.ln()).sum::<f64>() / 16.0
            + pg.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 16.0);
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn adv_d_rejects_out_of_domain() {
        assert!(matches!(
            adv_loss_d(&probs(&[1.0]), &probs(&[0.5])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            adv_loss_d(&probs(&[0.5]), &probs(&[0.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn adv_g_both_formulations_at_half() {
        let mm = adv_loss_g(&probs(&[0.5]), AdvFormulation::Minimax).unwrap();
        assert!((mm.item().unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
        let ns = adv_loss_g(&probs(&[0.5]), AdvFormulation::NonSaturating).unwrap();
        assert!((ns.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adv_g_non_saturating_limit() {
        let ns = adv_loss_g(&probs(&[1.0 - 1e-12]), AdvFormulation::NonSaturating).unwrap();
        assert!(ns.item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn adv_g_gradients_share_sign() {
        // Both formulations push D(G(z)) upward: d loss / d p < 0, checked
        // by central finite differences on the probability.
        for formulation in [AdvFormulation::Minimax, AdvFormulation::NonSaturating] {
            let p = 0.37;
            let h = 1e-6;
            let f = |v: f64| {
                adv_loss_g(&probs(&[v]), formulation)
                    .unwrap()
                    .item()
                    .unwrap()
            };
            let slope = (f(p + h) - f(p - h)) / (2.0 * h);
            assert!(slope < 0.0, "{formulation:?} slope {slope}");
        }
    }

    #[test]
    fn l1_basics_and_oracle() {
        let x = Tensor::full(&[2, 3], 1.0);
        let g = Tensor::full(&[2, 3], -1.0);
        assert_eq!(l1_loss(&x, &x).unwrap().item().unwrap(), 0.0);
        assert_eq!(l1_loss(&x, &g).unwrap().item().unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[4, 7], 0.0, 1.0, &mut rng);
        let b = Tensor::randn(&[4, 7], 0.0, 1.0, &mut rng);
        let got = l1_loss(&a, &b).unwrap().item().unwrap();
        let want = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 28.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn l1_rejects_shape_mismatch() {
        let x = Tensor::zeros(&[2, 2]);
        let g = Tensor::zeros(&[2, 3]);
        assert!(l1_loss(&x, &g).is_err());
    }

    #[test]
    fn category_loss_zero_logits() {
        let logits = Tensor::zeros(&[3, 2]);
        let loss = category_loss(&logits, 1).unwrap();
        assert!((loss.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn category_loss_saturated_logits() {
        let logits = Tensor::new(&[1, 3], vec![-20.0, 20.0, -20.0]).unwrap();
        let loss = category_loss(&logits, 1).unwrap();
        assert!(loss.item().unwrap() < 1e-8);
    }

    #[test]
    fn category_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::randn(&[4, 5], 0.0, 2.0, &mut rng);
        let targets = [0usize, 3, 2, 4];
        let got = category_loss_batch(&logits, &targets).unwrap().item().unwrap();
        // Direct per-class -[y ln s + (1-y) ln(1-s)] oracle.
        let d = logits.data();
        let mut want = 0.0;
        for b in 0..4 {
            for j in 0..5 {
                let s = 1.0 / (1.0 + (-d[b * 5 + j]).exp());
                let y = if j == targets[b] { 1.0 } else { 0.0 };
                want += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            }
        }
        want /= 20.0;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn category_loss_rejects_bad_target() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            category_loss(&logits, 3),
            Err(Error::Lookup(_))
        ));
    }

    fn singleton_features(deltas: &[f64]) -> (Vec<Tensor>, Vec<Tensor>) {
        let xs = deltas
            .iter()
            .map(|&d| Tensor::new(&[1, 1, 1, 1], vec![d]).unwrap())
            .collect();
        let gs = deltas
            .iter()
            .map(|_| Tensor::zeros(&[1, 1, 1, 1]))
            .collect();
        (xs, gs)
    }

    #[test]
    fn perceptual_hand_case() {
        // |delta| = 1 at each of 5 single-element taps, weights (1,1,1,1,10).
        let (xs, gs) = singleton_features(&[1.0, 1.0, 1.0, 1.0, 1.0]);
        let loss = perceptual_loss(&xs, &gs, &PerceptualLayerWeights::default()).unwrap();
        assert_eq!(loss.item().unwrap(), 14.0);
    }

    #[test]
    fn perceptual_identical_is_zero() {
        let (xs, _) = singleton_features(&[0.3, -0.4, 0.5, 0.1, 0.9]);
        let loss = perceptual_loss(&xs, &xs, &PerceptualLayerWeights::default()).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn perceptual_matches_oracle_and_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Tensor> = (0..5)
            .map(|_| Tensor::randn(&[1, 2, 3, 3], 0.0, 1.0, &mut rng))
            .collect();
        let gs: Vec<Tensor> = (0..5)
            .map(|_| Tensor::randn(&[1, 2, 3, 3], 0.0, 1.0, &mut rng))
            .collect();
        let w = PerceptualLayerWeights([0.5, 1.0, 2.0, 3.0, 10.0]);
        let got = perceptual_loss(&xs, &gs, &w).unwrap().item().unwrap();
        let mut want = 0.0;
        for l in 0..5 {
            let mean = xs[l]
                .data()
                .iter()
                .zip(gs[l].data().iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 18.0;
            want += w.0[l] * mean;
        }
        assert!((got - want).abs() < 1e-12);

        // Scaling every weight by c scales the loss by exactly c.
        let wc = PerceptualLayerWeights(w.0.map(|v| v * 3.0));
        let scaled = perceptual_loss(&xs, &gs, &wc).unwrap().item().unwrap();
        assert!((scaled - 3.0 * got).abs() < 1e-12);
    }

    #[test]
    fn perceptual_rejects_wrong_arity() {
        let (xs, gs) = singleton_features(&[1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(perceptual_loss(&xs[..4], &gs, &PerceptualLayerWeights::default()).is_err());
    }

    #[test]
    fn total_is_exact_weighted_sum() {
        let parts: Vec<Tensor> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| Tensor::scalar(v)).collect();
        let total = total_generator_loss(
            &parts[0],
            &parts[1],
            &parts[2],
            &parts[3],
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(total.item().unwrap(), 208.0);

        let zeros: Vec<Tensor> = (0..4).map(|_| Tensor::scalar(0.0)).collect();
        let z = total_generator_loss(&zeros[0], &zeros[1], &zeros[2], &zeros[3], &LossWeights::default())
            .unwrap();
        assert_eq!(z.item().unwrap(), 0.0);
    }

    #[test]
    fn total_gradient_is_the_weight() {
        let parts: Vec<Tensor> = [0.5, 0.25, 2.0, 1.5]
            .iter()
            .map(|&v| {
                let t = Tensor::scalar(v);
                t.set_requires_grad(true);
                t
            })
            .collect();
        let w = LossWeights::default();
        let total =
            total_generator_loss(&parts[0], &parts[1], &parts[2], &parts[3], &w).unwrap();
        total.backward().unwrap();
        assert_eq!(parts[0].grad().unwrap(), vec![w.adv]);
        assert_eq!(parts[1].grad().unwrap(), vec![w.l1]);
        assert_eq!(parts[2].grad().unwrap(), vec![w.perp]);
        assert_eq!(parts[3].grad().unwrap(), vec![w.cate]);
    }

    #[test]
    fn loss_symmetry_and_batch_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[6, 4], 0.0, 1.0, &mut rng);
        let b = Tensor::randn(&[6, 4], 0.0, 1.0, &mut rng);
        let ab = l1_loss(&a, &b).unwrap().item().unwrap();
        let ba = l1_loss(&b, &a).unwrap().item().unwrap();
        assert_eq!(ab, ba);

        // Permuting the batch leaves every mean-reduced loss unchanged.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |t: &Tensor| {
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * 4..(dst + 1) * 4].copy_from_slice(&d[src * 4..(src + 1) * 4]);
            }
            Tensor::new(&[6, 4], out).unwrap()
        };
        let pab = l1_loss(&permute(&a), &permute(&b)).unwrap().item().unwrap();
        assert!((ab - pab).abs() < 1e-12);
    }
}
