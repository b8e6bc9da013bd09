//! Training objectives.
//!
//! Every loss exists twice: a plain `f64` evaluation used by matching, tests
//! and reporting, and a graph construction used for training. The two agree
//! to rounding.
//!
//! Normalization of the mask-classification sum: the classification term is
//! averaged over the `N` prediction slots and the mask term over the number
//! of real matches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matching::Assignment;
use crate::model::PredictionSet;
use crate::segment::TargetSegment;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub no_object_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_focal: 20.0,
            lambda_dice: 1.0,
            no_object_weight: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_epsilon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_focal", self.lambda_focal),
            ("lambda_dice", self.lambda_dice),
            ("no_object_weight", self.no_object_weight),
            ("focal_gamma", self.focal_gamma),
            ("focal_alpha", self.focal_alpha),
            ("dice_epsilon", self.dice_epsilon),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        if self.focal_alpha > 1.0 {
            return Err(Error::Config(format!("focal_alpha = {} must lie in [0, 1]", self.focal_alpha)));
        }
        Ok(())
    }
}

pub(crate) fn clamp_prob(m: f64) -> f64 {
    m.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `−α_t (1 − p_t)^γ log p_t` for one clamped pixel.
pub(crate) fn focal_term(m: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let (pt, at) = if positive { (m, alpha) } else { (1.0 - m, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

fn check_pair(op: &'static str, m: &[f64], m_gt: &[f64]) -> Result<()> {
    if m.len() != m_gt.len() || m.is_empty() {
        return Err(Error::shape(op, format!("{} predicted vs {} target pixels", m.len(), m_gt.len())));
    }
    Ok(())
}

/// Mean over pixels of `−log softmax(scores)[label]`; `scores` is `[K, H, W]`
/// and labels are class ids in `1..=K`.
pub fn per_pixel_ce_loss(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (k, hw) = check_per_pixel(scores, labels)?;
    let s = scores.data();
    let mut total = 0.0;
    for (px, &label) in labels.iter().enumerate() {
        let max = (0..k).map(|c| s[c * hw + px]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..k).map(|c| (s[c * hw + px] - max).exp()).sum::<f64>().ln();
        total += lse - s[(label - 1) * hw + px];
    }
    Ok(total / hw as f64)
}

fn check_per_pixel(scores: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if scores.rank() != 3 {
        return Err(Error::shape("per_pixel_ce_loss", format!("scores {:?} are not [K, H, W]", scores.shape())));
    }
    let k = scores.shape()[0];
    let hw = scores.shape()[1] * scores.shape()[2];
    if labels.len() != hw {
        return Err(Error::shape("per_pixel_ce_loss", format!("{} labels for {hw} pixels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
        return Err(Error::Input(format!("label {bad} outside 1..={k}")));
    }
    Ok((k, hw))
}

/// Mean focal loss over pixels.
pub fn focal_loss(m: &[f64], m_gt: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    check_pair("focal_loss", m, m_gt)?;
    let total: f64 = m.iter().zip(m_gt).map(|(&p, &t)| focal_term(clamp_prob(p), t > 0.5, gamma, alpha)).sum();
    Ok(total / m.len() as f64)
}

/// `1 − (2 Σ m·m_gt + ε) / (Σ m + Σ m_gt + ε)` on clamped `m`.
pub fn dice_loss(m: &[f64], m_gt: &[f64], epsilon: f64) -> Result<f64> {
    check_pair("dice_loss", m, m_gt)?;
    let (mut inter, mut sm, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &t) in m.iter().zip(m_gt) {
        let p = clamp_prob(p);
        inter += p * t;
        sm += p;
        sg += t;
    }
    Ok(1.0 - (2.0 * inter + epsilon) / (sm + sg + epsilon))
}

/// `λ_focal · focal + λ_dice · dice`.
///
/// Panics if the slices differ in length; callers validate shapes first.
pub fn mask_loss(m: &[f64], m_gt: &[f64], w: &LossWeights) -> f64 {
    let focal = focal_loss(m, m_gt, w.focal_gamma, w.focal_alpha).expect("mask_loss: mismatched masks");
    let dice = dice_loss(m, m_gt, w.dice_epsilon).expect("mask_loss: mismatched masks");
    w.lambda_focal * focal + w.lambda_dice * dice
}

/// `−log p(c)`, scaled by the no-object weight when `class` is `None`.
pub fn classification_loss(p: &[f64], class: Option<usize>, w: &LossWeights) -> Result<f64> {
    let k = p.len().checked_sub(1).filter(|&k| k > 0).ok_or_else(|| {
        Error::shape("classification_loss", "need at least one real class plus no-object")
    })?;
    match class {
        None => Ok(-w.no_object_weight * clamp_prob(p[k]).ln()),
        Some(c) if (1..=k).contains(&c) => Ok(-clamp_prob(p[c - 1]).ln()),
        Some(c) => Err(Error::Input(format!("class {c} outside 1..={k}"))),
    }
}

fn check_assignment(z_n: usize, gt: &[TargetSegment], sigma: &Assignment) -> Result<()> {
    if sigma.num_predictions() != z_n || sigma.num_gt() != gt.len() {
        return Err(Error::Assignment(format!(
            "assignment covers {} predictions and {} segments, expected {z_n} and {}",
            sigma.num_predictions(),
            sigma.num_gt(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mask-classification loss for one image under a given assignment.
pub fn mask_cls_loss(z: &PredictionSet, gt: &[TargetSegment], sigma: &Assignment, w: &LossWeights) -> Result<f64> {
    let n = z.num_queries();
    check_assignment(n, gt, sigma)?;
    let mut cls = 0.0;
    let mut mask = 0.0;
    for (i, target) in sigma.sigma().iter().enumerate() {
        match target {
            None => cls += classification_loss(z.probs(i), None, w)?,
            Some(j) => {
                let s = &gt[*j];
                cls += classification_loss(z.probs(i), Some(s.class), w)?;
                check_pair("mask_cls_loss", z.mask(i), &s.mask)?;
                mask += mask_loss(z.mask(i), &s.mask, w);
            }
        }
    }
    let matched = gt.len();
    Ok(cls / n as f64 + if matched > 0 { mask / matched as f64 } else { 0.0 })
}

/// Sum over decoder layers, each with its own assignment.
pub fn aux_mask_cls_loss(
    layers: &[PredictionSet],
    gt: &[TargetSegment],
    assign: impl Fn(&PredictionSet) -> Result<Assignment>,
    w: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for z in layers {
        let sigma = assign(z)?;
        total += mask_cls_loss(z, gt, &sigma, w)?;
    }
    Ok(total)
}

/// Graph version of [`per_pixel_ce_loss`] for `scores` of shape `[K, H, W]`.
pub fn per_pixel_ce_loss_graph(g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var> {
    let (_, hw) = check_per_pixel(g.value(scores), labels)?;
    let logp = g.log_softmax(scores, 0)?;
    let indices = labels.iter().enumerate().map(|(px, &l)| (l - 1) * hw + px).collect();
    let picked = g.gather(logp, indices)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / hw as f64)
}

/// Graph version of [`mask_cls_loss`].
///
/// `class_logits` is `[N, K + 1]` and `mask_logits` is `[N, H·W]`; the
/// assignment is computed elsewhere on detached values.
pub fn mask_cls_loss_graph(
    g: &mut Graph,
    class_logits: Var,
    mask_logits: Var,
    gt: &[TargetSegment],
    sigma: &Assignment,
    w: &LossWeights,
) -> Result<Var> {
    let (n, width) = match g.shape(class_logits) {
        [n, width] => (*n, *width),
        other => return Err(Error::shape("mask_cls_loss", format!("class logits {other:?}"))),
    };
    let hw = match g.shape(mask_logits) {
        [rows, hw] if *rows == n => *hw,
        other => return Err(Error::shape("mask_cls_loss", format!("mask logits {other:?} for {n} queries"))),
    };
    check_assignment(n, gt, sigma)?;
    let k = width - 1;
    for s in gt {
        if s.class == 0 || s.class > k {
            return Err(Error::Input(format!("class {} outside 1..={k}", s.class)));
        }
        if s.mask.len() != hw {
            return Err(Error::shape("mask_cls_loss", format!("target mask of {} pixels vs {hw}", s.mask.len())));
        }
    }

    // classification: weighted −log softmax at each slot's target
    let logp = g.log_softmax(class_logits, 1)?;
    let mut indices = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (i, target) in sigma.sigma().iter().enumerate() {
        match target {
            None => {
                indices.push(i * width + k);
                weights.push(-w.no_object_weight / n as f64);
            }
            Some(j) => {
                indices.push(i * width + gt[*j].class - 1);
                weights.push(-1.0 / n as f64);
            }
        }
    }
    let picked = g.gather(logp, indices)?;
    let weights = g.constant(Tensor::new(vec![n], weights)?);
    let weighted = g.mul(picked, weights)?;
    let cls = g.sum(weighted)?;
    if gt.is_empty() {
        return Ok(cls);
    }

    // mask terms on the matched rows, ordered by ground-truth index
    let m_count = gt.len();
    let rows = sigma.row_of_gt();
    let indices = rows.iter().flat_map(|&i| i * hw..(i + 1) * hw).collect();
    let logits = g.gather(mask_logits, indices)?;
    let logits = g.reshape(logits, vec![m_count, hw])?;
    let probs = g.sigmoid(logits)?;
    let m = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;

    let target: Vec<f64> = gt.iter().flat_map(|s| s.mask.iter().copied()).collect();
    // p_t = (1 − t) + (2t − 1)·m and α_t likewise, elementwise constants
    let slope = g.constant(Tensor::new(vec![m_count, hw], target.iter().map(|t| 2.0 * t - 1.0).collect())?);
    let offset = g.constant(Tensor::new(vec![m_count, hw], target.iter().map(|t| 1.0 - t).collect())?);
    let alpha_t: Vec<f64> = target
        .iter()
        .map(|&t| if t > 0.5 { -w.focal_alpha } else { -(1.0 - w.focal_alpha) })
        .collect();
    let alpha_t = g.constant(Tensor::new(vec![m_count, hw], alpha_t)?);
    let pt = g.mul(m, slope)?;
    let pt = g.add(pt, offset)?;
    let log_pt = g.log(pt)?;
    let one_minus = g.scale(pt, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let modulator = g.powf(one_minus, w.focal_gamma)?;
    let focal = g.mul(modulator, log_pt)?;
    let focal = g.mul(focal, alpha_t)?;
    let focal = g.sum(focal)?;
    let focal = g.scale(focal, w.lambda_focal / (hw * m_count) as f64)?;

    let t = g.constant(Tensor::new(vec![m_count, hw], target)?);
    let ones = g.constant(Tensor::ones(vec![hw, 1]));
    let inter = g.mul(m, t)?;
    let inter = g.matmul(inter, ones)?;
    let numerator = g.scale(inter, 2.0)?;
    let numerator = g.add_scalar(numerator, w.dice_epsilon)?;
    let mass = g.matmul(m, ones)?;
    let areas: Vec<f64> = gt.iter().map(|s| s.mask.iter().sum::<f64>() + w.dice_epsilon).collect();
    let areas = g.constant(Tensor::new(vec![m_count, 1], areas)?);
    let denominator = g.add(mass, areas)?;
    let inverse = g.powf(denominator, -1.0)?;
    let ratio = g.mul(numerator, inverse)?;
    let ratio = g.sum(ratio)?;
    // Σ_j (1 − ratio_j) / M scaled by λ_dice
    let dice = g.scale(ratio, -w.lambda_dice / m_count as f64)?;
    let dice = g.add_scalar(dice, w.lambda_dice)?;

    let mask = g.add(focal, dice)?;
    g.add(cls, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_many};
    use crate::matching::{brute_force_matching, build_cost_matrix, hungarian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn defaults() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_focal, w.lambda_dice, w.no_object_weight), (20.0, 1.0, 0.1));
        assert_eq!((w.focal_gamma, w.focal_alpha, w.dice_epsilon), (2.0, 0.25, 1.0));
        w.validate().unwrap();
        assert!(LossWeights { lambda_dice: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn per_pixel_ce_cases() {
        let uniform = Tensor::zeros(vec![4, 2, 2]);
        close(per_pixel_ce_loss(&uniform, &[1, 2, 3, 4]).unwrap(), 4f64.ln(), 1e-12);

        let saturated = Tensor::from_fn(vec![3, 1, 2], |i| if i == 0 || i == 5 { 20.0 } else { 0.0 });
        // labels: pixel 0 → class 1, pixel 1 → class 3
        let l = per_pixel_ce_loss(&saturated, &[1, 3]).unwrap();
        close(l, (1.0 + 2.0 * (-20f64).exp()).ln(), 1e-13);
        assert!(l < 1e-8);

        assert!(per_pixel_ce_loss(&uniform, &[0, 1, 1, 1]).is_err());
        assert!(per_pixel_ce_loss(&uniform, &[5, 1, 1, 1]).is_err());
    }

    #[test]
    fn per_pixel_ce_matches_scalar_oracle() {
        let scores = Tensor::new(
            vec![3, 2, 2],
            vec![0.3, -1.2, 2.0, 0.1, 1.5, 0.4, -0.7, 0.0, -0.2, 0.9, 0.5, -1.1],
        )
        .unwrap();
        let labels = [2, 3, 1, 2];
        let mut expect = 0.0;
        for (px, &l) in labels.iter().enumerate() {
            let z: Vec<f64> = (0..3).map(|c| scores.data()[c * 4 + px]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            expect += -(z[l - 1].exp() / denom).ln();
        }
        close(per_pixel_ce_loss(&scores, &labels).unwrap(), expect / 4.0, 1e-12);
    }

    #[test]
    fn focal_hand_values() {
        let l = focal_loss(&[0.9], &[1.0], 2.0, 0.25).unwrap();
        close(l, 0.25 * 0.01 * -(0.9f64.ln()), 1e-15);
        close(l, 2.634e-4, 1e-7);

        let perfect = focal_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 2.0, 0.25).unwrap();
        assert!(perfect < 1e-12, "{perfect}");
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: Vec<f64> = (0..32).map(|_| rng.gen_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let bce: f64 = m.iter().zip(&t).map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / 32.0;
        close(focal_loss(&m, &t, 0.0, 0.5).unwrap(), 0.5 * bce, 1e-12);
    }

    #[test]
    fn dice_cases() {
        // identical all-ones masks: intersection equals both masses
        let ones = vec![1.0; 16];
        let d = dice_loss(&ones, &ones, 1.0).unwrap();
        let m = 1.0 - PROB_EPS;
        close(d, 1.0 - (2.0 * 16.0 * m + 1.0) / (16.0 * m + 16.0 + 1.0), 1e-15);
        assert!(d.abs() < 1e-7);
        assert!(dice_loss(&ones, &ones, 0.0).unwrap().abs() < 1e-7);

        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        a[..32].fill(1.0);
        b[32..].fill(1.0);
        assert!(dice_loss(&a, &b, 1.0).unwrap() > 0.98);

        let zeros = vec![0.0; 9];
        let d = dice_loss(&zeros, &zeros, 1.0).unwrap();
        close(d, 1.0 - 1.0 / (9.0 * PROB_EPS + 1.0), 1e-15);
    }

    #[test]
    fn mask_loss_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let w = LossWeights::default();
        let focal = focal_loss(&m, &t, 2.0, 0.25).unwrap();
        let dice = dice_loss(&m, &t, 1.0).unwrap();
        close(mask_loss(&m, &t, &w), 20.0 * focal + dice, 1e-12);
        let dice_only = LossWeights { lambda_focal: 0.0, lambda_dice: 1.0, ..w };
        assert_eq!(mask_loss(&m, &t, &dice_only), dice);
        assert!(mask_loss(&t, &t, &w).abs() < 1e-5);
    }

    #[test]
    fn classification_hand_values() {
        let w = LossWeights::default();
        close(classification_loss(&[0.2, 0.3, 0.5], None, &w).unwrap(), 0.1 * 2f64.ln(), 1e-15);
        close(classification_loss(&[0.2, 0.3, 0.5], None, &w).unwrap(), 0.0693, 1e-4);
        assert!(classification_loss(&[0.0, 1.0, 0.0], Some(2), &w).unwrap() < 1e-6);
        close(classification_loss(&[0.25; 4], Some(3), &w).unwrap(), 4f64.ln(), 1e-15);
        assert!(classification_loss(&[0.25; 4], Some(4), &w).is_err());

        let doubled = LossWeights { no_object_weight: 0.2, ..w };
        let p = [0.1, 0.6, 0.3];
        close(
            classification_loss(&p, None, &doubled).unwrap(),
            2.0 * classification_loss(&p, None, &w).unwrap(),
            1e-15,
        );
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> (Tensor, Tensor, PredictionSet) {
        let cl = Tensor::from_fn(vec![n, k + 1], |_| rng.gen_range(-2.0..2.0));
        let ml = Tensor::from_fn(vec![n, h * w], |_| rng.gen_range(-3.0..3.0));
        let z = PredictionSet::from_logits(&cl, &ml, (h, w)).unwrap();
        (cl, ml, z)
    }

    fn random_gt(rng: &mut ChaCha8Rng, count: usize, k: usize, hw: usize) -> Vec<TargetSegment> {
        (0..count)
            .map(|_| {
                let mask = (0..hw).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
                TargetSegment::new(rng.gen_range(1..=k), mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn mask_cls_trivial_cases() {
        let w = LossWeights::default();
        let z = PredictionSet::new(
            Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap(),
            Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let gt = vec![TargetSegment::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()];
        let sigma = Assignment::new(vec![Some(0)], 1).unwrap();
        assert!(mask_cls_loss(&z, &gt, &sigma, &w).unwrap() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, _, z) = random_set(&mut rng, 4, 3, 2, 3);
        let sigma = Assignment::new(vec![None; 4], 0).unwrap();
        let expect: f64 = (0..4).map(|i| -0.1 * z.probs(i)[3].ln()).sum::<f64>() / 4.0;
        close(mask_cls_loss(&z, &[], &sigma, &w).unwrap(), expect, 1e-12);

        let bad = Assignment::new(vec![None; 3], 0).unwrap();
        assert!(mask_cls_loss(&z, &[], &bad, &w).is_err());
    }

    #[test]
    fn mask_cls_equals_componentwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = LossWeights::default();
        let (_, _, z) = random_set(&mut rng, 3, 4, 3, 3);
        let gt = random_gt(&mut rng, 2, 4, 9);
        let sigma = Assignment::new(vec![Some(1), None, Some(0)], 2).unwrap();
        let cls = classification_loss(z.probs(0), Some(gt[1].class), &w).unwrap()
            + classification_loss(z.probs(1), None, &w).unwrap()
            + classification_loss(z.probs(2), Some(gt[0].class), &w).unwrap();
        let mask = mask_loss(z.mask(0), &gt[1].mask, &w) + mask_loss(z.mask(2), &gt[0].mask, &w);
        close(mask_cls_loss(&z, &gt, &sigma, &w).unwrap(), cls / 3.0 + mask / 2.0, 1e-12);
    }

    #[test]
    fn mask_cls_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = LossWeights::default();
        let (cl, ml, z) = random_set(&mut rng, 5, 3, 2, 4);
        let gt = random_gt(&mut rng, 3, 3, 8);
        let sigma = hungarian(&build_cost_matrix(&z, &gt, &w).unwrap());
        let base = mask_cls_loss(&z, &gt, &sigma, &w).unwrap();

        let perm = [3, 0, 4, 2, 1];
        let pick = |t: &Tensor, width: usize| {
            Tensor::new(
                t.shape(),
                perm.iter().flat_map(|&i| t.data()[i * width..(i + 1) * width].to_vec()).collect(),
            )
            .unwrap()
        };
        let z2 = PredictionSet::from_logits(&pick(&cl, 4), &pick(&ml, 8), (2, 4)).unwrap();
        let sigma2 = Assignment::new(perm.iter().map(|&i| sigma.sigma()[i]).collect(), 3).unwrap();
        close(mask_cls_loss(&z2, &gt, &sigma2, &w).unwrap(), base, 1e-12);
    }

    #[test]
    fn aux_loss_sums_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = LossWeights::default();
        let gt = random_gt(&mut rng, 2, 3, 6);
        let assign = |z: &PredictionSet| -> Result<Assignment> {
            brute_force_matching(&build_cost_matrix(z, &gt, &w)?)
        };
        let layers: Vec<PredictionSet> = (0..6).map(|_| random_set(&mut rng, 4, 3, 2, 3).2).collect();
        let single = aux_mask_cls_loss(&layers[..1], &gt, assign, &w).unwrap();
        close(single, mask_cls_loss(&layers[0], &gt, &assign(&layers[0]).unwrap(), &w).unwrap(), 0.0);

        let same = vec![layers[2].clone(); 4];
        close(aux_mask_cls_loss(&same, &gt, assign, &w).unwrap(), 4.0 * aux_mask_cls_loss(&same[..1], &gt, assign, &w).unwrap(), 1e-12);

        let expect: f64 = layers.iter().map(|z| mask_cls_loss(z, &gt, &assign(z).unwrap(), &w).unwrap()).sum();
        close(aux_mask_cls_loss(&layers, &gt, assign, &w).unwrap(), expect, 1e-12);
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = LossWeights::default();
        for count in 0..4 {
            let (cl, ml, z) = random_set(&mut rng, 5, 4, 3, 3);
            let gt = random_gt(&mut rng, count, 4, 9);
            let sigma = hungarian(&build_cost_matrix(&z, &gt, &w).unwrap());
            let mut g = Graph::new();
            let c = g.constant(cl);
            let m = g.constant(ml);
            let loss = mask_cls_loss_graph(&mut g, c, m, &gt, &sigma, &w).unwrap();
            close(g.value(loss).item().unwrap(), mask_cls_loss(&z, &gt, &sigma, &w).unwrap(), 1e-12);
        }

        let scores = Tensor::from_fn(vec![3, 2, 3], |_| rng.gen_range(-2.0..2.0));
        let labels = [1, 3, 2, 2, 1, 3];
        let mut g = Graph::new();
        let s = g.constant(scores.clone());
        let loss = per_pixel_ce_loss_graph(&mut g, s, &labels).unwrap();
        close(g.value(loss).item().unwrap(), per_pixel_ce_loss(&scores, &labels).unwrap(), 1e-12);
    }

    #[test]
    fn mask_cls_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = LossWeights::default();
        let (cl, ml, z) = random_set(&mut rng, 4, 3, 2, 3);
        let gt = random_gt(&mut rng, 2, 3, 6);
        let sigma = hungarian(&build_cost_matrix(&z, &gt, &w).unwrap());
        let err = grad_check_many(
            |g, v| mask_cls_loss_graph(g, v[0], v[1], &gt, &sigma, &w),
            &[cl, ml],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        let scores = Tensor::from_fn(vec![4, 3, 3], |_| rng.gen_range(-2.0..2.0));
        let labels: Vec<usize> = (0..9).map(|_| rng.gen_range(1..=4)).collect();
        let err = grad_check(|g, s| per_pixel_ce_loss_graph(g, s, &labels), &scores, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn losses_are_nonnegative_up_to_dice_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = LossWeights::default();
        for _ in 0..200 {
            let hw = rng.gen_range(1..20);
            let m: Vec<f64> = (0..hw).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let t: Vec<f64> = (0..hw).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            assert!(focal_loss(&m, &t, 2.0, 0.25).unwrap() >= 0.0);
            let floor = -w.dice_epsilon / (2.0 * t.iter().sum::<f64>() + w.dice_epsilon);
            assert!(dice_loss(&m, &t, 1.0).unwrap() >= floor);
            assert!(dice_loss(&t, &t, 1.0).unwrap() >= floor);
        }
    }
}
