//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        h,
        None,
    )
}

/// Like [`grad_check`] for a function of several tensors.
///
/// With `max_coords_per_input = Some(n)`, only `n` evenly spaced coordinates
/// of each input are perturbed (all of them when the input is smaller).
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor],
    h: f64,
    max_coords_per_input: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    finite(g.value(out).item()?)?;
    let grads = g.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        finite(g.value(out).item()?)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, (point, &var)) in points.iter().zip(&vars).enumerate() {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
        for coord in coordinates(point.numel(), max_coords_per_input) {
            let base = point.data()[coord];
            work[k].data_mut()[coord] = base + h;
            let plus = eval(&work)?;
            work[k].data_mut()[coord] = base - h;
            let minus = eval(&work)?;
            work[k].data_mut()[coord] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic.data()[coord] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn coordinates(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => (0..l).map(|i| i * n / l).collect(),
        _ => (0..n).collect(),
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("function value {v} during gradient check")))
    }
}

/// Outcome of one named gradient check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

/// Checks every [`Primitive`](crate::graph::Primitive) at random smooth points.
///
/// Each primitive's output is contracted against a fixed random tensor so
/// that gradients of normalizing ops (softmax, layer norm) are non-trivial.
pub fn primitive_suite(seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    use crate::graph::Primitive as P;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize]| -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    };
    // values bounded away from the relu/clamp kinks
    let away = |t: Tensor| t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
    let positive = |t: Tensor| t.map(|v| v.abs() + 0.2);

    let cases: Vec<(P, Vec<Tensor>)> = vec![
        (P::Add, vec![normal(&[3, 4]), normal(&[3, 4])]),
        (P::Sub, vec![normal(&[3, 4]), normal(&[3, 4])]),
        (P::Mul, vec![normal(&[3, 4]), normal(&[3, 4])]),
        (P::MatMul, vec![normal(&[3, 5]), normal(&[5, 2])]),
        (P::Conv3x3 { stride: 1 }, vec![normal(&[2, 5, 4]), normal(&[3, 2, 3, 3])]),
        (P::Conv3x3 { stride: 2 }, vec![normal(&[2, 6, 6]), normal(&[3, 2, 3, 3])]),
        (P::Conv1x1, vec![normal(&[3, 4, 4]), normal(&[2, 3, 1, 1])]),
        (P::Relu, vec![away(normal(&[4, 5]))]),
        (P::Sigmoid, vec![normal(&[4, 5]).map(|v| 3.0 * v)]),
        (P::Softmax { axis: 1 }, vec![normal(&[3, 4, 2])]),
        (P::LogSoftmax { axis: 0 }, vec![normal(&[4, 3])]),
        (P::Log, vec![positive(normal(&[3, 3]))]),
        (P::Mean, vec![normal(&[3, 4])]),
        (P::Sum, vec![normal(&[3, 4])]),
        (P::Upsample2x, vec![normal(&[2, 3, 2])]),
        (P::AvgPool2x, vec![normal(&[2, 4, 4])]),
        (P::LayerNorm { axis: 0 }, vec![normal(&[5, 3])]),
        (P::LayerNorm { axis: 1 }, vec![normal(&[2, 6])]),
        (P::Scale(-1.7), vec![normal(&[3, 2])]),
        (P::AddScalar(0.3), vec![normal(&[3, 2])]),
        (P::Concat { axis: 1 }, vec![normal(&[2, 3]), normal(&[2, 1]), normal(&[2, 2])]),
        (P::Transpose, vec![normal(&[3, 5])]),
        (P::BiasAdd { axis: 0 }, vec![normal(&[3, 2, 2]), normal(&[3])]),
        (P::BiasMul { axis: 1 }, vec![normal(&[4, 3]), normal(&[3])]),
        (P::Narrow { axis: 1, start: 1, len: 2 }, vec![normal(&[3, 4])]),
        (P::Reshape(vec![6, 2]), vec![normal(&[3, 4])]),
        (P::Gather(vec![4, 0, 4, 7]), vec![normal(&[8])]),
        (P::Clamp { lo: -0.5, hi: 0.5 }, vec![normal(&[4, 4]).map(|v| {
            // keep clear of both boundaries
            if (v.abs() - 0.5).abs() < 0.05 { v * 0.5 } else { v }
        })]),
        (P::Powf(2.5), vec![positive(normal(&[3, 3]))]),
    ];

    let mut results = Vec::with_capacity(cases.len());
    for (op, inputs) in cases {
        let name = op.name().to_string();
        let weights = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = g.apply(op.clone(), &vars)?;
            normal(g.shape(out))
        };
        let err = grad_check_many(
            |g, vars| {
                let out = g.apply(op.clone(), vars)?;
                let w = g.constant(weights.clone());
                let prod = g.mul(out, w)?;
                g.sum(prod)
            },
            &inputs,
            h,
            None,
        )?;
        results.push(CheckResult { name, max_rel_error: err });
    }
    Ok(results)
}

/// Model used by [`pipeline_suite`]: `N = 4`, `K = 3`, 16×16 images.
pub fn pipeline_model(head: crate::model::HeadKind) -> crate::model::ModelConfig {
    crate::model::ModelConfig {
        num_classes: 3,
        num_queries: if head == crate::model::HeadKind::MaskClassification { 4 } else { 3 },
        decoder_layers: 2,
        heads: 2,
        query_dim: 8,
        mask_dim: 8,
        backbone_channels: vec![4, 8],
        backbone_depth: 2,
        image_size: (16, 16),
        head,
        ..crate::model::ModelConfig::default()
    }
}

/// Gradients of the full training losses with respect to every parameter
/// tensor (`coords_per_tensor` evenly spaced coordinates each): the
/// mask-classification loss summed over decoder layers, and the per-pixel
/// cross-entropy of both baseline heads.
///
/// Parameters are jittered away from their initialization so that no
/// pre-activation sits on a relu kink, and the matching is computed once at
/// the base point and held fixed, as in training.
pub fn pipeline_suite(seed: u64, h: f64, coords_per_tensor: usize) -> Result<Vec<CheckResult>> {
    use crate::losses::{mask_cls_loss_graph, per_pixel_ce_loss_graph, LossWeights};
    use crate::matching::{build_cost_matrix, hungarian};
    use crate::model::{init_params, maskformer_forward, per_pixel_baseline_forward, HeadKind, PredictionSet};
    use crate::segment::TargetSegment;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn(vec![3, 16, 16], |_| rng.gen_range(0.0..1.0));
    // class 1 on the left, class 3 in a right-hand block, class 2 elsewhere
    let labels: Vec<usize> = (0..256)
        .map(|i| {
            let (y, x) = (i / 16, i % 16);
            if x < 6 {
                1
            } else if (4..12).contains(&y) && x >= 9 {
                3
            } else {
                2
            }
        })
        .collect();
    let gt: Vec<TargetSegment> = (1..=3)
        .map(|c| TargetSegment::new(c, labels.iter().map(|&l| f64::from(u8::from(l == c))).collect()))
        .collect::<Result<_>>()?;
    let w = LossWeights::default();

    let mut results = Vec::new();
    for (name, head) in [
        ("maskformer_loss", HeadKind::MaskClassification),
        ("per_pixel_loss", HeadKind::PerPixel),
        ("per_pixel_plus_loss", HeadKind::PerPixelPlus),
    ] {
        let config = pipeline_model(head);
        let mut params = init_params(&config, seed)?;
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let points: Vec<Tensor> = params.tensors().cloned().collect();
        let err = if head == HeadKind::MaskClassification {
            let sigmas = {
                let mut g = Graph::new();
                let bound = params.bind(&mut g, false);
                let out = maskformer_forward(&mut g, &bound, &config, &image)?;
                out.layers
                    .iter()
                    .map(|l| {
                        let z = PredictionSet::from_logits(g.value(l.class_logits), g.value(l.mask_logits), (16, 16))?;
                        Ok(hungarian(&build_cost_matrix(&z, &gt, &w)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            grad_check_many(
                |g, vars| {
                    let bound = params.bind_vars(vars)?;
                    let out = maskformer_forward(g, &bound, &config, &image)?;
                    let mut total = None;
                    for (l, sigma) in out.layers.iter().zip(&sigmas) {
                        let loss = mask_cls_loss_graph(g, l.class_logits, l.mask_logits, &gt, sigma, &w)?;
                        total = Some(match total {
                            Some(t) => g.add(t, loss)?,
                            None => loss,
                        });
                    }
                    Ok(total.expect("two layers"))
                },
                &points,
                h,
                Some(coords_per_tensor),
            )?
        } else {
            grad_check_many(
                |g, vars| {
                    let bound = params.bind_vars(vars)?;
                    let scores = per_pixel_baseline_forward(g, &bound, &config, &image)?;
                    per_pixel_ce_loss_graph(g, scores, &labels)
                },
                &points,
                h,
                Some(coords_per_tensor),
            )?
        };
        results.push(CheckResult { name: name.to_string(), max_rel_error: err });
    }
    Ok(results)
}
