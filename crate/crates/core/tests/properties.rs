//! Property tests for invariants that must hold on arbitrary inputs.

use maskform::data::{augment, generate_scene, AugmentConfig, SceneConfig};
use maskform::graph::Graph;
use maskform::inference::{general_inference, semantic_inference, GeneralInferenceConfig, SemanticLabelMap, Task, VOID};
use maskform::losses::{classification_loss, dice_loss, focal_loss, mask_cls_loss, LossWeights};
use maskform::matching::{brute_force_matching, hungarian, Assignment, CostMatrix};
use maskform::metrics::{miou, panoptic_quality, semantic_to_stuff_segments, ClassSplit};
use maskform::model::{image_to_chw, init_params, predict, ModelConfig, PredictionSet};
use maskform::segment::TargetSegment;
use maskform::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-scale..scale))
}

/// Random prediction set whose class rows are softmax-normalized.
fn random_predictions(r: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> PredictionSet {
    let logits = random_tensor(r, &[n, k + 1], 3.0);
    let masks = random_tensor(r, &[n, h * w], 4.0);
    PredictionSet::from_logits(&logits, &masks, (h, w)).unwrap()
}

fn random_targets(r: &mut ChaCha8Rng, n_gt: usize, k: usize, pixels: usize) -> Vec<TargetSegment> {
    (0..n_gt)
        .map(|_| {
            let mut mask: Vec<bool> = (0..pixels).map(|_| r.gen_bool(0.4)).collect();
            mask[r.gen_range(0..pixels)] = true;
            TargetSegment::from_bools(r.gen_range(1..=k), &mask).unwrap()
        })
        .collect()
}

fn random_cost(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
    CostMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-5.0..5.0)).collect()).unwrap()
}

fn tiny_model(num_queries: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes,
        num_queries,
        decoder_layers: 2,
        heads: 2,
        query_dim: 8,
        mask_dim: 8,
        backbone_channels: vec![4, 8],
        backbone_depth: 1,
        image_size: (8, 8),
        ..ModelConfig::default()
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.numel() / t.shape()[0];
    let mut out = t.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.data_mut()[dst * cols..(dst + 1) * cols].copy_from_slice(&t.data()[src * cols..(src + 1) * cols]);
    }
    out
}

fn shuffled(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalizes_and_ignores_shifts(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[rows, cols], 20.0);
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let sa = g.softmax(a, 1).unwrap();
        let b = g.constant(x.map(|v| v + shift));
        let sb = g.softmax(b, 1).unwrap();
        let (pa, pb) = (g.value(sa).data().to_vec(), g.value(sb).data().to_vec());
        for row in pa.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(close(&pa, &pb, 1e-12));
        let argmax = |v: &[f64]| v.chunks(cols).map(|c| c.iter().enumerate().fold(0, |m, (i, &x)| if x > c[m] { i } else { m })).collect::<Vec<_>>();
        prop_assert_eq!(argmax(&pa), argmax(&pb));
    }

    #[test]
    fn upsample_then_pool_is_identity(seed in any::<u64>(), c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[c, h, w], 5.0);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let up = g.upsample2x(v).unwrap();
        let back = g.avg_pool2x(up).unwrap();
        prop_assert_eq!(g.value(back).shape(), x.shape());
        prop_assert!(close(g.value(back).data(), x.data(), 1e-15));
    }

    #[test]
    fn focal_and_dice_respect_their_bounds(seed in any::<u64>(), pixels in 1usize..40) {
        let mut r = rng(seed);
        let w = LossWeights::default();
        let m: Vec<f64> = (0..pixels).map(|_| r.gen_range(0.0..1.0)).collect();
        let gt: Vec<f64> = (0..pixels).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        prop_assert!(focal_loss(&m, &gt, w.focal_gamma, w.focal_alpha).unwrap() >= 0.0);
        let d = dice_loss(&m, &gt, w.dice_epsilon).unwrap();
        let floor = -w.dice_epsilon / (2.0 * gt.iter().sum::<f64>() + w.dice_epsilon);
        prop_assert!(d >= floor - 1e-12, "dice {} below {}", d, floor);
        prop_assert!(dice_loss(&gt, &gt, w.dice_epsilon).unwrap() >= floor - 1e-12);
    }

    #[test]
    fn no_object_loss_scales_with_its_weight(seed in any::<u64>(), k in 1usize..8) {
        let mut r = rng(seed);
        let logits = random_tensor(&mut r, &[1, k + 1], 3.0);
        let z = PredictionSet::from_logits(&logits, &Tensor::zeros([1, 1]), (1, 1)).unwrap();
        let w = LossWeights { no_object_weight: 0.1, ..LossWeights::default() };
        let w2 = LossWeights { no_object_weight: 0.2, ..w };
        let a = classification_loss(z.probs(0), None, &w).unwrap();
        let b = classification_loss(z.probs(0), None, &w2).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((b - 2.0 * a).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn mask_cls_loss_is_invariant_to_joint_permutation(seed in any::<u64>(), n in 1usize..6, k in 1usize..5) {
        let mut r = rng(seed);
        let n_gt = r.gen_range(0..=n);
        let z = random_predictions(&mut r, n, k, 3, 3);
        let gt = random_targets(&mut r, n_gt, k, 9);
        let w = LossWeights::default();
        let sigma = hungarian(&maskform::matching::build_cost_matrix(&z, &gt, &w).unwrap());
        let base = mask_cls_loss(&z, &gt, &sigma, &w).unwrap();
        prop_assert!(base >= -1.0);

        let perm = shuffled(&mut r, n);
        let zp = PredictionSet::new(permute_rows(&z.class_probs, &perm), permute_rows(&z.mask_probs, &perm)).unwrap();
        let sp = Assignment::new(perm.iter().map(|&i| sigma.sigma()[i]).collect(), n_gt).unwrap();
        let moved = mask_cls_loss(&zp, &gt, &sp, &w).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn hungarian_is_optimal_and_valid(seed in any::<u64>(), rows in 1usize..8, cols_seed in any::<u64>()) {
        let mut r = rng(seed);
        let cols = (cols_seed as usize) % (rows.min(5) + 1);
        let cost = random_cost(&mut r, rows, cols);
        let h = hungarian(&cost);
        let b = brute_force_matching(&cost).unwrap();
        prop_assert!((h.total_cost(&cost) - b.total_cost(&cost)).abs() < 1e-9);
        prop_assert_eq!(h.num_predictions(), rows);
        prop_assert_eq!(h.num_no_object(), rows - cols);
        let mut seen = vec![0; cols];
        for j in h.sigma().iter().flatten() {
            seen[*j] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn column_shift_moves_cost_not_assignment(seed in any::<u64>(), rows in 1usize..7, shift in -10.0f64..10.0) {
        let mut r = rng(seed);
        let cols = r.gen_range(1..=rows.min(5));
        // integer costs give a unique-enough optimum; ties break deterministically anyway
        let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(0..20) as f64).collect();
        let cost = CostMatrix::new(rows, cols, data.clone()).unwrap();
        let col = r.gen_range(0..cols);
        let mut shifted = data;
        for i in 0..rows {
            shifted[i * cols + col] += shift;
        }
        let shifted = CostMatrix::new(rows, cols, shifted).unwrap();
        let (a, b) = (hungarian(&cost), hungarian(&shifted));
        prop_assert!((b.total_cost(&shifted) - a.total_cost(&cost) - shift).abs() < 1e-9);
        prop_assert!((a.total_cost(&shifted) - b.total_cost(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn inference_outputs_are_well_formed(seed in any::<u64>(), n in 1usize..6, k in 1usize..5, conf in 0.0f64..0.9) {
        let mut r = rng(seed);
        let z = random_predictions(&mut r, n, k, 6, 5);
        let sem = semantic_inference(&z);
        prop_assert!(sem.labels.iter().all(|&c| c != VOID && c as usize <= k));

        let cfg = GeneralInferenceConfig { conf_threshold: conf, ..GeneralInferenceConfig::default() };
        let out = general_inference(&z, &cfg);
        let ids = &out.map.segment_ids;
        prop_assert_eq!(ids.len(), 30);
        for s in &out.map.segments {
            prop_assert_eq!(ids.iter().filter(|&&i| i == s.id).count(), s.area);
        }
        let covered: usize = out.map.segments.iter().map(|s| s.area).sum::<usize>() + ids.iter().filter(|&&i| i == 0).count();
        prop_assert_eq!(covered, 30);
    }

    #[test]
    fn semantic_inference_ignores_shared_mask_scale(seed in any::<u64>(), n in 1usize..6, k in 1usize..5, c in 0.05f64..1.0) {
        let mut r = rng(seed);
        let z = random_predictions(&mut r, n, k, 4, 4);
        let scaled = PredictionSet::new(z.class_probs.clone(), z.mask_probs.map(|v| v * c)).unwrap();
        prop_assert_eq!(semantic_inference(&z).labels, semantic_inference(&scaled).labels);
    }

    #[test]
    fn one_surviving_pair_agrees_across_strategies(seed in any::<u64>(), k in 1usize..5) {
        let mut r = rng(seed);
        let mut z = random_predictions(&mut r, 1, k, 4, 4);
        // make the single pair confident in a real class
        let c = r.gen_range(0..k);
        for (j, p) in z.class_probs.data_mut().iter_mut().enumerate() {
            *p = if j == c { 0.95 } else { 0.05 / k as f64 };
        }
        let cfg = GeneralInferenceConfig { task: Task::Semantic, ..GeneralInferenceConfig::default() };
        let general = general_inference(&z, &cfg).map.to_semantic();
        let sem = semantic_inference(&z);
        for (px, &m) in z.mask(0).iter().enumerate() {
            if m > cfg.mask_bin {
                prop_assert_eq!(general.labels[px], sem.labels[px]);
            }
        }
    }

    #[test]
    fn pq_factorizes_and_miou_ignores_relabeling(seed in any::<u64>(), k in 2usize..6) {
        let mut r = rng(seed);
        let (h, w) = (5, 5);
        let gt: Vec<u32> = (0..h * w).map(|_| r.gen_range(1..=k as u32)).collect();
        let pred: Vec<u32> = gt.iter().map(|&c| if r.gen_bool(0.3) { r.gen_range(1..=k as u32) } else { c }).collect();
        let gt = SemanticLabelMap::new(h, w, gt).unwrap();
        let pred = SemanticLabelMap::new(h, w, pred).unwrap();

        let report = panoptic_quality(&semantic_to_stuff_segments(&pred), &semantic_to_stuff_segments(&gt), k, &ClassSplit::all_stuff()).unwrap();
        let (pq, sq, rq) = (report.pq.unwrap(), report.sq.unwrap(), report.rq.unwrap());
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!((pq - sq * rq).abs() <= 1e-12);

        let perm: Vec<u32> = shuffled(&mut r, k).into_iter().map(|c| c as u32 + 1).collect();
        let relabel = |m: &SemanticLabelMap| SemanticLabelMap::new(h, w, m.labels.iter().map(|&c| perm[c as usize - 1]).collect()).unwrap();
        let a = miou(&[(pred.clone(), gt.clone())], k).unwrap().miou.unwrap();
        let b = miou(&[(relabel(&pred), relabel(&gt))], k).unwrap().miou.unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_outputs_are_distributions_for_any_pair_count(seed in any::<u64>(), n in 1usize..7, k in 2usize..6) {
        prop_assume!(n != k);
        let cfg = tiny_model(n, k);
        let params = init_params(&cfg, seed).unwrap();
        let mut r = rng(seed ^ 1);
        let image = random_tensor(&mut r, &[3, 8, 8], 1.0);
        let z = predict(&params, &cfg, &image).unwrap();
        prop_assert_eq!(z.num_queries(), n);
        prop_assert_eq!(z.num_classes(), k);
        for i in 0..n {
            prop_assert!((z.probs(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn model_is_equivariant_over_query_slots(seed in any::<u64>(), n in 2usize..6) {
        let cfg = tiny_model(n, 3);
        let mut params = init_params(&cfg, seed).unwrap();
        let mut r = rng(seed ^ 2);
        // content embeddings start at zero; make them distinct so the check is not vacuous
        let content = random_tensor(&mut r, &[n, cfg.query_dim], 1.0);
        *params.get_mut("query.content").unwrap() = content;
        let image = random_tensor(&mut r, &[3, 8, 8], 1.0);
        let z = predict(&params, &cfg, &image).unwrap();

        let perm = shuffled(&mut r, n);
        let mut permuted = params.clone();
        for name in ["query.content", "query.pos"] {
            let t = permute_rows(params.get(name).unwrap(), &perm);
            *permuted.get_mut(name).unwrap() = t;
        }
        let zp = predict(&permuted, &cfg, &image).unwrap();
        prop_assert!(close(zp.class_probs.data(), permute_rows(&z.class_probs, &perm).data(), 1e-10));
        prop_assert!(close(zp.mask_probs.data(), permute_rows(&z.mask_probs, &perm).data(), 1e-10));
    }

    #[test]
    fn generated_and_augmented_samples_stay_consistent(seed in any::<u64>(), index in 0u64..1000, k in 2usize..40) {
        let scene = SceneConfig { num_classes: k, seed, ..SceneConfig::default() };
        let sample = generate_scene(&scene, index).unwrap();
        sample.validate(k).unwrap();
        let aug = augment(&sample, &AugmentConfig::default(), &mut rng(seed));
        aug.validate(k).unwrap();
        for s in [&sample, &aug] {
            let segs = s.target_segments();
            let cover: Vec<f64> = (0..s.pixels()).map(|p| segs.iter().map(|t| t.mask[p]).sum()).collect();
            prop_assert!(cover.iter().all(|&c| c == 1.0));
            prop_assert_eq!(&s.panoptic_map().to_semantic(), &s.semantic_map());
            prop_assert!(s.semantic.iter().all(|&c| c >= 1 && c as usize <= k));
        }
        let image = image_to_chw(&sample.image, sample.height, sample.width).unwrap();
        prop_assert_eq!(image.shape(), &[3, sample.height, sample.width][..]);
    }
}

