//! Turning probability-mask pairs into label maps.
//!
//! Semantic inference marginalizes over pairs; general inference assigns
//! every pixel to one confident pair and removes heavily occluded segments.
//! Ties are always broken toward the lowest index so outputs are stable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricReport, SemanticEvaluator};
use crate::model::PredictionSet;
use crate::tensor::Tensor;

/// Label value for pixels that belong to no segment.
pub const VOID: u32 = 0;

/// Per-pixel class ids. Ground truth and semantic inference use `1..=K`;
/// maps derived from general inference may contain [`VOID`].
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    /// Unnormalized `Σ_i p_i(c)·m_i` scores, `[K, H, W]`, when produced by
    /// semantic inference.
    pub scores: Option<Tensor>,
}

impl SemanticLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("label map", format!("{} labels for {height}×{width}", labels.len())));
        }
        Ok(Self { height, width, labels, scores: None })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticSegment {
    pub id: u32,
    pub class: u32,
    pub area: usize,
}

/// Segment-id map (0 is VOID) with its segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticLabelMap {
    pub height: usize,
    pub width: usize,
    pub segment_ids: Vec<u32>,
    pub segments: Vec<PanopticSegment>,
}

impl PanopticLabelMap {
    /// Validates that ids are declared, unique, and areas match pixel counts.
    pub fn new(height: usize, width: usize, segment_ids: Vec<u32>, segments: Vec<PanopticSegment>) -> Result<Self> {
        if segment_ids.len() != height * width {
            return Err(Error::shape("panoptic map", format!("{} ids for {height}×{width}", segment_ids.len())));
        }
        let mut areas = std::collections::BTreeMap::new();
        for s in &segments {
            if s.id == VOID {
                return Err(Error::Input("segment id 0 is reserved for VOID".into()));
            }
            if s.class == 0 {
                return Err(Error::Input(format!("segment {} has class 0", s.id)));
            }
            if areas.insert(s.id, 0usize).is_some() {
                return Err(Error::Input(format!("segment id {} declared twice", s.id)));
            }
        }
        for &id in &segment_ids {
            if id != VOID {
                *areas.get_mut(&id).ok_or_else(|| Error::Input(format!("undeclared segment id {id}")))? += 1;
            }
        }
        for s in &segments {
            if areas[&s.id] != s.area {
                return Err(Error::Input(format!("segment {} declares area {} but covers {}", s.id, s.area, areas[&s.id])));
            }
        }
        Ok(Self { height, width, segment_ids, segments })
    }

    pub fn class_of(&self, id: u32) -> Option<u32> {
        self.segments.iter().find(|s| s.id == id).map(|s| s.class)
    }

    /// Projection to per-pixel classes with VOID kept as 0.
    pub fn to_semantic(&self) -> SemanticLabelMap {
        let lookup: std::collections::HashMap<u32, u32> = self.segments.iter().map(|s| (s.id, s.class)).collect();
        let labels = self.segment_ids.iter().map(|id| if *id == VOID { VOID } else { lookup[id] }).collect();
        SemanticLabelMap { height: self.height, width: self.width, labels, scores: None }
    }
}

/// `argmax_{c ∈ 1..=K} Σ_i p_i(c)·m_i[h, w]`, no-object excluded.
pub fn semantic_inference(z: &PredictionSet) -> SemanticLabelMap {
    let (n, k, hw) = (z.num_queries(), z.num_classes(), z.pixels());
    let mut scores = vec![0.0; k * hw];
    for i in 0..n {
        let p = z.probs(i);
        let m = z.mask(i);
        for c in 0..k {
            let row = &mut scores[c * hw..(c + 1) * hw];
            for (s, &mv) in row.iter_mut().zip(m) {
                *s += p[c] * mv;
            }
        }
    }
    let labels = (0..hw)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if scores[c * hw + px] > scores[best * hw + px] {
                    best = c;
                }
            }
            best as u32 + 1
        })
        .collect();
    let scores = Tensor::new(vec![k, z.height(), z.width()], scores).expect("shape matches");
    SemanticLabelMap { height: z.height(), width: z.width(), labels, scores: Some(scores) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Panoptic,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralInferenceConfig {
    pub conf_threshold: f64,
    pub overlap_keep: f64,
    pub mask_bin: f64,
    pub task: Task,
}

impl Default for GeneralInferenceConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.8, overlap_keep: 0.8, mask_bin: 0.5, task: Task::Panoptic }
    }
}

impl GeneralInferenceConfig {
    /// Settings for producing semantic maps with general inference.
    pub fn semantic() -> Self {
        Self { conf_threshold: 0.3, task: Task::Semantic, ..Self::default() }
    }
}

/// General inference plus, for every output segment, the query slots that
/// produced it (more than one only after semantic merging).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralOutput {
    pub map: PanopticLabelMap,
    pub segment_queries: Vec<Vec<usize>>,
}

/// Confidence filter, per-pixel argmax over surviving pairs, then occlusion
/// VOIDing; for the semantic task, same-class segments are merged.
///
/// Filtering happens before pixel assignment. A surviving pair whose binary
/// mask is empty has no visible fraction and is VOIDed.
pub fn general_inference(z: &PredictionSet, cfg: &GeneralInferenceConfig) -> GeneralOutput {
    let (n, k, hw) = (z.num_queries(), z.num_classes(), z.pixels());
    // (query, class, confidence) of every surviving pair
    let mut kept = Vec::new();
    for i in 0..n {
        let p = z.probs(i);
        let mut best = 0;
        for c in 1..=k {
            if p[c] > p[best] {
                best = c;
            }
        }
        if best < k && p[best] >= cfg.conf_threshold {
            kept.push((i, best as u32 + 1, p[best]));
        }
    }

    let mut owner = vec![usize::MAX; hw];
    if !kept.is_empty() {
        for (px, o) in owner.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (slot, &(i, _, conf)) in kept.iter().enumerate() {
                let s = conf * z.mask(i)[px];
                if s > best_score {
                    best_score = s;
                    best = slot;
                }
            }
            *o = best;
        }
    }

    // occlusion rule per surviving pair
    let mut visible = vec![0usize; kept.len()];
    let mut binary = vec![0usize; kept.len()];
    let mut assigned = vec![0usize; kept.len()];
    for (slot, &(i, _, _)) in kept.iter().enumerate() {
        for (px, &m) in z.mask(i).iter().enumerate() {
            if m > cfg.mask_bin {
                binary[slot] += 1;
                if owner[px] == slot {
                    visible[slot] += 1;
                }
            }
        }
    }
    for &o in &owner {
        if o != usize::MAX {
            assigned[o] += 1;
        }
    }
    let survives: Vec<bool> = (0..kept.len())
        .map(|s| binary[s] > 0 && assigned[s] > 0 && visible[s] as f64 / binary[s] as f64 >= cfg.overlap_keep)
        .collect();

    // segment ids in order of first surviving query; merged by class for semantic
    let mut slot_to_id = vec![VOID; kept.len()];
    let mut segments: Vec<PanopticSegment> = Vec::new();
    let mut segment_queries: Vec<Vec<usize>> = Vec::new();
    for (slot, &(i, class, _)) in kept.iter().enumerate() {
        if !survives[slot] {
            continue;
        }
        let existing = match cfg.task {
            Task::Semantic => segments.iter().position(|s| s.class == class),
            Task::Panoptic => None,
        };
        let idx = existing.unwrap_or_else(|| {
            segments.push(PanopticSegment { id: segments.len() as u32 + 1, class, area: 0 });
            segment_queries.push(Vec::new());
            segments.len() - 1
        });
        slot_to_id[slot] = segments[idx].id;
        segment_queries[idx].push(i);
    }
    let segment_ids: Vec<u32> = owner.iter().map(|&o| if o == usize::MAX { VOID } else { slot_to_id[o] }).collect();
    for &id in &segment_ids {
        if id != VOID {
            segments[id as usize - 1].area += 1;
        }
    }
    let map = PanopticLabelMap { height: z.height(), width: z.width(), segment_ids, segments };
    GeneralOutput { map, segment_queries }
}

/// Metric reports for both strategies on the same predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceComparison {
    pub semantic_inference: MetricReport,
    pub general_inference: MetricReport,
    pub general_conf_threshold: f64,
}

/// Evaluates semantic inference and general inference (semantic task) by
/// mIoU and PQ^St over a set of images.
pub fn compare_inference_strategies(
    predictions: &[PredictionSet],
    gt: &[SemanticLabelMap],
    num_classes: usize,
    general: &GeneralInferenceConfig,
) -> Result<InferenceComparison> {
    if predictions.len() != gt.len() {
        return Err(Error::Input(format!("{} predictions for {} ground-truth maps", predictions.len(), gt.len())));
    }
    let mut semantic = SemanticEvaluator::new(num_classes);
    let mut generic = SemanticEvaluator::new(num_classes);
    for (z, g) in predictions.iter().zip(gt) {
        semantic.add(&semantic_inference(z), g)?;
        generic.add(&general_inference(z, general).map.to_semantic(), g)?;
    }
    Ok(InferenceComparison {
        semantic_inference: semantic.report(),
        general_inference: generic.report(),
        general_conf_threshold: general.conf_threshold,
    })
}

/// mIoU and PQ^St of a single prediction.
pub fn semantic_report(pred: &SemanticLabelMap, gt: &SemanticLabelMap, num_classes: usize) -> Result<MetricReport> {
    let mut e = SemanticEvaluator::new(num_classes);
    e.add(pred, gt)?;
    Ok(e.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(probs: Vec<Vec<f64>>, masks: Vec<Vec<f64>>, h: usize, w: usize) -> PredictionSet {
        let n = probs.len();
        let width = probs[0].len();
        PredictionSet::new(
            Tensor::new(vec![n, width], probs.concat()).unwrap(),
            Tensor::new(vec![n, h, w], masks.concat()).unwrap(),
        )
        .unwrap()
    }

    pub(crate) fn random_set(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> PredictionSet {
        let mut probs = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.0f64..1.0).powi(3)).collect();
            let s: f64 = raw.iter().sum::<f64>().max(1e-12);
            probs.push(raw.iter().map(|v| v / s).collect());
        }
        let masks = (0..n).map(|_| (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        set(probs, masks, h, w)
    }

    fn triple_loop(z: &PredictionSet) -> Vec<u32> {
        let mut out = Vec::new();
        for px in 0..z.pixels() {
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..z.num_classes() {
                let mut s = 0.0;
                for i in 0..z.num_queries() {
                    s += z.probs(i)[c] * z.mask(i)[px];
                }
                if s > best.0 {
                    best = (s, c as u32 + 1);
                }
            }
            out.push(best.1);
        }
        out
    }

    #[test]
    fn semantic_hand_case() {
        let z = set(vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1]], vec![vec![0.9], vec![0.2]], 1, 1);
        let out = semantic_inference(&z);
        let s = out.scores.as_ref().unwrap().data();
        assert!((s[0] - 0.65).abs() < 1e-12 && (s[1] - 0.34).abs() < 1e-12);
        assert_eq!(out.labels, vec![1]);

        let z = set(vec![vec![0.0, 0.0, 1.0, 0.0]], vec![vec![1.0; 6]], 2, 3);
        assert_eq!(semantic_inference(&z).labels, vec![3; 6]);
    }

    #[test]
    fn semantic_equals_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let z = random_set(&mut rng, 5, 4, 8, 8);
            assert_eq!(semantic_inference(&z).labels, triple_loop(&z));
        }
    }

    #[test]
    fn semantic_ignores_no_object_and_scaling() {
        let z = set(vec![vec![0.05, 0.05, 0.9]], vec![vec![0.5, 0.7]], 1, 2);
        assert_eq!(semantic_inference(&z).labels, vec![1, 1]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_set(&mut rng, 4, 3, 4, 4);
        let scaled = PredictionSet::new(z.class_probs.clone(), z.mask_probs.map(|m| m * 0.25)).unwrap();
        assert_eq!(semantic_inference(&z).labels, semantic_inference(&scaled).labels);
    }

    #[test]
    fn general_single_confident_pair() {
        let z = set(vec![vec![0.9, 0.05, 0.05], vec![0.1, 0.1, 0.8]], vec![vec![0.9; 4], vec![0.9; 4]], 2, 2);
        let out = general_inference(&z, &GeneralInferenceConfig::default());
        assert_eq!(out.map.segment_ids, vec![1; 4]);
        assert_eq!(out.map.segments, vec![PanopticSegment { id: 1, class: 1, area: 4 }]);
        assert_eq!(out.segment_queries, vec![vec![0]]);
    }

    #[test]
    fn general_merges_for_semantic_task() {
        let z = set(
            vec![vec![0.9, 0.05, 0.05], vec![0.95, 0.03, 0.02]],
            vec![vec![0.9, 0.9, 0.1, 0.1], vec![0.1, 0.1, 0.9, 0.9]],
            2,
            2,
        );
        let panoptic = general_inference(&z, &GeneralInferenceConfig::default());
        assert_eq!(panoptic.map.segments.len(), 2);
        let semantic = general_inference(&z, &GeneralInferenceConfig { task: Task::Semantic, ..Default::default() });
        assert_eq!(semantic.map.segments, vec![PanopticSegment { id: 1, class: 1, area: 4 }]);
        assert_eq!(semantic.segment_queries, vec![vec![0, 1]]);
    }

    #[test]
    fn general_confidence_threshold() {
        let z = set(vec![vec![0.79, 0.11, 0.1]], vec![vec![0.9; 2]], 1, 2);
        let out = general_inference(&z, &GeneralInferenceConfig::default());
        assert!(out.map.segments.is_empty());
        assert_eq!(out.map.segment_ids, vec![VOID; 2]);
        let z = set(vec![vec![0.8, 0.1, 0.1]], vec![vec![0.9; 2]], 1, 2);
        assert_eq!(general_inference(&z, &GeneralInferenceConfig::default()).map.segments.len(), 1);
    }

    #[test]
    fn occluded_segment_becomes_void() {
        // query 1 is mostly hidden behind the more confident query 0
        let z = set(
            vec![vec![0.99, 0.005, 0.005], vec![0.005, 0.9, 0.095]],
            vec![vec![0.9, 0.9, 0.9, 0.1], vec![0.9, 0.9, 0.9, 0.9]],
            2,
            2,
        );
        let out = general_inference(&z, &GeneralInferenceConfig::default());
        assert_eq!(out.map.segment_ids, vec![1, 1, 1, VOID]);
        assert_eq!(out.map.segments.len(), 1);
    }

    #[test]
    fn general_partitions_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=5);
            let z = random_set(&mut rng, n, k, 8, 8);
            let cfg = GeneralInferenceConfig { conf_threshold: rng.gen_range(0.0..0.9), ..Default::default() };
            let out = general_inference(&z, &cfg);
            let map = &out.map;
            PanopticLabelMap::new(8, 8, map.segment_ids.clone(), map.segments.clone()).unwrap();
        }
    }

    #[test]
    fn single_pair_agrees_with_semantic_inside_binary_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut z = random_set(&mut rng, 1, 3, 4, 4);
        z.class_probs = Tensor::new(vec![1, 4], vec![0.05, 0.9, 0.03, 0.02]).unwrap();
        let sem = semantic_inference(&z);
        let out = general_inference(&z, &GeneralInferenceConfig { overlap_keep: 0.0, ..Default::default() });
        let gen = out.map.to_semantic();
        for px in 0..16 {
            if z.mask(0)[px] > 0.5 {
                assert_eq!(sem.labels[px], gen.labels[px]);
            }
        }
    }

    #[test]
    fn perfect_predictions_score_one_both_ways() {
        let labels = vec![1, 1, 2, 2, 1, 3, 3, 2];
        let gt = SemanticLabelMap::new(2, 4, labels.clone()).unwrap();
        let probs = (1..=3).map(|c| (0..4).map(|k| if k == c - 1 { 1.0 } else { 0.0 }).collect()).collect();
        let masks = (1..=3).map(|c| labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect()).collect();
        let z = set(probs, masks, 2, 4);
        let cmp = compare_inference_strategies(&[z], &[gt], 3, &GeneralInferenceConfig::semantic()).unwrap();
        assert_eq!(cmp.semantic_inference.miou, Some(1.0));
        assert_eq!(cmp.general_inference.miou, Some(1.0));
        assert_eq!(cmp.general_inference.pq, Some(1.0));
    }

    #[test]
    fn panoptic_map_validation() {
        let seg = |id, class, area| PanopticSegment { id, class, area };
        assert!(PanopticLabelMap::new(1, 2, vec![1, 1], vec![seg(1, 2, 2)]).is_ok());
        assert!(PanopticLabelMap::new(1, 2, vec![1, 2], vec![seg(1, 2, 1)]).is_err());
        assert!(PanopticLabelMap::new(1, 2, vec![1, 1], vec![seg(1, 2, 1)]).is_err());
        assert!(PanopticLabelMap::new(1, 2, vec![1, 0], vec![seg(1, 2, 1), seg(1, 3, 0)]).is_err());
    }
}
