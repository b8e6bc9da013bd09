//! Evaluation: mIoU from an aggregated confusion matrix, PQ/SQ/RQ with
//! things/stuff splits, PQ^St on semantic outputs, and per-query class
//! statistics.
//!
//! PQ, SQ and RQ are pooled over the selected classes: true positives,
//! false positives, false negatives and IoU sums are added across classes
//! before dividing, so `PQ = SQ · RQ` holds for every report.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{general_inference, GeneralInferenceConfig, PanopticLabelMap, SemanticLabelMap, VOID};
use crate::model::PredictionSet;

/// Confusion counts indexed `[gt][pred]` over `0..=K`; row and column 0 are
/// VOID. Ground-truth VOID pixels are never counted.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; (num_classes + 1) * (num_classes + 1)] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.num_classes + 1) + pred]
    }

    pub fn add(&mut self, pred: &SemanticLabelMap, gt: &SemanticLabelMap) -> Result<()> {
        check_dims(pred.height, pred.width, gt.height, gt.width)?;
        let k = self.num_classes as u32;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if p > k || g > k {
                return Err(Error::Input(format!("label {} outside 0..={k}", p.max(g))));
            }
            if g != VOID {
                self.counts[g as usize * (self.num_classes + 1) + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Input("merging confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU of classes `1..=K`; `None` where both prediction and ground truth
    /// are empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (1..=k)
            .map(|c| {
                let inter = self.get(c, c);
                let gt_area: u64 = (0..=k).map(|p| self.get(c, p)).sum();
                let pred_area: u64 = (1..=k).map(|g| self.get(g, c)).sum();
                let union = gt_area + pred_area - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

fn check_dims(ph: usize, pw: usize, gh: usize, gw: usize) -> Result<()> {
    if (ph, pw) != (gh, gw) {
        return Err(Error::shape("metrics", format!("prediction {ph}×{pw} vs ground truth {gh}×{gw}")));
    }
    Ok(())
}

/// Dataset-level mIoU over paired label maps.
pub fn miou(pairs: &[(SemanticLabelMap, SemanticLabelMap)], num_classes: usize) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (pred, gt) in pairs {
        cm.add(pred, gt)?;
    }
    Ok(MetricReport::from_parts(num_classes, Some(&cm), None, &ClassSplit::all_stuff()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

/// Per-class panoptic statistics; merge is associative and commutative.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticStats {
    per_class: Vec<ClassCounts>,
}

impl PanopticStats {
    pub fn new(num_classes: usize) -> Self {
        Self { per_class: vec![ClassCounts::default(); num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Counts for class `c` in `1..=K`.
    pub fn class(&self, c: usize) -> &ClassCounts {
        &self.per_class[c - 1]
    }

    pub fn merge(&mut self, other: &PanopticStats) -> Result<()> {
        if other.per_class.len() != self.per_class.len() {
            return Err(Error::Input("merging panoptic statistics of different sizes".into()));
        }
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.iou_sum += b.iou_sum;
        }
        Ok(())
    }

    /// Pooled `(PQ, SQ, RQ)` over the classes accepted by `select`; `None`
    /// when those classes have no segments at all.
    pub fn quality(&self, select: impl Fn(usize) -> bool) -> Option<(f64, f64, f64)> {
        let (mut tp, mut fp, mut fn_, mut iou) = (0u64, 0u64, 0u64, 0.0);
        for (i, c) in self.per_class.iter().enumerate() {
            if select(i + 1) {
                tp += c.tp;
                fp += c.fp;
                fn_ += c.fn_;
                iou += c.iou_sum;
            }
        }
        if tp + fp + fn_ == 0 {
            return None;
        }
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let sq = if tp > 0 { iou / tp as f64 } else { 0.0 };
        let rq = tp as f64 / denom;
        Some((iou / denom, sq, rq))
    }

    /// Adds one image. Segments match iff they share a class and their IoU
    /// exceeds 0.5; pixels that are VOID in the ground truth are left out of
    /// unions, and predicted segments lying mostly on ground-truth VOID are
    /// not counted as false positives.
    pub fn add(&mut self, pred: &PanopticLabelMap, gt: &PanopticLabelMap) -> Result<()> {
        check_dims(pred.height, pred.width, gt.height, gt.width)?;
        let k = self.per_class.len() as u32;
        for s in pred.segments.iter().chain(&gt.segments) {
            if s.class == 0 || s.class > k {
                return Err(Error::Input(format!("segment class {} outside 1..={k}", s.class)));
            }
        }
        let mut pred_area: HashMap<u32, u64> = HashMap::new();
        let mut gt_area: HashMap<u32, u64> = HashMap::new();
        let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (&p, &g) in pred.segment_ids.iter().zip(&gt.segment_ids) {
            if p != VOID {
                *pred_area.entry(p).or_default() += 1;
            }
            if g != VOID {
                *gt_area.entry(g).or_default() += 1;
            }
            *inter.entry((g, p)).or_default() += 1;
        }
        let pred_class: HashMap<u32, u32> = pred.segments.iter().map(|s| (s.id, s.class)).collect();
        let gt_class: HashMap<u32, u32> = gt.segments.iter().map(|s| (s.id, s.class)).collect();
        for id in pred_area.keys() {
            if !pred_class.contains_key(id) {
                return Err(Error::Input(format!("predicted map uses undeclared segment {id}")));
            }
        }
        for id in gt_area.keys() {
            if !gt_class.contains_key(id) {
                return Err(Error::Input(format!("ground-truth map uses undeclared segment {id}")));
            }
        }

        let mut matched_pred = BTreeSet::new();
        let mut matched_gt = BTreeSet::new();
        for (&(g, p), &i) in &inter {
            if g == VOID || p == VOID || gt_class[&g] != pred_class[&p] {
                continue;
            }
            let on_void = inter.get(&(VOID, p)).copied().unwrap_or(0);
            let union = pred_area[&p] + gt_area[&g] - i - on_void;
            let iou = i as f64 / union as f64;
            if iou > 0.5 {
                if !matched_gt.insert(g) || !matched_pred.insert(p) {
                    return Err(Error::Internal("IoU > 0.5 matched a segment twice".into()));
                }
                let c = &mut self.per_class[gt_class[&g] as usize - 1];
                c.tp += 1;
                c.iou_sum += iou;
            }
        }
        for (&g, _) in gt_area.iter().filter(|(g, _)| !matched_gt.contains(*g)) {
            self.per_class[gt_class[&g] as usize - 1].fn_ += 1;
        }
        for (&p, &area) in pred_area.iter().filter(|(p, _)| !matched_pred.contains(*p)) {
            let on_void = inter.get(&(VOID, p)).copied().unwrap_or(0);
            if on_void as f64 / area as f64 > 0.5 {
                continue;
            }
            self.per_class[pred_class[&p] as usize - 1].fp += 1;
        }
        Ok(())
    }
}

/// Which classes count as things; the rest are stuff.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassSplit {
    things: BTreeSet<u32>,
}

impl ClassSplit {
    pub fn all_stuff() -> Self {
        Self::default()
    }

    pub fn from_things(things: impl IntoIterator<Item = u32>) -> Self {
        Self { things: things.into_iter().collect() }
    }

    pub fn is_thing(&self, class: usize) -> bool {
        self.things.contains(&(class as u32))
    }
}

/// Panoptic quality for one pair of maps.
pub fn panoptic_quality(
    pred: &PanopticLabelMap,
    gt: &PanopticLabelMap,
    num_classes: usize,
    split: &ClassSplit,
) -> Result<MetricReport> {
    let mut stats = PanopticStats::new(num_classes);
    stats.add(pred, gt)?;
    Ok(MetricReport::from_parts(num_classes, None, Some(&stats), split))
}

/// One segment per class present in the image, ids equal to class ids.
pub fn semantic_to_stuff_segments(map: &SemanticLabelMap) -> PanopticLabelMap {
    let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in &map.labels {
        if l != VOID {
            *areas.entry(l).or_default() += 1;
        }
    }
    let segments = areas
        .into_iter()
        .map(|(class, area)| crate::inference::PanopticSegment { id: class, class, area })
        .collect();
    PanopticLabelMap { height: map.height, width: map.width, segment_ids: map.labels.clone(), segments }
}

/// PQ^St: every class treated as stuff, one segment per class per image.
pub fn pq_stuff_semantic(pred: &SemanticLabelMap, gt: &SemanticLabelMap, num_classes: usize) -> Result<MetricReport> {
    let mut stats = PanopticStats::new(num_classes);
    stats.add(&semantic_to_stuff_segments(pred), &semantic_to_stuff_segments(gt))?;
    Ok(MetricReport::from_parts(num_classes, None, Some(&stats), &ClassSplit::all_stuff()))
}

/// Accumulates mIoU and PQ^St over a dataset of semantic maps.
#[derive(Debug, Clone)]
pub struct SemanticEvaluator {
    confusion: ConfusionMatrix,
    stuff: PanopticStats,
}

impl SemanticEvaluator {
    pub fn new(num_classes: usize) -> Self {
        Self { confusion: ConfusionMatrix::new(num_classes), stuff: PanopticStats::new(num_classes) }
    }

    pub fn add(&mut self, pred: &SemanticLabelMap, gt: &SemanticLabelMap) -> Result<()> {
        self.confusion.add(pred, gt)?;
        self.stuff.add(&semantic_to_stuff_segments(pred), &semantic_to_stuff_segments(gt))
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::from_parts(
            self.confusion.num_classes(),
            Some(&self.confusion),
            Some(&self.stuff),
            &ClassSplit::all_stuff(),
        )
    }
}

/// Accumulates PQ over a dataset of panoptic maps.
#[derive(Debug, Clone)]
pub struct PanopticEvaluator {
    stats: PanopticStats,
    split: ClassSplit,
}

impl PanopticEvaluator {
    pub fn new(num_classes: usize, split: ClassSplit) -> Self {
        Self { stats: PanopticStats::new(num_classes), split }
    }

    pub fn add(&mut self, pred: &PanopticLabelMap, gt: &PanopticLabelMap) -> Result<()> {
        self.stats.add(pred, gt)
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::from_parts(self.stats.num_classes(), None, Some(&self.stats), &self.split)
    }
}

/// Serialized evaluation result. Fields that do not apply to the evaluation
/// performed, or that have no segments, are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub num_classes: usize,
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub pq_things: Option<f64>,
    pub sq_things: Option<f64>,
    pub rq_things: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub sq_stuff: Option<f64>,
    pub rq_stuff: Option<f64>,
    /// Per class `1..=K`; empty when no panoptic evaluation ran.
    pub counts: Vec<ClassCounts>,
}

impl MetricReport {
    pub fn from_parts(
        num_classes: usize,
        confusion: Option<&ConfusionMatrix>,
        stats: Option<&PanopticStats>,
        split: &ClassSplit,
    ) -> Self {
        let (miou, per_class_iou) = match confusion {
            Some(cm) => (cm.miou(), cm.per_class_iou()),
            None => (None, Vec::new()),
        };
        let unpack = |q: Option<(f64, f64, f64)>| match q {
            Some((pq, sq, rq)) => (Some(pq), Some(sq), Some(rq)),
            None => (None, None, None),
        };
        let (pq, sq, rq) = unpack(stats.and_then(|s| s.quality(|_| true)));
        let (pq_things, sq_things, rq_things) = unpack(stats.and_then(|s| s.quality(|c| split.is_thing(c))));
        let (pq_stuff, sq_stuff, rq_stuff) = unpack(stats.and_then(|s| s.quality(|c| !split.is_thing(c))));
        Self {
            num_classes,
            miou,
            per_class_iou,
            pq,
            sq,
            rq,
            pq_things,
            sq_things,
            rq_things,
            pq_stuff,
            sq_stuff,
            rq_stuff,
            counts: stats.map(|s| s.per_class.clone()).unwrap_or_default(),
        }
    }
}

/// Distinct classes emitted by one query slot across a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryClassStat {
    pub query: usize,
    pub classes: Vec<u32>,
    pub count: usize,
}

/// Runs general inference on every prediction and collects, per query, the
/// classes of the segments it contributed to the output. Sorted by count
/// descending, ties by query index.
pub fn query_class_stats(predictions: &[PredictionSet], cfg: &GeneralInferenceConfig) -> Vec<QueryClassStat> {
    let n = predictions.first().map_or(0, PredictionSet::num_queries);
    let mut seen: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for z in predictions {
        let out = general_inference(z, cfg);
        for (seg, queries) in out.map.segments.iter().zip(&out.segment_queries) {
            for &q in queries {
                if q < n {
                    seen[q].insert(seg.class);
                }
            }
        }
    }
    let mut stats: Vec<QueryClassStat> = seen
        .into_iter()
        .enumerate()
        .map(|(query, classes)| QueryClassStat { query, count: classes.len(), classes: classes.into_iter().collect() })
        .collect();
    stats.sort_by(|a, b| b.count.cmp(&a.count).then(a.query.cmp(&b.query)));
    stats
}
