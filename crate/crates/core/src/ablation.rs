//! Paired training runs that toggle one knob and compare the results.
//!
//! Every run in a comparison uses the same seed, data and remaining
//! configuration, so differences come from the toggled setting alone.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::inference::{compare_inference_strategies, GeneralInferenceConfig};
use crate::matching::Matcher;
use crate::model::{image_to_chw, predict, HeadKind, ModelConfig, Params};
use crate::train::{evaluate, train_loop, Objective, TrainConfig, TrainOutcome};

/// Query counts swept by default.
pub const QUERY_SWEEP: [usize; 4] = [20, 50, 100, 150];

/// Rows of labeled metric values under shared column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// One entry per column; `None` when undefined (no classes observed).
    pub values: Vec<Option<f64>>,
}

impl ComparisonTable {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Self { title: title.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Input(format!("{} values for {} columns", values.len(), self.columns.len())));
        }
        self.rows.push(ComparisonRow { label: label.into(), values });
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Value at (`label`, `column`).
    pub fn value(&self, label: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.row(label)?.values[c]
    }

    /// Right-aligned text rendering with a header rule.
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                std::iter::once(r.label.clone())
                    .chain(r.values.iter().map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))))
                    .collect()
            })
            .collect();
        let header: Vec<String> = std::iter::once(String::new()).chain(self.columns.iter().cloned()).collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| -> String {
            let mut s = format!("{:<w$}", row[0], w = widths[0]);
            for (c, w) in row[1..].iter().zip(&widths[1..]) {
                let _ = write!(s, "  {c:>w$}");
            }
            s.trim_end().to_string()
        };
        let mut out = format!("{}\n{}\n", self.title, line(&header));
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Columns of tables built from training runs.
pub const RUN_COLUMNS: [&str; 3] = ["miou", "pq_st", "final_loss"];

fn run_row(out: &TrainOutcome) -> Vec<Option<f64>> {
    let eval = out.final_eval;
    vec![eval.and_then(|e| e.miou), eval.and_then(|e| e.pq_st), out.log.last().map(|r| r.loss)]
}

/// Trains each labeled configuration, writing its artifacts under
/// `out/<slug>` when `out` is given.
pub fn run_variants(
    title: &str,
    variants: &[(String, TrainConfig)],
    train: &[Sample],
    eval: &[Sample],
    out: Option<&Path>,
) -> Result<(ComparisonTable, Vec<TrainOutcome>)> {
    if eval.is_empty() {
        return Err(Error::Input("comparisons need a non-empty evaluation set".into()));
    }
    let mut table = ComparisonTable::new(title, &RUN_COLUMNS);
    let mut outcomes = Vec::with_capacity(variants.len());
    for (label, cfg) in variants {
        let dir = out.map(|d| d.join(slug(label)));
        let o = train_loop(cfg, train, eval, dir.as_deref())?;
        table.push(label.clone(), run_row(&o))?;
        outcomes.push(o);
    }
    Ok((table, outcomes))
}

fn slug(label: &str) -> String {
    let s: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

/// Fixed (class-indexed) versus bipartite matching with `N = K` queries.
pub fn matching_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [Matcher::Fixed, Matcher::Bipartite]
        .into_iter()
        .map(|m| {
            let mut cfg = base.clone();
            cfg.objective = Objective::MaskCls;
            cfg.model.head = HeadKind::MaskClassification;
            cfg.model.num_queries = cfg.model.num_classes;
            cfg.matcher = m;
            (m.as_str().to_string(), cfg)
        })
        .collect()
}

/// Bipartite-matched mask classification with each query count.
pub fn query_variants(base: &TrainConfig, counts: &[usize]) -> Vec<(String, TrainConfig)> {
    counts
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.matcher = Matcher::Bipartite;
            cfg.model.num_queries = n;
            (format!("N={n}"), cfg)
        })
        .collect()
}

/// One decoder layer, six layers, and six layers without self-attention.
pub fn decoder_depth_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [("1 layer", 1, true), ("6 layers", 6, true), ("6 layers, no self-attention", 6, false)]
        .into_iter()
        .map(|(label, layers, self_attn)| {
            let mut cfg = base.clone();
            cfg.model.decoder_layers = layers;
            cfg.model.use_self_attention = self_attn;
            (label.to_string(), cfg)
        })
        .collect()
}

/// The per-pixel baseline and mask classification with the same backbone,
/// pixel decoder and schedule.
pub fn head_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut per_pixel = base.clone();
    per_pixel.objective = Objective::PerPixel;
    per_pixel.model.head = HeadKind::PerPixel;
    let mut mask = base.clone();
    mask.objective = Objective::MaskCls;
    mask.model.head = HeadKind::MaskClassification;
    mask.matcher = Matcher::Bipartite;
    vec![("per-pixel".to_string(), per_pixel), ("mask classification".to_string(), mask)]
}

/// Semantic inference versus general inference on one trained model.
pub fn inference_table(
    params: &Params,
    model: &ModelConfig,
    samples: &[Sample],
    general: &GeneralInferenceConfig,
) -> Result<ComparisonTable> {
    if model.head != HeadKind::MaskClassification {
        return Err(Error::Config(format!("inference comparison needs a mask_classification model, got {}", model.head.as_str())));
    }
    let preds = samples
        .iter()
        .map(|s| predict(params, model, &image_to_chw(&s.image, s.height, s.width)?))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = samples.iter().map(Sample::semantic_map).collect();
    let cmp = compare_inference_strategies(&preds, &gts, model.num_classes, general)?;
    let mut table = ComparisonTable::new("inference strategy", &["miou", "pq_st"]);
    table.push("semantic inference", vec![cmp.semantic_inference.miou, cmp.semantic_inference.pq])?;
    table.push(
        format!("general inference (conf > {})", cmp.general_conf_threshold),
        vec![cmp.general_inference.miou, cmp.general_inference.pq],
    )?;
    Ok(table)
}

/// mIoU and PQ^St of a trained model as a single-row table.
pub fn eval_table(label: &str, params: &Params, model: &ModelConfig, samples: &[Sample]) -> Result<ComparisonTable> {
    let r = evaluate(params, model, samples)?;
    let mut t = ComparisonTable::new("evaluation", &["miou", "pq_st"]);
    t.push(label, vec![r.miou, r.pq])?;
    Ok(t)
}
