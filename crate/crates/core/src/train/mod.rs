//! Optimization and the training loop.
//!
//! Per-sample forward and backward passes may run in parallel; gradients are
//! always summed in batch order on one thread, so results do not depend on
//! the number of worker threads.

mod config;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::inference::{semantic_inference, SemanticLabelMap};
use crate::losses::{mask_cls_loss_graph, per_pixel_ce_loss_graph};
use crate::metrics::{MetricReport, SemanticEvaluator};
use crate::model::{
    checkpoint, image_to_chw, init_params, maskformer_forward, per_pixel_baseline_forward, predict, predict_per_pixel,
    ModelConfig, Params, PredictionSet,
};
use crate::segment::TargetSegment;
use crate::tensor::Tensor;

pub use config::{Objective, TrainConfig};
pub use optim::{adamw_step, poly_lr, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

/// File name of the checkpoint written after `iter` iterations.
pub fn checkpoint_name(iter: usize) -> String {
    format!("checkpoint_{iter:06}.ckpt")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    pub miou: Option<f64>,
    pub pq_st: Option<f64>,
}

impl EvalSummary {
    fn from_report(images: usize, r: &MetricReport) -> Self {
        Self { images, miou: r.miou, pq_st: r.pq }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<LogRecord>,
    pub final_eval: Option<EvalSummary>,
    pub checkpoints: Vec<PathBuf>,
}

/// Ground truth used for mask classification: one segment per class present.
pub fn training_targets(sample: &Sample) -> Vec<TargetSegment> {
    sample.semantic_segments()
}

fn sample_image(sample: &Sample) -> Result<Tensor> {
    image_to_chw(&sample.image, sample.height, sample.width)
}

/// Builds the training loss of one sample into `g`.
pub fn sample_loss(g: &mut Graph, params: &Params, cfg: &TrainConfig, sample: &Sample) -> Result<(Var, Vec<Var>)> {
    let bound = params.bind(g, true);
    let image = sample_image(sample)?;
    let loss = match cfg.objective {
        Objective::MaskCls => {
            let out = maskformer_forward(g, &bound, &cfg.model, &image)?;
            let gt = training_targets(sample);
            let mut total: Option<Var> = None;
            for layer in &out.layers {
                // matching runs on detached values
                let z = PredictionSet::from_logits(
                    g.value(layer.class_logits),
                    g.value(layer.mask_logits),
                    cfg.model.image_size,
                )?;
                let sigma = cfg.matcher.assign(&z, &gt, &cfg.losses)?;
                let l = mask_cls_loss_graph(g, layer.class_logits, layer.mask_logits, &gt, &sigma, &cfg.losses)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            total.expect("at least one supervised layer")
        }
        Objective::PerPixel => {
            let scores = per_pixel_baseline_forward(g, &bound, &cfg.model, &image)?;
            let labels: Vec<usize> = sample.semantic.iter().map(|&c| c as usize).collect();
            per_pixel_ce_loss_graph(g, scores, &labels)?
        }
    };
    Ok((loss, bound.vars().to_vec()))
}

/// Loss value and parameter gradients for one sample.
pub fn sample_gradients(params: &Params, cfg: &TrainConfig, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (loss, vars) = match sample_loss(&mut g, params, cfg, sample) {
        // non-finite predictions surface as a NaN loss so the loop can report the sample
        Err(Error::NonFinite(_)) => return Ok((f64::NAN, Vec::new())),
        r => r?,
    };
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, out))
}

/// Semantic prediction for either model family.
pub fn predict_semantic(params: &Params, model: &ModelConfig, sample: &Sample) -> Result<SemanticLabelMap> {
    let image = sample_image(sample)?;
    match model.head {
        crate::model::HeadKind::MaskClassification => Ok(semantic_inference(&predict(params, model, &image)?)),
        _ => {
            let scores = predict_per_pixel(params, model, &image)?;
            let (k, hw) = (model.num_classes, model.pixels());
            let s = scores.data();
            let labels = (0..hw)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..k {
                        if s[c * hw + px] > s[best * hw + px] {
                            best = c;
                        }
                    }
                    best as u32 + 1
                })
                .collect();
            SemanticLabelMap::new(model.image_size.0, model.image_size.1, labels)
        }
    }
}

/// mIoU and PQ^St of semantic predictions over `samples`.
pub fn evaluate(params: &Params, model: &ModelConfig, samples: &[Sample]) -> Result<MetricReport> {
    let preds: Vec<SemanticLabelMap> =
        samples.par_iter().map(|s| predict_semantic(params, model, s)).collect::<Result<_>>()?;
    let mut e = SemanticEvaluator::new(model.num_classes);
    for (p, s) in preds.iter().zip(samples) {
        e.add(p, &s.semantic_map())?;
    }
    Ok(e.report())
}

fn lr_scales(params: &Params, cfg: &TrainConfig) -> Vec<f64> {
    params
        .names()
        .map(|n| if n.starts_with("backbone.") { cfg.backbone_lr_multiplier } else { 1.0 })
        .collect()
}

/// Learning rate at `iter` (0-based): poly decay with optional linear warmup.
pub fn learning_rate(cfg: &TrainConfig, iter: usize) -> f64 {
    let lr = poly_lr(iter, cfg.total_iters, cfg.base_lr, cfg.poly_power);
    if cfg.warmup_iters > 0 && iter < cfg.warmup_iters {
        lr * (iter + 1) as f64 / cfg.warmup_iters as f64
    } else {
        lr
    }
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    iter: usize,
    batch_slot: usize,
    sample_index: usize,
    loss: f64,
    batch: &'a [usize],
    batch_losses: &'a [f64],
}

struct Output {
    dir: PathBuf,
    log: std::io::BufWriter<std::fs::File>,
}

impl Output {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        let path = dir.join(LOG_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), log: std::io::BufWriter::new(file) })
    }

    fn record(&mut self, r: &LogRecord) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        serde_json::to_writer(&mut self.log, r)?;
        self.log.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        self.log.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Trains from `init_params(cfg.model, cfg.seed)` on `train`, evaluating on
/// `eval`. With `out`, writes the config, the JSONL log and checkpoints.
pub fn train_loop(cfg: &TrainConfig, train: &[Sample], eval: &[Sample], out: Option<&Path>) -> Result<TrainOutcome> {
    let params = init_params(&cfg.model, cfg.seed)?;
    train_from(cfg, params, train, eval, out)
}

/// Like [`train_loop`] but starting from given parameters.
pub fn train_from(
    cfg: &TrainConfig,
    mut params: Params,
    train: &[Sample],
    eval: &[Sample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let (h, w) = cfg.model.image_size;
    for (i, s) in train.iter().chain(eval).enumerate() {
        if !cfg.augment && (s.height, s.width) != (h, w) {
            return Err(Error::Input(format!("sample {i} is {}×{}, model expects {h}×{w}", s.height, s.width)));
        }
        if let Some(&c) = s.semantic.iter().find(|&&c| c == 0 || c as usize > cfg.model.num_classes) {
            return Err(Error::Input(format!("sample {i} has class {c} outside 1..={}", cfg.model.num_classes)));
        }
    }
    let mut output = out.map(|d| Output::create(d, cfg)).transpose()?;
    let echo = cfg.to_text();
    let scales = lr_scales(&params, cfg);
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.total_iters);
    let mut checkpoints = Vec::new();
    let mut final_eval = None;

    for iter in 0..cfg.total_iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut seeds = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
            seeds.push(rng.gen::<u64>());
        }
        let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&idx, &seed)| {
                if cfg.augment {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    let s = augment(&train[idx], &cfg.augmentation, &mut r);
                    sample_gradients(&params, cfg, &s)
                } else {
                    sample_gradients(&params, cfg, &train[idx])
                }
            })
            .collect();
        let mut losses = Vec::with_capacity(batch.len());
        let mut total: Option<Vec<Tensor>> = None;
        for r in results {
            let (loss, grads) = r?;
            losses.push(loss);
            if !loss.is_finite() {
                continue;
            }
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        if let Some(slot) = losses.iter().position(|l| !l.is_finite()) {
            let detail = format!("loss {} at iteration {} (batch slot {slot}, sample {})", losses[slot], iter + 1, batch[slot]);
            if let Some(o) = &output {
                let path = o.dir.join("diagnostic.json");
                let d = Diagnostic {
                    iter: iter + 1,
                    batch_slot: slot,
                    sample_index: batch[slot],
                    loss: losses[slot],
                    batch: &batch,
                    batch_losses: &losses,
                };
                // serde_json writes non-finite floats as null
                std::fs::write(&path, serde_json::to_vec_pretty(&d)?).map_err(|e| Error::io(&path, e))?;
            }
            return Err(Error::NonFinite(detail));
        }
        let mut grads = total.expect("non-empty batch");
        let n = batch.len() as f64;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v /= n;
            }
        }
        clip(&mut grads, cfg.grad_clip_norm);
        let lr = learning_rate(cfg, iter);
        adamw_step(&mut params, &grads, &mut state, lr, cfg.weight_decay, &scales)?;

        let done = iter + 1;
        let is_last = done == cfg.total_iters;
        let eval_now = !eval.is_empty() && (is_last || (cfg.eval_every > 0 && done % cfg.eval_every == 0));
        let summary = if eval_now {
            let r = evaluate(&params, &cfg.model, eval)?;
            Some(EvalSummary::from_report(eval.len(), &r))
        } else {
            None
        };
        if is_last {
            final_eval = summary;
        }
        let record = LogRecord { iter: done, lr, loss: losses.iter().sum::<f64>() / n, eval: summary };
        if let Some(o) = &mut output {
            o.record(&record)?;
            if is_last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                let path = o.dir.join(checkpoint_name(done));
                checkpoint::save(&path, &echo, &params)?;
                checkpoints.push(path);
            }
        }
        log.push(record);
    }
    Ok(TrainOutcome { params, log, final_eval, checkpoints })
}
