//! Training configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! base_lr = 0.0001
//! model.num_queries = 100
//! model.backbone_channels = 16,32,64
//! losses.lambda_focal = 20
//! ```
//!
//! Every key is optional on input (missing keys keep their defaults) and
//! unknown keys are rejected. [`TrainConfig::to_text`] emits every key in a
//! fixed order; that text is echoed into checkpoints.

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::inference::{GeneralInferenceConfig, Task};
use crate::losses::LossWeights;
use crate::matching::Matcher;
use crate::model::{HeadKind, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaskCls,
    PerPixel,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::MaskCls => "mask_cls",
            Objective::PerPixel => "per_pixel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask_cls" => Ok(Objective::MaskCls),
            "per_pixel" => Ok(Objective::PerPixel),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub matcher: Matcher,
    pub objective: Objective,
    /// Learning-rate multiplier for `backbone.*` parameters.
    pub backbone_lr_multiplier: f64,
    /// Linear warmup length; 0 disables it.
    pub warmup_iters: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip_norm: f64,
    /// Evaluate every this many iterations (and at the end); 0 only at the end.
    pub eval_every: usize,
    /// Images taken from the end of the dataset for evaluation.
    pub eval_holdout: usize,
    /// Write a checkpoint every this many iterations (and at the end); 0 only
    /// at the end.
    pub checkpoint_every: usize,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub inference: GeneralInferenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 1e-4,
            poly_power: 0.9,
            total_iters: 160_000,
            batch_size: 16,
            seed: 0,
            matcher: Matcher::Bipartite,
            objective: Objective::MaskCls,
            backbone_lr_multiplier: 1.0,
            warmup_iters: 0,
            grad_clip_norm: 0.0,
            eval_every: 0,
            eval_holdout: 0,
            checkpoint_every: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            inference: GeneralInferenceConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for `num_classes` classes on 32×32 images.
    ///
    /// A single three-conv backbone stage keeps the transformer memory at
    /// stride 2 (16×16 tokens). Deeper strides leave too few tokens on a
    /// 32×32 image and small shapes are misclassified. Weight decay is raised
    /// to curb overfitting of the classifier on a few hundred images.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            base_lr: 2e-3,
            weight_decay: 0.05,
            total_iters: 5000,
            batch_size: 8,
            eval_every: 1000,
            checkpoint_every: 0,
            augment: false,
            model: ModelConfig {
                num_classes,
                num_queries: 8,
                decoder_layers: 2,
                heads: 2,
                query_dim: 32,
                mask_dim: 32,
                backbone_channels: vec![32],
                backbone_depth: 3,
                image_size: (32, 32),
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn pair((a, b): (usize, usize)) -> String {
    format!("{a},{b}")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_iters < 1 {
            return fail("total_iters must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
            ("backbone_lr_multiplier", self.backbone_lr_multiplier),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        self.model.validate()?;
        self.losses.validate()?;
        match (self.objective, self.model.head) {
            (Objective::MaskCls, HeadKind::MaskClassification) => {}
            (Objective::PerPixel, HeadKind::PerPixel | HeadKind::PerPixelPlus) => {}
            (o, h) => return fail(format!("objective {} does not fit head {}", o.as_str(), h.as_str())),
        }
        if self.objective == Objective::MaskCls && self.matcher == Matcher::Fixed && self.model.num_queries != self.model.num_classes {
            return fail(format!(
                "fixed matching needs num_queries == num_classes, got {} and {}",
                self.model.num_queries, self.model.num_classes
            ));
        }
        let a = &self.augmentation;
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max) {
            return fail(format!("invalid scale range {}..{}", a.scale_min, a.scale_max));
        }
        if self.augment && a.crop != self.model.image_size {
            return fail(format!("augmentation crop {:?} differs from model image size {:?}", a.crop, self.model.image_size));
        }
        Ok(())
    }

    /// Every key in a fixed order, one per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.losses;
        let a = &self.augmentation;
        let i = &self.inference;
        let rows: Vec<(&str, String)> = vec![
            ("base_lr", self.base_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("matcher", self.matcher.as_str().into()),
            ("objective", self.objective.as_str().into()),
            ("backbone_lr_multiplier", self.backbone_lr_multiplier.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_holdout", self.eval_holdout.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("augment", self.augment.to_string()),
            ("augment.scale_min", a.scale_min.to_string()),
            ("augment.scale_max", a.scale_max.to_string()),
            ("augment.flip_prob", a.flip_prob.to_string()),
            ("augment.color_jitter", a.color_jitter.to_string()),
            ("augment.crop", pair(a.crop)),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.num_queries", m.num_queries.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.query_dim", m.query_dim.to_string()),
            ("model.mask_dim", m.mask_dim.to_string()),
            ("model.backbone_channels", list(&m.backbone_channels)),
            ("model.backbone_depth", m.backbone_depth.to_string()),
            ("model.image_size", pair(m.image_size)),
            ("model.use_self_attention", m.use_self_attention.to_string()),
            ("model.aux_loss_per_layer", m.aux_loss_per_layer.to_string()),
            ("model.head", m.head.as_str().into()),
            ("losses.lambda_focal", l.lambda_focal.to_string()),
            ("losses.lambda_dice", l.lambda_dice.to_string()),
            ("losses.no_object_weight", l.no_object_weight.to_string()),
            ("losses.focal_gamma", l.focal_gamma.to_string()),
            ("losses.focal_alpha", l.focal_alpha.to_string()),
            ("losses.dice_epsilon", l.dice_epsilon.to_string()),
            ("inference.conf_threshold", i.conf_threshold.to_string()),
            ("inference.overlap_keep", i.overlap_keep.to_string()),
            ("inference.mask_bin", i.mask_bin.to_string()),
            (
                "inference.task",
                match i.task {
                    Task::Panoptic => "panoptic".into(),
                    Task::Semantic => "semantic".into(),
                },
            ),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses text on top of the defaults and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        fn nums(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        fn two(key: &str, v: &str) -> Result<(usize, usize)> {
            match nums(key, v)?.as_slice() {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::Config(format!("{key}: expected two comma-separated values"))),
            }
        }
        let m = &mut self.model;
        let l = &mut self.losses;
        let a = &mut self.augmentation;
        let i = &mut self.inference;
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "total_iters" => self.total_iters = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "matcher" => self.matcher = Matcher::parse(value)?,
            "objective" => self.objective = Objective::parse(value)?,
            "backbone_lr_multiplier" => self.backbone_lr_multiplier = num(key, value)?,
            "warmup_iters" => self.warmup_iters = num(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_holdout" => self.eval_holdout = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "augment" => self.augment = boolean(key, value)?,
            "augment.scale_min" => a.scale_min = num(key, value)?,
            "augment.scale_max" => a.scale_max = num(key, value)?,
            "augment.flip_prob" => a.flip_prob = num(key, value)?,
            "augment.color_jitter" => a.color_jitter = num(key, value)?,
            "augment.crop" => a.crop = two(key, value)?,
            "model.num_classes" => m.num_classes = num(key, value)?,
            "model.num_queries" => m.num_queries = num(key, value)?,
            "model.decoder_layers" => m.decoder_layers = num(key, value)?,
            "model.heads" => m.heads = num(key, value)?,
            "model.query_dim" => m.query_dim = num(key, value)?,
            "model.mask_dim" => m.mask_dim = num(key, value)?,
            "model.backbone_channels" => m.backbone_channels = nums(key, value)?,
            "model.backbone_depth" => m.backbone_depth = num(key, value)?,
            "model.image_size" => m.image_size = two(key, value)?,
            "model.use_self_attention" => m.use_self_attention = boolean(key, value)?,
            "model.aux_loss_per_layer" => m.aux_loss_per_layer = boolean(key, value)?,
            "model.head" => m.head = HeadKind::parse(value)?,
            "losses.lambda_focal" => l.lambda_focal = num(key, value)?,
            "losses.lambda_dice" => l.lambda_dice = num(key, value)?,
            "losses.no_object_weight" => l.no_object_weight = num(key, value)?,
            "losses.focal_gamma" => l.focal_gamma = num(key, value)?,
            "losses.focal_alpha" => l.focal_alpha = num(key, value)?,
            "losses.dice_epsilon" => l.dice_epsilon = num(key, value)?,
            "inference.conf_threshold" => i.conf_threshold = num(key, value)?,
            "inference.overlap_keep" => i.overlap_keep = num(key, value)?,
            "inference.mask_bin" => i.mask_bin = num(key, value)?,
            "inference.task" => {
                i.task = match value {
                    "panoptic" => Task::Panoptic,
                    "semantic" => Task::Semantic,
                    other => return Err(Error::Config(format!("{key}: unknown task {other:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_constants() {
        let text = TrainConfig::default().to_text();
        for line in [
            "model.num_queries = 100",
            "model.decoder_layers = 6",
            "losses.lambda_focal = 20",
            "losses.lambda_dice = 1",
            "losses.no_object_weight = 0.1",
            "inference.conf_threshold = 0.8",
            "base_lr = 0.0001",
            "weight_decay = 0.0001",
            "poly_power = 0.9",
        ] {
            assert!(text.lines().any(|l| l == line), "missing {line}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.model.backbone_channels = vec![8, 16, 24];
        cfg.model.num_classes = 16;
        cfg.losses.focal_alpha = 0.3;
        cfg.base_lr = 3.5e-4;
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_text("learning_rate = 1").is_err());
        assert!(TrainConfig::from_text("batch_size = -1").is_err());
        assert!(TrainConfig::from_text("batch_size").is_err());
        assert!(TrainConfig::from_text("total_iters = 0").is_err());
        assert!(TrainConfig::from_text("matcher = fixed").is_err());
        assert!(TrainConfig::from_text("objective = per_pixel").is_err());
        let ok = TrainConfig::from_text("# comment\n\nobjective = per_pixel\nmodel.head = per_pixel\n").unwrap();
        assert_eq!(ok.objective, Objective::PerPixel);
    }
}
