//! The mask-classification network and the per-pixel baselines.
//!
//! All three share the pixel-level module: a strided convolutional backbone
//! followed by an FPN-style decoder that produces per-pixel embeddings at full
//! input resolution. The mask-classification head adds a transformer decoder
//! over learnable queries and predicts one (class distribution, mask) pair
//! per query.
//!
//! Token-major layouts are used inside the graph: per-segment embeddings are
//! `[N, C_Q]`, class logits `[N, K + 1]` and mask logits `[N, H·W]`.

pub mod checkpoint;
mod decoder;
mod head;
pub mod params;
mod pixel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub use decoder::{sine_position_encoding, transformer_decoder_forward};
pub use head::{segmentation_head, PredictionSet};
pub use params::{Bound, Params};
pub use pixel::{pixel_module_forward, PixelFeatures};

use params::Initializer;

/// Which prediction head sits on top of the pixel-level module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `N` (class, mask) pairs through the transformer decoder.
    MaskClassification,
    /// A 1×1 convolution from pixel embeddings to `K` class scores.
    PerPixel,
    /// Transformer decoder with `N = K` queries whose mask embeddings act as
    /// per-class pixel classifiers, trained with per-pixel cross-entropy.
    PerPixelPlus,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::MaskClassification => "mask_classification",
            HeadKind::PerPixel => "per_pixel",
            HeadKind::PerPixelPlus => "per_pixel_plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask_classification" => Ok(HeadKind::MaskClassification),
            "per_pixel" => Ok(HeadKind::PerPixel),
            "per_pixel_plus" => Ok(HeadKind::PerPixelPlus),
            other => Err(Error::Config(format!("unknown head kind {other}"))),
        }
    }

    pub fn uses_decoder(&self) -> bool {
        !matches!(self, HeadKind::PerPixel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `K`, the number of real classes.
    pub num_classes: usize,
    /// `N`, the number of queries.
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// `C_Q`, per-segment embedding width.
    pub query_dim: usize,
    /// `C_E`, pixel and mask embedding width; also the pixel-decoder width.
    pub mask_dim: usize,
    pub backbone_channels: Vec<usize>,
    /// 3×3 convolutions per backbone stage; the first has stride 2.
    pub backbone_depth: usize,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub use_self_attention: bool,
    pub aux_loss_per_layer: bool,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 150,
            num_queries: 100,
            decoder_layers: 6,
            heads: 4,
            query_dim: 64,
            mask_dim: 64,
            backbone_channels: vec![16, 32, 64],
            backbone_depth: 2,
            image_size: (32, 32),
            use_self_attention: true,
            aux_loss_per_layer: true,
            head: HeadKind::MaskClassification,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 1 {
            return fail("num_classes must be at least 1".into());
        }
        if self.num_queries < 1 {
            return fail("num_queries must be at least 1".into());
        }
        if self.decoder_layers < 1 {
            return fail("decoder_layers must be at least 1".into());
        }
        if self.heads == 0 || !self.query_dim.is_multiple_of(self.heads) {
            return fail(format!("query_dim {} not divisible by heads {}", self.query_dim, self.heads));
        }
        if !self.query_dim.is_multiple_of(4) {
            return fail(format!("query_dim {} must be a multiple of 4 for 2-D sine encodings", self.query_dim));
        }
        if self.mask_dim == 0 {
            return fail("mask_dim must be positive".into());
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return fail("backbone_channels must be non-empty and positive".into());
        }
        if self.backbone_depth == 0 {
            return fail("backbone_depth must be at least 1".into());
        }
        let stride = self.output_stride();
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return fail(format!("image size {h}×{w} not divisible by backbone stride {stride}"));
        }
        if self.head == HeadKind::PerPixelPlus && self.num_queries != self.num_classes {
            return fail(format!(
                "per_pixel_plus needs num_queries == num_classes, got {} and {}",
                self.num_queries, self.num_classes
            ));
        }
        Ok(())
    }

    /// Stride of the lowest-resolution backbone map `F`.
    pub fn output_stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.query_dim
    }

    pub fn pixels(&self) -> usize {
        self.image_size.0 * self.image_size.1
    }
}

/// Deterministic parameter initialization.
///
/// Weights are uniform in `±1/√fan_in`, biases and normalization offsets are
/// zero, normalization gains are one, query content embeddings are exactly
/// zero and query positional encodings are uniform in `±√3` (unit variance).
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    pixel::init(&mut init, config)?;
    match config.head {
        HeadKind::PerPixel => {
            init.conv("baseline.classifier", config.num_classes, config.mask_dim, 1)?;
        }
        HeadKind::MaskClassification | HeadKind::PerPixelPlus => {
            decoder::init(&mut init, config)?;
            head::init(&mut init, config)?;
        }
    }
    Ok(init.params)
}

/// Graph handles for one mask-classification forward pass.
#[derive(Debug, Clone)]
pub struct MaskOutputs {
    /// One entry per supervised decoder layer (only the last when auxiliary
    /// losses are off).
    pub layers: Vec<LayerOutputs>,
    pub pixel_embeddings: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutputs {
    /// `[N, K + 1]`.
    pub class_logits: Var,
    /// `[N, H·W]`.
    pub mask_logits: Var,
}

impl MaskOutputs {
    pub fn last(&self) -> LayerOutputs {
        *self.layers.last().expect("at least one decoder layer")
    }
}

/// Converts an `H × W × 3` interleaved image into a `[3, H, W]` tensor.
pub fn image_to_chw(pixels: &[f32], height: usize, width: usize) -> Result<Tensor> {
    if pixels.len() != height * width * 3 {
        return Err(Error::shape("image", format!("{} values for {height}×{width}×3", pixels.len())));
    }
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for (p, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = f64::from(rgb[c]);
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Full mask-classification forward pass.
pub fn maskformer_forward(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    image: &Tensor,
) -> Result<MaskOutputs> {
    if config.head != HeadKind::MaskClassification {
        return Err(Error::Config(format!("maskformer_forward on a {} model", config.head.as_str())));
    }
    check_image(config, image)?;
    let x = g.constant(image.clone());
    let feats = pixel_module_forward(g, p, config, x)?;
    let queries = transformer_decoder_forward(g, p, config, feats.low_res)?;
    let supervised: Vec<Var> = if config.aux_loss_per_layer {
        queries
    } else {
        vec![*queries.last().expect("decoder_layers >= 1")]
    };
    let pixel_flat = g.reshape(feats.pixel_embeddings, vec![config.mask_dim, config.pixels()])?;
    let mut layers = Vec::with_capacity(supervised.len());
    for q in supervised {
        let (class_logits, mask_logits) = segmentation_head(g, p, q, pixel_flat)?;
        layers.push(LayerOutputs { class_logits, mask_logits });
    }
    Ok(MaskOutputs { layers, pixel_embeddings: feats.pixel_embeddings })
}

/// Per-pixel class scores `[K, H, W]` for either baseline head.
pub fn per_pixel_baseline_forward(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    image: &Tensor,
) -> Result<Var> {
    check_image(config, image)?;
    let (h, w) = config.image_size;
    let x = g.constant(image.clone());
    let feats = pixel_module_forward(g, p, config, x)?;
    match config.head {
        HeadKind::PerPixel => {
            let wgt = p.var("baseline.classifier.weight")?;
            let bias = p.var("baseline.classifier.bias")?;
            let y = g.conv1x1(feats.pixel_embeddings, wgt)?;
            g.bias_add(y, bias, 0)
        }
        HeadKind::PerPixelPlus => {
            let queries = transformer_decoder_forward(g, p, config, feats.low_res)?;
            let q = *queries.last().expect("decoder_layers >= 1");
            let pixel_flat = g.reshape(feats.pixel_embeddings, vec![config.mask_dim, config.pixels()])?;
            let mask_embed = head::mask_embeddings(g, p, q)?;
            let scores = g.matmul(mask_embed, pixel_flat)?;
            g.reshape(scores, vec![config.num_classes, h, w])
        }
        HeadKind::MaskClassification => {
            Err(Error::Config("per_pixel_baseline_forward on a mask_classification model".into()))
        }
    }
}

fn check_image(config: &ModelConfig, image: &Tensor) -> Result<()> {
    let (h, w) = config.image_size;
    if image.shape() != [3, h, w] {
        return Err(Error::shape("model input", format!("expected [3, {h}, {w}], got {:?}", image.shape())));
    }
    Ok(())
}

/// Runs the mask-classification model without gradient tracking and returns
/// probabilities for the final decoder layer.
pub fn predict(params: &Params, config: &ModelConfig, image: &Tensor) -> Result<PredictionSet> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = maskformer_forward(&mut g, &bound, config, image)?;
    let last = out.last();
    PredictionSet::from_logits(
        g.value(last.class_logits),
        g.value(last.mask_logits),
        config.image_size,
    )
}

/// Per-pixel class scores `[K, H, W]` without gradient tracking.
pub fn predict_per_pixel(params: &Params, config: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let scores = per_pixel_baseline_forward(&mut g, &bound, config, image)?;
    Ok(g.value(scores).clone())
}
