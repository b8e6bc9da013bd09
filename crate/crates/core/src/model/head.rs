use super::params::{Bound, Initializer};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::kernels::sigmoid;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub(super) fn init(init: &mut Initializer, config: &ModelConfig) -> Result<()> {
    let (c, e) = (config.query_dim, config.mask_dim);
    init.linear("head.class", c, config.num_classes + 1)?;
    init.linear("head.mask_mlp.0", c, e)?;
    init.linear("head.mask_mlp.1", e, e)?;
    init.linear("head.mask_mlp.2", e, e)
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

/// `E_mask` `[N, C_E]` from per-segment embeddings through a 2-hidden-layer MLP.
pub(super) fn mask_embeddings(g: &mut Graph, p: &Bound, queries: Var) -> Result<Var> {
    let h = linear(g, p, "head.mask_mlp.0", queries)?;
    let h = g.relu(h)?;
    let h = linear(g, p, "head.mask_mlp.1", h)?;
    let h = g.relu(h)?;
    linear(g, p, "head.mask_mlp.2", h)
}

/// Class logits `[N, K + 1]` and mask logits `[N, H·W]` for one decoder layer.
///
/// `pixel_flat` is `E_pixel` viewed as `[C_E, H·W]`; mask logit `(i, hw)` is
/// the dot product of query `i`'s mask embedding with pixel `hw`'s embedding.
pub fn segmentation_head(g: &mut Graph, p: &Bound, queries: Var, pixel_flat: Var) -> Result<(Var, Var)> {
    let class_logits = linear(g, p, "head.class", queries)?;
    let mask_embed = mask_embeddings(g, p, queries)?;
    let mask_logits = g.matmul(mask_embed, pixel_flat)?;
    Ok((class_logits, mask_logits))
}

/// `N` probability-mask pairs.
///
/// Masks are independent sigmoids and may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `[N, K + 1]`; the last column is the no-object class.
    pub class_probs: Tensor,
    /// `[N, H, W]`.
    pub mask_probs: Tensor,
}

impl PredictionSet {
    pub fn new(class_probs: Tensor, mask_probs: Tensor) -> Result<Self> {
        if class_probs.rank() != 2 || mask_probs.rank() != 3 || class_probs.shape()[0] != mask_probs.shape()[0] {
            return Err(Error::shape(
                "prediction set",
                format!("class {:?} vs mask {:?}", class_probs.shape(), mask_probs.shape()),
            ));
        }
        if class_probs.shape()[1] < 2 {
            return Err(Error::shape("prediction set", "need at least one real class plus no-object"));
        }
        Ok(Self { class_probs, mask_probs })
    }

    /// Row-wise softmax of class logits and sigmoid of mask logits.
    pub fn from_logits(class_logits: &Tensor, mask_logits: &Tensor, (h, w): (usize, usize)) -> Result<Self> {
        let n = class_logits.shape()[0];
        let width = class_logits.shape()[1];
        let mut probs = vec![0.0; n * width];
        for (row, out) in class_logits.data().chunks(width).zip(probs.chunks_mut(width)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - max).exp() / total;
            }
        }
        let masks = mask_logits.map(sigmoid).reshape(vec![n, h, w])?;
        Self::new(Tensor::new(vec![n, width], probs)?, masks)
    }

    pub fn num_queries(&self) -> usize {
        self.class_probs.shape()[0]
    }

    /// `K`, excluding the no-object slot.
    pub fn num_classes(&self) -> usize {
        self.class_probs.shape()[1] - 1
    }

    pub fn height(&self) -> usize {
        self.mask_probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask_probs.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Class distribution of query `i` (length `K + 1`).
    pub fn probs(&self, i: usize) -> &[f64] {
        let w = self.class_probs.shape()[1];
        &self.class_probs.data()[i * w..(i + 1) * w]
    }

    /// Flattened mask of query `i` (length `H·W`).
    pub fn mask(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.mask_probs.data()[i * p..(i + 1) * p]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, maskformer_forward, predict, HeadKind};

    fn config() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            num_queries: 4,
            decoder_layers: 2,
            heads: 2,
            query_dim: 8,
            mask_dim: 8,
            backbone_channels: vec![4, 8, 8],
            image_size: (16, 16),
            head: HeadKind::MaskClassification,
            ..ModelConfig::default()
        }
    }

    fn image() -> Tensor {
        Tensor::from_fn(vec![3, 16, 16], |i| ((i * 37) % 101) as f64 / 101.0)
    }

    #[test]
    fn probabilities_are_normalized_and_masks_bounded() {
        let c = config();
        let params = init_params(&c, 1).unwrap();
        let z = predict(&params, &c, &image()).unwrap();
        for i in 0..z.num_queries() {
            assert!((z.probs(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(z.mask_probs.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert_eq!(z.mask_probs.shape(), &[4, 16, 16]);
    }

    #[test]
    fn orthogonal_mask_embedding_gives_half_everywhere() {
        let mut g = Graph::new();
        let e_mask = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let e_pixel = g.constant(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 5.0]).unwrap());
        let logits = g.matmul(e_mask, e_pixel).unwrap();
        let m = g.sigmoid(logits).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matmul_masks_equal_pixelwise_dot_products() {
        let c = config();
        let params = init_params(&c, 2).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = maskformer_forward(&mut g, &p, &c, &image()).unwrap();
        let last = out.last();
        // independent route: rebuild E_mask from the final queries and dot per pixel
        let e_pixel = g.value(out.pixel_embeddings).clone();
        let logits = g.value(last.mask_logits).clone();
        let e_mask = {
            // recompute the mask MLP on the queries that fed the head
            let mut g2 = Graph::new();
            let p2 = params.bind(&mut g2, false);
            let img = g2.constant(image());
            let feats = crate::model::pixel_module_forward(&mut g2, &p2, &c, img).unwrap();
            let q = crate::model::transformer_decoder_forward(&mut g2, &p2, &c, feats.low_res).unwrap();
            let e = mask_embeddings(&mut g2, &p2, *q.last().unwrap()).unwrap();
            g2.value(e).clone()
        };
        let (ce, hw) = (c.mask_dim, c.pixels());
        for i in 0..c.num_queries {
            for px in 0..hw {
                let dot: f64 = (0..ce).map(|k| e_mask.data()[i * ce + k] * e_pixel.data()[k * hw + px]).sum();
                assert!((dot - logits.data()[i * hw + px]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn n_need_not_equal_k() {
        let c = ModelConfig { num_queries: 7, num_classes: 2, ..config() };
        let params = init_params(&c, 3).unwrap();
        let z = predict(&params, &c, &image()).unwrap();
        assert_eq!(z.num_queries(), 7);
        assert_eq!(z.num_classes(), 2);
    }
}
