use super::params::{Bound, Initializer};
use super::ModelConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};

/// Outputs of the pixel-level module.
#[derive(Debug, Clone, Copy)]
pub struct PixelFeatures {
    /// `F`: the lowest-resolution backbone map, `[C_last, H/s, W/s]`.
    pub low_res: Var,
    /// `E_pixel`: `[C_E, H, W]`.
    pub pixel_embeddings: Var,
}

pub(super) fn init(init: &mut Initializer, config: &ModelConfig) -> Result<()> {
    let chans = &config.backbone_channels;
    let d = config.mask_dim;
    let mut prev = 3;
    for (s, &c) in chans.iter().enumerate() {
        init.conv(&format!("backbone.{s}"), c, prev, 3)?;
        for i in 1..config.backbone_depth {
            init.conv(&format!("backbone.{s}.{i}"), c, c, 3)?;
        }
        prev = c;
    }
    let top = chans.len() - 1;
    init.conv("pixel_decoder.top", d, chans[top], 3)?;
    init.norm("pixel_decoder.top.norm", d)?;
    for level in (0..top).rev() {
        init.conv(&format!("pixel_decoder.lateral.{level}"), d, chans[level], 1)?;
        init.conv(&format!("pixel_decoder.fuse.{level}"), d, d, 3)?;
        init.norm(&format!("pixel_decoder.fuse.{level}.norm"), d)?;
    }
    init.conv("pixel_decoder.lateral.image", d, 3, 3)?;
    init.norm("pixel_decoder.full.norm", d)?;
    init.conv("pixel_decoder.out", config.mask_dim, d, 1)
}

fn conv_bias(g: &mut Graph, p: &Bound, prefix: &str, x: Var, kernel: usize, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = if kernel == 3 { g.conv3x3(x, w, stride)? } else { g.conv1x1(x, w)? };
    g.bias_add(y, b, 0)
}

/// Layer norm over channels of a `[C, H, W]` map followed by relu.
fn norm_relu(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, 0)?;
    let n = g.bias_mul(n, p.var(&format!("{prefix}.gain"))?, 0)?;
    let n = g.bias_add(n, p.var(&format!("{prefix}.bias"))?, 0)?;
    g.relu(n)
}

/// Backbone plus FPN-style pixel decoder.
///
/// Each backbone stage is a stride-2 3×3 convolution followed by
/// `backbone_depth − 1` stride-1 ones, all with relu. The decoder
/// starts from a 3×3 convolution of the coarsest map, then at every finer
/// level upsamples 2×, adds the 1×1-projected lateral map and fuses with a
/// 3×3 convolution, channel layer norm and relu. The last step reaches full
/// resolution with a 3×3 projection of the input image as the lateral
/// (layer norm and relu, no fusion convolution), and a final 1×1 convolution
/// gives `E_pixel`.
pub fn pixel_module_forward(g: &mut Graph, p: &Bound, config: &ModelConfig, image: Var) -> Result<PixelFeatures> {
    let mut features = Vec::with_capacity(config.backbone_channels.len());
    let mut x = image;
    for s in 0..config.backbone_channels.len() {
        let y = conv_bias(g, p, &format!("backbone.{s}"), x, 3, 2)?;
        x = g.relu(y)?;
        for i in 1..config.backbone_depth {
            let y = conv_bias(g, p, &format!("backbone.{s}.{i}"), x, 3, 1)?;
            x = g.relu(y)?;
        }
        features.push(x);
    }
    let top = features.len() - 1;
    let y = conv_bias(g, p, "pixel_decoder.top", features[top], 3, 1)?;
    let mut y = norm_relu(g, p, "pixel_decoder.top.norm", y)?;
    for level in (0..top).rev() {
        let up = g.upsample2x(y)?;
        let lateral = conv_bias(g, p, &format!("pixel_decoder.lateral.{level}"), features[level], 1, 1)?;
        let sum = g.add(up, lateral)?;
        let fused = conv_bias(g, p, &format!("pixel_decoder.fuse.{level}"), sum, 3, 1)?;
        y = norm_relu(g, p, &format!("pixel_decoder.fuse.{level}.norm"), fused)?;
    }
    // full resolution: a 3×3 projection of the image itself is the lateral
    let up = g.upsample2x(y)?;
    let lateral = conv_bias(g, p, "pixel_decoder.lateral.image", image, 3, 1)?;
    let sum = g.add(up, lateral)?;
    let y = norm_relu(g, p, "pixel_decoder.full.norm", sum)?;
    let pixel_embeddings = conv_bias(g, p, "pixel_decoder.out", y, 1, 1)?;
    Ok(PixelFeatures { low_res: features[top], pixel_embeddings })
}
