//! Training-time augmentation: scale jitter, horizontal flip, crop or pad,
//! color jitter. Label maps are only ever resampled with nearest neighbor.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, BACKGROUND_CLASS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Maximum absolute brightness shift; contrast varies by the same
    /// fraction around 1.
    pub color_jitter: f64,
    /// Output `(H, W)`.
    pub crop: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale_min: 0.5, scale_max: 2.0, flip_prob: 0.5, color_jitter: 0.1, crop: (32, 32) }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Offset of the output window inside the scaled image; negative values
    /// pad with background.
    pub offset: (isize, isize),
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentParams {
    /// Scale 1, no flip, centered crop, no color change.
    pub fn identity(sample: &Sample, crop: (usize, usize)) -> Self {
        Self {
            scale: 1.0,
            flip: false,
            offset: centered(sample.height, crop.0, sample.width, crop.1),
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

fn centered(h: usize, ch: usize, w: usize, cw: usize) -> (isize, isize) {
    ((h as isize - ch as isize) / 2, (w as isize - cw as isize) / 2)
}

fn draw_offset<R: Rng>(rng: &mut R, scaled: usize, crop: usize) -> isize {
    if scaled >= crop {
        rng.gen_range(0..=(scaled - crop) as isize)
    } else {
        -rng.gen_range(0..=(crop - scaled) as isize)
    }
}

/// Samples parameters from `cfg` and applies them.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let scale = if cfg.scale_max > cfg.scale_min { rng.gen_range(cfg.scale_min..cfg.scale_max) } else { cfg.scale_min };
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let sh = scaled_len(sample.height, scale);
    let sw = scaled_len(sample.width, scale);
    let offset = (draw_offset(rng, sh, cfg.crop.0), draw_offset(rng, sw, cfg.crop.1));
    let j = cfg.color_jitter as f32;
    let (brightness, contrast) =
        if j > 0.0 { (rng.gen_range(-j..j), 1.0 + rng.gen_range(-j..j)) } else { (0.0, 1.0) };
    augment_with(sample, &AugmentParams { scale, flip, offset, brightness, contrast }, cfg.crop)
}

fn scaled_len(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Applies concrete parameters, in order: scale, flip, crop/pad, color.
pub fn augment_with(sample: &Sample, p: &AugmentParams, crop: (usize, usize)) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let sh = scaled_len(h, p.scale);
    let sw = scaled_len(w, p.scale);
    let (ch, cw) = crop;

    // padding needs a background segment id distinct from every existing one
    let pad_id = sample.segments.iter().find(|s| s.class == BACKGROUND_CLASS).map_or_else(
        || sample.segments.iter().map(|s| s.id).max().unwrap_or(0) + 1,
        |s| s.id,
    );
    let mut classes: BTreeMap<u32, u32> = sample.segments.iter().map(|s| (s.id, s.class)).collect();
    classes.insert(pad_id, BACKGROUND_CLASS);

    let mut image = vec![0f32; ch * cw * 3];
    let mut semantic = vec![BACKGROUND_CLASS; ch * cw];
    let mut segment_ids = vec![pad_id; ch * cw];
    for y in 0..ch {
        let sy = y as isize + p.offset.0;
        for x in 0..cw {
            let sx = x as isize + p.offset.1;
            let out = y * cw + x;
            if sy < 0 || sx < 0 || sy >= sh as isize || sx >= sw as isize {
                continue;
            }
            let sx = if p.flip { sw - 1 - sx as usize } else { sx as usize };
            // nearest neighbor in the original grid
            let oy = (((sy as f64 + 0.5) * h as f64 / sh as f64) as usize).min(h - 1);
            let ox = (((sx as f64 + 0.5) * w as f64 / sw as f64) as usize).min(w - 1);
            let src = oy * w + ox;
            semantic[out] = sample.semantic[src];
            segment_ids[out] = sample.segment_ids[src];
            for c in 0..3 {
                image[out * 3 + c] = sample.image[src * 3 + c];
            }
        }
    }
    if p.brightness != 0.0 || p.contrast != 1.0 {
        for v in image.iter_mut() {
            *v = ((*v - 0.5) * p.contrast + 0.5 + p.brightness).clamp(0.0, 1.0);
        }
    }
    let mut out = Sample { height: ch, width: cw, image, semantic, segment_ids, segments: Vec::new() };
    out.rebuild_segments(&classes);
    out
}
