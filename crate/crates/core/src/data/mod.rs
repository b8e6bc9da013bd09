//! Synthetic many-class scenes.
//!
//! Each scene is a textured background plus a handful of shapes drawn in
//! z-order. A shape's class is determined by its kind (circle, rectangle,
//! triangle, stripe; also drawn as a texture) and its palette color, so the
//! number of classes can grow to several hundred while every class stays
//! visually distinct. Class 1 is the background.

mod augment;
mod io;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{PanopticLabelMap, PanopticSegment, SemanticLabelMap};
use crate::metrics::ClassSplit;
use crate::segment::TargetSegment;

pub use augment::{augment, augment_with, AugmentConfig, AugmentParams};
pub use io::{
    decode_label_png, decode_rgb_png, encode_label_png, encode_rgb_png, load_dataset, load_manifest, read_rgb_png, save_dataset,
    write_rgb_png, Manifest, SampleFiles, DATASET_VERSION,
};

pub const SHAPE_KINDS: usize = 4;
/// Largest palette the generator supports; one object class per entry.
pub const MAX_PALETTE: usize = 512;
pub const BACKGROUND_CLASS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    Stripe,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; SHAPE_KINDS] =
        [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Stripe];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_classes: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { num_classes: 16, shapes_per_image: (1, 4), image_size: (32, 32), seed: 0 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("scenes need at least 2 classes".into()));
        }
        let capacity = 1 + MAX_PALETTE;
        if self.num_classes > capacity {
            return Err(Error::Config(format!(
                "{} classes exceed the scheme capacity of {capacity}",
                self.num_classes
            )));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo > hi {
            return Err(Error::Config(format!("empty shape range {lo}..={hi}")));
        }
        let (h, w) = self.image_size;
        if h < 4 || w < 4 {
            return Err(Error::Config(format!("image size {h}×{w} is too small")));
        }
        Ok(())
    }

    /// Number of object classes (all but the background).
    pub fn object_classes(&self) -> usize {
        self.num_classes - 1
    }
}

/// Class id of `(kind, palette)`, or `None` when the pair is not in the
/// scheme or lies beyond `num_classes`.
///
/// Palette entry `p` is drawn only as kind `p mod 4`, so every object class
/// has its own color and the kinds cycle through consecutive classes.
pub fn class_of(kind: ShapeKind, palette: usize, num_classes: usize) -> Option<u32> {
    let class = 2 + palette;
    (palette % SHAPE_KINDS == kind as usize && class <= num_classes).then_some(class as u32)
}

/// Inverse of [`class_of`] for object classes.
pub fn scheme_of(class: u32) -> Option<(ShapeKind, usize)> {
    let p = (class as usize).checked_sub(2)?;
    Some((ShapeKind::ALL[p % SHAPE_KINDS], p))
}

/// Every class except the background is a thing.
pub fn class_split(num_classes: usize) -> ClassSplit {
    ClassSplit::from_things(2..=num_classes as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub class: u32,
    pub is_thing: bool,
    pub area: usize,
}

/// One generated image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB in `[0, 1]`, row-major.
    pub image: Vec<f32>,
    /// Class per pixel, `1..=K`.
    pub semantic: Vec<u32>,
    /// Segment id per pixel; every pixel belongs to a segment.
    pub segment_ids: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Instance-level ground truth: one target per panoptic segment.
    pub fn target_segments(&self) -> Vec<TargetSegment> {
        self.segments
            .iter()
            .map(|s| {
                let mask = self.segment_ids.iter().map(|&v| if v == s.id { 1.0 } else { 0.0 }).collect();
                TargetSegment { class: s.class as usize, mask }
            })
            .collect()
    }

    /// Semantic ground truth: one target per class present, ordered by class.
    pub fn semantic_segments(&self) -> Vec<TargetSegment> {
        let mut by_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (px, &c) in self.semantic.iter().enumerate() {
            by_class.entry(c).or_insert_with(|| vec![0.0; self.pixels()])[px] = 1.0;
        }
        by_class.into_iter().map(|(c, mask)| TargetSegment { class: c as usize, mask }).collect()
    }

    pub fn semantic_map(&self) -> SemanticLabelMap {
        SemanticLabelMap {
            height: self.height,
            width: self.width,
            labels: self.semantic.clone(),
            scores: None,
        }
    }

    pub fn panoptic_map(&self) -> PanopticLabelMap {
        PanopticLabelMap {
            height: self.height,
            width: self.width,
            segment_ids: self.segment_ids.clone(),
            segments: self
                .segments
                .iter()
                .map(|s| PanopticSegment { id: s.id, class: s.class, area: s.area })
                .collect(),
        }
    }

    /// Checks partition, area and semantic consistency.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let hw = self.pixels();
        if self.image.len() != hw * 3 || self.semantic.len() != hw || self.segment_ids.len() != hw {
            return Err(Error::Input("sample buffers disagree with its size".into()));
        }
        let mut by_id = BTreeMap::new();
        for s in &self.segments {
            if s.class == 0 || s.class as usize > num_classes {
                return Err(Error::Input(format!("segment {} has class {} outside 1..={num_classes}", s.id, s.class)));
            }
            if s.is_thing != (s.class != BACKGROUND_CLASS) {
                return Err(Error::Input(format!("segment {} has the wrong thing flag", s.id)));
            }
            if by_id.insert(s.id, (s.class, 0usize)).is_some() {
                return Err(Error::Input(format!("segment id {} repeated", s.id)));
            }
        }
        for (px, &id) in self.segment_ids.iter().enumerate() {
            let entry = by_id
                .get_mut(&id)
                .ok_or_else(|| Error::Input(format!("pixel {px} has undeclared segment {id}")))?;
            if entry.0 != self.semantic[px] {
                return Err(Error::Input(format!("pixel {px}: semantic {} vs segment class {}", self.semantic[px], entry.0)));
            }
            entry.1 += 1;
        }
        for s in &self.segments {
            if by_id[&s.id].1 != s.area || s.area == 0 {
                return Err(Error::Input(format!("segment {} area {} vs {} pixels", s.id, s.area, by_id[&s.id].1)));
            }
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Rebuilds the segment table from the per-pixel maps, renumbering ids
    /// densely in order of first appearance of the old ids' table order.
    pub(crate) fn rebuild_segments(&mut self, classes: &BTreeMap<u32, u32>) {
        let mut area: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in &self.segment_ids {
            *area.entry(id).or_default() += 1;
        }
        let mut renumber = BTreeMap::new();
        let mut segments = Vec::new();
        for (&old, &count) in &area {
            let id = segments.len() as u32 + 1;
            renumber.insert(old, id);
            let class = classes[&old];
            segments.push(SegmentInfo { id, class, is_thing: class != BACKGROUND_CLASS, area: count });
        }
        for v in self.segment_ids.iter_mut() {
            *v = renumber[v];
        }
        self.segments = segments;
    }
}

/// Color of palette entry `p`.
fn palette_color(p: usize) -> [f32; 3] {
    // Hues spread by the golden angle, so entries whose indices differ by a
    // Fibonacci number (3, 5, 8, 13, 21, ...) land close in hue. Brightness
    // follows p mod 3 and saturation (p / 3) mod 2, which separates every
    // such neighbor in at least one of the two.
    let hue = (p as f64 * 0.618_033_988_75).fract();
    let value = [0.95, 0.75, 0.55][p % 3];
    let saturation = [0.9, 0.6][(p / 3) % 2];
    hsv_to_rgb(hue, saturation, value)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Texture of shape kind `kind` at pixel `(y, x)`: a brightness offset in
/// `[-0.06, 0.06]`. Flat, horizontal bands, vertical bands or a checkerboard,
/// so the kind is visible locally as well as from the outline. The amplitude
/// stays well below the brightness gap between palette levels.
fn texture(kind: ShapeKind, y: usize, x: usize) -> f32 {
    let on = match kind {
        ShapeKind::Circle => return 0.0,
        ShapeKind::Rectangle => (y / 2).is_multiple_of(2),
        ShapeKind::Triangle => (x / 2).is_multiple_of(2),
        ShapeKind::Stripe => (x / 2 + y / 2).is_multiple_of(2),
    };
    if on {
        0.06
    } else {
        -0.06
    }
}

/// Quantizes to the 8-bit grid so images survive PNG storage exactly.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn inside(kind: ShapeKind, y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    match kind {
        ShapeKind::Circle => dy * dy + dx * dx <= 1.0,
        ShapeKind::Rectangle => dy.abs() <= 0.8 && dx.abs() <= 0.8,
        // apex at the top, base at the bottom
        ShapeKind::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
        // thin diagonal band
        ShapeKind::Stripe => dy.abs() <= 1.0 && dx.abs() <= 1.0 && (dy - dx).abs() <= 0.35,
    }
}

/// Deterministic scene `index` of `cfg`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);

    // background: low-saturation base color with mild noise
    let base: f32 = rng.gen_range(0.25..0.45);
    let tint: [f32; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let mut image = vec![0f32; h * w * 3];
    for px in 0..h * w {
        let n: f32 = rng.gen_range(-0.04..0.04);
        for c in 0..3 {
            image[px * 3 + c] = base + tint[c] + n;
        }
    }
    let mut owner = vec![0u32; h * w];
    let mut classes = vec![BACKGROUND_CLASS];

    let count = rng.gen_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let object_classes = cfg.object_classes() as u32;
    let min_dim = h.min(w) as f64;
    for _ in 0..count {
        let class = 2 + rng.gen_range(0..object_classes);
        let (kind, palette) = scheme_of(class).expect("object class");
        let ry = rng.gen_range(0.15..0.32) * min_dim;
        let rx = match kind {
            ShapeKind::Circle => ry,
            _ => rng.gen_range(0.15..0.32) * min_dim,
        };
        let cy = rng.gen_range(ry * 0.5..h as f64 - ry * 0.5);
        let cx = rng.gen_range(rx * 0.5..w as f64 - rx * 0.5);
        let color = palette_color(palette);
        let label = classes.len() as u32;
        classes.push(class);
        for y in 0..h {
            for x in 0..w {
                if inside(kind, y as f64 + 0.5, x as f64 + 0.5, cy, cx, ry, rx) {
                    let px = y * w + x;
                    owner[px] = label;
                    let t = texture(kind, y, x);
                    for c in 0..3 {
                        image[px * 3 + c] = color[c] + t;
                    }
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v = quantize(*v);
    }
    let semantic = owner.iter().map(|&o| classes[o as usize]).collect();
    let class_of_owner: BTreeMap<u32, u32> = classes.iter().enumerate().map(|(i, &c)| (i as u32, c)).collect();
    let mut sample = Sample { height: h, width: w, image, semantic, segment_ids: owner, segments: Vec::new() };
    sample.rebuild_segments(&class_of_owner);
    Ok(sample)
}

/// Scenes `0..count` of `cfg`.
pub fn generate_dataset(cfg: &SceneConfig, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_scene(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_scheme_round_trips() {
        for class in 2..200u32 {
            let (kind, palette) = scheme_of(class).unwrap();
            assert_eq!(class_of(kind, palette, 1000), Some(class));
        }
        assert_eq!(scheme_of(1), None);
        assert_eq!(class_of(ShapeKind::Stripe, 3, 16), Some(5));
        assert_eq!(class_of(ShapeKind::Circle, 3, 16), None);
        assert_eq!(class_of(ShapeKind::Stripe, 15, 16), None);
    }

    #[test]
    fn capacity_is_enforced() {
        let cfg = SceneConfig { num_classes: MAX_PALETTE + 2, ..SceneConfig::default() };
        assert!(generate_scene(&cfg, 0).is_err());
        let cfg = SceneConfig { num_classes: 300, ..SceneConfig::default() };
        generate_scene(&cfg, 0).unwrap().validate(300).unwrap();
    }

    #[test]
    fn no_shapes_gives_single_background_segment() {
        let cfg = SceneConfig { shapes_per_image: (0, 0), ..SceneConfig::default() };
        let s = generate_scene(&cfg, 3).unwrap();
        assert_eq!(s.segments, vec![SegmentInfo { id: 1, class: 1, is_thing: false, area: 32 * 32 }]);
        assert!(s.semantic.iter().all(|&c| c == 1));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig { num_classes: 64, seed: 7, ..SceneConfig::default() };
        assert_eq!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 11).unwrap());
        assert_ne!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn invariants_hold_over_many_scenes() {
        let cfg = SceneConfig { num_classes: 64, seed: 1, ..SceneConfig::default() };
        for i in 0..1000 {
            let s = generate_scene(&cfg, i).unwrap();
            s.validate(64).unwrap();
            let cover: Vec<f64> = (0..s.pixels())
                .map(|px| s.target_segments().iter().map(|t| t.mask[px]).sum())
                .collect();
            assert!(cover.iter().all(|&c| c == 1.0));
            let proj = s.panoptic_map().to_semantic();
            assert_eq!(proj.labels, s.semantic);
        }
    }

    #[test]
    fn class_histogram_covers_all_classes() {
        let cfg = SceneConfig { num_classes: 64, seed: 2, ..SceneConfig::default() };
        let mut seen = [false; 65];
        for s in generate_dataset(&cfg, 400).unwrap() {
            for c in s.semantic {
                seen[c as usize] = true;
            }
        }
        assert!(seen[1..].iter().all(|&b| b));
    }

    #[test]
    fn semantic_segments_merge_instances() {
        let cfg = SceneConfig { num_classes: 2, shapes_per_image: (3, 3), seed: 4, ..SceneConfig::default() };
        let s = generate_scene(&cfg, 0).unwrap();
        let sem = s.semantic_segments();
        assert!(sem.len() <= 2);
        let total: f64 = sem.iter().flat_map(|t| t.mask.iter()).sum();
        assert_eq!(total as usize, s.pixels());
        assert!(sem.windows(2).all(|p| p[0].class < p[1].class));
    }

    #[test]
    fn palette_entries_are_distinct() {
        let colors: Vec<[f32; 3]> = (0..64).map(palette_color).collect();
        for i in 0..colors.len() {
            for j in 0..i {
                let d: f32 = (0..3).map(|c| (colors[i][c] - colors[j][c]).abs()).sum();
                assert!(d > 0.02, "{i} {j}");
            }
        }
    }
}
