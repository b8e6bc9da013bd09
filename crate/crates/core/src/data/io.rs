//! Dataset directory format.
//!
//! ```text
//! DIR/manifest.json            version, sizes, per-sample files and SHA-256
//! DIR/images/NNNNN.png         8-bit RGB
//! DIR/semantic/NNNNN.png       16-bit grayscale class ids
//! DIR/panoptic/NNNNN.png       16-bit grayscale segment ids
//! DIR/segments/NNNNN.json      segment table {id, class, is_thing, area}
//! ```
//!
//! Images are stored on the 8-bit grid (`k / 255`); generated images are
//! already quantized, so the round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Sample, SceneConfig, SegmentInfo, BACKGROUND_CLASS};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub image: String,
    pub semantic: String,
    pub panoptic: String,
    pub segments: String,
    /// SHA-256 of each file, in the order image, semantic, panoptic, segments.
    pub sha256: [String; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub background_class: u32,
    pub count: usize,
    /// Generator settings when the set is synthetic.
    pub scene: Option<SceneConfig>,
    pub samples: Vec<SampleFiles>,
    /// SHA-256 of this manifest serialized with an empty checksum.
    pub checksum: String,
}

impl Manifest {
    fn compute_checksum(&self) -> Result<String> {
        let body = Manifest { checksum: String::new(), ..self.clone() };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&body)?)))
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png { path: path.to_path_buf(), detail: e.to_string() }
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
        writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    }
    Ok(out)
}

/// 8-bit RGB PNG bytes of an interleaved `[0, 1]` image.
pub fn encode_rgb_png(path: &Path, width: usize, height: usize, image: &[f32]) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// 16-bit grayscale PNG bytes of a label map.
pub fn encode_label_png(path: &Path, width: usize, height: usize, labels: &[u32]) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(labels.len() * 2);
    for &l in labels {
        let v = u16::try_from(l).map_err(|_| png_err(path, format!("label {l} exceeds 16 bits")))?;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    encode_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Decoded> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| png_err(path, e))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Reads an 8-bit RGB PNG into interleaved `[0, 1]` floats.
pub fn decode_rgb_png(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let d = decode_png(path, bytes)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("expected 8-bit RGB, got {:?} {:?}", d.color, d.depth)));
    }
    Ok((d.height, d.width, d.data.iter().map(|&b| f32::from(b) / 255.0).collect()))
}

/// Reads a 16-bit grayscale label PNG.
pub fn decode_label_png(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    let d = decode_png(path, bytes)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Sixteen {
        return Err(png_err(path, format!("expected 16-bit grayscale, got {:?} {:?}", d.color, d.depth)));
    }
    let labels = d.data.chunks_exact(2).map(|c| u32::from(u16::from_be_bytes([c[0], c[1]]))).collect();
    Ok((d.height, d.width, labels))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentTable {
    segments: Vec<SegmentInfo>,
}

/// Writes `samples` under `dir`, replacing any previous dataset files.
pub fn save_dataset(samples: &[Sample], num_classes: usize, scene: Option<&SceneConfig>, dir: &Path) -> Result<Manifest> {
    let (height, width) = samples.first().map_or((0, 0), |s| (s.height, s.width));
    for sub in ["images", "semantic", "panoptic", "segments"] {
        let p = dir.join(sub);
        if p.exists() {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if (s.height, s.width) != (height, width) {
            return Err(Error::Input(format!("sample {i} is {}×{}, expected {height}×{width}", s.height, s.width)));
        }
        s.validate(num_classes)?;
        let image = format!("images/{i:05}.png");
        let semantic = format!("semantic/{i:05}.png");
        let panoptic = format!("panoptic/{i:05}.png");
        let segments = format!("segments/{i:05}.json");
        let files = [
            encode_rgb_png(&dir.join(&image), width, height, &s.image)?,
            encode_label_png(&dir.join(&semantic), width, height, &s.semantic)?,
            encode_label_png(&dir.join(&panoptic), width, height, &s.segment_ids)?,
            serde_json::to_vec_pretty(&SegmentTable { segments: s.segments.clone() })?,
        ];
        for (name, bytes) in [&image, &semantic, &panoptic, &segments].iter().zip(&files) {
            write(&dir.join(name), bytes)?;
        }
        let sha256 = [sha_hex(&files[0]), sha_hex(&files[1]), sha_hex(&files[2]), sha_hex(&files[3])];
        entries.push(SampleFiles { image, semantic, panoptic, segments, sha256 });
    }
    let mut manifest = Manifest {
        version: DATASET_VERSION,
        num_classes,
        height,
        width,
        background_class: BACKGROUND_CLASS,
        count: samples.len(),
        scene: scene.cloned(),
        samples: entries,
        checksum: String::new(),
    };
    manifest.checksum = manifest.compute_checksum()?;
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    write(&path, &text)?;
    Ok(manifest)
}

fn corrupt(path: PathBuf, detail: impl Into<String>) -> Error {
    Error::Corrupt { path, detail: detail.into() }
}

/// Reads and verifies only the manifest of a dataset directory.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let manifest: Manifest =
        serde_json::from_slice(&read(&path)?).map_err(|e| corrupt(path.clone(), e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(corrupt(path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.checksum != manifest.compute_checksum()? {
        return Err(corrupt(path, "manifest checksum mismatch"));
    }
    if manifest.count != manifest.samples.len() {
        return Err(corrupt(path, format!("count {} but {} entries", manifest.count, manifest.samples.len())));
    }
    Ok(manifest)
}

/// Reads and verifies a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = load_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for entry in &manifest.samples {
        let names = [&entry.image, &entry.semantic, &entry.panoptic, &entry.segments];
        let mut files = Vec::with_capacity(4);
        for (name, expected) in names.iter().zip(&entry.sha256) {
            let p = dir.join(name);
            let bytes = read(&p)?;
            if &sha_hex(&bytes) != expected {
                return Err(corrupt(p, "sha256 mismatch"));
            }
            files.push(bytes);
        }
        let (h, w, image) = decode_rgb_png(&dir.join(&entry.image), &files[0])?;
        let (sh, sw, semantic) = decode_label_png(&dir.join(&entry.semantic), &files[1])?;
        let (ph, pw, segment_ids) = decode_label_png(&dir.join(&entry.panoptic), &files[2])?;
        let table: SegmentTable = serde_json::from_slice(&files[3])
            .map_err(|e| corrupt(dir.join(&entry.segments), e.to_string()))?;
        let expected = (manifest.height, manifest.width);
        if (h, w) != expected || (sh, sw) != expected || (ph, pw) != expected {
            return Err(corrupt(dir.join(&entry.image), "image size disagrees with the manifest"));
        }
        let sample = Sample { height: h, width: w, image, semantic, segment_ids, segments: table.segments };
        sample.validate(manifest.num_classes).map_err(|e| corrupt(dir.join(&entry.segments), e.to_string()))?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}

/// Writes a PNG at `path`, for tools that emit visualizations.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, image: &[f32]) -> Result<()> {
    let bytes = encode_rgb_png(path, width, height, image)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(path, e))
}

/// Reads an RGB PNG from disk.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut BufReader::new(file), &mut bytes).map_err(|e| Error::io(path, e))?;
    decode_rgb_png(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn cfg() -> SceneConfig {
        SceneConfig { num_classes: 16, seed: 5, ..SceneConfig::default() }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&cfg(), 12).unwrap();
        let written = save_dataset(&samples, 16, Some(&cfg()), dir.path()).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(loaded, samples);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&cfg(), 3).unwrap();
        save_dataset(&samples, 16, None, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replace("\"num_classes\": 16", "\"num_classes\": 17");
        std::fs::write(&path, text).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Corrupt { path: p, .. }) => assert!(p.ends_with("manifest.json")),
            other => panic!("{other:?}"),
        }

        save_dataset(&samples, 16, None, dir.path()).unwrap();
        let img = dir.path().join("semantic/00001.png");
        let mut bytes = std::fs::read(&img).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        std::fs::write(&img, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Corrupt { path: p, detail }) => {
                assert!(p.ends_with("semantic/00001.png"));
                assert!(detail.contains("sha256"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn count_matches_directory() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&cfg(), 100).unwrap();
        let m = save_dataset(&samples, 16, None, dir.path()).unwrap();
        for sub in ["images", "semantic", "panoptic", "segments"] {
            assert_eq!(std::fs::read_dir(dir.path().join(sub)).unwrap().count(), m.count);
        }
        assert_eq!(m.count, 100);
    }
}
