//! Unpaired image sets: the synthetic benchmark, split loading and batch sampling.
//!
//! A dataset root holds `{trainA,trainB,val,test}/*.png` plus one
//! `<split>.csv` manifest per split with columns `path,label,gt_mask_path`.
//! Set A (`trainA`) is the unannotated mixed set and set B (`trainB`) the
//! known-healthy set; neither ever carries labels once loaded.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::Tensor;

use crate::batch::ImageBatch;
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Anomalous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "healthy" | "0" | "normal" => Ok(Label::Healthy),
            "anomalous" | "1" | "abnormal" | "diseased" => Ok(Label::Anomalous),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "trainA")]
    TrainA,
    #[serde(rename = "trainB")]
    TrainB,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainA, Split::TrainB, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::TrainA => "trainA",
            Split::TrainB => "trainB",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Training splits never expose labels.
    pub fn is_training(self) -> bool {
        matches!(self, Split::TrainA | Split::TrainB)
    }

    pub fn manifest_path(self, root: &Path) -> PathBuf {
        root.join(format!("{}.csv", self.dir_name()))
    }

    fn code(self) -> u64 {
        match self {
            Split::TrainA => 1,
            Split::TrainB => 2,
            Split::Val => 3,
            Split::Test => 4,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.dir_name() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// One image of a split. Labels of training records are always absent.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRecord {
    path: PathBuf,
    label: Option<Label>,
    gt_mask_path: Option<PathBuf>,
}

impl SampleRecord {
    /// A record without annotation.
    pub fn unlabeled(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            label: None,
            gt_mask_path: None,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn label(&self) -> Option<Label> {
        self.label
    }

    pub fn gt_mask_path(&self) -> Option<&Path> {
        self.gt_mask_path.as_deref()
    }
}

/// Parameters of the synthetic benchmark.
///
/// `n_val` and `n_test` are per-class counts: each evaluation split gets that
/// many healthy and that many lesioned images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub channels: usize,
    pub n_healthy_b: usize,
    pub n_mixed_healthy_a: usize,
    pub n_mixed_anomalous_a: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive range of lesion side lengths in pixels.
    pub lesion_size_range: (usize, usize),
    /// Additive lesion intensity as a fraction of full scale.
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            n_healthy_b: 400,
            n_mixed_healthy_a: 140,
            n_mixed_anomalous_a: 60,
            n_val: 40,
            n_test: 60,
            lesion_size_range: (8, 16),
            lesion_contrast: 0.35,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.image_size == 0 || self.image_size % 64 != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of 64",
                self.image_size
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.n_healthy_b == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("n_healthy_b, n_val and n_test must be positive".into());
        }
        if self.n_mixed_healthy_a + self.n_mixed_anomalous_a == 0 {
            return bad("set A must contain at least one image".into());
        }
        let (lo, hi) = self.lesion_size_range;
        if lo == 0 || lo > hi || 2 * hi >= self.image_size {
            return bad(format!(
                "lesion_size_range ({lo}, {hi}) must satisfy 0 < lo <= hi < image_size/2"
            ));
        }
        if !(self.lesion_contrast > 0.0 && self.lesion_contrast <= 1.0) {
            return bad(format!(
                "lesion_contrast {} must lie in (0, 1]",
                self.lesion_contrast
            ));
        }
        Ok(())
    }

    fn split_counts(&self, split: Split) -> (usize, usize) {
        match split {
            Split::TrainA => (self.n_mixed_healthy_a, self.n_mixed_anomalous_a),
            Split::TrainB => (self.n_healthy_b, 0),
            Split::Val => (self.n_val, self.n_val),
            Split::Test => (self.n_test, self.n_test),
        }
    }
}

/// Pixel `0..=255` to model range: `0 -> -1`, `255 -> 1`.
pub fn normalize_value(v: f64) -> Result<f64> {
    if !(0.0..=255.0).contains(&v) {
        return Err(Error::Range(format!("pixel value {v} outside [0, 255]")));
    }
    Ok(v / 127.5 - 1.0)
}

pub fn normalize_u8(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect()
}

/// Model range back to the nearest 8-bit level, saturating outside `[-1, 1]`.
pub fn denormalize(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ (split.code() << 40) ^ index as u64))
}

/// One synthetic sample before it is written to disk.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub label: Label,
    /// The healthy image the lesion (if any) was injected into.
    pub background: Vec<u8>,
    pub image: Vec<u8>,
    /// Binary `{0, 255}` lesion mask for anomalous samples.
    pub mask: Option<Vec<u8>>,
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth low-frequency background with an elliptical "organ".
fn render_background(size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let cx = s / 2.0 + rng.random_range(-s / 16.0..s / 16.0);
    let cy = s / 2.0 + rng.random_range(-s / 16.0..s / 16.0);
    let rx = s * rng.random_range(0.30..0.36);
    let ry = s * rng.random_range(0.22..0.28);
    let theta: f64 = rng.random_range(-0.3..0.3);
    let organ_level = rng.random_range(0.22..0.28);
    let tex_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();

    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.25;
            for &(kx, ky, phase, amp) in &waves {
                v += amp * (std::f64::consts::TAU * (kx * fx + ky * fy) / s + phase).sin();
            }
            let (dx, dy) = (fx - cx, fy - cy);
            let u = (dx * cos_t + dy * sin_t) / rx;
            let w = (-dx * sin_t + dy * cos_t) / ry;
            let r = (u * u + w * w).sqrt();
            let inside = 1.0 - smoothstep(0.92, 1.08, r);
            let texture = 0.03 * (std::f64::consts::TAU * 3.0 * (fx + 0.5 * fy) / s + tex_phase).sin();
            v += inside * (organ_level + texture);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Renders sample `index` of `split`; a pure function of its arguments.
pub fn render_sample(spec: &DatasetSpec, split: Split, index: usize, label: Label) -> RenderedSample {
    let size = spec.image_size;
    let mut rng = sample_rng(spec.seed, split, index);
    let background = render_background(size, &mut rng);
    if label == Label::Healthy {
        return RenderedSample {
            label,
            image: background.clone(),
            background,
            mask: None,
        };
    }
    let (lo, hi) = spec.lesion_size_range;
    let side = rng.random_range(lo..=hi);
    // keep the patch inside the central organ region when it fits
    let margin = size / 4;
    let span_lo = margin.min(size - side);
    let span_hi = (size - margin).saturating_sub(side).max(span_lo);
    let x0 = rng.random_range(span_lo..=span_hi);
    let y0 = rng.random_range(span_lo..=span_hi);
    let add = (spec.lesion_contrast * 255.0).round() as u16;
    let mut image = background.clone();
    let mut mask = vec![0u8; size * size];
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let i = y * size + x;
            image[i] = (image[i] as u16 + add).min(255) as u8;
            mask[i] = 255;
        }
    }
    RenderedSample {
        label,
        background,
        image,
        mask: Some(mask),
    }
}

/// Label sequence of a split: set A and the evaluation splits interleave
/// classes in a seeded random order.
fn split_labels(spec: &DatasetSpec, split: Split) -> Vec<Label> {
    let (h, a) = spec.split_counts(split);
    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Healthy, h)
        .chain(std::iter::repeat_n(Label::Anomalous, a))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0x5EED ^ split.code()));
    labels.shuffle(&mut rng);
    labels
}

fn save_gray(path: &Path, size: usize, pixels: Vec<u8>, channels: usize) -> Result<()> {
    let res = if channels == 3 {
        let rgb: Vec<u8> = pixels.iter().flat_map(|&p| [p, p, p]).collect();
        RgbImage::from_raw(size as u32, size as u32, rgb)
            .expect("buffer size")
            .save(path)
    } else {
        GrayImage::from_raw(size as u32, size as u32, pixels)
            .expect("buffer size")
            .save(path)
    };
    res.map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Per-split class counts written to `synth.json` next to the manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub spec: DatasetSpec,
    pub splits: BTreeMap<String, SplitCounts>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub healthy: usize,
    pub anomalous: usize,
}

fn write_manifest(path: &Path, rows: &[(String, Option<Label>, Option<String>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(["path", "label", "gt_mask_path"]).map_err(wrap)?;
    for (p, label, mask) in rows {
        w.write_record([
            p.as_str(),
            label.map(Label::as_str).unwrap_or(""),
            mask.as_deref().unwrap_or(""),
        ])
        .map_err(wrap)?;
    }
    w.flush().at(path)
}

/// Writes the synthetic benchmark under `root`.
///
/// Healthy images are smooth textured backgrounds with one elliptical organ;
/// lesioned images add one bright square patch. Lesioned validation and test
/// images get a binary ground-truth mask under `masks/<split>/`.
pub fn generate_synthetic_benchmark(spec: &DatasetSpec, root: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    fs::create_dir_all(root).at(root)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).at(&dir)?;
        let labels = split_labels(spec, split);
        let mut rows = Vec::with_capacity(labels.len());
        let mut counts = SplitCounts {
            healthy: 0,
            anomalous: 0,
        };
        for (i, &label) in labels.iter().enumerate() {
            let sample = render_sample(spec, split, i, label);
            let rel = format!("{}/{i:05}.png", split.dir_name());
            save_gray(&root.join(&rel), spec.image_size, sample.image, spec.channels)?;
            match label {
                Label::Healthy => counts.healthy += 1,
                Label::Anomalous => counts.anomalous += 1,
            }
            let mut mask_rel = None;
            if !split.is_training() {
                if let Some(mask) = sample.mask {
                    let mdir = root.join("masks").join(split.dir_name());
                    fs::create_dir_all(&mdir).at(&mdir)?;
                    let m = format!("masks/{}/{i:05}.png", split.dir_name());
                    save_gray(&root.join(&m), spec.image_size, mask, 1)?;
                    mask_rel = Some(m);
                }
            }
            let label = (!split.is_training()).then_some(label);
            rows.push((rel, label, mask_rel));
        }
        write_manifest(&split.manifest_path(root), &rows)?;
        splits.insert(split.dir_name().to_string(), counts);
    }
    let summary = SynthSummary {
        spec: spec.clone(),
        splits,
    };
    let meta = root.join("synth.json");
    let text = serde_json::to_string_pretty(&summary).expect("serializable summary");
    fs::write(&meta, text).at(&meta)?;
    Ok(summary)
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn read_manifest(root: &Path, path: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    let corrupt = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| corrupt(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| corrupt(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let path_col = col("path").ok_or_else(|| corrupt("missing `path` column".into()))?;
    let label_col = col("label");
    let mask_col = col("gt_mask_path");
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| corrupt(e.to_string()))?;
        let field = |c: Option<usize>| {
            c.and_then(|c| row.get(c))
                .map(str::trim)
                .filter(|s| !s.is_empty())
        };
        let rel = field(Some(path_col))
            .ok_or_else(|| corrupt(format!("row {} has an empty path", line + 2)))?;
        let file = resolve(root, rel);
        if !file.is_file() {
            return Err(corrupt(format!(
                "row {} references missing file {}",
                line + 2,
                file.display()
            )));
        }
        let label = match field(label_col) {
            Some(s) if !split.is_training() => Some(
                s.parse::<Label>()
                    .map_err(|e| corrupt(format!("row {}: {e}", line + 2)))?,
            ),
            _ => None,
        };
        let gt_mask_path = match field(mask_col) {
            Some(m) if !split.is_training() => Some(resolve(root, m)),
            _ => None,
        };
        out.push(SampleRecord {
            path: file,
            label,
            gt_mask_path,
        });
    }
    Ok(out)
}

/// Loads the records of one split from its manifest, or by listing the split
/// directory when no manifest exists. Records come back sorted by path.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    let manifest = split.manifest_path(root);
    let mut records = if manifest.is_file() {
        read_manifest(root, &manifest, split)?
    } else {
        list_images(&root.join(split.dir_name()))?
            .into_iter()
            .map(SampleRecord::unlabeled)
            .collect()
    };
    if records.is_empty() {
        return Err(Error::Dataset {
            path: root.join(split.dir_name()),
            msg: "split contains no images".into(),
        });
    }
    records.sort();
    Ok(records)
}

/// Image files (PNG or JPEG) directly inside `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            msg: "directory does not exist".into(),
        });
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let p = entry.at(dir)?.path();
        if p.is_file() && is_image_file(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Decodes one image to `(channels, size, size)` in model range. Grayscale
/// files are replicated when three channels are requested; other sizes are
/// resized bilinearly.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u8> = match channels {
        1 => {
            let mut g = img.to_luma8();
            if (w, h) != (size, size) {
                g = image::imageops::resize(&g, size as u32, size as u32, FilterType::Triangle);
            }
            g.into_raw()
        }
        3 => {
            let mut rgb = img.to_rgb8();
            if (w, h) != (size, size) {
                rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
            }
            // interleaved HWC -> planar CHW
            let raw = rgb.into_raw();
            let plane = size * size;
            let mut planar = vec![0u8; 3 * plane];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * plane + i] = px[c];
                }
            }
            planar
        }
        c => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                msg: format!("unsupported channel count {c}"),
            })
        }
    };
    Ok(Tensor::new(vec![channels, size, size], normalize_u8(&data))?)
}

/// Decodes a `{0, 255}` mask to a boolean map of `size x size`.
pub fn load_mask(path: &Path, size: usize) -> Result<Vec<bool>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut g = img.to_luma8();
    if (g.width() as usize, g.height() as usize) != (size, size) {
        g = image::imageops::resize(&g, size as u32, size as u32, FilterType::Nearest);
    }
    Ok(g.into_raw().into_iter().map(|p| p >= 128).collect())
}

/// Writes a `(C, H, W)` model-range image as an 8-bit PNG.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "expected (C, H, W) image, got {:?}",
            image.shape()
        )));
    };
    let plane = h * w;
    let d = image.data();
    let res = if c == 3 {
        ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([denormalize(d[i]), denormalize(d[plane + i]), denormalize(d[2 * plane + i])])
        })
        .save(path)
    } else {
        ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([denormalize(d[y as usize * w + x as usize])])
        })
        .save(path)
    };
    res.map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Decoded images of one split, held in memory.
#[derive(Clone, Debug)]
pub struct ImageSet {
    records: Vec<SampleRecord>,
    images: Vec<Tensor<f32>>,
    size: usize,
    channels: usize,
}

impl ImageSet {
    pub fn load(records: Vec<SampleRecord>, size: usize, channels: usize) -> Result<Self> {
        let images = records
            .iter()
            .map(|r| load_image(r.path(), size, channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            images,
            size,
            channels,
        })
    }

    pub fn from_images(images: Vec<Tensor<f32>>) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Dataset {
            path: PathBuf::new(),
            msg: "empty image set".into(),
        })?;
        let &[channels, size, _] = first.shape() else {
            return Err(Error::Shape(format!("expected (C, H, W), got {:?}", first.shape())));
        };
        if images.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::Shape("images of differing shapes".into()));
        }
        let records = (0..images.len())
            .map(|i| SampleRecord::unlabeled(format!("<memory>/{i:05}")))
            .collect();
        Ok(Self {
            records,
            images,
            size,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Stacks the listed images into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let parts: Vec<Tensor<f32>> = indices
            .iter()
            .map(|&i| {
                self.images[i]
                    .reshape(&[1, self.channels, self.size, self.size])
                    .expect("image shape")
            })
            .collect();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        ImageBatch::new(Tensor::cat0(&refs)?)
    }

    /// Consecutive batches covering the whole set in order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = Result<ImageBatch>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect::<Vec<_>>()
            .into_iter()
    }
}

/// Two independent sampling streams, one per set, drawing with replacement.
#[derive(Clone, Debug)]
pub struct UnpairedSampler {
    pub rng_a: ChaCha8Rng,
    pub rng_b: ChaCha8Rng,
}

impl UnpairedSampler {
    pub fn new(seed: u64) -> Self {
        let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
        rng_a.set_stream(1);
        let mut rng_b = ChaCha8Rng::seed_from_u64(seed);
        rng_b.set_stream(2);
        Self { rng_a, rng_b }
    }
}

fn draw_indices(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Draws one batch from each set, independently and with replacement.
pub fn sample_unpaired_batch(
    set_a: &ImageSet,
    set_b: &ImageSet,
    batch_size: usize,
    sampler: &mut UnpairedSampler,
) -> Result<(ImageBatch, ImageBatch)> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Dataset {
            path: PathBuf::new(),
            msg: "cannot sample from an empty set".into(),
        });
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let ia = draw_indices(set_a.len(), batch_size, &mut sampler.rng_a);
    let ib = draw_indices(set_b.len(), batch_size, &mut sampler.rng_b);
    Ok((set_a.batch(&ia)?, set_b.batch(&ib)?))
}
