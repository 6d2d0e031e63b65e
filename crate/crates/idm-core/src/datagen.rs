//! Procedural paired-domain data: colored geometric shapes on textured
//! backgrounds, with a controllable channel-statistic shift standing in for
//! the synthetic-to-real gap, plus folder ingestion for user-supplied data.

use crate::error::{IdmError, Result};
use crate::seeds::{self, stream};
use crate::tensor::{Image, LabelMap, IGNORE_LABEL};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Per-pixel texture noise baked into every generated scene.
const SCENE_NOISE_SIGMA: f64 = 0.02;

/// Parameters of the procedural scene generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: u8,
    pub shapes_per_image: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            num_classes: 8,
            shapes_per_image: 5,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(IdmError::Config(format!(
                "scene dimensions {}x{} below minimum 16x16",
                self.width, self.height
            )));
        }
        if !(2..=32).contains(&self.num_classes) {
            return Err(IdmError::Config(format!(
                "num_classes {} outside [2, 32]",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Channel-affine statistic shift plus additive texture noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    pub mean_offset: Vec<f64>,
    pub std_scale: Vec<f64>,
    pub texture_noise: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift::identity(3)
    }
}

impl DomainShift {
    pub fn identity(channels: usize) -> Self {
        DomainShift {
            mean_offset: vec![0.0; channels],
            std_scale: vec![1.0; channels],
            texture_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean_offset.len() != self.std_scale.len() {
            return Err(IdmError::Config(
                "mean_offset and std_scale channel counts differ".into(),
            ));
        }
        if self.std_scale.iter().any(|&s| s <= 0.0) {
            return Err(IdmError::Config("std_scale must be positive per channel".into()));
        }
        if self.texture_noise < 0.0 {
            return Err(IdmError::Config("texture_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// An image with its pixel-level annotation.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: Image,
    pub label: LabelMap,
    pub id: String,
}

impl LabeledSample {
    pub fn validate(&self, num_classes: u8) -> Result<()> {
        if self.image.h != self.label.h || self.image.w != self.label.w {
            return Err(IdmError::Contract(format!(
                "sample {}: image {}x{} vs label {}x{}",
                self.id, self.image.h, self.image.w, self.label.h, self.label.w
            )));
        }
        self.label.validate(num_classes)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base color for a shape class; hues are spread over the wheel so classes
/// stay separable after moderate statistic shifts.
fn class_base_color(class: u8, num_classes: u8) -> [f64; 3] {
    let shape_classes = (num_classes - 1).max(1) as f64;
    let hue = (class - 1) as f64 / shape_classes;
    hsv_to_rgb(hue, 0.62, 0.62)
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
    Stripes,
}

impl ShapeKind {
    fn for_class(class: u8) -> Self {
        match (class - 1) % 3 {
            0 => ShapeKind::Rect,
            1 => ShapeKind::Ellipse,
            _ => ShapeKind::Stripes,
        }
    }
}

struct ShapePlacement {
    class: u8,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    stripe_axis_x: bool,
    stripe_width: usize,
}

fn place_shape(rng: &mut ChaCha8Rng, class: u8, num_classes: u8, w: usize, h: usize) -> ShapePlacement {
    let min_r = (w.min(h) as f64 / 10.0).max(2.0);
    let max_r = w.min(h) as f64 / 4.0;
    let rx = rng.gen_range(min_r..max_r);
    let ry = rng.gen_range(min_r..max_r);
    // keep the bounding box strictly inside a one-pixel border so the
    // background class survives in every image
    let cx = rng.gen_range((1.0 + rx)..(w as f64 - 1.0 - rx));
    let cy = rng.gen_range((1.0 + ry)..(h as f64 - 1.0 - ry));
    let base = class_base_color(class, num_classes);
    let jitter = |rng: &mut ChaCha8Rng, v: f64, amt: f64| (v + rng.gen_range(-amt..amt)).clamp(0.05, 0.95);
    let color = [
        jitter(rng, base[0], 0.06),
        jitter(rng, base[1], 0.06),
        jitter(rng, base[2], 0.06),
    ];
    ShapePlacement {
        class,
        kind: ShapeKind::for_class(class),
        cx,
        cy,
        rx,
        ry,
        color,
        stripe_axis_x: rng.gen_bool(0.5),
        stripe_width: rng.gen_range(2..=4),
    }
}

fn render_shape(image: &mut Image, label: &mut LabelMap, shape: &ShapePlacement) {
    let (h, w) = (image.h, image.w);
    let y0 = (shape.cy - shape.ry).floor().max(0.0) as usize;
    let y1 = ((shape.cy + shape.ry).ceil() as usize).min(h - 1);
    let x0 = (shape.cx - shape.rx).floor().max(0.0) as usize;
    let x1 = ((shape.cx + shape.rx).ceil() as usize).min(w - 1);
    let dark = [shape.color[0] * 0.55, shape.color[1] * 0.55, shape.color[2] * 0.55];
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 - shape.cx) / shape.rx;
            let dy = (y as f64 - shape.cy) / shape.ry;
            let inside = match shape.kind {
                ShapeKind::Rect | ShapeKind::Stripes => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            };
            if !inside {
                continue;
            }
            let color = match shape.kind {
                ShapeKind::Stripes => {
                    let t = if shape.stripe_axis_x { x } else { y };
                    if (t / shape.stripe_width) % 2 == 0 {
                        &shape.color
                    } else {
                        &dark
                    }
                }
                _ => &shape.color,
            };
            for c in 0..3 {
                *image.at_mut(c, y, x) = color[c] as f32;
            }
            label.set(y, x, shape.class);
        }
    }
}

fn render_sample(spec: &SceneSpec, index: u64) -> LabeledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.rng_seed, stream::SCENE, index));
    let (h, w) = (spec.height, spec.width);
    let mut image = Image::zeros(3, h, w);
    let mut label = LabelMap::filled(h, w, 0);

    // textured background: per-channel base plus a low-frequency ramp
    let base = [
        0.40 + rng.gen_range(-0.03..0.03),
        0.44 + rng.gen_range(-0.03..0.03),
        0.42 + rng.gen_range(-0.03..0.03),
    ];
    let gx = rng.gen_range(-0.08..0.08) / w as f64;
    let gy = rng.gen_range(-0.08..0.08) / h as f64;
    for c in 0..3 {
        for y in 0..h {
            let row = image.row_mut(c, y);
            for (x, px) in row.iter_mut().enumerate() {
                let ramp = gx * (x as f64 - w as f64 / 2.0) + gy * (y as f64 - h as f64 / 2.0);
                *px = (base[c] + ramp) as f32;
            }
        }
    }

    if spec.shapes_per_image > 0 {
        let shape_classes = spec.num_classes - 1;
        let mut shapes = Vec::with_capacity(spec.shapes_per_image);
        for _ in 0..spec.shapes_per_image.saturating_sub(1) {
            let class = 1 + rng.gen_range(0..shape_classes);
            shapes.push(place_shape(&mut rng, class, spec.num_classes, w, h));
        }
        // the corpus-coverage class is drawn last so it is never occluded
        let forced = 1 + (index % shape_classes as u64) as u8;
        shapes.push(place_shape(&mut rng, forced, spec.num_classes, w, h));
        for shape in &shapes {
            render_shape(&mut image, &mut label, shape);
        }
    }

    let noise = Normal::new(0.0, SCENE_NOISE_SIGMA).expect("valid sigma");
    for v in image.as_mut_slice() {
        let n: f64 = noise.sample(&mut rng);
        *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
    }

    LabeledSample {
        image,
        label,
        id: format!("src-{index:05}"),
    }
}

/// Generate `n` labeled source scenes. Deterministic in (spec, index):
/// sample `i` has the same content regardless of `n` or evaluation order.
pub fn generate_source(spec: &SceneSpec, n: usize) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if n < 1 {
        return Err(IdmError::Config("generate_source requires n >= 1".into()));
    }
    Ok(crate::parallel::map_indices(n, |i| render_sample(spec, i as u64)))
}

/// Apply a channel-affine statistic shift, then additive noise, then clamp
/// to [0, 1]. Labels pass through untouched.
pub fn apply_domain_shift(sample: &LabeledSample, shift: &DomainShift, seed: u64) -> Result<LabeledSample> {
    shift.validate()?;
    if shift.mean_offset.len() != sample.image.ch {
        return Err(IdmError::Config(format!(
            "shift has {} channels but image has {}",
            shift.mean_offset.len(),
            sample.image.ch
        )));
    }
    let mut out = sample.image.clone();
    for c in 0..out.ch {
        let scale = shift.std_scale[c] as f32;
        let offset = shift.mean_offset[c] as f32;
        for v in out.plane_mut(c) {
            *v = *v * scale + offset;
        }
    }
    if shift.texture_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, stream::SHIFT, 0));
        let noise = Normal::new(0.0, shift.texture_noise).expect("valid sigma");
        for v in out.as_mut_slice() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    for v in out.as_mut_slice() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(LabeledSample {
        image: out,
        label: sample.label.clone(),
        id: sample.id.clone(),
    })
}

/// Remaps raw label-file values to class indices; unmapped values become
/// the ignore sentinel.
#[derive(Debug, Clone)]
pub struct ClassMap {
    table: [u8; 256],
}

impl ClassMap {
    /// Values below `num_classes` map to themselves, everything else ignores.
    pub fn identity(num_classes: u8) -> Self {
        let mut table = [IGNORE_LABEL; 256];
        for v in 0..num_classes {
            table[v as usize] = v;
        }
        ClassMap { table }
    }

    pub fn from_pairs(pairs: &[(u8, u8)]) -> Self {
        let mut table = [IGNORE_LABEL; 256];
        for &(raw, class) in pairs {
            table[raw as usize] = class;
        }
        ClassMap { table }
    }

    #[inline]
    pub fn map(&self, raw: u8) -> u8 {
        self.table[raw as usize]
    }
}

/// Dataset directory descriptor written next to `images/` and `labels/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_classes: u8,
    pub width: usize,
    pub height: usize,
    pub ids: Vec<String>,
}

pub const DATASET_MANIFEST_FILE: &str = "manifest.json";

/// Write samples as `images/<id>.png` (RGB8) + `labels/<id>.png` (L8) with a
/// manifest listing ids, class count, and image size.
pub fn save_dataset(samples: &[LabeledSample], num_classes: u8, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    fs::create_dir_all(&images_dir).map_err(|e| IdmError::io(&images_dir, e))?;
    fs::create_dir_all(&labels_dir).map_err(|e| IdmError::io(&labels_dir, e))?;
    let (mut w, mut h) = (0usize, 0usize);
    for s in samples {
        w = s.image.w;
        h = s.image.h;
        let mut rgb = image::RgbImage::new(s.image.w as u32, s.image.h as u32);
        for y in 0..s.image.h {
            for x in 0..s.image.w {
                let px = [
                    (s.image.at(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (s.image.at(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (s.image.at(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let img_path = images_dir.join(format!("{}.png", s.id));
        rgb.save(&img_path)
            .map_err(|e| IdmError::ingest(&img_path, format!("encode failed: {e}")))?;

        let mut gray = image::GrayImage::new(s.label.w as u32, s.label.h as u32);
        for y in 0..s.label.h {
            for x in 0..s.label.w {
                gray.put_pixel(x as u32, y as u32, image::Luma([s.label.at(y, x)]));
            }
        }
        let lbl_path = labels_dir.join(format!("{}.png", s.id));
        gray.save(&lbl_path)
            .map_err(|e| IdmError::ingest(&lbl_path, format!("encode failed: {e}")))?;
    }
    let manifest = DatasetManifest {
        format_version: 1,
        num_classes,
        width: w,
        height: h,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    };
    let manifest_path = dir.join(DATASET_MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| IdmError::ingest(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| IdmError::io(&manifest_path, e))?;
    Ok(())
}

/// Read `images/<id>.png` + `labels/<id>.png` pairs from `dir` in sorted id
/// order. Unknown label values map to the ignore sentinel via `class_map`.
pub fn ingest_folder(dir: &Path, class_map: &ClassMap) -> Result<Vec<LabeledSample>> {
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    if !images_dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids: Vec<String> = fs::read_dir(&images_dir)
        .map_err(|e| IdmError::io(&images_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| {
            let path = entry.path();
            if path.extension().map(|e| e == "png").unwrap_or(false) {
                path.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    ids.sort();

    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = images_dir.join(format!("{id}.png"));
        let lbl_path = labels_dir.join(format!("{id}.png"));
        if !lbl_path.exists() {
            return Err(IdmError::ingest(
                &lbl_path,
                format!("missing label file for image {}", img_path.display()),
            ));
        }
        let rgb = image::open(&img_path)
            .map_err(|e| IdmError::ingest(&img_path, format!("decode failed: {e}")))?
            .into_rgb8();
        let gray = image::open(&lbl_path)
            .map_err(|e| IdmError::ingest(&lbl_path, format!("decode failed: {e}")))?
            .into_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return Err(IdmError::ingest(
                &lbl_path,
                format!(
                    "size mismatch: image {:?} vs label {:?}",
                    rgb.dimensions(),
                    gray.dimensions()
                ),
            ));
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let p = rgb.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    *img.at_mut(c, y, x) = p[c] as f32 / 255.0;
                }
            }
        }
        let mut label = LabelMap::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                label.set(y, x, class_map.map(gray.get_pixel(x as u32, y as u32)[0]));
            }
        }
        samples.push(LabeledSample {
            image: img,
            label,
            id,
        });
    }
    Ok(samples)
}

/// A source corpus with precomputed per-class pixel frequencies, as needed
/// by rare-class sampling.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<LabeledSample>,
    pub num_classes: u8,
    /// Share of non-ignore pixels per class over the whole corpus.
    pub class_freq: Vec<f64>,
    /// Distinct classes present in each sample.
    pub classes_per_sample: Vec<Vec<u8>>,
}

impl Corpus {
    pub fn from_samples(samples: Vec<LabeledSample>, num_classes: u8) -> Result<Self> {
        if samples.is_empty() {
            return Err(IdmError::Config("corpus must not be empty".into()));
        }
        for s in &samples {
            s.validate(num_classes)?;
        }
        let mut counts = vec![0u64; num_classes as usize];
        let mut classes_per_sample = Vec::with_capacity(samples.len());
        for s in &samples {
            let mut present = BTreeMap::new();
            for &v in s.label.as_slice() {
                if v != IGNORE_LABEL {
                    counts[v as usize] += 1;
                    present.entry(v).or_insert(());
                }
            }
            classes_per_sample.push(present.into_keys().collect());
        }
        let total: u64 = counts.iter().sum();
        let class_freq = counts
            .iter()
            .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect();
        Ok(Corpus {
            samples,
            num_classes,
            class_freq,
            classes_per_sample,
        })
    }

    /// Histogram of distinct classes present anywhere in the corpus.
    pub fn classes_present(&self) -> Vec<bool> {
        let mut present = vec![false; self.num_classes as usize];
        for classes in &self.classes_per_sample {
            for &c in classes {
                present[c as usize] = true;
            }
        }
        present
    }
}
