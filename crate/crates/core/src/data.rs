//! Images, preprocessing, augmentation, stratified splits and synthetic
//! datasets.
//!
//! Images are `3×H×W` tensors in `[0, 1]`. The model consumes them after
//! [`normalize`]; training inputs are augmented first, evaluation inputs never
//! are (see [`Pipeline`]).

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{shape_err, Tensor};

/// Per-channel normalization mean (RGB).
pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel normalization standard deviation (RGB).
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const SPLIT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub id: String,
}

fn dims(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => shape_err(format!("expected a C×H×W image, got {s:?}")),
    }
}

/// Decodes PNG, JPEG or PNM (format sniffed from content). Grayscale is
/// broadcast to three channels.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let rgb = reader.decode().map_err(|e| image_err(e.to_string()))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(image_err("empty image".into()));
    }
    let raw = rgb.as_raw();
    Tensor::new(vec![3, h, w], {
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        data
    })
}

/// Quantizes to 8 bits (`round(255·clamp(v))`).
pub fn to_rgb8(img: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = dims(img)?;
    if c != 3 {
        return shape_err(format!("expected 3 channels, got {c}"));
    }
    let d = img.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
}

/// Writes PNG or binary PPM depending on the extension.
pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let rgb = to_rgb8(img)?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") | Some("pnm") => crate::explain::write_pnm(
            path,
            rgb.as_raw(),
            rgb.width(),
            rgb.height(),
            image::ExtendedColorType::Rgb8,
            image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary),
        ),
        Some("png") => rgb.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        }),
        other => Err(Error::Data(format!("unsupported image extension {other:?}"))),
    }
}

/// Bilinear resampling with half-pixel centers: output index `i` samples the
/// source at `(i + 0.5)·H/H' − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    if height == 0 || width == 0 {
        return shape_err(format!("resize target {height}×{width}"));
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(src - 1), s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(height, h), axis(width, w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

fn per_channel(img: &Tensor<f32>, f: impl Fn(f32, usize) -> f32) -> Tensor<f32> {
    let plane = img.len() / 3;
    Tensor::from_fn(img.shape().to_vec(), |i| f(img.data()[i], i / plane))
}

/// `(x − mean_c) / std_c`
pub fn normalize(img: &Tensor<f32>) -> Tensor<f32> {
    per_channel(img, |v, c| (v - MEAN[c]) / STD[c])
}

pub fn denormalize(img: &Tensor<f32>) -> Tensor<f32> {
    per_channel(img, |v, c| v * STD[c] + MEAN[c])
}

/// Per-channel pixel mean of a corpus in `[0, 1]` image space, each image
/// weighted equally.
pub fn channel_means(samples: &[Sample]) -> Result<[f32; 3]> {
    if samples.is_empty() {
        return Err(Error::Data("channel means of an empty sample set".into()));
    }
    let mut acc = [0.0f64; 3];
    for s in samples {
        let (c, h, w) = dims(&s.image)?;
        if c != 3 {
            return shape_err(format!("expected 3 channels, got {c}"));
        }
        let plane = h * w;
        for (ch, a) in acc.iter_mut().enumerate() {
            *a += s.image.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        }
    }
    Ok(acc.map(|a| (a / samples.len() as f64) as f32))
}

/// Rec. 601 luma per pixel, in the image's value range.
pub fn luma(img: &Tensor<f32>) -> Result<Vec<f32>> {
    let (c, h, w) = dims(img)?;
    if c != 3 {
        return shape_err(format!("expected 3 channels, got {c}"));
    }
    let n = h * w;
    let d = img.data();
    Ok((0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Rotation angle is drawn from `U[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `U[1 - s, 1 + s]`.
    pub jitter_strength: f64,
    /// Crop area fraction range.
    pub crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotation_deg: 15.0,
            jitter_strength: 0.2,
            crop_scale: (0.8, 1.0),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let (lo, hi) = self.crop_scale;
        if !prob(self.hflip_p) || !prob(self.vflip_p) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        if !(self.rotation_deg >= 0.0 && self.jitter_strength >= 0.0 && self.jitter_strength < 1.0) {
            return Err(Error::Config("rotation must be ≥ 0 and jitter in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One concrete draw of every augmentation parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Square crop side and top-left corner.
    pub crop: (usize, usize, usize),
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl AugmentDraw {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let uniform = |rng: &mut R, lo: f64, hi: f64| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let scale = uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let side = ((scale.sqrt() * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
        let y0 = rng.gen_range(0..=h - side);
        let x0 = rng.gen_range(0..=w - side);
        let hflip = rng.gen_bool(cfg.hflip_p);
        let vflip = rng.gen_bool(cfg.vflip_p);
        let angle_deg = uniform(rng, -cfg.rotation_deg, cfg.rotation_deg);
        let s = cfg.jitter_strength;
        AugmentDraw {
            crop: (side, y0, x0),
            hflip,
            vflip,
            angle_deg,
            brightness: uniform(rng, 1.0 - s, 1.0 + s),
            contrast: uniform(rng, 1.0 - s, 1.0 + s),
            saturation: uniform(rng, 1.0 - s, 1.0 + s),
        }
    }
}

/// Per-sample generator keyed by `(seed, epoch, index)`, independent of
/// iteration order.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | (index & 0xffff_ffff));
    rng
}

pub fn hflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, w) = dims(img)?;
    Ok(Tensor::from_fn(img.shape().to_vec(), |i| {
        let x = i % w;
        img.data()[i - x + (w - 1 - x)]
    }))
}

pub fn vflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = dims(img)?;
    Ok(Tensor::from_fn(img.shape().to_vec(), |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.data()[plane * h * w + (h - 1 - y) * w + x]
    }))
}

fn crop(img: &Tensor<f32>, side: usize, y0: usize, x0: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    Tensor::new(vec![c, side, side], {
        let mut out = Vec::with_capacity(c * side * side);
        for ch in 0..c {
            for y in y0..y0 + side {
                let row = ch * h * w + y * w;
                out.extend_from_slice(&img.data()[row + x0..row + x0 + side]);
            }
        }
        out
    })
}

/// Mirror `v` into `[0, n-1]` without repeating the edge sample.
fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// Rotation about the image center by `angle_deg` (counter-clockwise on
/// screen), bilinear sampling with reflect padding.
pub fn rotate(img: &Tensor<f32>, angle_deg: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    if angle_deg == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let d = img.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = reflect(cos * dx - sin * dy + cx, w);
            let sy = reflect(sin * dx + cos * dy + cy, h);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = &d[ch * h * w..(ch + 1) * h * w];
                let at = |yy: usize, xx: usize| p[yy * w + xx] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ch * h * w + y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Brightness scales every value; contrast pulls toward the mean luma;
/// saturation pulls each pixel toward its own luma.
pub fn jitter(img: &Tensor<f32>, brightness: f64, contrast: f64, saturation: f64) -> Result<Tensor<f32>> {
    let (_, h, w) = dims(img)?;
    let n = h * w;
    let mut out = img.map(|v| (v as f64 * brightness) as f32);
    let gray = luma(&out)?;
    let mean = gray.iter().map(|&g| g as f64).sum::<f64>() / n as f64;
    for v in out.data_mut() {
        *v = (mean + contrast * (*v as f64 - mean)) as f32;
    }
    let gray = luma(&out)?;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = gray[i % n] as f64;
        *v = (g + saturation * (*v as f64 - g)) as f32;
    }
    Ok(out)
}

/// crop → hflip → vflip → rotation → jitter → clamp to `[0, 1]`.
pub fn apply_augment(img: &Tensor<f32>, draw: &AugmentDraw) -> Result<Tensor<f32>> {
    let (_, h, w) = dims(img)?;
    let (side, y0, x0) = draw.crop;
    let mut out = if (side, side) == (h, w) {
        img.clone()
    } else {
        resize_bilinear(&crop(img, side, y0, x0)?, h, w)?
    };
    if draw.hflip {
        out = hflip(&out)?;
    }
    if draw.vflip {
        out = vflip(&out)?;
    }
    out = rotate(&out, draw.angle_deg)?;
    out = jitter(&out, draw.brightness, draw.contrast, draw.saturation)?;
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

pub fn augment<R: Rng + ?Sized>(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let (_, h, w) = dims(img)?;
    apply_augment(img, &AugmentDraw::sample(cfg, h, w, rng))
}

/// The only route from a [`Sample`] to a model input.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Pipeline {
    pub fn new(augment: AugmentConfig, seed: u64) -> Self {
        Pipeline { augment, seed }
    }

    /// Augmented and normalized; keyed by epoch and the sample's position in
    /// the training set.
    pub fn train_input(&self, sample: &Sample, epoch: usize, index: usize) -> Result<Tensor<f32>> {
        let mut rng = sample_rng(self.seed, epoch as u64, index as u64);
        Ok(normalize(&augment(&sample.image, &self.augment, &mut rng)?))
    }

    /// Normalized only.
    pub fn eval_input(&self, sample: &Sample) -> Tensor<f32> {
        normalize(&sample.image)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Looks up each id in `samples`.
    pub fn select<'a>(ids: &[String], samples: &'a [Sample]) -> Result<Vec<&'a Sample>> {
        let index: std::collections::HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("split names unknown sample {id}")))
            })
            .collect()
    }
}

/// Hands `total` extra units to classes in order of largest fractional
/// quota; ties go to the class holding fewer already-assigned held-out
/// samples, then the lower index. A class never gives up its last sample.
fn allocate(quota: &[f64], total: usize, held: &[usize], sizes: &[usize]) -> Vec<usize> {
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - quota[a].floor();
        let fb = quota[b] - quota[b].floor();
        fb.total_cmp(&fa).then(held[a].cmp(&held[b])).then(a.cmp(&b))
    });
    for c in order {
        if remaining == 0 {
            break;
        }
        if held[c] + counts[c] + 1 < sizes[c] {
            counts[c] += 1;
            remaining -= 1;
        }
    }
    counts
}

/// Stratified 70/15/15 split. Validation and test each receive
/// `floor(0.15·N)` samples overall, shared across classes by their
/// proportional quotas; everything left over trains.
pub fn split_dataset(ids: &[String], labels: &[usize], seed: u64) -> Result<DatasetSplit> {
    if ids.len() != labels.len() {
        return Err(Error::Contract(format!("{} ids for {} labels", ids.len(), labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut classes: Vec<Vec<&String>> = vec![Vec::new(); k];
    for (id, &l) in ids.iter().zip(labels) {
        classes[l].push(id);
    }
    if k == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {c} has no samples")));
    }
    let n = ids.len();
    let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
    let quota: Vec<f64> = sizes.iter().map(|&s| s as f64 * SPLIT_RATIOS[1]).collect();
    let held_out = (n as f64 * SPLIT_RATIOS[1]).floor() as usize;
    let val = allocate(&quota, held_out, &vec![0; k], &sizes);
    let test = allocate(&quota, held_out, &val, &sizes);

    let mut split = DatasetSplit {
        seed,
        ratios: SPLIT_RATIOS,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, members) in classes.iter_mut().enumerate() {
        members.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        members.shuffle(&mut rng);
        let (v, rest) = members.split_at(val[c]);
        let (t, tr) = rest.split_at(test[c]);
        split.val.extend(v.iter().map(|s| s.to_string()));
        split.test.extend(t.iter().map(|s| s.to_string()));
        split.train.extend(tr.iter().map(|s| s.to_string()));
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Class 0 `blob`: a bright Gaussian spot near the center.
    /// Class 1 `stripe`: vertical sinusoidal stripes.
    BlobVsStripe,
    /// Class 0 `ellipse`, class 1 `rectangle`: one filled shape on a dark
    /// background.
    Shapes,
}

impl SynthKind {
    pub fn class_names(self) -> [&'static str; 2] {
        match self {
            SynthKind::BlobVsStripe => ["blob", "stripe"],
            SynthKind::Shapes => ["ellipse", "rectangle"],
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob_vs_stripe" => Ok(SynthKind::BlobVsStripe),
            "shapes" => Ok(SynthKind::Shapes),
            _ => Err(Error::Config(format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

/// Warm tint so the three channels differ.
const TINT: [f64; 3] = [1.0, 0.82, 0.9];

/// Background level shared by both `blob_vs_stripe` classes.
fn draw_background(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.2..=0.25)
}

fn blob_image(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let (cy, cx) = (c + rng.gen_range(-s / 16.0..=s / 16.0), c + rng.gen_range(-s / 16.0..=s / 16.0));
    let sigma = s / 8.0 * rng.gen_range(0.8..=1.2);
    let amp = rng.gen_range(0.55..=0.75);
    let bg = draw_background(rng);
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let r2 = (y - cy).powi(2) + (x - cx).powi(2);
            bg + amp * (-r2 / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Zero-mean stripes around the background level.
fn stripe_image(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let period = rng.gen_range(s / 8.0..=s / 4.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.12..=0.2);
    let bg = draw_background(rng);
    (0..size * size)
        .map(|i| {
            let x = (i % size) as f64;
            bg + amp * (std::f64::consts::TAU * x / period + phase).sin()
        })
        .collect()
}

fn shape_image(size: usize, ellipse: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let (ry, rx) = (rng.gen_range(s / 8.0..=s / 3.0), rng.gen_range(s / 8.0..=s / 3.0));
    let margin = |r: f64| r.ceil() + 1.0;
    let cy = rng.gen_range(margin(ry)..=s - 1.0 - margin(ry));
    let cx = rng.gen_range(margin(rx)..=s - 1.0 - margin(rx));
    let fg = rng.gen_range(0.7..=0.95);
    let bg = rng.gen_range(0.05..=0.15);
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let inside = if ellipse {
                ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
            } else {
                (y - cy).abs() <= ry && (x - cx).abs() <= rx
            };
            if inside {
                fg
            } else {
                bg
            }
        })
        .collect()
}

/// Balanced synthetic corpus; sample `i` has class `i mod 2` and its own
/// generator stream, so any prefix of a larger corpus is reproduced exactly.
pub fn synth_dataset(kind: SynthKind, n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 samples to cover both classes, got {n}")));
    }
    if size < 16 {
        return Err(Error::Config(format!("synthetic images must be at least 16 px, got {size}")));
    }
    let names = kind.class_names();
    let (noise_std, tint) = match kind {
        SynthKind::BlobVsStripe => (0.05, TINT),
        SynthKind::Shapes => (0.02, [1.0; 3]),
    };
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let base = match (kind, label) {
                (SynthKind::BlobVsStripe, 0) => blob_image(size, &mut rng),
                (SynthKind::BlobVsStripe, _) => stripe_image(size, &mut rng),
                (SynthKind::Shapes, l) => shape_image(size, l == 0, &mut rng),
            };
            let mut data = Vec::with_capacity(3 * size * size);
            for t in tint {
                data.extend(base.iter().map(|&v| (v * t + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32));
            }
            Ok(Sample {
                image: Tensor::new(vec![3, size, size], data)?,
                label,
                id: format!("{}/{}_{i:04}", names[label], names[label]),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    /// `<class>/<file stem>`
    pub id: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub class_names: Vec<String>,
    pub entries: Vec<DatasetEntry>,
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Scans `root/<class>/<files>`; class indices follow sorted class names.
/// Hidden files are skipped.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    let hidden = |p: &Path| p.file_name().and_then(|n| n.to_str()).map_or(true, |n| n.starts_with('.'));
    let class_dirs: Vec<PathBuf> = sorted_dir(root)?
        .into_iter()
        .filter(|p| p.is_dir() && !hidden(p))
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
    }
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir.file_name().unwrap().to_string_lossy().to_string();
        for path in sorted_dir(dir)?.into_iter().filter(|p| p.is_file() && !hidden(p)) {
            let stem = path.file_stem().unwrap().to_string_lossy().to_string();
            entries.push(DatasetEntry {
                id: format!("{class}/{stem}"),
                path,
                label,
            });
        }
        class_names.push(class);
    }
    Ok(DatasetIndex { class_names, entries })
}

/// Loads every indexed image, resizing to `size×size` when needed.
pub fn load_samples(index: &DatasetIndex, size: usize) -> Result<Vec<Sample>> {
    index
        .entries
        .iter()
        .map(|e| {
            let mut image = load_image(&e.path)?;
            if image.shape()[1..] != [size, size] {
                image = resize_bilinear(&image, size, size)?;
            }
            Ok(Sample {
                image,
                label: e.label,
                id: e.id.clone(),
            })
        })
        .collect()
}

/// Writes `root/<id>.png` for every sample.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    for s in samples {
        let path = root.join(format!("{}.png", s.id));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_image(&s.image, &path)?;
    }
    Ok(())
}
