//! Dominant-region shape and intensity descriptors.
//!
//! An image is reduced to grayscale in `[0, 255]`, binarized with Otsu's
//! threshold, and the largest 8-connected foreground component is traced
//! clockwise with Moore-neighbour tracing.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{luma, Sample};
use crate::error::{Error, Result};
use crate::tensor::{shape_err, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        BinaryMask {
            height,
            width,
            data: (0..height * width).map(|i| f(i % width, i / width)).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn at(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }
}

/// Grayscale plane of `height × width` values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("{} values for a {height}×{width} plane", data.len()));
        }
        Ok(Gray { height, width, data })
    }

    /// Rec. 601 luma of a `3×H×W` image in `[0, 1]`, scaled to `[0, 255]`.
    pub fn from_image(img: &Tensor<f32>) -> Result<Self> {
        let l = luma(img)?;
        Gray::new(img.shape()[1], img.shape()[2], l.into_iter().map(|v| v as f64 * 255.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Binarized {
    pub mask: BinaryMask,
    /// Pixels in bins above this value are foreground.
    pub threshold: u8,
}

fn histogram(gray: &Gray) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in &gray.data {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    hist
}

/// Between-class variance (up to the constant `1/N²`) of splitting the
/// histogram into bins `≤ t` and `> t`.
pub fn between_class_variance(hist: &[u64; 256], t: usize) -> f64 {
    let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (b, &c) in hist.iter().enumerate() {
        let c = c as f64;
        if b <= t {
            n0 += c;
            s0 += c * b as f64;
        } else {
            n1 += c;
            s1 += c * b as f64;
        }
    }
    if n0 == 0.0 || n1 == 0.0 {
        return 0.0;
    }
    n0 * n1 * (s0 / n0 - s1 / n1).powi(2)
}

/// Otsu threshold over a 256-bin histogram; the first maximizing threshold
/// wins. The brighter side is foreground.
pub fn binarize_otsu(gray: &Gray) -> Result<Binarized> {
    let hist = histogram(gray);
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Data("degenerate image: a single intensity level".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for t in 0..255 {
        let v = between_class_variance(&hist, t);
        if v > best.1 {
            best = (t, v);
        }
    }
    let t = best.0;
    let mask = BinaryMask {
        height: gray.height,
        width: gray.width,
        data: gray.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as usize > t).collect(),
    };
    Ok(Binarized {
        mask,
        threshold: t as u8,
    })
}

/// Clockwise Moore neighbourhood starting west, in image coordinates
/// (`y` grows downwards).
const MOORE: [(isize, isize); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

#[derive(Clone, Debug, PartialEq)]
pub struct ContourTrace {
    /// Closed boundary walk as `(x, y)`; the last point is adjacent to the
    /// first. Thin parts are walked in both directions.
    pub points: Vec<(usize, usize)>,
    /// The traced component.
    pub region: BinaryMask,
}

impl ContourTrace {
    /// Sum of step lengths around the closed walk: 1 per axis step, √2 per
    /// diagonal. A single point has perimeter 0.
    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        if n < 2 {
            return 0.0;
        }
        (0..n)
            .map(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                if a.0 != b.0 && a.1 != b.1 {
                    SQRT_2
                } else {
                    1.0
                }
            })
            .sum()
    }
}

/// 8-connected components in order of their first pixel in raster order.
pub fn components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([(start % w, start / w)]);
        while let Some((x, y)) = queue.pop_front() {
            pixels.push((x, y));
            for (dx, dy) in MOORE {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if mask.at(nx, ny) {
                    let i = ny as usize * w + nx as usize;
                    if !seen[i] {
                        seen[i] = true;
                        queue.push_back((nx as usize, ny as usize));
                    }
                }
            }
        }
        out.push(pixels);
    }
    out
}

/// Traces the largest 8-connected component (ties go to the component whose
/// first raster pixel comes first).
pub fn trace_largest_contour(mask: &BinaryMask) -> Result<ContourTrace> {
    let comps = components(mask);
    let largest = comps
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.len().cmp(&b.len()).then(j.cmp(i)))
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Data("mask has no foreground pixels".into()))?;
    let mut region = BinaryMask::new(mask.height, mask.width);
    for &(x, y) in largest {
        region.set(x, y, true);
    }
    let start = largest.iter().copied().min_by_key(|&(x, y)| (y, x)).unwrap();
    Ok(ContourTrace {
        points: moore_trace(&region, start),
        region,
    })
}

/// Moore-neighbour tracing with Jacob's stopping criterion: stop on
/// re-entering the start pixel with the same first move.
fn moore_trace(region: &BinaryMask, start: (usize, usize)) -> Vec<(usize, usize)> {
    let pos = |p: (usize, usize)| (p.0 as isize, p.1 as isize);
    let next = |p: (isize, isize), from: usize| -> Option<((isize, isize), (isize, isize))> {
        (1..=8).find_map(|k| {
            let d = MOORE[(from + k) % 8];
            let q = (p.0 + d.0, p.1 + d.1);
            region.at(q.0, q.1).then(|| {
                let b = MOORE[(from + k - 1) % 8];
                (q, (p.0 + b.0, p.1 + b.1))
            })
        })
    };
    let s = pos(start);
    // the raster-first pixel always has background to its west
    let Some(first) = next(s, 0) else {
        return vec![start];
    };
    let mut points = vec![start];
    let (mut p, mut back) = first;
    let limit = 4 * region.data.len() + 8;
    while points.len() <= limit {
        let from = MOORE
            .iter()
            .position(|d| (p.0 + d.0, p.1 + d.1) == back)
            .expect("backtrack is a neighbour");
        let (q, b) = next(p, from).expect("p has at least one neighbour");
        if p == s && q == first.0 {
            break;
        }
        points.push((p.0 as usize, p.1 as usize));
        p = q;
        back = b;
    }
    points
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourFeatures {
    pub area: f64,
    pub perimeter: f64,
    pub epsilon: f64,
    pub width: f64,
    pub height: f64,
    pub aspect_ratio: f64,
    pub extent: f64,
    pub diameter: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub mean_color: f64,
}

pub const FEATURE_NAMES: [&str; 11] = [
    "area",
    "perimeter",
    "epsilon",
    "width",
    "height",
    "aspect_ratio",
    "extent",
    "diameter",
    "min_value",
    "max_value",
    "mean_color",
];

impl ContourFeatures {
    pub fn values(&self) -> [f64; 11] {
        [
            self.area,
            self.perimeter,
            self.epsilon,
            self.width,
            self.height,
            self.aspect_ratio,
            self.extent,
            self.diameter,
            self.min_value,
            self.max_value,
            self.mean_color,
        ]
    }

    pub fn from_values(v: [f64; 11]) -> Self {
        ContourFeatures {
            area: v[0],
            perimeter: v[1],
            epsilon: v[2],
            width: v[3],
            height: v[4],
            aspect_ratio: v[5],
            extent: v[6],
            diameter: v[7],
            min_value: v[8],
            max_value: v[9],
            mean_color: v[10],
        }
    }
}

pub fn epsilon_for(perimeter: f64) -> f64 {
    0.01 * perimeter
}

/// Diameter of the circle with the given area.
pub fn equivalent_diameter(area: f64) -> f64 {
    (4.0 * area / PI).sqrt()
}

pub fn compute_features(trace: &ContourTrace, gray: &Gray) -> Result<ContourFeatures> {
    let region = &trace.region;
    if (gray.height, gray.width) != (region.height, region.width) {
        return shape_err(format!(
            "region is {}×{}, gray plane is {}×{}",
            region.height, region.width, gray.height, gray.width
        ));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let (mut lo, mut hi, mut sum, mut area) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for (i, _) in region.data.iter().enumerate().filter(|(_, &on)| on) {
        let (x, y) = (i % region.width, i / region.width);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
        let v = gray.data[i];
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        area += 1;
    }
    if area == 0 {
        return Err(Error::Data("empty region".into()));
    }
    let area_f = area as f64;
    let (width, height) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
    let perimeter = trace.perimeter();
    Ok(ContourFeatures {
        area: area_f,
        perimeter,
        epsilon: epsilon_for(perimeter),
        width,
        height,
        aspect_ratio: width / height,
        extent: area_f / (width * height),
        diameter: equivalent_diameter(area_f),
        min_value: lo,
        max_value: hi,
        mean_color: (sum / area_f).clamp(lo, hi),
    })
}

/// Grayscale → Otsu → largest contour → features.
pub fn image_features(img: &Tensor<f32>) -> Result<ContourFeatures> {
    let gray = Gray::from_image(img)?;
    let bin = binarize_otsu(&gray)?;
    let trace = trace_largest_contour(&bin.mask)?;
    compute_features(&trace, &gray)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub class: String,
    pub features: std::result::Result<ContourFeatures, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMean {
    pub class: String,
    pub count: usize,
    pub features: ContourFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturesReport {
    pub rows: Vec<FeatureRow>,
    /// One per class with at least one successful row, in class order.
    pub means: Vec<ClassMean>,
}

pub const CSV_HEADER: [&str; 14] = [
    "id",
    "class",
    "area",
    "perimeter",
    "epsilon",
    "width",
    "height",
    "aspect_ratio",
    "extent",
    "diameter",
    "min_value",
    "max_value",
    "mean_color",
    "error",
];

/// Per-image features plus per-class means. Failures become error rows.
pub fn features_report(samples: &[Sample], class_names: &[String]) -> Result<FeaturesReport> {
    let items: Vec<Item> = samples.iter().map(|s| (s.id.as_str(), s.label, Ok(&s.image))).collect();
    build_report(&items, class_names)
}

/// An image that may have failed to load; the error text becomes the row's
/// error flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureInput {
    pub id: String,
    pub label: usize,
    pub image: std::result::Result<Tensor<f32>, String>,
}

/// Like [`features_report`], with unreadable images reported as error rows.
pub fn features_report_inputs(inputs: &[FeatureInput], class_names: &[String]) -> Result<FeaturesReport> {
    let items: Vec<Item> = inputs
        .iter()
        .map(|s| (s.id.as_str(), s.label, s.image.as_ref().map_err(String::as_str)))
        .collect();
    build_report(&items, class_names)
}

type Item<'a> = (&'a str, usize, std::result::Result<&'a Tensor<f32>, &'a str>);

fn build_report(items: &[Item], class_names: &[String]) -> Result<FeaturesReport> {
    if items.is_empty() {
        return Err(Error::Data("no samples to describe".into()));
    }
    let class_of = |label: usize| class_names.get(label).cloned().unwrap_or_else(|| label.to_string());
    let rows: Vec<FeatureRow> = items
        .par_iter()
        .map(|&(id, label, image)| FeatureRow {
            id: id.to_string(),
            class: class_of(label),
            features: match image {
                Ok(img) => image_features(img).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            },
        })
        .collect();
    let mut sums: BTreeMap<usize, (usize, [f64; 11])> = BTreeMap::new();
    for (&(_, label, _), row) in items.iter().zip(&rows) {
        if let Ok(f) = &row.features {
            let e = sums.entry(label).or_insert((0, [0.0; 11]));
            e.0 += 1;
            for (acc, v) in e.1.iter_mut().zip(f.values()) {
                *acc += v;
            }
        }
    }
    let means = sums
        .into_iter()
        .map(|(label, (count, sum))| ClassMean {
            class: class_of(label),
            count,
            features: ContourFeatures::from_values(sum.map(|v| v / count as f64)),
        })
        .collect();
    Ok(FeaturesReport { rows, means })
}

impl FeaturesReport {
    /// Image rows, then one `mean` row per class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        let record = |id: &str, class: &str, f: Option<&ContourFeatures>, err: &str| {
            let mut r = vec![id.to_string(), class.to_string()];
            match f {
                Some(f) => r.extend(f.values().iter().map(|v| v.to_string())),
                None => r.extend(std::iter::repeat(String::new()).take(11)),
            }
            r.push(err.to_string());
            r
        };
        for row in &self.rows {
            let r = match &row.features {
                Ok(f) => record(&row.id, &row.class, Some(f), ""),
                Err(e) => record(&row.id, &row.class, None, e),
            };
            w.write_record(r).map_err(csv_err)?;
        }
        for m in &self.means {
            w.write_record(record("mean", &m.class, Some(&m.features), "")).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}
