//! Occlusion sensitivity, LIME surrogates over a superpixel grid, and Kernel
//! SHAP over principal components of the pooled embedding.
//!
//! Black boxes are plain closures so toy models can stand in for the
//! network; [`model_proba`] adapts a [`HybridModel`] to raw `[0, 1]` images.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma, Rgb, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{normalize, MEAN};
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::tensor::{shape_err, Tensor};

/// Class probabilities of a raw image (normalized here, never augmented).
pub fn model_proba<'a>(model: &'a HybridModel<f32>) -> impl Fn(&Tensor<f32>) -> Result<Vec<f64>> + Sync + 'a {
    move |img| Ok(model.probabilities(&normalize(img))?.data().iter().map(|&v| v as f64).collect())
}

fn target_prob(p: &[f64], target: usize) -> Result<f64> {
    p.get(target)
        .copied()
        .ok_or_else(|| Error::Data(format!("target class {target} out of range for {} classes", p.len())))
}

fn image_dims(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => shape_err(format!("expected a C×H×W image, got {s:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
    /// Per-channel fill value in image space; callers with a corpus at hand
    /// pass its `channel_means`, the default is the normalization mean.
    pub baseline: [f32; 3],
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            patch: 16,
            stride: 16,
            baseline: MEAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols` drops: base confidence minus occluded
    /// confidence.
    pub drops: Vec<f64>,
    pub patch: usize,
    pub stride: usize,
    pub baseline: [f32; 3],
    pub target: usize,
    pub base_confidence: f64,
}

impl OcclusionMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.drops[row * self.cols + col]
    }
}

/// Slides a baseline-filled patch over the image; cells are evaluated in
/// parallel and stored in grid order.
pub fn occlusion_map<F>(f: &F, img: &Tensor<f32>, target: usize, cfg: &OcclusionConfig) -> Result<OcclusionMap>
where
    F: Fn(&Tensor<f32>) -> Result<Vec<f64>> + Sync,
{
    let (c, h, w) = image_dims(img)?;
    if cfg.stride == 0 || cfg.patch == 0 {
        return Err(Error::Config("occlusion patch and stride must be positive".into()));
    }
    if cfg.patch > h || cfg.patch > w {
        return shape_err(format!("occlusion patch {} exceeds the {h}×{w} image", cfg.patch));
    }
    if c > 3 {
        return shape_err(format!("occlusion baseline covers 3 channels, image has {c}"));
    }
    let (rows, cols) = ((h - cfg.patch) / cfg.stride + 1, (w - cfg.patch) / cfg.stride + 1);
    let base = target_prob(&f(img)?, target)?;
    let drops = (0..rows * cols)
        .into_par_iter()
        .map(|cell| {
            let (y0, x0) = ((cell / cols) * cfg.stride, (cell % cols) * cfg.stride);
            let mut occluded = img.clone();
            let data = occluded.data_mut();
            for ch in 0..c {
                for y in y0..y0 + cfg.patch {
                    let row = (ch * h + y) * w;
                    data[row + x0..row + x0 + cfg.patch].fill(cfg.baseline[ch]);
                }
            }
            Ok(base - target_prob(&f(&occluded)?, target)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OcclusionMap {
        rows,
        cols,
        drops,
        patch: cfg.patch,
        stride: cfg.stride,
        baseline: cfg.baseline,
        target,
        base_confidence: base,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    /// Superpixels per side.
    pub grid: usize,
    pub num_samples: usize,
    pub kernel_width: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            grid: 8,
            num_samples: 1000,
            kernel_width: 0.25,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeExplanation {
    pub grid: usize,
    /// Row-major `grid × grid` surrogate coefficients.
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Weighted R² of the surrogate on the perturbation set; 0 when the
    /// targets have no variance.
    pub r2: f64,
    pub num_samples: usize,
    pub kernel_width: f64,
    /// Ridge strength actually used (raised tenfold once if the first solve
    /// failed).
    pub ridge: f64,
    pub target: usize,
}

/// `n` on/off masks over `bits` superpixels, each bit on with probability ½.
pub fn lime_masks(n: usize, bits: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..bits).map(|_| rng.gen_bool(0.5)).collect()).collect()
}

/// Kernel weight `exp(−d²/σ²)` with `d` the fraction of superpixels off.
pub fn lime_kernel(mask: &[bool], width: f64) -> f64 {
    let d = mask.iter().filter(|&&on| !on).count() as f64 / mask.len() as f64;
    (-d * d / (width * width)).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
    pub ridge: f64,
}

/// Weighted ridge regression with an unpenalized intercept. A failed
/// factorization is retried once with ten times the ridge strength.
pub fn weighted_ridge(x: &[Vec<f64>], y: &[f64], weights: &[f64], ridge: f64) -> Result<WeightedFit> {
    let n = x.len();
    if n == 0 || y.len() != n || weights.len() != n {
        return shape_err(format!("{n} rows, {} targets, {} weights", y.len(), weights.len()));
    }
    let p = x[0].len();
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let wt = DMatrix::from_fn(p + 1, n, |j, i| design[(i, j)] * weights[i]);
    let gram = &wt * &design;
    let rhs = &wt * DVector::from_column_slice(y);
    let solve = |lambda: f64| {
        let mut a = gram.clone();
        for j in 1..=p {
            a[(j, j)] += lambda;
        }
        a.cholesky().map(|ch| ch.solve(&rhs))
    };
    let (beta, used) = match solve(ridge) {
        Some(b) => (b, ridge),
        None => match solve(ridge * 10.0) {
            Some(b) => (b, ridge * 10.0),
            None => return Err(Error::Numeric("degenerate design matrix in surrogate fit".into())),
        },
    };
    let wsum: f64 = weights.iter().sum();
    let ybar = weights.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / wsum;
    let fitted = &design * &beta;
    let ss_res: f64 = (0..n).map(|i| weights[i] * (y[i] - fitted[i]).powi(2)).sum();
    let ss_tot: f64 = (0..n).map(|i| weights[i] * (y[i] - ybar).powi(2)).sum();
    let r2 = if ss_tot <= f64::EPSILON * wsum * ybar.abs().max(1.0) {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(WeightedFit {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        r2,
        ridge: used,
    })
}

/// Fills switched-off grid cells with the image's mean color.
pub fn apply_superpixel_mask(img: &Tensor<f32>, grid: usize, mask: &[bool], fill: &[f32]) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(img)?;
    if grid == 0 || h % grid != 0 || w % grid != 0 || mask.len() != grid * grid || fill.len() != c {
        return shape_err(format!("{grid}×{grid} grid over a {h}×{w} image with {} mask bits", mask.len()));
    }
    let (sh, sw) = (h / grid, w / grid);
    let mut out = img.clone();
    let data = out.data_mut();
    for (cell, _) in mask.iter().enumerate().filter(|(_, &on)| !on) {
        let (y0, x0) = ((cell / grid) * sh, (cell % grid) * sw);
        for ch in 0..c {
            for y in y0..y0 + sh {
                let row = (ch * h + y) * w;
                data[row + x0..row + x0 + sw].fill(fill[ch]);
            }
        }
    }
    Ok(out)
}

pub fn channel_means(img: &Tensor<f32>) -> Result<Vec<f32>> {
    let (c, h, w) = image_dims(img)?;
    let n = h * w;
    Ok((0..c)
        .map(|ch| (img.data()[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect())
}

pub fn lime_explain<F>(f: &F, img: &Tensor<f32>, target: usize, cfg: &LimeConfig) -> Result<LimeExplanation>
where
    F: Fn(&Tensor<f32>) -> Result<Vec<f64>> + Sync,
{
    let (_, h, w) = image_dims(img)?;
    let bits = cfg.grid * cfg.grid;
    if cfg.grid == 0 || h % cfg.grid != 0 || w % cfg.grid != 0 {
        return Err(Error::Config(format!("LIME grid {} must divide the {h}×{w} image", cfg.grid)));
    }
    if cfg.num_samples < bits {
        return Err(Error::Config(format!("LIME needs at least {bits} samples, got {}", cfg.num_samples)));
    }
    if !(cfg.kernel_width > 0.0) || !(cfg.ridge >= 0.0) {
        return Err(Error::Config("LIME kernel width must be positive and ridge non-negative".into()));
    }
    let fill = channel_means(img)?;
    let masks = lime_masks(cfg.num_samples, bits, cfg.seed);
    let y = masks
        .par_iter()
        .map(|m| target_prob(&f(&apply_superpixel_mask(img, cfg.grid, m, &fill)?)?, target))
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let weights: Vec<f64> = masks.iter().map(|m| lime_kernel(m, cfg.kernel_width)).collect();
    let fit = weighted_ridge(&x, &y, &weights, cfg.ridge)?;
    Ok(LimeExplanation {
        grid: cfg.grid,
        weights: fit.coefficients,
        intercept: fit.intercept,
        r2: fit.r2,
        num_samples: cfg.num_samples,
        kernel_width: cfg.kernel_width,
        ridge: fit.ridge,
        target,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `d × k`, orthonormal columns in order of decreasing variance.
    pub components: DMatrix<f64>,
    /// Eigenvalues of the sample covariance (divisor `N − 1`), top `k`.
    pub explained_variance: Vec<f64>,
    /// `explained_variance / total variance`.
    pub explained_variance_ratio: Vec<f64>,
}

impl Pca {
    pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Pca> {
        let n = data.len();
        if n < 2 {
            return shape_err(format!("PCA needs at least 2 rows, got {n}"));
        }
        let d = data[0].len();
        if data.iter().any(|r| r.len() != d) {
            return shape_err("PCA rows differ in length");
        }
        if k == 0 || k > n.min(d) {
            return shape_err(format!("cannot keep {k} components of {n} rows in {d} dimensions"));
        }
        let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut components = DMatrix::zeros(d, k);
        for (c, &i) in order.iter().take(k).enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            // sign convention: largest-magnitude entry positive
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.neg_mut();
            }
            components.set_column(c, &v);
        }
        let explained_variance: Vec<f64> = order.iter().take(k).map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let explained_variance_ratio = explained_variance
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        Ok(Pca {
            mean,
            components,
            explained_variance,
            explained_variance_ratio,
        })
    }

    pub fn k(&self) -> usize {
        self.components.ncols()
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        let centered = DVector::from_iterator(row.len(), row.iter().zip(&self.mean).map(|(x, m)| x - m));
        (self.components.transpose() * centered).iter().copied().collect()
    }

    pub fn inverse_transform(&self, coords: &[f64]) -> Vec<f64> {
        let back = &self.components * DVector::from_column_slice(coords);
        back.iter().zip(&self.mean).map(|(v, m)| v + m).collect()
    }
}

/// Fits a PCA and projects the fitted rows.
pub fn pca_fit_transform(data: &[Vec<f64>], k: usize) -> Result<(Pca, Vec<Vec<f64>>)> {
    let pca = Pca::fit(data, k)?;
    let projected = data.iter().map(|r| pca.transform(r)).collect();
    Ok((pca, projected))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapMode {
    /// Every proper coalition, `k ≤ 12`.
    Enumerate,
    /// This many coalitions drawn by kernel weight (enumerates instead when
    /// that is no more expensive).
    Sampled(usize),
}

pub const MAX_ENUMERATE_FEATURES: usize = 12;
pub const MAX_ORACLE_FEATURES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub features: Vec<f64>,
    pub phi: Vec<f64>,
    /// Mean output over the background.
    pub base_value: f64,
    /// Output on the explained instance.
    pub output: f64,
    pub target: usize,
}

/// Shapley kernel weight of a coalition of size `s` among `k` features.
pub fn shapley_kernel(k: usize, s: usize) -> f64 {
    (k as f64 - 1.0) / (binomial(k, s) * s as f64 * (k - s) as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Mean of `f` over background rows with the features in `coalition` taken
/// from `z`.
fn coalition_value<F: Fn(&[f64]) -> f64>(f: &F, z: &[f64], background: &[Vec<f64>], coalition: &[bool]) -> f64 {
    let mut hybrid = vec![0.0; z.len()];
    let mut total = 0.0;
    for row in background {
        for i in 0..z.len() {
            hybrid[i] = if coalition[i] { z[i] } else { row[i] };
        }
        total += f(&hybrid);
    }
    total / background.len() as f64
}

fn bits(mask: u64, k: usize) -> Vec<bool> {
    (0..k).map(|i| mask >> i & 1 == 1).collect()
}

/// Kernel SHAP: weighted least squares over coalitions with the efficiency
/// constraint `Σφ = f(z) − base` imposed by eliminating the last feature.
pub fn kernel_shap<F>(f: &F, z: &[f64], background: &[Vec<f64>], mode: ShapMode, seed: u64) -> Result<ShapAttribution>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let k = z.len();
    if k == 0 {
        return Err(Error::Config("kernel SHAP needs at least one feature".into()));
    }
    if background.is_empty() {
        return Err(Error::Data("kernel SHAP needs at least one background row".into()));
    }
    if background.iter().any(|r| r.len() != k) {
        return shape_err(format!("background rows must have {k} features"));
    }
    let base = coalition_value(f, z, background, &vec![false; k]);
    let output = coalition_value(f, z, background, &vec![true; k]);
    let attribution = |phi| ShapAttribution {
        features: z.to_vec(),
        phi,
        base_value: base,
        output,
        target: 0,
    };
    if k == 1 {
        return Ok(attribution(vec![output - base]));
    }
    let proper = if k >= 64 { u64::MAX } else { (1u64 << k) - 2 };
    let coalitions: Vec<(Vec<bool>, f64)> = match mode {
        ShapMode::Enumerate if k > MAX_ENUMERATE_FEATURES => {
            return Err(Error::Budget(format!(
                "enumerating coalitions of {k} features (limit {MAX_ENUMERATE_FEATURES})"
            )))
        }
        ShapMode::Sampled(budget) if (budget as u64) < proper => sample_coalitions(k, budget, seed)?,
        _ => (1..=proper)
            .map(|m| {
                let c = bits(m, k);
                let s = c.iter().filter(|&&b| b).count();
                (c, shapley_kernel(k, s))
            })
            .collect(),
    };
    let values: Vec<f64> = coalitions
        .par_iter()
        .map(|(c, _)| coalition_value(f, z, background, c))
        .collect();
    let delta = output - base;
    let last = k - 1;
    let n = coalitions.len();
    let x = DMatrix::from_fn(n, last, |r, i| {
        let c = &coalitions[r].0;
        (c[i] as u8 as f64) - (c[last] as u8 as f64)
    });
    let y = DVector::from_fn(n, |r, _| values[r] - base - (coalitions[r].0[last] as u8 as f64) * delta);
    let w = DVector::from_fn(n, |r, _| coalitions[r].1);
    let xtw = DMatrix::from_fn(last, n, |i, r| x[(r, i)] * w[r]);
    let gram = &xtw * &x;
    let rhs = &xtw * y;
    let beta = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.svd(true, true).solve(&rhs, 1e-12).ok())
        .ok_or_else(|| Error::Numeric("kernel SHAP system is singular".into()))?;
    let mut phi: Vec<f64> = beta.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());
    Ok(attribution(phi))
}

/// Distinct coalitions drawn with size probability proportional to the
/// total kernel mass of that size; each gets unit weight.
fn sample_coalitions(k: usize, budget: usize, seed: u64) -> Result<Vec<(Vec<bool>, f64)>> {
    if budget < k {
        return Err(Error::Config(format!("sampled kernel SHAP needs at least {k} coalitions, got {budget}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mass: Vec<f64> = (1..k).map(|s| binomial(k, s) * shapley_kernel(k, s)).collect();
    let total: f64 = mass.iter().sum();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(budget);
    let mut attempts = 0usize;
    while out.len() < budget && attempts < budget * 100 {
        attempts += 1;
        let mut u = rng.gen_range(0.0..total);
        let mut s = 1;
        for (i, m) in mass.iter().enumerate() {
            if u < *m {
                s = i + 1;
                break;
            }
            u -= m;
        }
        let mut mask = 0u64;
        for i in sample_indices(&mut rng, k, s) {
            mask |= 1 << i;
        }
        if seen.insert(mask) {
            out.push((bits(mask, k), 1.0));
        }
    }
    Ok(out)
}

/// Shapley values from the factorial definition, for `k ≤ 8` features.
/// `v` receives coalitions as bitmasks (bit `i` set when feature `i` is in).
pub fn exact_shapley_oracle(k: usize, v: impl Fn(u32) -> f64) -> Result<Vec<f64>> {
    if k > MAX_ORACLE_FEATURES {
        return Err(Error::Budget(format!(
            "exact Shapley over {k} features (limit {MAX_ORACLE_FEATURES})"
        )));
    }
    let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    let values: Vec<f64> = (0..1u32 << k).map(&v).collect();
    Ok((0..k)
        .map(|i| {
            (0..1u32 << k)
                .filter(|s| s >> i & 1 == 0)
                .map(|s| {
                    let size = s.count_ones() as usize;
                    fact(size) * fact(k - size - 1) / fact(k) * (values[(s | 1 << i) as usize] - values[s as usize])
                })
                .sum()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    /// `PC1`, `PC2`, …
    pub component: String,
    pub phi: f64,
    pub abs_phi: f64,
    pub rank: usize,
}

/// Mean |φ| per component, most important first (ties keep component
/// order).
pub fn global_importance(attributions: &[ShapAttribution]) -> Result<Vec<ImportanceRow>> {
    let first = attributions
        .first()
        .ok_or_else(|| Error::Data("no attributions to aggregate".into()))?;
    let k = first.phi.len();
    if attributions.iter().any(|a| a.phi.len() != k) {
        return shape_err("attributions differ in feature count");
    }
    let n = attributions.len() as f64;
    let mut rows: Vec<(usize, f64, f64)> = (0..k)
        .map(|i| {
            let phi = attributions.iter().map(|a| a.phi[i]).sum::<f64>() / n;
            let abs = attributions.iter().map(|a| a.phi[i].abs()).sum::<f64>() / n;
            (i, phi, abs)
        })
        .collect();
    rows.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(r, (i, phi, abs_phi))| ImportanceRow {
            component: format!("PC{}", i + 1),
            phi,
            abs_phi,
            rank: r + 1,
        })
        .collect())
}

pub fn importance_csv(rows: &[ImportanceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Per-feature attribution table in the same schema, feature order.
pub fn attribution_csv(a: &ShapAttribution) -> Result<String> {
    let mut order: Vec<usize> = (0..a.phi.len()).collect();
    order.sort_by(|&x, &y| a.phi[y].abs().total_cmp(&a.phi[x].abs()).then(x.cmp(&y)));
    let mut rank = vec![0; a.phi.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    let rows: Vec<ImportanceRow> = a
        .phi
        .iter()
        .enumerate()
        .map(|(i, &phi)| ImportanceRow {
            component: format!("PC{}", i + 1),
            phi,
            abs_phi: phi.abs(),
            rank: rank[i],
        })
        .collect();
    importance_csv(&rows)
}

/// SHAP over principal components of pooled embeddings.
pub struct EmbeddingShap<'a> {
    pub model: &'a HybridModel<f32>,
    pub pca: Pca,
    /// Background rows in component coordinates.
    pub background: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    pub components: usize,
    pub background: usize,
    pub mode: ShapMode,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            components: 8,
            background: 16,
            mode: ShapMode::Enumerate,
            seed: 0,
        }
    }
}

/// Pooled embeddings of raw images, in input order.
pub fn embed_images(model: &HybridModel<f32>, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| Ok(model.embed(&normalize(img))?.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

impl<'a> EmbeddingShap<'a> {
    /// Fits the PCA on `fit_images` (the training split) and draws the
    /// background rows from them with `cfg.seed`.
    pub fn fit(model: &'a HybridModel<f32>, fit_images: &[&Tensor<f32>], cfg: &ShapConfig) -> Result<Self> {
        let embeddings = embed_images(model, fit_images)?;
        let (pca, coords) = pca_fit_transform(&embeddings, cfg.components)?;
        let m = cfg.background.min(coords.len());
        if m == 0 {
            return Err(Error::Data("empty SHAP background".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picks = sample_indices(&mut rng, coords.len(), m).into_vec();
        picks.sort_unstable();
        Ok(EmbeddingShap {
            model,
            pca,
            background: picks.into_iter().map(|i| coords[i].clone()).collect(),
        })
    }

    /// The explained output is the target-class probability of the head on
    /// `mean + W c + r`, where `r` is the instance's residual outside the
    /// kept components; at the instance's own coordinates this is exactly the
    /// model's probability.
    pub fn explain(&self, img: &Tensor<f32>, target: usize, mode: ShapMode, seed: u64) -> Result<ShapAttribution> {
        let z: Vec<f64> = self.model.embed(&normalize(img))?.data().iter().map(|&v| v as f64).collect();
        let coords = self.pca.transform(&z);
        let recon = self.pca.inverse_transform(&coords);
        let residual: Vec<f64> = z.iter().zip(&recon).map(|(a, b)| a - b).collect();
        let k = self.model.config().num_classes;
        if target >= k {
            return Err(Error::Data(format!("target class {target} out of range for {k} classes")));
        }
        let model = self.model;
        let pca = &self.pca;
        let f = |c: &[f64]| -> f64 {
            let e: Vec<f32> = pca
                .inverse_transform(c)
                .iter()
                .zip(&residual)
                .map(|(v, r)| (v + r) as f32)
                .collect();
            let t = Tensor::new(vec![e.len()], e).expect("embedding shape");
            model.head_proba(&t).map(|p| p.data()[target] as f64).unwrap_or(f64::NAN)
        };
        let mut a = kernel_shap(&f, &coords, &self.background, mode, seed)?;
        if !a.phi.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite SHAP attribution".into()));
        }
        a.target = target;
        Ok(a)
    }
}

/// Min-max scaled to `0..=255`; a constant map is uniform 128.
pub fn heat_levels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Nearest-neighbour upsampled heatmap and its 50/50 blend with the image.
pub fn heatmap_images(values: &[f64], rows: usize, cols: usize, img: &Tensor<f32>) -> Result<(GrayImage, RgbImage)> {
    let (c, h, w) = image_dims(img)?;
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return shape_err(format!("{} values for a {rows}×{cols} map", values.len()));
    }
    if c != 3 {
        return shape_err(format!("overlay needs an RGB image, got {c} channels"));
    }
    let levels = heat_levels(values);
    let heat = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, col) = (y as usize * rows / h, x as usize * cols / w);
        Luma([levels[r * cols + col]])
    });
    let d = img.data();
    let overlay = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let hv = heat.get_pixel(x, y)[0] as f64;
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|ch| {
            let v = (d[ch * h * w + i].clamp(0.0, 1.0) as f64 * 255.0).round();
            (0.5 * v + 0.5 * hv).round() as u8
        }))
    });
    Ok((heat, overlay))
}

/// Writes the heatmap as binary PGM (P5) and the overlay as binary PPM (P6).
pub fn render_heatmap(values: &[f64], rows: usize, cols: usize, img: &Tensor<f32>, pgm: &Path, ppm: &Path) -> Result<()> {
    let (heat, overlay) = heatmap_images(values, rows, cols, img)?;
    write_pnm(pgm, heat.as_raw(), heat.width(), heat.height(), ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary))?;
    write_pnm(
        ppm,
        overlay.as_raw(),
        overlay.width(),
        overlay.height(),
        ExtendedColorType::Rgb8,
        PnmSubtype::Pixmap(SampleEncoding::Binary),
    )
}

pub(crate) fn write_pnm(path: &Path, raw: &[u8], w: u32, h: u32, color: ExtendedColorType, subtype: PnmSubtype) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(raw, w, h, color)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainManifest {
    pub input_id: String,
    pub method: String,
    pub checkpoint_sha256: String,
    pub seed: u64,
    pub target: usize,
    pub hyperparameters: serde_json::Value,
    pub artifacts: Vec<String>,
}
