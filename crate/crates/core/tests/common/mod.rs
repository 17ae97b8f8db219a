//! Oracles and checkers shared by the integration tests.
#![allow(dead_code)]

use histoswin::params::{ParamSet, ParamVars};
use histoswin::tensor::{relative_error, Scalar};
use histoswin::{Result, Tape, Tensor, Var};
use histoswin::explain::{exact_shapley_oracle, kernel_shap, lime_explain, LimeConfig, ShapMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct convolution with zero padding and per-channel bias, in `f64`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(vec![c_out, ho, wo]);
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            acc += x.at(&[ci, y as usize, xx as usize]) * w.at(&[co, ci, ky, kx]);
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

pub fn relu(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + b.data()[i])
}

/// `a[m×k] · b[k×n]` with plain loops.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// A scalar loss that reads every parameter it depends on from `p`.
pub trait ParamLoss {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars) -> Result<Var>;
}

pub fn eval_loss<L: ParamLoss>(f: &L, params: &ParamSet<f64>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let p = params.bind(&mut tape, false);
    let out = f.loss(&mut tape, &p).expect("loss evaluates");
    tape.value(out).item()
}

#[derive(Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checks: usize,
}

/// Compares `f32` tape gradients of every parameter tensor with `f64`
/// central differences: along `directions` random unit directions per
/// tensor, plus up to `coords` randomly chosen single coordinates.
pub fn check_param_grads<L: ParamLoss>(
    f: &L,
    params: &ParamSet<f64>,
    directions: usize,
    coords: usize,
    step: f64,
    abs_floor: f64,
    rng: &mut ChaCha8Rng,
) -> ParamCheck {
    let single = params.cast::<f32>();
    let mut tape = Tape::<f32>::new();
    let p = single.bind(&mut tape, true);
    let out = f.loss(&mut tape, &p).expect("loss evaluates");
    let grads = tape.backward(out).expect("backward");

    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checks: 0,
    };
    let record = |err: f64, what: String, report: &mut ParamCheck| {
        report.checks += 1;
        if report.worst.is_empty() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = what;
        }
    };

    for (i, name) in params.names().iter().enumerate() {
        let g: Vec<f64> = grads.wrt(p.vars()[i]).data().iter().map(|&v| v as f64).collect();
        let len = g.len();
        let numeric_along = |u: &[f64]| -> f64 {
            let mut plus = params.clone();
            let mut minus = params.clone();
            for (j, &uj) in u.iter().enumerate() {
                plus.tensors_mut()[i].data_mut()[j] += step * uj;
                minus.tensors_mut()[i].data_mut()[j] -= step * uj;
            }
            (eval_loss(f, &plus) - eval_loss(f, &minus)) / (2.0 * step)
        };
        for d in 0..directions {
            let mut u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            let err = relative_error(analytic, numeric_along(&u), abs_floor);
            record(err, format!("{name} direction {d}"), &mut report);
        }
        for _ in 0..coords.min(len) {
            let j = rng.gen_range(0..len);
            let mut u = vec![0.0; len];
            u[j] = 1.0;
            let err = relative_error(g[j], numeric_along(&u), abs_floor);
            record(err, format!("{name}[{j}]"), &mut report);
        }
    }
    report
}

/// Image whose 8×8 grid cells are flat with values away from the image
/// mean, so each cell's on/off state is readable from its pixels.
pub fn cell_image(seed: u64) -> (Tensor<f32>, Vec<f32>, f32) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let vals: Vec<f32> = (0..64).map(|_| r.gen_range(0.0..1.0)).collect();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        if vals.iter().all(|&v| (v as f64 - mean).abs() > 0.05) {
            let img = Tensor::from_fn(vec![3, 32, 32], |i| {
                let (y, x) = ((i % 1024) / 32, i % 32);
                vals[(y / 4) * 8 + x / 4]
            });
            return (img, vals, mean as f32);
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Recovers the coefficients of a black box that is linear in the mask
/// bits; returns the cosine similarity per seed.
pub fn linear_recovery(seed: u64) -> f64 {
    let (img, vals, _) = cell_image(seed);
    let fill = histoswin::explain::channel_means(&img).unwrap()[0];
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    let f = |x: &Tensor<f32>| -> Result<Vec<f64>> {
        let mut s = 0.0;
        for j in 0..64 {
            let v = x.data()[(j / 8) * 4 * 32 + (j % 8) * 4] as f64;
            s += w[j] * (v - fill as f64) / (vals[j] as f64 - fill as f64);
        }
        Ok(vec![s, -s])
    };
    let e = lime_explain(&f, &img, 0, &LimeConfig { seed, ..LimeConfig::default() }).unwrap();
    assert!(e.r2 > 0.99, "r2 {}", e.r2);
    cosine(&e.weights, &w)
}


/// Coalition values of `f` at `z`, averaged over the background rows.
pub fn game<'a>(f: &'a dyn Fn(&[f64]) -> f64, z: &'a [f64], bg: &'a [Vec<f64>]) -> impl Fn(u32) -> f64 + 'a {
    move |s| {
        bg.iter()
            .map(|row| {
                let h: Vec<f64> = (0..z.len()).map(|i| if s >> i & 1 == 1 { z[i] } else { row[i] }).collect();
                f(&h)
            })
            .sum::<f64>()
            / bg.len() as f64
    }
}

/// Kernel SHAP against the factorial definition on a random smooth game of
/// up to 8 features: (max per-feature error, efficiency gap).
pub fn random_game_errors(seed: u64) -> (f64, f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let k = r.gen_range(1..=8);
    let coef: Vec<f64> = (0..k * k).map(|_| r.gen_range(-1.0..1.0)).collect();
    let f = move |x: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += coef[i * x.len() + i] * x[i].tanh();
            for j in i + 1..x.len() {
                s += coef[i * x.len() + j] * x[i] * x[j];
            }
        }
        s.sin() + 0.1 * s
    };
    let z: Vec<f64> = (0..k).map(|_| r.gen_range(-2.0..2.0)).collect();
    let bg: Vec<Vec<f64>> = (0..r.gen_range(1..5)).map(|_| (0..k).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
    let a = kernel_shap(&f, &z, &bg, ShapMode::Enumerate, 0).unwrap();
    let oracle = exact_shapley_oracle(k, game(&f, &z, &bg)).unwrap();
    let max_err = a.phi.iter().zip(&oracle).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let efficiency = (a.phi.iter().sum::<f64>() + a.base_value - f(&z)).abs();
    (max_err, efficiency)
}
