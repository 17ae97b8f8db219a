//! Tape gradients versus central finite differences.
//!
//! The finite differences are always evaluated in `f64`, whatever precision
//! the analytic gradient was computed at.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function that can be recorded at any precision.
pub trait DiffFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub abs_floor: f64,
    /// Skip entries with `|x| < step`: the perturbation would straddle the
    /// kink of a ReLU-type nonlinearity sitting at zero.
    pub skip_near_zero: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tol: 1e-3,
            abs_floor: 1e-6,
            skip_near_zero: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: Vec<usize>,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_f64<F: DiffFn>(f: &F, x: Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x);
    let out = f.eval(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", value.shape())));
    }
    Ok(value.item())
}

/// Compares the tape gradient of `f` at `x` (computed at precision `P`)
/// against `f64` central differences, elementwise.
pub fn grad_check<P: Scalar, F: DiffFn>(f: &F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut tape = Tape::<P>::new();
    let xv = tape.param(x.cast::<P>());
    let out = f.eval(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv).cast::<f64>();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: Vec::new(),
        passed: true,
    };
    for i in 0..x.len() {
        let xi = x.data()[i];
        if opts.skip_near_zero && xi.abs() < opts.step {
            report.skipped.push(i);
            continue;
        }
        let mut plus = x.clone();
        plus.data_mut()[i] = xi + opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] = xi - opts.step;
        let numeric = (eval_f64(f, plus)? - eval_f64(f, minus)?) / (2.0 * opts.step);
        let err = relative_error(analytic.data()[i], numeric, opts.abs_floor);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Activation;

    struct SumOf;
    impl DiffFn for SumOf {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            tape.sum(x)
        }
    }

    struct SumRelu;
    impl DiffFn for SumRelu {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let r = tape.activation(x, Activation::Relu)?;
            let sq = tape.mul(r, r)?;
            tape.sum(sq)
        }
    }

    #[test]
    fn linear_function_matches_exactly() {
        let x = Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 0.0, 7.5]).unwrap();
        let opts = GradCheckOptions { tol: 1e-9, ..Default::default() };
        let r = grad_check::<f64, _>(&SumOf, &x, &opts).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn relu_away_from_kinks_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(vec![12], |_| {
            let v: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let r = grad_check::<f32, _>(&SumRelu, &x, &GradCheckOptions::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn zero_crossing_entry_is_excluded() {
        let x = Tensor::new(vec![3], vec![1.0, 0.0, -0.5]).unwrap();
        let opts = GradCheckOptions { skip_near_zero: true, ..Default::default() };
        let r = grad_check::<f64, _>(&SumRelu, &x, &opts).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.checked, 2);
        assert!(r.passed);
    }
}
