//! Central finite-difference oracle for tape gradients.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            max_coords: None,
        }
    }
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar function of one tensor, evaluated in 64-bit.
pub fn grad_check<F>(f: F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(
        |t, vs| f(t, vs[0]),
        std::slice::from_ref(x),
        &GradCheckConfig::default(),
    )
}

/// Same as [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_as(&f, &f, xs, cfg)
}

/// Analytic gradients of `analytic` taped in `T` against central
/// differences of `reference` evaluated in 64-bit. Both must compute the
/// same function.
pub fn grad_check_as<T, F, G>(analytic: F, reference: G, xs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = reference(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::contract("grad_check: function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.cast())).collect();
    let out = analytic(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract("grad_check: function must return a scalar"));
    }
    if !tape.value(out).item().widen().is_finite() {
        return Err(Error::numeric("grad_check: non-finite function value"));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        let analytic = grads.wrt(vars[ti]);
        let n = x.len();
        let stride = match cfg.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for c in (0..n).step_by(stride) {
            let orig = x.data()[c];
            work[ti].data_mut()[c] = orig + cfg.h;
            let fp = eval(&work)?;
            work[ti].data_mut()[c] = orig - cfg.h;
            let fm = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic.data()[c].widen();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::numeric(format!(
                    "grad_check: non-finite derivative at input {ti} coordinate {c}"
                )));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_polynomial() {
        let x = Tensor::from_f64(vec![4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_then_sum_of_squares() {
        let x = Tensor::from_f64(vec![2, 3], &[0.1, -0.4, 1.3, 2.0, 0.0, -1.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.softmax(v, 1)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let x = Tensor::from_f64(vec![1], &[-1.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let l = t.log(v);
                Ok(t.sum(l))
            },
            &x,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
