//! Central finite differences, used as an independent check on [`Tape::backward`].

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tensor};

/// Central-difference gradient `(f(x+h·e) − f(x−h·e)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    assert!(h > T::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![T::zero(); x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (up - down) / (h + h);
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, computed in `f64`; zero when both vectors vanish.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error lengths");
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x.as_f64() - y.as_f64()));
    let scale = norm(&mut a.iter().map(|v| v.as_f64())).max(norm(&mut b.iter().map(|v| v.as_f64())));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Step size matched to the element precision.
pub fn default_step<T: Real>() -> T {
    if T::BITS == 32 {
        T::lit(1e-2)
    } else {
        T::lit(1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub max_abs_diff: f64,
    /// Squared norms, so that reports can be pooled into one relative error.
    pub diff_sq: f64,
    pub analytic_sq: f64,
    pub numeric_sq: f64,
}

/// Compares backward-mode gradients of every parameter against central differences.
///
/// Uses the fourth-order central stencil
/// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`. `loss` builds a scalar on
/// a fresh tape from the bound parameters; it is re-run four times per
/// scalar weight.
pub fn check_params<T: Real>(
    params: &ParamSet<T>,
    h: T,
    mut loss: impl FnMut(&mut Tape<T>, &Bound) -> Result<Var>,
) -> Result<Vec<GradReport>> {
    let analytic = analytic_grads(params, &mut loss)?;
    let numeric = numeric_grads(params, h, &mut loss)?;
    Ok(compare(params, &analytic, &numeric))
}

/// Like [`check_params`], but the differences are taken of `reference`, the
/// same loss evaluated at element type `U` on the same weight values.
///
/// With `U` wider than `T` the oracle is free of `T`'s rounding, so the
/// comparison isolates the accuracy of the `T` backward pass.
pub fn check_params_against<T: Real, U: Real>(
    params: &ParamSet<T>,
    h: U,
    mut loss: impl FnMut(&mut Tape<T>, &Bound) -> Result<Var>,
    mut reference: impl FnMut(&mut Tape<U>, &Bound) -> Result<Var>,
) -> Result<Vec<GradReport>> {
    let analytic = analytic_grads(params, &mut loss)?;
    let numeric = numeric_grads(&params.cast::<U>(), h, &mut reference)?;
    Ok(compare(params, &analytic, &numeric))
}

fn analytic_grads<T: Real>(
    params: &ParamSet<T>,
    loss: &mut impl FnMut(&mut Tape<T>, &Bound) -> Result<Var>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    tape.backward(out)?;
    Ok(bound
        .grads(&tape)
        .into_iter()
        .map(|(k, g)| (k, g.data().iter().map(|v| v.as_f64()).collect()))
        .collect())
}

fn numeric_grads<U: Real>(
    params: &ParamSet<U>,
    h: U,
    loss: &mut impl FnMut(&mut Tape<U>, &Bound) -> Result<Var>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut eval = |p: &ParamSet<U>| -> Result<U> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = loss(&mut tape, &bound)?;
        Ok(tape.value(out).data()[0])
    };
    let mut out = BTreeMap::new();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let mut numeric = vec![0.0; n];
        for (i, g) in numeric.iter_mut().enumerate() {
            let orig = probe.get(&name)?.data()[i];
            let mut at = |offset: U| -> Result<U> {
                probe.get_mut(&name)?.data_mut()[i] = orig + offset;
                eval(&probe)
            };
            let (p1, m1) = (at(h)?, at(-h)?);
            let (p2, m2) = (at(h + h)?, at(-(h + h))?);
            probe.get_mut(&name)?.data_mut()[i] = orig;
            *g = ((U::lit(8.0) * (p1 - m1) - (p2 - m2)) / (U::lit(12.0) * h)).as_f64();
        }
        out.insert(name, numeric);
    }
    Ok(out)
}

fn compare<T: Real>(
    params: &ParamSet<T>,
    analytic: &BTreeMap<String, Vec<f64>>,
    numeric: &BTreeMap<String, Vec<f64>>,
) -> Vec<GradReport> {
    let sq = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>();
    params
        .names()
        .map(|name| {
            let (a, b) = (&analytic[name], &numeric[name]);
            GradReport {
                name: name.to_string(),
                numel: a.len(),
                rel_error: relative_error(a, b),
                max_abs_diff: a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
                diff_sq: sq(&mut a.iter().zip(b).map(|(x, y)| x - y)),
                analytic_sq: sq(&mut a.iter().copied()),
                numeric_sq: sq(&mut b.iter().copied()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.3, -1.0, 2.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-4);
        for &v in g.data() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error::<f64>(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_relative_eq!(relative_error::<f64>(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_relative_eq!(relative_error::<f64>(&[3.0, 4.0], &[3.0, 4.5]), 0.5 / 4.5f64.hypot(3.0));
    }
}
