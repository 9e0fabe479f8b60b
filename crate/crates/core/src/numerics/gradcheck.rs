//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

use super::params::{GradientMap, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Below this magnitude the relative error is measured against the floor
/// instead. Central differences at `eps = 1e-5` carry rounding noise of
/// roughly `1e-11 |f|`, so a much smaller floor turns near-zero gradients
/// into spurious failures.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `(f(p + eps e) - f(p - eps e)) / (2 eps)` for every coordinate of every
/// parameter.
pub fn finite_difference_grad<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradientMap>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut out = GradientMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let base = params.get(&name)?.clone();
        let mut grad = Tensor::zeros(base.shape());
        for k in 0..base.numel() {
            let orig = base.data()[k];
            work.get_mut(&name)?.data_mut()[k] = orig + eps;
            let plus = f(&work)?;
            work.get_mut(&name)?.data_mut()[k] = orig - eps;
            let minus = f(&work)?;
            work.get_mut(&name)?.data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective is not finite when perturbing {name}[{k}]"
                )));
            }
            grad.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst coordinate-wise relative error between two gradient maps. Names
/// present in one map but not the other are a contract error.
pub fn max_relative_error(analytic: &GradientMap, numeric: &GradientMap) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::Contract(format!(
            "gradient maps cover {} and {} parameters",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for (name, a) in analytic.iter() {
        let n = numeric.get(name)?;
        if a.shape() != n.shape() {
            return Err(Error::dim("max_relative_error", a.shape(), n.shape()));
        }
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(x, y));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::sigmoid_scalar;

    fn one(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(v));
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let g = finite_difference_grad(|p| Ok(p.get("x")?.item().powi(2)), &one("x", 3.0), DEFAULT_EPS).unwrap();
        // central differences are exact for quadratics up to rounding
        assert!((g.get("x").unwrap().item() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_objective_gives_zero_map() {
        let mut p = one("a", 1.0);
        p.insert("b", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let g = finite_difference_grad(|_| Ok(4.2), &p, DEFAULT_EPS).unwrap();
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let g = finite_difference_grad(|p| Ok(sigmoid_scalar(p.get("x")?.item())), &one("x", 0.0), DEFAULT_EPS)
            .unwrap();
        assert!((g.get("x").unwrap().item() - 0.25).abs() < 1e-10);
    }

    #[test]
    fn non_finite_objective_is_a_numeric_error() {
        let r = finite_difference_grad(|p| Ok(1.0 / (p.get("x")?.item() - 1e-5)), &one("x", 0.0), 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        assert!(finite_difference_grad(|_| Ok(0.0), &one("x", 0.0), 0.0).is_err());
    }
}
