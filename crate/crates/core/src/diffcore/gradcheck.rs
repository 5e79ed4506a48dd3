//! Central finite-difference gradient oracle.
//!
//! The function under test is evaluated on a fresh [`Graph`] for every
//! perturbation. Anything stochastic inside it must re-seed from a fixed seed
//! per call; a second evaluation at the unperturbed point verifies this.

use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::params::ParamStore;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Parameter name (or `"x"`) and flat index of the worst element.
    pub worst: (String, usize),
    pub checked: usize,
}

/// `|a - f| / max(1e-8, |a| + |f|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

fn validate_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn eval_scalar<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_requires_grad(false));
    let out = f(&mut g, v)?;
    g.item(out)
}

/// Checks `f` at a single tensor input `x`.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    validate_eps(eps)?;
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut g, v)?;
    let base = g.item(out)?;
    g.backward(out)?;
    let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let again = eval_scalar(&mut f, x)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst: ("x".into(), 0),
        checked: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = ("x".into(), i);
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Checks `f` with respect to the parameters in `store` whose names start
/// with any of `prefixes`. At most `max_per_param` evenly spaced elements of
/// each tensor are probed (`None` probes all).
pub fn grad_check_params<F>(
    mut f: F,
    store: &ParamStore,
    prefixes: &[&str],
    eps: f64,
    tol: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    validate_eps(eps)?;
    let mut work = store.clone();
    work.unfreeze_all();
    work.zero_grads();

    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    let base = g.item(out)?;
    g.backward(out)?;
    work.accumulate_grads(&g)?;

    let eval = |f: &mut F, s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        g.item(out)
    };
    let again = eval(&mut f, &work)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let names: Vec<String> = work
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::invalid("grad_check", format!("no parameters match {prefixes:?}")));
    }

    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for name in names {
        let (numel, analytic) = {
            let t = work.tensor(&name)?;
            (t.numel(), t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        };
        let stride = match max_per_param {
            Some(m) if m > 0 && numel > m => numel.div_ceil(m),
            _ => 1,
        };
        for i in (0..numel).step_by(stride) {
            let orig = work.tensor(&name)?.data()[i];
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = orig + eps;
            let plus = eval(&mut f, &work)?;
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = orig - eps;
            let minus = eval(&mut f, &work)?;
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (name.clone(), i);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64) -> f64 {
        x * x * x
    }
    fn wrong_cube_deriv(x: f64) -> f64 {
        2.0 * x
    }
    fn cube_deriv(x: f64) -> f64 {
        3.0 * x * x
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0, 0.1]);
        let r = grad_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &x,
            1e-4,
            1e-7,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-7);
    }

    #[test]
    fn correct_custom_rule_passes() {
        let x = Tensor::from_vec(vec![0.7, -1.1, 1.9]);
        let r = grad_check(
            |g, x| {
                let y = g.map(x, cube, cube_deriv)?;
                g.sum(y)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_backward_rule_fails() {
        let x = Tensor::from_vec(vec![0.7, -1.1, 1.9]);
        let r = grad_check(
            |g, x| {
                let y = g.map(x, cube, wrong_cube_deriv)?;
                g.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let x = Tensor::from_vec(vec![1.0]);
        let mut calls = 0.0;
        let err = grad_check(
            |g, x| {
                calls += 1.0;
                let y = g.add_scalar(x, calls)?;
                g.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn eps_outside_range_rejected() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(|g, x| g.sum(x), &x, 1e-2, 1e-4).is_err());
    }
}
