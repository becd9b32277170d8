//! Finite-difference gradient checker.
//!
//! The acceptance oracle for every loss in the crate: a scalar function is
//! rebuilt around perturbed parameters and its analytic gradient is compared
//! against central differences.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Maximum over all parameter coordinates of
/// `|analytic - central| / max(1, |central|)`.
///
/// `build` must construct the scalar loss from scratch on the given graph;
/// it is called once for the analytic pass and twice per coordinate for the
/// numeric pass. The caller keeps the function smooth at `params` (away from
/// hinge kinks and top-K ties).
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Validation("grad_check eps must be positive".into()));
    }

    let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.input(p.clone())).collect();
        let loss = build(&g, &vars)?;
        let value = g.value_scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        let grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
    };

    let (_, analytic) = eval(params)?;

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let (plus, _) = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let (minus, _) = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        // f(x) = x^2 at x = 3, analytic derivative 6
        let err = grad_check(
            |g, vs| g.dot(vs[0], vs[0]),
            &[Tensor::vector(vec![3.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let err = grad_check(
            |g, vs| {
                let s = g.sigmoid(vs[0]);
                Ok(g.sum(s))
            },
            &[Tensor::scalar(0.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let res = grad_check(
            |g, vs| {
                // ln near 0 explodes once perturbed negative
                g.ln(vs[0])
            },
            &[Tensor::scalar(1e-6)],
            1e-5,
        );
        assert!(res.is_err());
    }
}
