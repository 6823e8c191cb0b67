//! Finite-difference gradient checking.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Compares analytic gradients of `f` against central finite
/// differences over every element of `params`.
///
/// Returns the maximum over parameter elements of
/// `|analytic - central| / (|central| + 1e-8)`.
///
/// `f` must be deterministic; each call rebuilds the graph, so the
/// analytic pass and the 2N perturbed evaluations see identical
/// computations.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let loss = f(params)?;
    let grads = loss.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| grads.grad_or_zeros(p)).collect();

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];

            p.data_mut()[j] = orig + epsilon;
            let plus = eval_scalar(&f, params, pi, j)?;
            p.data_mut()[j] = orig - epsilon;
            let minus = eval_scalar(&f, params, pi, j)?;
            p.data_mut()[j] = orig;

            let central = (plus - minus) / (2.0 * epsilon);
            if !central.is_finite() {
                return Err(Error::GradCheckNonFinite {
                    param: pi,
                    index: j,
                });
            }
            let rel = (analytic[pi][j] - central).abs() / (central.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn eval_scalar<F>(f: &F, params: &[Tensor], pi: usize, j: usize) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let value = no_grad(|| f(params).and_then(|t| t.item()));
    match value {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) | Err(Error::NonFinite { .. }) => Err(Error::GradCheckNonFinite {
            param: pi,
            index: j,
        }),
        Err(e) => Err(e),
    }
}
