//! Central finite-difference gradient oracle.
//!
//! The checker only ever evaluates forward passes (under [`no_grad`]), so it
//! is independent of the backward rules it verifies.

use crate::error::Result;
use crate::numerics::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Compare analytic gradients of `build_loss` with central finite
/// differences at every component of every leaf.
///
/// `build_loss` must re-read the leaves' current values each call; `step` is
/// scaled per component by max(1, |x|).
pub fn check_gradients(
    leaves: &[Tensor<f64>],
    build_loss: &dyn Fn() -> Result<Tensor<f64>>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = build_loss()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (leaf, grad) in leaves.iter().zip(&analytic) {
        let base = leaf.value();
        for i in 0..base.len() {
            let h = step * base[i].abs().max(1.0);
            let mut plus = base.clone();
            plus[i] += h;
            leaf.set_data(plus)?;
            let f_plus = no_grad(|| build_loss())?.item()?;
            let mut minus = base.clone();
            minus[i] -= h;
            leaf.set_data(minus)?;
            let f_minus = no_grad(|| build_loss())?.item()?;
            leaf.set_data(base.clone())?;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let err = rel_err(grad[i], numeric);
            if err > max_rel {
                max_rel = err;
            }
            checked += 1;
            if err > tol {
                return Err(crate::error::Error::InvalidArgument(format!(
                    "gradient check failed at leaf component {i}: analytic {} vs numeric {} (rel err {err:.3e})",
                    grad[i], numeric
                )));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::<f64>::vector(vec![0.3, -1.2, 2.0]).as_param();
        let loss_x = x.clone();
        let build = move || ops::dot(&loss_x, &loss_x);
        let report = check_gradients(&[x], &build, 1e-5, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-6);
        assert_eq!(report.checked, 3);
    }
}
