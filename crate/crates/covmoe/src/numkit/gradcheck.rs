//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};

/// Compare an analytic gradient against central finite differences.
///
/// `value` evaluates the scalar objective at a parameter vector; `analytic`
/// produces the gradient being verified at `theta`. Returns the maximum over
/// coordinates of `|analytic - central| / max(1, |analytic|)`.
///
/// Callers must hold any discrete structure (routing sets, permutations)
/// fixed inside `value`, otherwise the difference quotient straddles a jump.
pub fn grad_check<F, G>(mut value: F, analytic: G, theta: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("grad_check eps {eps} outside (0, 1e-3]")));
    }
    let grad = analytic(theta)?;
    if grad.len() != theta.len() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient len {} vs theta len {}", grad.len(), theta.len()),
        ));
    }

    let mut worst = 0.0f64;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = value(&probe)?;
        probe[i] = theta[i] - eps;
        let down = value(&probe)?;
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric("grad_check", "non-finite objective"));
        }
        let central = (up - down) / (2.0 * eps);
        let rel = (grad[i] - central).abs() / grad[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(theta) = theta^2 at theta = 3: analytic 6, central diff 6.
        let err = grad_check(
            |t| Ok(t[0] * t[0]),
            |t| Ok(vec![2.0 * t[0]]),
            &[3.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "rel err {err}");
    }

    #[test]
    fn pinball_of_linear_model_away_from_kinks() {
        // f(w, b) = pinball_q(y, w*x + b) summed over a few points, all
        // strictly off the kink.
        let xs = [0.5, -1.0, 2.0];
        let ys = [3.0, 1.0, -2.0];
        let q = 0.7;
        let loss = |t: &[f64]| -> Result<f64> {
            let mut s = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let pred = t[0] * x + t[1];
                let d = y - pred;
                s += if d > 0.0 { q * d } else { (1.0 - q) * (-d) };
            }
            Ok(s)
        };
        let grad = |t: &[f64]| -> Result<Vec<f64>> {
            let mut g = vec![0.0, 0.0];
            for (x, y) in xs.iter().zip(&ys) {
                let pred = t[0] * x + t[1];
                let d = if pred >= *y { 1.0 - q } else { -q };
                g[0] += d * x;
                g[1] += d;
            }
            Ok(g)
        };
        let err = grad_check(loss, grad, &[0.3, -0.4], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(grad_check(|_| Ok(0.0), |_| Ok(vec![]), &[], 0.0).is_err());
        assert!(grad_check(|_| Ok(0.0), |_| Ok(vec![]), &[], 1e-2).is_err());
    }

    #[test]
    fn rejects_non_finite_objective() {
        let r = grad_check(
            |t| Ok(if t[0] > 1.0 { f64::NAN } else { t[0] }),
            |_| Ok(vec![1.0]),
            &[1.0],
            1e-4,
        );
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }
}
