//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffScheme {
    Central,
    /// `(f(x + h) - f(x)) / h`; for checking right of a kink.
    Forward,
    /// `(f(x) - f(x - h)) / h`; for checking left of a kink.
    Backward,
}

/// Central-difference check with step 1e-5. Returns
/// `max_i |g_num - g_ana| / max(1, |g_num|)`.
pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    grad_check_with(f, point, analytic, DiffScheme::Central, DEFAULT_STEP)
}

pub fn grad_check_with<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    scheme: DiffScheme,
    h: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |x: &[f64]| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::invalid(format!("function is not finite at {x:?}")))
        }
    };
    let mut x = point.to_vec();
    let f0 = match scheme {
        DiffScheme::Central => 0.0,
        _ => eval(&x)?,
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let xi = x[i];
        let numeric = match scheme {
            DiffScheme::Central => {
                x[i] = xi + h;
                let up = eval(&x)?;
                x[i] = xi - h;
                let down = eval(&x)?;
                (up - down) / (2.0 * h)
            }
            DiffScheme::Forward => {
                x[i] = xi + h;
                (eval(&x)? - f0) / h
            }
            DiffScheme::Backward => {
                x[i] = xi - h;
                (f0 - eval(&x)?) / h
            }
        };
        x[i] = xi;
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let e = grad_check(|x| x[0] * x[0], &[3.0], &[6.0]).unwrap();
        assert!(e < 1e-7, "{e}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let e = grad_check(|x| x[0] * x[0] + x[1], &[3.0, 1.0], &[6.0, 2.0]).unwrap();
        assert!(e > 0.4);
    }

    #[test]
    fn non_finite_is_an_error() {
        assert!(grad_check(|x| x[0].ln(), &[0.0], &[1.0]).is_err());
        assert!(grad_check(|x| x[0], &[0.0], &[]).is_err());
    }

    #[test]
    fn one_sided_schemes() {
        let f = |x: &[f64]| x[0].abs();
        let fwd = grad_check_with(f, &[0.0], &[1.0], DiffScheme::Forward, 1e-6).unwrap();
        let bwd = grad_check_with(f, &[0.0], &[-1.0], DiffScheme::Backward, 1e-6).unwrap();
        assert!(fwd < 1e-9 && bwd < 1e-9);
    }
}
