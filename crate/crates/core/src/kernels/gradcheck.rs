//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn point(&self) -> Vec<f64>;

    fn value(&mut self, x: &[f64]) -> Result<f64>;

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the analytic gradient at `op.point()` against central differences
/// on every coordinate.
pub fn grad_check(op: &mut dyn Differentiable) -> Result<GradCheckReport> {
    let x0 = op.point();
    let analytic = op.gradient(&x0)?;
    if analytic.len() != x0.len() {
        return Err(Error::shape("gradient length differs from parameter count"));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite analytic gradient at coordinate {i}")));
    }
    let mut x = x0.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, checked: 0 };
    for i in 0..x0.len() {
        x[i] = x0[i] + FD_STEP;
        let up = op.value(&x)?;
        x[i] = x0[i] - FD_STEP;
        let down = op.value(&x)?;
        x[i] = x0[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !numeric.is_finite() {
            return Err(Error::Numerical(format!("non-finite numeric gradient at coordinate {i}")));
        }
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Cubic;

    impl Differentiable for Cubic {
        fn point(&self) -> Vec<f64> {
            vec![0.7, -1.3]
        }
        fn value(&mut self, x: &[f64]) -> Result<f64> {
            Ok(x[0].powi(3) + x[0] * x[1])
        }
        fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![3.0 * x[0] * x[0] + x[1], x[0]])
        }
    }

    struct Wrong;

    impl Differentiable for Wrong {
        fn point(&self) -> Vec<f64> {
            vec![1.0]
        }
        fn value(&mut self, x: &[f64]) -> Result<f64> {
            Ok(x[0] * x[0])
        }
        fn gradient(&mut self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![1.0])
        }
    }

    #[test]
    fn accepts_correct_gradient() {
        assert!(grad_check(&mut Cubic).unwrap().max_rel_error < 1e-8);
    }

    #[test]
    fn flags_wrong_gradient() {
        assert!(grad_check(&mut Wrong).unwrap().max_rel_error > 0.4);
    }

    struct Nan;

    impl Differentiable for Nan {
        fn point(&self) -> Vec<f64> {
            vec![0.0]
        }
        fn value(&mut self, _: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
        fn gradient(&mut self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN])
        }
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        assert!(matches!(grad_check(&mut Nan), Err(Error::Numerical(_))));
    }
}
