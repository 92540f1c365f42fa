//! Small unconstrained quasi-Newton minimizer used for hyperparameter
//! training and feasibility restoration.

use nalgebra::{DMatrix, DVector};

use crate::scalar::{lit, Real};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when `‖∇f‖∞` falls below this.
    pub grad_tol: f64,
    /// Cap on the step length `‖Δx‖∞` per iteration.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, grad_tol: 1e-6, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult<T: Real> {
    pub x: DVector<T>,
    pub f: T,
    pub grad: DVector<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` with BFGS and a backtracking Armijo line search.
///
/// `fg` returns the value and gradient, or `None` where the objective is
/// undefined (treated as an infinitely bad point by the line search).
pub fn minimize<T, F>(mut fg: F, x0: DVector<T>, opts: &BfgsOptions) -> Option<BfgsResult<T>>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Option<(T, DVector<T>)>,
{
    let n = x0.len();
    let (mut f, mut g) = fg(&x0)?;
    if !f.is_finite() {
        return None;
    }
    let mut x = x0;
    let mut h = DMatrix::<T>::identity(n, n);
    let c1: T = lit(1e-4);
    let max_step: T = lit(opts.max_step);
    let mut iterations = 0;
    let mut converged = g.amax() <= lit(opts.grad_tol);
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = d.dot(&g);
        if !(slope < T::zero()) {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = d.dot(&g);
        }
        let dmax = d.amax();
        if dmax > max_step {
            d *= max_step / dmax;
            slope = d.dot(&g);
        }
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &d * step;
            if let Some((fn_, gn)) = fg(&xn) {
                if fn_.is_finite() && fn_ <= f + c1 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= lit(0.5);
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > T::eps() * s.norm() * y.norm() {
            let rho = T::one() / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        let progress = (f - fn_).abs();
        x = xn;
        f = fn_;
        g = gn;
        converged = g.amax() <= lit(opts.grad_tol);
        if !converged && progress <= T::eps() * (T::one() + f.abs()) && s.amax() <= T::eps().sqrt() {
            break;
        }
    }
    Some(BfgsResult { x, f, grad: g, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let fg = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Some((f, g))
        };
        let r = minimize(fg, DVector::from_vec(vec![-1.2, 1.0]), &BfgsOptions { max_iter: 500, ..Default::default() }).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn undefined_start_returns_none() {
        let r = minimize(|_: &DVector<f64>| None, DVector::zeros(2), &BfgsOptions::default());
        assert!(r.is_none());
    }
}
