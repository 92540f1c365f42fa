//! Linear physical surrogate `z(x) = [v_dc, A x + b]`.
//!
//! Voltage outputs are pinned to a constant 1 p.u.; the remaining outputs
//! use an affine map estimated by least squares on training data.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Real};

/// Ridge weight used when the least-squares system is underdetermined.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LinModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least one training row")]
    Empty,
    #[error("input covariance is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LinearSurrogate<T: Real> {
    /// Number of leading voltage outputs held at `v_dc`.
    pub n_v: usize,
    /// `(n_y - n_v) × n_x`.
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub v_dc: T,
}

impl<T: Real> LinearSurrogate<T> {
    pub fn zero(n_v: usize, n_rest: usize, n_x: usize) -> Self {
        LinearSurrogate {
            n_v,
            a: DMatrix::zeros(n_rest, n_x),
            b: DVector::zeros(n_rest),
            v_dc: T::one(),
        }
    }

    pub fn n_x(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.n_v + self.a.nrows()
    }

    /// `z = [v_dc; A x + b]`.
    pub fn predict(&self, x: &DVector<T>) -> Result<DVector<T>, LinModelError> {
        if x.len() != self.n_x() {
            return Err(LinModelError::Dimension { expected: self.n_x(), got: x.len() });
        }
        let rest = &self.a * x + &self.b;
        let mut z = DVector::from_element(self.n_y(), self.v_dc);
        z.rows_mut(self.n_v, rest.len()).copy_from(&rest);
        Ok(z)
    }

    /// Row-wise prediction for an `N × n_x` matrix.
    pub fn predict_rows(&self, x: &DMatrix<T>) -> Result<DMatrix<T>, LinModelError> {
        if x.ncols() != self.n_x() {
            return Err(LinModelError::Dimension { expected: self.n_x(), got: x.ncols() });
        }
        let mut z = DMatrix::from_element(x.nrows(), self.n_y(), self.v_dc);
        let rest = x * self.a.transpose();
        for r in 0..x.nrows() {
            for c in 0..self.a.nrows() {
                z[(r, self.n_v + c)] = rest[(r, c)] + self.b[c];
            }
        }
        Ok(z)
    }

    /// `diag(Σ_f)` with `Σ_f = [0 0; 0 A Σ_x Aᵀ]`.
    ///
    /// Slightly asymmetric covariances (below 1e-10) are symmetrized.
    pub fn propagate_cov(&self, sigma_x: &DMatrix<T>) -> Result<DVector<T>, LinModelError> {
        let n = self.n_x();
        if sigma_x.nrows() != n || sigma_x.ncols() != n {
            return Err(LinModelError::Dimension { expected: n, got: sigma_x.nrows() });
        }
        let sym = symmetrized(sigma_x)?;
        let mut out = DVector::zeros(self.n_y());
        let asig = &self.a * &sym;
        for z in 0..self.a.nrows() {
            let v = asig.row(z).dot(&self.a.row(z));
            out[self.n_v + z] = v.max(T::zero());
        }
        Ok(out)
    }
}

/// Returns `(Σ + Σᵀ)/2`, rejecting matrices whose asymmetry exceeds 1e-10.
pub fn symmetrized<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>, LinModelError> {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > lit(1e-10) {
        return Err(LinModelError::Asymmetric(crate::scalar::to_f64(worst)));
    }
    if worst > T::zero() {
        warn!("symmetrizing input covariance (asymmetry {:.3e})", crate::scalar::to_f64(worst));
    }
    Ok((m + m.transpose()) * lit::<T>(0.5))
}

/// Least-squares fit of the non-voltage outputs.
///
/// `x` is `N × n_x`, `y` is `N × n_y` with the first `n_v` columns being
/// voltages. With `N ≥ n_x + 1` this is ordinary least squares; otherwise a
/// ridge of [`RIDGE`] on standardized inputs is added. Zero-variance input
/// columns get a zero coefficient.
pub fn fit_linear<T: Real>(x: &DMatrix<T>, y: &DMatrix<T>, n_v: usize) -> Result<LinearSurrogate<T>, LinModelError> {
    let n = x.nrows();
    if n == 0 {
        return Err(LinModelError::Empty);
    }
    if y.nrows() != n {
        return Err(LinModelError::Dimension { expected: n, got: y.nrows() });
    }
    if y.ncols() < n_v {
        return Err(LinModelError::Dimension { expected: n_v, got: y.ncols() });
    }
    let n_x = x.ncols();
    let n_rest = y.ncols() - n_v;
    let nf: T = lit(n as f64);

    let x_mean = DVector::from_iterator(n_x, x.column_iter().map(|c| c.sum() / nf));
    let y_rest = y.columns(n_v, n_rest).into_owned();
    let y_mean = DVector::from_iterator(n_rest, y_rest.column_iter().map(|c| c.sum() / nf));

    // standardized, centered design over the columns that vary
    let mut active = Vec::new();
    let mut scale = Vec::new();
    for j in 0..n_x {
        let c = x.column(j);
        let var = c.iter().map(|&v| (v - x_mean[j]) * (v - x_mean[j])).fold(T::zero(), |a, b| a + b) / nf;
        let sd = var.sqrt();
        let mag = c.iter().fold(T::zero(), |a, &b| a.max(b.abs())).max(T::one());
        if sd > mag * lit(1e-12) {
            active.push(j);
            scale.push(sd);
        } else if n > 1 {
            warn!("input column {j} has zero variance; its coefficient is set to 0");
        }
    }
    let mut a = DMatrix::zeros(n_rest, n_x);
    if !active.is_empty() && n_rest > 0 {
        let k = active.len();
        let mut xs = DMatrix::zeros(n, k);
        for (c, (&j, &sd)) in active.iter().zip(&scale).enumerate() {
            for r in 0..n {
                xs[(r, c)] = (x[(r, j)] - x_mean[j]) / sd;
            }
        }
        let mut yc = y_rest.clone();
        for c in 0..n_rest {
            for r in 0..n {
                yc[(r, c)] -= y_mean[c];
            }
        }
        let coef = if n > k {
            xs.clone().svd(true, true).solve(&yc, lit(1e-13)).ok()
        } else {
            None
        };
        let coef = match coef {
            Some(c) => c,
            None => {
                let mut gram = xs.transpose() * &xs;
                for i in 0..k {
                    gram[(i, i)] += lit(RIDGE);
                }
                let rhs = xs.transpose() * &yc;
                gram.cholesky().expect("ridge-regularized Gram matrix is positive definite").solve(&rhs)
            }
        };
        for (c, (&j, &sd)) in active.iter().zip(&scale).enumerate() {
            for z in 0..n_rest {
                a[(z, j)] = coef[(c, z)] / sd;
            }
        }
    }
    let b = &y_mean - &a * &x_mean;
    Ok(LinearSurrogate { n_v, a, b, v_dc: T::one() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn recovers_noiseless_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, n_x, n_v, n_rest) = (60, 5, 2, 4);
        let a0 = random(&mut rng, n_rest, n_x);
        let b0 = DVector::from_fn(n_rest, |_, _| rng.random_range(-2.0..2.0));
        let x = random(&mut rng, n, n_x);
        let mut y = DMatrix::from_element(n, n_v + n_rest, 0.97);
        for r in 0..n {
            let yr = &a0 * x.row(r).transpose() + &b0;
            for c in 0..n_rest {
                y[(r, n_v + c)] = yr[c];
            }
        }
        let sur = fit_linear(&x, &y, n_v).unwrap();
        assert!((&sur.a - &a0).amax() < 1e-10);
        assert!((&sur.b - &b0).amax() < 1e-10);
        assert_eq!(sur.v_dc, 1.0);
    }

    #[test]
    fn single_row_gives_constant_map() {
        let x = DMatrix::<f64>::from_row_slice(1, 3, &[0.3, -0.2, 1.5]);
        let y = DMatrix::from_row_slice(1, 3, &[1.02, 0.7, -0.4]);
        let sur = fit_linear(&x, &y, 1).unwrap();
        assert!(sur.a.iter().all(|&v| v == 0.0));
        let z = sur.predict(&x.row(0).transpose()).unwrap();
        assert!((z[1] - 0.7).abs() < 1e-15 && (z[2] + 0.4).abs() < 1e-15);
        assert_eq!(z[0], 1.0);
    }

    #[test]
    fn constant_column_gets_zero_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random(&mut rng, 30, 3);
        x.column_mut(1).fill(0.8);
        let y = DMatrix::from_fn(30, 2, |r, c| if c == 0 { 1.0 } else { 2.0 * x[(r, 0)] - x[(r, 2)] + 0.1 });
        let sur = fit_linear(&x, &y, 1).unwrap();
        assert_eq!(sur.a[(0, 1)], 0.0);
        assert!((sur.a[(0, 0)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn underdetermined_fit_is_regularized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 6);
        let y = random(&mut rng, 3, 4);
        let sur = fit_linear(&x, &y, 1).unwrap();
        assert!(sur.a.iter().all(|v| v.is_finite()));
        let z = sur.predict_rows(&x).unwrap();
        // with three points and six free directions the fit interpolates
        assert!((z.columns(1, 3) - y.columns(1, 3)).amax() < 1e-5);
    }

    #[test]
    fn prediction_layout_and_errors() {
        let sur = LinearSurrogate::<f64>::zero(2, 3, 4);
        let z = sur.predict(&DVector::from_element(4, 0.5)).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            sur.predict(&DVector::zeros(3)),
            Err(LinModelError::Dimension { expected: 4, got: 3 })
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sur = LinearSurrogate { n_v: 1, a: random(&mut rng, 2, 3), b: DVector::from_vec(vec![0.4, -0.1]), v_dc: 1.0 };
        let x = DVector::from_vec(vec![0.2, -0.7, 0.9]);
        let z = sur.predict(&x).unwrap();
        for r in 0..2 {
            let direct: f64 = (0..3).map(|c| sur.a[(r, c)] * x[c]).sum::<f64>() + sur.b[r];
            assert!((z[1 + r] - direct).abs() < 1e-14);
        }
        let z0 = sur.predict(&DVector::zeros(3)).unwrap();
        assert_eq!(z0.rows(1, 2), sur.b.rows(0, 2));
    }

    #[test]
    fn covariance_propagation_basics() {
        let sur = LinearSurrogate {
            n_v: 2,
            a: DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            b: DVector::zeros(2),
            v_dc: 1.0,
        };
        let zero = sur.propagate_cov(&DMatrix::zeros(3, 3)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let sig = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2, 0.3]));
        let d = sur.propagate_cov(&sig).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 0.0, 0.2, 0.3]);

        let mut bad = sig.clone();
        bad[(0, 1)] = 1e-3;
        assert!(matches!(sur.propagate_cov(&bad), Err(LinModelError::Asymmetric(_))));
        let mut tiny = sig.clone();
        tiny[(0, 1)] = 1e-12;
        assert!(sur.propagate_cov(&tiny).is_ok());
    }
}
