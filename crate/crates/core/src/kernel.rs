//! Squared-exponential kernel and the kernel-expansion predictor shared by
//! the exact and sparse Gaussian-process models.
//!
//! Both models predict with a mean of the form `μ(x) = Σᵢ wᵢ k(cᵢ, x)` over a
//! set of centers (training inputs or inducing inputs) and a variance
//! `σ²(x) = σ²_f − k(x)ᵀ P k(x)` for some symmetric matrix `P`. Derivatives
//! of both with respect to `x` are closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Hyperparams<T: Real> {
    /// Per-input lengthscales `l_d` (so `Λ = diag(l²)`).
    pub lengthscales: DVector<T>,
    pub signal_var: T,
    pub noise_var: T,
}

impl<T: Real> Hyperparams<T> {
    pub fn isotropic(n_x: usize, lengthscale: T, signal_var: T, noise_var: T) -> Self {
        Hyperparams { lengthscales: DVector::from_element(n_x, lengthscale), signal_var, noise_var }
    }

    pub fn is_valid(&self) -> bool {
        self.lengthscales.iter().all(|&l| l > T::zero() && l.is_finite())
            && self.signal_var > T::zero()
            && self.signal_var.is_finite()
            && self.noise_var >= T::zero()
            && self.noise_var.is_finite()
    }

    /// `1 / l_d²`.
    pub fn inv_sq_lengthscales(&self) -> DVector<T> {
        self.lengthscales.map(|l| T::one() / (l * l))
    }

    /// Log-space parameter vector `[log l_d, log σ²_f, log σ²_n]`.
    pub fn to_log(&self) -> DVector<T> {
        let n = self.lengthscales.len();
        let mut v = DVector::zeros(n + 2);
        for d in 0..n {
            v[d] = self.lengthscales[d].ln();
        }
        v[n] = self.signal_var.ln();
        v[n + 1] = self.noise_var.ln();
        v
    }

    pub fn from_log(v: &DVector<T>) -> Self {
        let n = v.len() - 2;
        Hyperparams {
            lengthscales: DVector::from_fn(n, |d, _| v[d].exp()),
            signal_var: v[n].exp(),
            noise_var: v[n + 1].exp(),
        }
    }
}

/// `σ²_f exp(−½ (x1−x2)ᵀ Λ⁻¹ (x1−x2))`.
pub fn se_kernel<T: Real>(x1: &[T], x2: &[T], hp: &Hyperparams<T>) -> T {
    assert_eq!(x1.len(), x2.len(), "kernel inputs differ in dimension");
    let mut q = T::zero();
    for d in 0..x1.len() {
        let diff = (x1[d] - x2[d]) / hp.lengthscales[d];
        q += diff * diff;
    }
    hp.signal_var * (-q * lit(0.5)).exp()
}

/// Gram matrix between the columns of `a` (n_x × Na) and `b` (n_x × Nb),
/// without noise.
pub fn cross_gram<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, hp: &Hyperparams<T>) -> DMatrix<T> {
    let inv = hp.inv_sq_lengthscales();
    let half: T = lit(0.5);
    DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| {
        let mut q = T::zero();
        for d in 0..a.nrows() {
            let diff = a[(d, i)] - b[(d, j)];
            q += diff * diff * inv[d];
        }
        hp.signal_var * (-q * half).exp()
    })
}

/// Kernel vector `k(cᵢ, x)` over the columns of `centers`.
pub fn kernel_vector<T: Real>(centers: &DMatrix<T>, x: &[T], inv: &DVector<T>, signal_var: T) -> DVector<T> {
    let half: T = lit(0.5);
    DVector::from_fn(centers.ncols(), |i, _| {
        let mut q = T::zero();
        for d in 0..centers.nrows() {
            let diff = centers[(d, i)] - x[d];
            q += diff * diff * inv[d];
        }
        signal_var * (-q * half).exp()
    })
}

/// Jitter schedule applied on the diagonal when a factorization fails.
pub const JITTER_SCHEDULE: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor of `m`, escalating diagonal jitter (scaled by the mean
/// diagonal) through [`JITTER_SCHEDULE`] until it succeeds.
pub fn cholesky_jittered<T: Real>(m: &DMatrix<T>) -> Option<(DMatrix<T>, T)> {
    if let Some(ch) = m.clone().cholesky() {
        return Some((ch.l(), T::zero()));
    }
    let n = m.nrows();
    let mut scale = (m.diagonal().sum() / lit(n.max(1) as f64)).abs();
    if !(scale > T::zero()) {
        scale = T::one();
    }
    for &j in &JITTER_SCHEDULE {
        let jitter = scale * lit(j);
        let mut mm = m.clone();
        for i in 0..n {
            mm[(i, i)] += jitter;
        }
        if let Some(ch) = mm.cholesky() {
            return Some((ch.l(), jitter));
        }
    }
    None
}

/// Solves `L z = b` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: &DMatrix<T>, b: &DVector<T>) -> DVector<T> {
    l.solve_lower_triangular(b).expect("triangular factor has a nonzero diagonal")
}

/// Solves `Lᵀ z = b` for lower-triangular `L`.
pub fn solve_lower_t<T: Real>(l: &DMatrix<T>, b: &DVector<T>) -> DVector<T> {
    l.tr_solve_lower_triangular(b).expect("triangular factor has a nonzero diagonal")
}

/// How the variance quadratic form `kᵀ P k` is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum Precision<T: Real> {
    /// `P = (L Lᵀ)⁻¹`.
    Exact { l: DMatrix<T> },
    /// `P = K_mm⁻¹ − L_m⁻ᵀ B⁻¹ L_m⁻¹` with `K_mm = L_m L_mᵀ`, `B = L_B L_Bᵀ`.
    Sparse { l_m: DMatrix<T>, l_b: DMatrix<T> },
}

impl<T: Real> Precision<T> {
    /// Returns `(kᵀ P k, P k)`.
    pub fn apply(&self, k: &DVector<T>) -> (T, DVector<T>) {
        match self {
            Precision::Exact { l } => {
                let u = solve_lower(l, k);
                (u.norm_squared(), solve_lower_t(l, &u))
            }
            Precision::Sparse { l_m, l_b } => {
                let u = solve_lower(l_m, k);
                let v = solve_lower(l_b, &u);
                let quad = u.norm_squared() - v.norm_squared();
                let pu = &u - solve_lower_t(l_b, &v);
                (quad, solve_lower_t(l_m, &pu))
            }
        }
    }

    /// `kᵀ P k` only.
    pub fn quad(&self, k: &DVector<T>) -> T {
        match self {
            Precision::Exact { l } => solve_lower(l, k).norm_squared(),
            Precision::Sparse { l_m, l_b } => {
                let u = solve_lower(l_m, k);
                let v = solve_lower(l_b, &u);
                u.norm_squared() - v.norm_squared()
            }
        }
    }
}

/// Value and derivatives of one output's posterior at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDerivatives<T: Real> {
    pub mean: T,
    pub var: T,
    pub d_mean: DVector<T>,
    pub d_var: DVector<T>,
    pub h_mean: DMatrix<T>,
}

/// One output's posterior expressed over a set of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPredictor<T: Real> {
    pub hp: Hyperparams<T>,
    pub weights: DVector<T>,
    pub precision: Precision<T>,
}

impl<T: Real> KernelPredictor<T> {
    pub fn mean(&self, centers: &DMatrix<T>, x: &[T]) -> T {
        let inv = self.hp.inv_sq_lengthscales();
        kernel_vector(centers, x, &inv, self.hp.signal_var).dot(&self.weights)
    }

    pub fn mean_var(&self, centers: &DMatrix<T>, x: &[T]) -> (T, T) {
        let inv = self.hp.inv_sq_lengthscales();
        let k = kernel_vector(centers, x, &inv, self.hp.signal_var);
        let mean = k.dot(&self.weights);
        let var = (self.hp.signal_var - self.precision.quad(&k)).max(T::zero());
        (mean, var)
    }

    /// `∂μ/∂x = Σᵢ wᵢ k(cᵢ, x) Λ⁻¹ (cᵢ − x)`.
    pub fn mean_gradient(&self, centers: &DMatrix<T>, x: &[T]) -> DVector<T> {
        let inv = self.hp.inv_sq_lengthscales();
        let k = kernel_vector(centers, x, &inv, self.hp.signal_var);
        let n_x = centers.nrows();
        let mut g = DVector::zeros(n_x);
        for i in 0..centers.ncols() {
            let wk = self.weights[i] * k[i];
            for d in 0..n_x {
                g[d] += wk * (centers[(d, i)] - x[d]) * inv[d];
            }
        }
        g
    }

    /// Mean, variance and their first derivatives plus the mean Hessian.
    pub fn derivatives(&self, centers: &DMatrix<T>, x: &[T]) -> PointDerivatives<T> {
        let inv = self.hp.inv_sq_lengthscales();
        let k = kernel_vector(centers, x, &inv, self.hp.signal_var);
        let (quad, pk) = self.precision.apply(&k);
        let n_x = centers.nrows();
        let mut d_mean = DVector::zeros(n_x);
        let mut d_var = DVector::zeros(n_x);
        let mut h_mean = DMatrix::zeros(n_x, n_x);
        let mut scaled = DVector::zeros(n_x);
        let two: T = lit(2.0);
        let mut wk_sum = T::zero();
        for i in 0..centers.ncols() {
            for d in 0..n_x {
                scaled[d] = (centers[(d, i)] - x[d]) * inv[d];
            }
            let wk = self.weights[i] * k[i];
            wk_sum += wk;
            d_mean.axpy(wk, &scaled, T::one());
            d_var.axpy(-two * pk[i] * k[i], &scaled, T::one());
            h_mean.ger(wk, &scaled, &scaled, T::one());
        }
        for d in 0..n_x {
            h_mean[(d, d)] -= wk_sum * inv[d];
        }
        PointDerivatives {
            mean: k.dot(&self.weights),
            var: (self.hp.signal_var - quad).max(T::zero()),
            d_mean,
            d_var,
            h_mean,
        }
    }
}

/// Common prediction interface of the exact and sparse models.
pub trait Regressor<T: Real>: Send + Sync {
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;
    /// Centers (n_x × M) used by the kernel expansion.
    fn centers(&self) -> &DMatrix<T>;
    fn predictor(&self, output: usize) -> &KernelPredictor<T>;

    /// Posterior mean and variance for every output.
    fn predict(&self, x: &[T]) -> (DVector<T>, DVector<T>) {
        let n = self.n_outputs();
        let mut mu = DVector::zeros(n);
        let mut var = DVector::zeros(n);
        for a in 0..n {
            let (m, v) = self.predictor(a).mean_var(self.centers(), x);
            mu[a] = m;
            var[a] = v;
        }
        (mu, var)
    }

    /// `n_y × n_x` Jacobian of the posterior mean.
    fn mean_gradient(&self, x: &[T]) -> DMatrix<T> {
        let mut g = DMatrix::zeros(self.n_outputs(), self.n_inputs());
        for a in 0..self.n_outputs() {
            g.row_mut(a).copy_from(&self.predictor(a).mean_gradient(self.centers(), x).transpose());
        }
        g
    }

    fn derivatives(&self, x: &[T]) -> Vec<PointDerivatives<T>> {
        (0..self.n_outputs()).map(|a| self.predictor(a).derivatives(self.centers(), x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_closed_forms() {
        let hp = Hyperparams::isotropic(2, 1.0, 2.0, 0.0);
        assert_eq!(se_kernel(&[0.3, -0.1], &[0.3, -0.1], &hp), 2.0);
        // ‖x1 − x2‖² = 2
        let v = se_kernel(&[0.0, 0.0], &[1.0, 1.0], &hp);
        assert!((v - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.735759).abs() < 1e-6);
        assert_eq!(v, se_kernel(&[1.0, 1.0], &[0.0, 0.0], &hp));
    }

    #[test]
    fn kernel_decays_monotonically() {
        let hp = Hyperparams::isotropic(1, 0.7, 1.3, 0.0);
        let mut prev = hp.signal_var;
        for k in 1..60 {
            let v = se_kernel(&[0.0], &[k as f64 * 0.25], &hp);
            assert!(v <= prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn log_parameters_round_trip() {
        let hp: Hyperparams<f64> = Hyperparams { lengthscales: DVector::from_vec(vec![0.5, 3.0]), signal_var: 0.2, noise_var: 1e-4 };
        let back = Hyperparams::from_log(&hp.to_log());
        assert!((back.lengthscales - hp.lengthscales).amax() < 1e-14);
        assert!((back.noise_var - hp.noise_var).abs() < 1e-18);
    }

    #[test]
    fn jitter_rescues_singular_gram() {
        let x = DMatrix::<f64>::from_row_slice(1, 3, &[0.1, 0.1, 0.5]);
        let hp = Hyperparams::isotropic(1, 1.0, 1.0, 0.0);
        let k = cross_gram(&x, &x, &hp);
        let (l, jitter) = cholesky_jittered(&k).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-6);
        assert!(l.iter().all(|v| v.is_finite()));
    }
}
