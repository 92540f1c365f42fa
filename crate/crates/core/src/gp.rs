//! Exact Gaussian-process regression, one independent model per output
//! dimension, with a zero prior mean and the squared-exponential kernel.
//!
//! Hyperparameters are trained by maximizing the log marginal likelihood
//! with BFGS in log-space. Training standardizes inputs and rescales each
//! target column by its root-mean-square; reported hyperparameters and all
//! predictions are in original units.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::{cholesky_jittered, cross_gram, solve_lower, solve_lower_t, Hyperparams, KernelPredictor, Precision, Regressor};
use crate::optim::{minimize, BfgsOptions};
use crate::scalar::{lit, to_f64, Real};

/// Floor on the (rescaled) noise variance.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GpError {
    #[error("covariance matrix not positive definite after jitter escalation (lengthscales {lengthscales:?}, signal {signal_var:.3e}, noise {noise_var:.3e})")]
    NotPositiveDefinite { lengthscales: Vec<f64>, signal_var: f64, noise_var: f64 },
    #[error("need at least {need} training points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite training data")]
    NonFinite,
    #[error("invalid hyperparameters")]
    InvalidHyperparams,
}

fn not_pd<T: Real>(hp: &Hyperparams<T>) -> GpError {
    GpError::NotPositiveDefinite {
        lengthscales: hp.lengthscales.iter().map(|&l| to_f64(l)).collect(),
        signal_var: to_f64(hp.signal_var),
        noise_var: to_f64(hp.noise_var),
    }
}

/// `K + σ²_n I` over the columns of `centers`.
fn noisy_gram<T: Real>(centers: &DMatrix<T>, hp: &Hyperparams<T>) -> DMatrix<T> {
    let mut k = cross_gram(centers, centers, hp);
    for i in 0..k.nrows() {
        k[(i, i)] += hp.noise_var;
    }
    k
}

/// Log marginal likelihood of one target column and its gradient with
/// respect to `[log l_d, log σ²_f, log σ²_n]`. `x` is `N × n_x`.
pub fn log_marginal_likelihood<T: Real>(
    hp: &Hyperparams<T>,
    x: &DMatrix<T>,
    r: &DVector<T>,
) -> Result<(T, DVector<T>), GpError> {
    if x.nrows() == 0 {
        return Err(GpError::TooFewPoints { need: 1, got: 0 });
    }
    if r.len() != x.nrows() {
        return Err(GpError::Dimension { expected: x.nrows(), got: r.len() });
    }
    if hp.lengthscales.len() != x.ncols() {
        return Err(GpError::Dimension { expected: x.ncols(), got: hp.lengthscales.len() });
    }
    lml_columns(hp, &x.transpose(), r)
}

fn lml_columns<T: Real>(hp: &Hyperparams<T>, xc: &DMatrix<T>, r: &DVector<T>) -> Result<(T, DVector<T>), GpError> {
    let n = xc.ncols();
    let n_x = xc.nrows();
    let kf = cross_gram(xc, xc, hp);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += hp.noise_var;
    }
    let (l, _) = cholesky_jittered(&k).ok_or_else(|| not_pd(hp))?;
    let alpha = solve_lower_t(&l, &solve_lower(&l, r));
    let half: T = lit(0.5);
    let log_det: T = (0..n).map(|i| l[(i, i)].ln()).fold(T::zero(), |a, b| a + b);
    let value = -half * r.dot(&alpha) - log_det - half * lit::<T>(n as f64) * lit::<T>(2.0 * std::f64::consts::PI).ln();

    // W = ααᵀ − K⁻¹
    let mut linv = DMatrix::<T>::identity(n, n);
    l.solve_lower_triangular_mut(&mut linv);
    let kinv = linv.transpose() * &linv;
    let w = &alpha * alpha.transpose() - kinv;

    let mut grad = DVector::zeros(n_x + 2);
    let inv = hp.inv_sq_lengthscales();
    let mut trace_f = T::zero();
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            trace_f += wk;
            if i == j {
                continue;
            }
            for d in 0..n_x {
                let diff = xc[(d, i)] - xc[(d, j)];
                grad[d] += wk * diff * diff * inv[d];
            }
        }
    }
    for d in 0..n_x {
        grad[d] *= half;
    }
    grad[n_x] = half * trace_f;
    grad[n_x + 1] = half * hp.noise_var * w.trace();
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct TrainOptions<T: Real> {
    /// Total number of optimizer starts (the first from the default init).
    pub restarts: usize,
    pub seed: u64,
    /// Starting hyperparameters in original units; defaults apply if `None`.
    pub init: Option<Hyperparams<T>>,
    pub bfgs: BfgsOptions,
}

impl<T: Real> Default for TrainOptions<T> {
    fn default() -> Self {
        TrainOptions { restarts: 5, seed: 0, init: None, bfgs: BfgsOptions::default() }
    }
}

/// Input standardization and target scaling used during training.
#[derive(Debug, Clone)]
pub(crate) struct Scaling<T: Real> {
    pub mean: DVector<T>,
    pub std: DVector<T>,
}

impl<T: Real> Scaling<T> {
    pub fn of(x: &DMatrix<T>) -> Self {
        let n: T = lit(x.nrows() as f64);
        let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
        let std = DVector::from_iterator(
            x.ncols(),
            x.column_iter().enumerate().map(|(j, c)| {
                let var = c.iter().map(|&v| (v - mean[j]) * (v - mean[j])).fold(T::zero(), |a, b| a + b) / n;
                let sd = var.sqrt();
                if sd > T::eps() * (T::one() + mean[j].abs()) {
                    sd
                } else {
                    T::one()
                }
            }),
        );
        Scaling { mean, std }
    }

    /// Standardized inputs as columns (`n_x × N`).
    pub fn apply_columns(&self, x: &DMatrix<T>) -> DMatrix<T> {
        DMatrix::from_fn(x.ncols(), x.nrows(), |d, i| (x[(i, d)] - self.mean[d]) / self.std[d])
    }
}

pub(crate) fn target_scale<T: Real>(r: &DVector<T>) -> T {
    let ms = r.norm_squared() / lit(r.len().max(1) as f64);
    if ms > T::zero() && ms.is_finite() {
        ms.sqrt()
    } else {
        T::one()
    }
}

/// Log-space parameter vector used by the optimizer, with the noise floor
/// built in: `σ²_n = floor + exp(θ_n)`.
pub(crate) fn params_to_hp<T: Real>(theta: &DVector<T>) -> Hyperparams<T> {
    let mut hp = Hyperparams::from_log(theta);
    hp.noise_var += lit(NOISE_FLOOR);
    hp
}

pub(crate) fn hp_to_params<T: Real>(hp: &Hyperparams<T>) -> DVector<T> {
    let mut h = hp.clone();
    h.noise_var = (h.noise_var - lit(NOISE_FLOOR)).max(lit(NOISE_FLOOR));
    h.to_log()
}

/// Runs the multi-start optimization of a log-likelihood-like objective in
/// scaled units and returns the best parameter vector.
pub(crate) fn multistart<T, F>(default_init: DVector<T>, opts: &TrainOptions<T>, stream: u64, objective: F) -> Option<(DVector<T>, T)>
where
    T: Real,
    F: Fn(&Hyperparams<T>) -> Option<(T, DVector<T>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n_p = default_init.len();
    let fg = |theta: &DVector<T>| {
        if theta.iter().any(|t| t.abs() > lit(40.0)) {
            return None;
        }
        let hp = params_to_hp(theta);
        let (v, g) = objective(&hp)?;
        // chain rule through the noise floor
        let mut g = g;
        let last = n_p - 1;
        g[last] *= theta[last].exp() / hp.noise_var;
        Some((-v, -g))
    };
    let mut best: Option<(DVector<T>, T)> = None;
    for start in 0..opts.restarts.max(1) {
        let mut x0 = default_init.clone();
        if start > 0 {
            for t in x0.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *t += lit(z);
            }
        }
        let Some(res) = minimize(&fg, x0, &opts.bfgs) else {
            continue;
        };
        let value = -res.f;
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((res.x, value));
        }
    }
    best
}

/// Default starting point in scaled units: unit lengthscales (per-column
/// std in original units), signal variance equal to the target mean square
/// and noise variance at a tenth of the target variance.
pub(crate) fn default_params<T: Real>(n_x: usize, r_scaled: &DVector<T>) -> DVector<T> {
    let n: T = lit(r_scaled.len().max(1) as f64);
    let mean = r_scaled.sum() / n;
    let var = r_scaled.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / n;
    let ms = r_scaled.norm_squared() / n;
    let hp = Hyperparams::isotropic(n_x, T::one(), ms.max(lit(1e-6)), (var * lit(0.1)).max(lit(1e-6)));
    hp_to_params(&hp)
}

/// Converts scaled-unit hyperparameters to original units.
pub(crate) fn unscale_hp<T: Real>(hp: &Hyperparams<T>, scaling: &Scaling<T>, target: T) -> Hyperparams<T> {
    let t2 = target * target;
    Hyperparams {
        lengthscales: hp.lengthscales.component_mul(&scaling.std),
        signal_var: hp.signal_var * t2,
        noise_var: hp.noise_var * t2,
    }
}

pub(crate) fn scale_hp<T: Real>(hp: &Hyperparams<T>, scaling: &Scaling<T>, target: T) -> Hyperparams<T> {
    let t2 = target * target;
    Hyperparams {
        lengthscales: hp.lengthscales.component_div(&scaling.std),
        signal_var: hp.signal_var / t2,
        noise_var: hp.noise_var / t2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpOutput<T: Real> {
    pub predictor: KernelPredictor<T>,
    pub log_likelihood: T,
}

impl<T: Real> GpOutput<T> {
    pub fn hyperparams(&self) -> &Hyperparams<T> {
        &self.predictor.hp
    }

    /// Lower-triangular factor of `K + σ²_n I`.
    pub fn factor(&self) -> &DMatrix<T> {
        match &self.predictor.precision {
            Precision::Exact { l } => l,
            Precision::Sparse { .. } => unreachable!("exact model holds an exact factor"),
        }
    }
}

/// Trained exact GP, one output per target column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "GpModelData<T>", into = "GpModelData<T>")]
pub struct GpModel<T: Real> {
    /// Training inputs as columns (`n_x × N`).
    centers: DMatrix<T>,
    pub outputs: Vec<GpOutput<T>>,
}

impl<T: Real> GpModel<T> {
    /// Conditions one model per target column on `(x, targets)` with fixed
    /// hyperparameters. `x` is `N × n_x`, `targets` is `N × n_y`.
    pub fn condition(x: &DMatrix<T>, targets: &DMatrix<T>, hps: &[Hyperparams<T>]) -> Result<Self, GpError> {
        if targets.nrows() != x.nrows() {
            return Err(GpError::Dimension { expected: x.nrows(), got: targets.nrows() });
        }
        if hps.len() != targets.ncols() {
            return Err(GpError::Dimension { expected: targets.ncols(), got: hps.len() });
        }
        let centers = x.transpose();
        let outputs = hps
            .iter()
            .enumerate()
            .map(|(a, hp)| condition_output(&centers, &targets.column(a).into_owned(), hp))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GpModel { centers, outputs })
    }

    /// Training inputs as rows (`N × n_x`).
    pub fn inputs(&self) -> DMatrix<T> {
        self.centers.transpose()
    }

    pub fn n_train(&self) -> usize {
        self.centers.ncols()
    }

    pub fn hyperparams(&self) -> Vec<Hyperparams<T>> {
        self.outputs.iter().map(|o| o.predictor.hp.clone()).collect()
    }
}

fn condition_output<T: Real>(centers: &DMatrix<T>, r: &DVector<T>, hp: &Hyperparams<T>) -> Result<GpOutput<T>, GpError> {
    if !hp.is_valid() || hp.lengthscales.len() != centers.nrows() {
        return Err(GpError::InvalidHyperparams);
    }
    let k = noisy_gram(centers, hp);
    let (l, _) = cholesky_jittered(&k).ok_or_else(|| not_pd(hp))?;
    let weights = solve_lower_t(&l, &solve_lower(&l, r));
    let n = r.len();
    let half: T = lit(0.5);
    let log_det: T = (0..n).map(|i| l[(i, i)].ln()).fold(T::zero(), |a, b| a + b);
    let log_likelihood =
        -half * r.dot(&weights) - log_det - half * lit::<T>(n as f64) * lit::<T>(2.0 * std::f64::consts::PI).ln();
    Ok(GpOutput { predictor: KernelPredictor { hp: hp.clone(), weights, precision: Precision::Exact { l } }, log_likelihood })
}

impl<T: Real> Regressor<T> for GpModel<T> {
    fn n_inputs(&self) -> usize {
        self.centers.nrows()
    }

    fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    fn centers(&self) -> &DMatrix<T> {
        &self.centers
    }

    fn predictor(&self, output: usize) -> &KernelPredictor<T> {
        &self.outputs[output].predictor
    }
}

/// Trains one GP per column of `r` (`N × n_y`) on inputs `x` (`N × n_x`).
pub fn train_gp<T: Real>(x: &DMatrix<T>, r: &DMatrix<T>, opts: &TrainOptions<T>) -> Result<GpModel<T>, GpError> {
    let n = x.nrows();
    if n < 2 {
        return Err(GpError::TooFewPoints { need: 2, got: n });
    }
    if r.nrows() != n {
        return Err(GpError::Dimension { expected: n, got: r.nrows() });
    }
    if x.iter().chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    let scaling = Scaling::of(x);
    let xs = scaling.apply_columns(x);
    let centers = x.transpose();
    let n_x = x.ncols();
    let hps: Vec<Hyperparams<T>> = (0..r.ncols())
        .into_par_iter()
        .map(|a| {
            let col = r.column(a).into_owned();
            let scale = target_scale(&col);
            let rs = &col / scale;
            let init = match &opts.init {
                Some(hp) => hp_to_params(&scale_hp(hp, &scaling, scale)),
                None => default_params(n_x, &rs),
            };
            match multistart(init.clone(), opts, a as u64, |hp| lml_columns(hp, &xs, &rs).ok()) {
                Some((theta, _)) => unscale_hp(&params_to_hp(&theta), &scaling, scale),
                None => {
                    warn!("output {a}: every optimizer start failed; keeping the initial hyperparameters");
                    unscale_hp(&params_to_hp(&init), &scaling, scale)
                }
            }
        })
        .collect();
    let outputs = hps
        .iter()
        .enumerate()
        .map(|(a, hp)| condition_output(&centers, &r.column(a).into_owned(), hp))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GpModel { centers, outputs })
}

/// Posterior mean and variance of every output at `x_star`.
pub fn gp_predict<T: Real>(model: &GpModel<T>, x_star: &[T]) -> (DVector<T>, DVector<T>) {
    model.predict(x_star)
}

/// `n_y × n_x` Jacobian of the posterior mean at `x_star`.
pub fn gp_mean_gradient<T: Real>(model: &GpModel<T>, x_star: &[T]) -> DMatrix<T> {
    model.mean_gradient(x_star)
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct GpOutputData<T: Real> {
    hyperparams: Hyperparams<T>,
    weights: DVector<T>,
    log_likelihood: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct GpModelData<T: Real> {
    inputs: DMatrix<T>,
    outputs: Vec<GpOutputData<T>>,
}

impl<T: Real> From<GpModel<T>> for GpModelData<T> {
    fn from(m: GpModel<T>) -> Self {
        GpModelData {
            inputs: m.centers.transpose(),
            outputs: m
                .outputs
                .into_iter()
                .map(|o| GpOutputData {
                    hyperparams: o.predictor.hp,
                    weights: o.predictor.weights,
                    log_likelihood: o.log_likelihood,
                })
                .collect(),
        }
    }
}

impl<T: Real> TryFrom<GpModelData<T>> for GpModel<T> {
    type Error = String;

    fn try_from(d: GpModelData<T>) -> Result<Self, String> {
        let centers = d.inputs.transpose();
        let outputs = d
            .outputs
            .into_iter()
            .map(|o| {
                if o.weights.len() != centers.ncols() || o.hyperparams.lengthscales.len() != centers.nrows() {
                    return Err("model output dimensions do not match the stored inputs".to_string());
                }
                let k = noisy_gram(&centers, &o.hyperparams);
                let (l, _) = cholesky_jittered(&k).ok_or_else(|| not_pd(&o.hyperparams).to_string())?;
                Ok(GpOutput {
                    predictor: KernelPredictor { hp: o.hyperparams, weights: o.weights, precision: Precision::Exact { l } },
                    log_likelihood: o.log_likelihood,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(GpModel { centers, outputs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(n, 2, |i, d| ((i * 7 + d * 3) % 11) as f64 / 5.0 - 1.0 + 0.03 * i as f64);
        let r = DVector::from_fn(n, |i, _| (x[(i, 0)] * 1.3).sin() + 0.5 * x[(i, 1)] * x[(i, 1)]);
        (x, r)
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let (x, r) = toy(12);
        let hp = Hyperparams { lengthscales: DVector::from_vec(vec![0.7, 1.4]), signal_var: 0.8, noise_var: 0.05 };
        let (_, g) = log_marginal_likelihood(&hp, &x, &r).unwrap();
        let theta = hp.to_log();
        for p in 0..theta.len() {
            let h = 1e-6;
            let mut tp = theta.clone();
            tp[p] += h;
            let mut tm = theta.clone();
            tm[p] -= h;
            let fp = log_marginal_likelihood(&Hyperparams::from_log(&tp), &x, &r).unwrap().0;
            let fm = log_marginal_likelihood(&Hyperparams::from_log(&tm), &x, &r).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-6 * (1.0 + fd.abs()), "param {p}: fd {fd} analytic {}", g[p]);
        }
    }

    #[test]
    fn single_point_closed_forms() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let r = DVector::from_element(1, 0.7);
        let hp = Hyperparams::isotropic(1, 1.0, 1.0, 0.01);
        let (lml, _) = log_marginal_likelihood(&hp, &x, &r).unwrap();
        let s = 1.01f64;
        let expected = -0.5 * 0.49 / s - 0.5 * s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lml - expected).abs() < 1e-12);

        let m = GpModel::condition(&x, &DMatrix::from_element(1, 1, 0.7), &[hp]).unwrap();
        let (mu, var) = m.predict(&[0.0]);
        assert!((mu[0] - 0.7 / s).abs() < 1e-12);
        assert!((var[0] - (1.0 - 1.0 / s)).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_dense_inverse() {
        let (x, r) = toy(9);
        let hp = Hyperparams { lengthscales: DVector::from_vec(vec![0.9, 0.6]), signal_var: 1.1, noise_var: 0.02 };
        let m = GpModel::condition(&x, &DMatrix::from_column_slice(9, 1, r.as_slice()), std::slice::from_ref(&hp)).unwrap();
        let xc = x.transpose();
        let mut k = cross_gram(&xc, &xc, &hp);
        for i in 0..9 {
            k[(i, i)] += hp.noise_var;
        }
        let kinv = k.try_inverse().unwrap();
        let xs = [0.2, -0.4];
        let ks = kernel_vector_plain(&xc, &xs, &hp);
        let mu = (ks.transpose() * &kinv * &r)[0];
        let var = hp.signal_var - (ks.transpose() * &kinv * &ks)[0];
        let (pm, pv) = m.predict(&xs);
        assert!((pm[0] - mu).abs() < 1e-10);
        assert!((pv[0] - var).abs() < 1e-10);
    }

    fn kernel_vector_plain(xc: &DMatrix<f64>, x: &[f64], hp: &Hyperparams<f64>) -> DVector<f64> {
        DVector::from_fn(xc.ncols(), |i, _| {
            let c: Vec<f64> = xc.column(i).iter().copied().collect();
            crate::kernel::se_kernel(&c, x, hp)
        })
    }

    #[test]
    fn trained_model_interpolates_and_reverts_to_prior() {
        let (x, r) = toy(25);
        let targets = DMatrix::from_column_slice(25, 1, r.as_slice());
        let m = train_gp(&x, &targets, &TrainOptions::default()).unwrap();
        for i in 0..25 {
            let (mu, var) = m.predict(&[x[(i, 0)], x[(i, 1)]]);
            assert!((mu[0] - r[i]).abs() < 1e-2, "row {i}: {} vs {}", mu[0], r[i]);
            assert!(var[0] < 0.05 * m.outputs[0].hyperparams().signal_var);
        }
        let (mu, var) = m.predict(&[500.0, -500.0]);
        let sf2 = m.outputs[0].hyperparams().signal_var;
        assert!(mu[0].abs() < 1e-8);
        assert!((var[0] - sf2).abs() < 1e-8 * sf2);
    }

    #[test]
    fn variance_grows_away_from_data() {
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let y = DMatrix::from_column_slice(5, 1, &[0.0, 0.2, 0.1, -0.3, 0.4]);
        let m = GpModel::condition(&x, &y, &[Hyperparams::isotropic(1, 0.3, 1.0, 1e-4)]).unwrap();
        let mut prev = 0.0;
        for k in 0..20 {
            let (_, v) = m.predict(&[1.0 + 0.1 * k as f64]);
            assert!(v[0] >= prev - 1e-12);
            prev = v[0];
        }
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let (x, r) = toy(15);
        let targets = DMatrix::from_fn(15, 2, |i, a| if a == 0 { r[i] } else { 2.0 * r[i] + 1.0 });
        let opts = TrainOptions { seed: 3, ..Default::default() };
        let a = train_gp(&x, &targets, &opts).unwrap();
        let b = train_gp(&x, &targets, &opts).unwrap();
        assert_eq!(a.hyperparams(), b.hyperparams());
        let json = serde_json::to_string(&a).unwrap();
        let back: GpModel<f64> = serde_json::from_str(&json).unwrap();
        let p = [0.1, 0.3];
        assert_eq!(a.predict(&p), back.predict(&p));
    }

    #[test]
    fn runs_in_single_precision() {
        let x = DMatrix::<f32>::from_fn(10, 1, |i, _| i as f32 / 9.0);
        let y = DMatrix::<f32>::from_fn(10, 1, |i, _| (i as f32 / 3.0).sin());
        let m = train_gp(&x, &y, &TrainOptions::default()).unwrap();
        let (mu, _) = m.predict(&[0.5]);
        assert!((mu[0] - (1.5f32).sin()).abs() < 5e-2);
    }

    #[test]
    fn rejects_bad_input() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let y = DMatrix::from_element(1, 1, 0.0);
        assert!(matches!(train_gp(&x, &y, &TrainOptions::default()), Err(GpError::TooFewPoints { .. })));
        let x = DMatrix::from_column_slice(2, 1, &[0.0, f64::NAN]);
        let y = DMatrix::from_element(2, 1, 0.0);
        assert_eq!(train_gp(&x, &y, &TrainOptions::default()).unwrap_err(), GpError::NonFinite);
    }
}
