//! Sparse variational GP regression with a fixed set of inducing inputs.
//!
//! Hyperparameters maximize the collapsed variational lower bound
//! `log N(r | 0, Q + σ²I) − tr(K − Q) / (2σ²)` with `Q = K_nm K_mm⁻¹ K_mn`.
//! Prediction uses the standard variational posterior, which costs O(M²)
//! per test point once trained.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gp::{default_params, hp_to_params, multistart, params_to_hp, scale_hp, target_scale, unscale_hp, Scaling, TrainOptions};
use crate::kernel::{cholesky_jittered, cross_gram, Hyperparams, KernelPredictor, Precision, Regressor};
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum SparseGpError {
    #[error("inducing count {m} must lie in 1..={n}")]
    InducingCount { m: usize, n: usize },
    #[error("inducing covariance not positive definite after jitter escalation")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite training data")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InducingStrategy {
    #[default]
    Kmeans,
    Random,
    GreedyVariance,
}

impl std::str::FromStr for InducingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kmeans" => Ok(InducingStrategy::Kmeans),
            "random" => Ok(InducingStrategy::Random),
            "greedy-variance" => Ok(InducingStrategy::GreedyVariance),
            other => Err(format!("unknown inducing strategy `{other}`")),
        }
    }
}

/// Picks `m` inducing inputs (rows of the result) from the rows of `x`.
/// Selection happens on standardized inputs.
pub fn select_inducing<T: Real>(x: &DMatrix<T>, m: usize, strategy: InducingStrategy, seed: u64) -> Result<DMatrix<T>, SparseGpError> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(SparseGpError::InducingCount { m, n });
    }
    let scaling = Scaling::of(x);
    let xs = scaling.apply_columns(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs = match strategy {
        InducingStrategy::Random => {
            let idx = sample(&mut rng, n, m).into_vec();
            DMatrix::from_fn(x.ncols(), m, |d, j| xs[(d, idx[j])])
        }
        InducingStrategy::GreedyVariance => {
            let idx = greedy_variance(&xs, m);
            DMatrix::from_fn(x.ncols(), m, |d, j| xs[(d, idx[j])])
        }
        InducingStrategy::Kmeans => kmeans(&xs, m, &mut rng),
    };
    Ok(DMatrix::from_fn(m, x.ncols(), |j, d| zs[(d, j)] * scaling.std[d] + scaling.mean[d]))
}

fn sq_dist<T: Real>(a: &DMatrix<T>, i: usize, b: &DMatrix<T>, j: usize) -> T {
    (0..a.nrows()).map(|d| (a[(d, i)] - b[(d, j)]) * (a[(d, i)] - b[(d, j)])).fold(T::zero(), |s, v| s + v)
}

/// Pivoted Cholesky on a unit-lengthscale SE kernel: each step takes the
/// point with the largest remaining prior variance.
fn greedy_variance<T: Real>(xs: &DMatrix<T>, m: usize) -> Vec<usize> {
    let n = xs.ncols();
    let hp = Hyperparams::isotropic(xs.nrows(), T::one(), T::one(), T::zero());
    let mut resid = vec![T::one(); n];
    let mut rows: Vec<DVector<T>> = Vec::with_capacity(m);
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|b: usize| resid[i] > resid[b]) {
                best = Some(i);
            }
        }
        let p = best.expect("m <= n leaves a candidate");
        let pivot = resid[p].max(T::zero()).sqrt();
        let kp = cross_gram(&xs.columns(p, 1).into_owned(), xs, &hp);
        let mut row = DVector::from_fn(n, |j, _| kp[(0, j)]);
        for prev in &rows {
            let c = prev[p];
            row.axpy(-c, prev, T::one());
        }
        if pivot > T::zero() {
            row /= pivot;
        } else {
            row.fill(T::zero());
        }
        for j in 0..n {
            resid[j] -= row[j] * row[j];
        }
        rows.push(row);
        chosen.push(p);
    }
    chosen
}

/// k-means++ seeding followed by Lloyd iterations; returns centroids as
/// columns.
fn kmeans<T: Real>(xs: &DMatrix<T>, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let n = xs.ncols();
    let mut idx = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| to_f64(sq_dist(xs, i, xs, idx[0]))).collect();
    while idx.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            (0..n).find(|i| !idx.contains(i)).expect("m <= n leaves a candidate")
        };
        idx.push(pick);
        for i in 0..n {
            d2[i] = d2[i].min(to_f64(sq_dist(xs, i, xs, pick)));
        }
    }
    let mut centers = DMatrix::from_fn(xs.nrows(), m, |d, j| xs[(d, idx[j])]);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut bd = sq_dist(xs, i, &centers, 0);
            for j in 1..m {
                let d = sq_dist(xs, i, &centers, j);
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::<T>::zeros(xs.nrows(), m);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assign[i]] += 1;
            for d in 0..xs.nrows() {
                sums[(d, assign[i])] += xs[(d, i)];
            }
        }
        for j in 0..m {
            if counts[j] > 0 {
                let c: T = lit(counts[j] as f64);
                for d in 0..xs.nrows() {
                    centers[(d, j)] = sums[(d, j)] / c;
                }
            } else {
                // re-seed an empty cluster at the worst-served point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(xs, a, &centers, assign[a]);
                        let db = sq_dist(xs, b, &centers, assign[b]);
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .expect("n >= 1");
                centers.set_column(j, &xs.column(far));
                assign[far] = j;
            }
        }
    }
    centers
}

/// Factorizations shared by the bound and the posterior.
struct Factors<T: Real> {
    kmm: DMatrix<T>,
    kmn: DMatrix<T>,
    l_m: DMatrix<T>,
    /// `L_m⁻¹ K_mn / σ`.
    a: DMatrix<T>,
    l_b: DMatrix<T>,
}

fn factors<T: Real>(zc: &DMatrix<T>, xc: &DMatrix<T>, hp: &Hyperparams<T>) -> Option<Factors<T>> {
    let kmm = cross_gram(zc, zc, hp);
    let (l_m, _) = cholesky_jittered(&kmm)?;
    let kmn = cross_gram(zc, xc, hp);
    let sigma = hp.noise_var.sqrt();
    let mut a = kmn.clone();
    if !l_m.solve_lower_triangular_mut(&mut a) {
        return None;
    }
    a /= sigma;
    let m = zc.ncols();
    let b = DMatrix::identity(m, m) + &a * a.transpose();
    let l_b = b.cholesky()?.l();
    Some(Factors { kmm, kmn, l_m, a, l_b })
}

/// Variational lower bound for one target column and its gradient with
/// respect to `[log l_d, log σ²_f, log σ²_n]`. `x` is `N × n_x`, `z` is
/// `M × n_x`.
pub fn elbo<T: Real>(hp: &Hyperparams<T>, x: &DMatrix<T>, z: &DMatrix<T>, r: &DVector<T>) -> Result<(T, DVector<T>), SparseGpError> {
    if r.len() != x.nrows() {
        return Err(SparseGpError::Dimension { expected: x.nrows(), got: r.len() });
    }
    if z.ncols() != x.ncols() {
        return Err(SparseGpError::Dimension { expected: x.ncols(), got: z.ncols() });
    }
    elbo_columns(hp, &z.transpose(), &x.transpose(), r).ok_or(SparseGpError::NotPositiveDefinite)
}

fn elbo_columns<T: Real>(hp: &Hyperparams<T>, zc: &DMatrix<T>, xc: &DMatrix<T>, r: &DVector<T>) -> Option<(T, DVector<T>)> {
    let f = factors(zc, xc, hp)?;
    let n = xc.ncols();
    let n_x = xc.nrows();
    let s2 = hp.noise_var;
    let sigma = s2.sqrt();
    let half: T = lit(0.5);
    let nn: T = lit(n as f64);

    let ay = &f.a * r;
    let binv_ay = f.l_b.tr_solve_lower_triangular(&f.l_b.solve_lower_triangular(&ay)?)?;
    let alpha = (r - f.a.transpose() * &binv_ay) / s2;
    let log_det_b: T = (0..f.l_b.nrows()).map(|i| f.l_b[(i, i)].ln()).fold(T::zero(), |a, b| a + b) * lit(2.0);
    let log_det_c = nn * s2.ln() + log_det_b;
    let tr_k = nn * hp.signal_var;
    let tr_q = s2 * f.a.norm_squared();
    let gap = tr_k - tr_q;
    let value = -half * r.dot(&alpha) - half * log_det_c - half * nn * lit::<T>(2.0 * std::f64::consts::PI).ln() - gap / (lit::<T>(2.0) * s2);

    // V = K_mm⁻¹ K_mn, W = ααᵀ − C⁻¹
    let v = f.l_m.tr_solve_lower_triangular(&(&f.a * sigma))?;
    let vat = &v * f.a.transpose();
    let binv_a = f.l_b.tr_solve_lower_triangular(&f.l_b.solve_lower_triangular(&f.a)?)?;
    let v_cinv = (&v - &vat * &binv_a) / s2;
    let v_alpha = &v * &alpha;
    let vw = &v_alpha * alpha.transpose() - &v_cinv;
    let g_mn = &vw + &v / s2;
    let g_mm = (&vw * v.transpose()) * (-half) - (&v * v.transpose()) / (lit::<T>(2.0) * s2);

    let inv = hp.inv_sq_lengthscales();
    let m = zc.ncols();
    let mut grad = DVector::zeros(n_x + 2);
    for i in 0..m {
        for j in 0..n {
            let gk = g_mn[(i, j)] * f.kmn[(i, j)];
            for d in 0..n_x {
                let diff = zc[(d, i)] - xc[(d, j)];
                grad[d] += gk * diff * diff * inv[d];
            }
            grad[n_x] += gk;
        }
        for j in 0..m {
            let gk = g_mm[(i, j)] * f.kmm[(i, j)];
            for d in 0..n_x {
                let diff = zc[(d, i)] - zc[(d, j)];
                grad[d] += gk * diff * diff * inv[d];
            }
            grad[n_x] += gk;
        }
    }
    grad[n_x] -= tr_k / (lit::<T>(2.0) * s2);
    let lb_a = f.l_b.solve_lower_triangular(&f.a)?;
    let tr_cinv = (nn - lb_a.norm_squared()) / s2;
    let tr_w = alpha.norm_squared() - tr_cinv;
    grad[n_x + 1] = s2 * (half * tr_w + gap / (lit::<T>(2.0) * s2 * s2));
    Some((value, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutput<T: Real> {
    pub predictor: KernelPredictor<T>,
    pub bound: T,
}

impl<T: Real> SparseOutput<T> {
    pub fn hyperparams(&self) -> &Hyperparams<T> {
        &self.predictor.hp
    }
}

/// Trained sparse GP sharing one set of inducing inputs across outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "SparseModelData<T>", into = "SparseModelData<T>")]
pub struct SparseGpModel<T: Real> {
    /// Inducing inputs as columns (`n_x × M`).
    centers: DMatrix<T>,
    pub outputs: Vec<SparseOutput<T>>,
    pub n_train: usize,
}

impl<T: Real> SparseGpModel<T> {
    /// Conditions on `(x, targets)` with fixed inducing inputs `z`
    /// (`M × n_x`) and hyperparameters.
    pub fn condition(x: &DMatrix<T>, targets: &DMatrix<T>, z: &DMatrix<T>, hps: &[Hyperparams<T>]) -> Result<Self, SparseGpError> {
        if targets.nrows() != x.nrows() {
            return Err(SparseGpError::Dimension { expected: x.nrows(), got: targets.nrows() });
        }
        if hps.len() != targets.ncols() {
            return Err(SparseGpError::Dimension { expected: targets.ncols(), got: hps.len() });
        }
        if z.ncols() != x.ncols() {
            return Err(SparseGpError::Dimension { expected: x.ncols(), got: z.ncols() });
        }
        if z.nrows() == 0 || z.nrows() > x.nrows() {
            return Err(SparseGpError::InducingCount { m: z.nrows(), n: x.nrows() });
        }
        let zc = z.transpose();
        let xc = x.transpose();
        let outputs = hps
            .iter()
            .enumerate()
            .map(|(a, hp)| condition_output(&zc, &xc, &targets.column(a).into_owned(), hp))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SparseGpModel { centers: zc, outputs, n_train: x.nrows() })
    }

    /// Inducing inputs as rows (`M × n_x`).
    pub fn inducing(&self) -> DMatrix<T> {
        self.centers.transpose()
    }

    pub fn n_inducing(&self) -> usize {
        self.centers.ncols()
    }

    pub fn hyperparams(&self) -> Vec<Hyperparams<T>> {
        self.outputs.iter().map(|o| o.predictor.hp.clone()).collect()
    }
}

fn condition_output<T: Real>(zc: &DMatrix<T>, xc: &DMatrix<T>, r: &DVector<T>, hp: &Hyperparams<T>) -> Result<SparseOutput<T>, SparseGpError> {
    let f = factors(zc, xc, hp).ok_or(SparseGpError::NotPositiveDefinite)?;
    let sigma = hp.noise_var.sqrt();
    let c = f.l_b.solve_lower_triangular(&(&f.a * r / sigma)).ok_or(SparseGpError::NotPositiveDefinite)?;
    let weights = f
        .l_m
        .tr_solve_lower_triangular(&f.l_b.tr_solve_lower_triangular(&c).ok_or(SparseGpError::NotPositiveDefinite)?)
        .ok_or(SparseGpError::NotPositiveDefinite)?;
    let bound = elbo_columns(hp, zc, xc, r).map(|(v, _)| v).ok_or(SparseGpError::NotPositiveDefinite)?;
    Ok(SparseOutput { predictor: KernelPredictor { hp: hp.clone(), weights, precision: Precision::Sparse { l_m: f.l_m, l_b: f.l_b } }, bound })
}

impl<T: Real> Regressor<T> for SparseGpModel<T> {
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

#[derive(Debug, Clone)]
pub struct SparseOptions<T: Real> {
    pub m: usize,
    pub strategy: InducingStrategy,
    pub train: TrainOptions<T>,
}

/// Selects inducing inputs and trains one sparse GP per column of `r`.
pub fn train_sparse<T: Real>(x: &DMatrix<T>, r: &DMatrix<T>, opts: &SparseOptions<T>) -> Result<SparseGpModel<T>, SparseGpError> {
    if r.nrows() != x.nrows() {
        return Err(SparseGpError::Dimension { expected: x.nrows(), got: r.nrows() });
    }
    if x.iter().chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(SparseGpError::NonFinite);
    }
    let z = select_inducing(x, opts.m, opts.strategy, opts.train.seed)?;
    train_sparse_with(x, r, &z, &opts.train)
}

/// Trains with fixed inducing inputs `z` (`M × n_x`).
pub fn train_sparse_with<T: Real>(x: &DMatrix<T>, r: &DMatrix<T>, z: &DMatrix<T>, opts: &TrainOptions<T>) -> Result<SparseGpModel<T>, SparseGpError> {
    if z.nrows() == 0 || z.nrows() > x.nrows() {
        return Err(SparseGpError::InducingCount { m: z.nrows(), n: x.nrows() });
    }
    let scaling = Scaling::of(x);
    let xs = scaling.apply_columns(x);
    let zs = scaling.apply_columns(z);
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
            match multistart(init.clone(), opts, a as u64, |hp| elbo_columns(hp, &zs, &xs, &rs)) {
                Some((theta, _)) => unscale_hp(&params_to_hp(&theta), &scaling, scale),
                None => {
                    warn!("output {a}: every optimizer start failed; keeping the initial hyperparameters");
                    unscale_hp(&params_to_hp(&init), &scaling, scale)
                }
            }
        })
        .collect();
    SparseGpModel::condition(x, r, z, &hps)
}

pub fn sparse_predict<T: Real>(model: &SparseGpModel<T>, x_star: &[T]) -> (DVector<T>, DVector<T>) {
    model.predict(x_star)
}

pub fn sparse_mean_gradient<T: Real>(model: &SparseGpModel<T>, x_star: &[T]) -> DMatrix<T> {
    model.mean_gradient(x_star)
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct SparseOutputData<T: Real> {
    hyperparams: Hyperparams<T>,
    /// Variational mean of the inducing values.
    mu_m: DVector<T>,
    /// Variational covariance of the inducing values.
    a_m: DMatrix<T>,
    weights: DVector<T>,
    l_b: DMatrix<T>,
    bound: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct SparseModelData<T: Real> {
    inducing: DMatrix<T>,
    n_train: usize,
    outputs: Vec<SparseOutputData<T>>,
}

impl<T: Real> From<SparseGpModel<T>> for SparseModelData<T> {
    fn from(m: SparseGpModel<T>) -> Self {
        let outputs = m
            .outputs
            .into_iter()
            .map(|o| {
                let Precision::Sparse { l_m, l_b } = o.predictor.precision else {
                    unreachable!("sparse model holds a sparse precision")
                };
                let kmm = &l_m * l_m.transpose();
                let mu_m = &kmm * &o.predictor.weights;
                let mut lbi_lmt = l_m.transpose();
                l_b.solve_lower_triangular_mut(&mut lbi_lmt);
                let a_m = lbi_lmt.transpose() * &lbi_lmt;
                SparseOutputData { hyperparams: o.predictor.hp, mu_m, a_m, weights: o.predictor.weights, l_b, bound: o.bound }
            })
            .collect();
        SparseModelData { inducing: m.centers.transpose(), n_train: m.n_train, outputs }
    }
}

impl<T: Real> TryFrom<SparseModelData<T>> for SparseGpModel<T> {
    type Error = String;

    fn try_from(d: SparseModelData<T>) -> Result<Self, String> {
        let centers = d.inducing.transpose();
        let m = centers.ncols();
        let outputs = d
            .outputs
            .into_iter()
            .map(|o| {
                if o.weights.len() != m || o.l_b.shape() != (m, m) || o.hyperparams.lengthscales.len() != centers.nrows() {
                    return Err("sparse model dimensions do not match the inducing inputs".to_string());
                }
                let kmm = cross_gram(&centers, &centers, &o.hyperparams);
                let (l_m, _) = cholesky_jittered(&kmm).ok_or("inducing covariance not positive definite")?;
                Ok(SparseOutput {
                    predictor: KernelPredictor { hp: o.hyperparams, weights: o.weights, precision: Precision::Sparse { l_m, l_b: o.l_b } },
                    bound: o.bound,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(SparseGpModel { centers, outputs, n_train: d.n_train })
    }
}
