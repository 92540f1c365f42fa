//! Gaussian input model under AGC recourse, first-order Taylor (TA1)
//! propagation through the hybrid model, and chance-constraint margins.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::grid::IoSchema;
use crate::kernel::Regressor;
use crate::linmodel::LinearSurrogate;
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum UncertaintyError {
    #[error("participation factors must be nonnegative and sum to one (sum {sum:.6e}, min {min:.3e})")]
    AlphaNotSimplex { sum: f64, min: f64 },
    #[error("variances must be nonnegative")]
    NegativeVariance,
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

/// Mean and covariance of the stochastic input `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GaussianVector<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct OutputMoments<T: Real> {
    pub mu_y: DVector<T>,
    pub var_y: DVector<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Margins<T: Real> {
    pub lambda_y: DVector<T>,
    pub lambda_pg: DVector<T>,
    pub tau_y: T,
    pub tau_pg: T,
}

fn check_alpha<T: Real>(alpha: &DVector<T>) -> Result<(), UncertaintyError> {
    let sum = to_f64(alpha.sum());
    let min = alpha.iter().map(|&a| to_f64(a)).fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > 1e-8 || min < -1e-10 || !sum.is_finite() {
        return Err(UncertaintyError::AlphaNotSimplex { sum, min });
    }
    Ok(())
}

/// Covariance of `[p_g (all generators), p_d]` where `p_d` stacks the
/// uncertain loads and renewables with variances `sigma_d`.
///
/// The generators answer the net imbalance `Ω = Σ δp_l − Σ δp_r`, so load
/// columns of `Σ_gd` carry `+α σ²` and renewable columns `−α σ²`.
pub fn build_input_cov<T: Real>(alpha: &DVector<T>, sigma_d: &DVector<T>, is_res: &[bool]) -> Result<DMatrix<T>, UncertaintyError> {
    check_alpha(alpha)?;
    if is_res.len() != sigma_d.len() {
        return Err(UncertaintyError::Dimension { expected: sigma_d.len(), got: is_res.len() });
    }
    if sigma_d.iter().any(|&s| !(s >= T::zero())) {
        return Err(UncertaintyError::NegativeVariance);
    }
    let n_g = alpha.len();
    let n_d = sigma_d.len();
    let tr = sigma_d.sum();
    let mut cov = DMatrix::zeros(n_g + n_d, n_g + n_d);
    for i in 0..n_g {
        for j in 0..n_g {
            cov[(i, j)] = alpha[i] * alpha[j] * tr;
        }
        for j in 0..n_d {
            let v = alpha[i] * sigma_d[j];
            let v = if is_res[j] { -v } else { v };
            cov[(i, n_g + j)] = v;
            cov[(n_g + j, i)] = v;
        }
    }
    for j in 0..n_d {
        cov[(n_g + j, n_g + j)] = sigma_d[j];
    }
    Ok(cov)
}

/// Input distribution in schema order: the slack generator is dropped from
/// the generator block. `alpha` is indexed by generator position.
pub fn input_distribution<T: Real>(
    schema: &IoSchema,
    mean: DVector<T>,
    alpha: &DVector<T>,
    sigma_d: &DVector<T>,
) -> Result<GaussianVector<T>, UncertaintyError> {
    if alpha.len() != schema.n_gen {
        return Err(UncertaintyError::Dimension { expected: schema.n_gen, got: alpha.len() });
    }
    if sigma_d.len() != schema.n_d() {
        return Err(UncertaintyError::Dimension { expected: schema.n_d(), got: sigma_d.len() });
    }
    if mean.len() != schema.n_x {
        return Err(UncertaintyError::Dimension { expected: schema.n_x, got: mean.len() });
    }
    check_alpha(alpha)?;
    if sigma_d.iter().any(|&s| !(s >= T::zero())) {
        return Err(UncertaintyError::NegativeVariance);
    }
    Ok(GaussianVector { mean, cov: schema_input_cov(schema, alpha, sigma_d) })
}

/// `Σ_x` in schema order without validating `alpha`, for use inside the
/// optimizer where the simplex holds only at convergence.
pub(crate) fn schema_input_cov<T: Real>(schema: &IoSchema, alpha: &DVector<T>, sigma_d: &DVector<T>) -> DMatrix<T> {
    let n_pg = schema.n_pg_inputs();
    let n_l = schema.load_inputs.len();
    let tr = sigma_d.sum();
    DMatrix::from_fn(schema.n_x, schema.n_x, |i, j| match (i < n_pg, j < n_pg) {
        (true, true) => alpha[schema.gen_inputs[i]] * alpha[schema.gen_inputs[j]] * tr,
        (false, false) if i == j => sigma_d[i - n_pg],
        (false, false) => T::zero(),
        _ => {
            let (g, d) = if i < n_pg { (i, j - n_pg) } else { (j, i - n_pg) };
            let v = alpha[schema.gen_inputs[g]] * sigma_d[d];
            if d >= n_l { -v } else { v }
        }
    })
}

/// First-order Taylor propagation of a Gaussian input through
/// `y = z(x) + GP(x)`. Without a surrogate the model is the GP alone.
pub fn ta1_propagate<T: Real>(
    surrogate: Option<&LinearSurrogate<T>>,
    gp: &dyn Regressor<T>,
    input: &GaussianVector<T>,
) -> Result<OutputMoments<T>, UncertaintyError> {
    let n_x = gp.n_inputs();
    if input.mean.len() != n_x || input.cov.shape() != (n_x, n_x) {
        return Err(UncertaintyError::Dimension { expected: n_x, got: input.mean.len() });
    }
    let x = input.mean.as_slice();
    let (mu_gp, var_gp) = gp.predict(x);
    let grad = gp.mean_gradient(x);
    let (z, var_lin) = match surrogate {
        Some(s) => (
            s.predict(&input.mean).map_err(|_| UncertaintyError::Dimension { expected: s.n_x(), got: n_x })?,
            s.propagate_cov(&input.cov).map_err(|_| UncertaintyError::Dimension { expected: s.n_x(), got: n_x })?,
        ),
        None => (DVector::zeros(gp.n_outputs()), DVector::zeros(gp.n_outputs())),
    };
    if z.len() != gp.n_outputs() {
        return Err(UncertaintyError::Dimension { expected: gp.n_outputs(), got: z.len() });
    }
    let gs = &grad * &input.cov;
    let var_y = DVector::from_fn(gp.n_outputs(), |a, _| {
        var_lin[a] + var_gp[a] + gs.row(a).dot(&grad.row(a)).max(T::zero())
    });
    Ok(OutputMoments { mu_y: z + mu_gp, var_y })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF.
pub fn normal_quantile(p: f64) -> Result<f64, UncertaintyError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(UncertaintyError::Probability(p));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}

/// `λ_y = τ_y √var_y` and `λ_pg,k = τ_pg α_k √(tr Σ_d)` with
/// `τ = Φ⁻¹(1 − ε)`.
pub fn compute_margins<T: Real>(
    var_y: &DVector<T>,
    alpha: &DVector<T>,
    sigma_d: &DVector<T>,
    eps_y: f64,
    eps_pg: f64,
) -> Result<Margins<T>, UncertaintyError> {
    if var_y.iter().chain(sigma_d.iter()).any(|&v| !(v >= T::zero())) {
        return Err(UncertaintyError::NegativeVariance);
    }
    let tau_y: T = lit(normal_quantile(1.0 - eps_y)?);
    let tau_pg: T = lit(normal_quantile(1.0 - eps_pg)?);
    let sd = sigma_d.sum().sqrt();
    Ok(Margins {
        lambda_y: var_y.map(|v| tau_y * v.sqrt()),
        lambda_pg: alpha.map(|a| tau_pg * a * sd),
        tau_y,
        tau_pg,
    })
}

/// Linear-interpolation quantile of sorted data (`p ∈ [0, 1]`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical tightenings from Monte-Carlo outputs (`N × n_y`):
/// `λ_upper = q_{1−ε} − center`, `λ_lower = center − q_ε`.
pub fn empirical_margins(samples: &DMatrix<f64>, center: &DVector<f64>, eps: f64) -> Result<(DVector<f64>, DVector<f64>), UncertaintyError> {
    if samples.nrows() < 100 {
        return Err(UncertaintyError::TooFewSamples { need: 100, got: samples.nrows() });
    }
    if center.len() != samples.ncols() {
        return Err(UncertaintyError::Dimension { expected: samples.ncols(), got: center.len() });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(UncertaintyError::Probability(eps));
    }
    let mut upper = DVector::zeros(center.len());
    let mut lower = DVector::zeros(center.len());
    for a in 0..samples.ncols() {
        let mut col: Vec<f64> = samples.column(a).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        upper[a] = quantile_sorted(&col, 1.0 - eps) - center[a];
        lower[a] = center[a] - quantile_sorted(&col, eps);
    }
    Ok((upper, lower))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{train_gp, GpModel, TrainOptions};
    use crate::kernel::Hyperparams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_against_bisection() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!((normal_quantile(0.975).unwrap() - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(0.999).unwrap() - 3.090232).abs() < 1e-6);
        for &p in &[1e-12, 1e-6, 0.0027, 0.01, 0.025, 0.2, 0.4, 0.51, 0.9, 0.975, 0.999, 1.0 - 1e-9] {
            let q = normal_quantile(p).unwrap();
            assert!((normal_cdf(q) - p).abs() <= 1e-9 * p.max(1e-3), "p {p}");
            assert!((q - bisect_quantile(p)).abs() < 1e-8 * (1.0 + q.abs()), "p {p}");
        }
        // dyadic probabilities keep 1 − p exact
        for k in 1..30 {
            let p = 0.5f64.powi(k);
            assert!((normal_quantile(p).unwrap() + normal_quantile(1.0 - p).unwrap()).abs() < 1e-12, "p {p}");
        }
        assert!(normal_quantile(0.0).is_err() && normal_quantile(1.0).is_err() && normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn input_cov_blocks() {
        let alpha = DVector::from_vec(vec![1.0]);
        let cov = build_input_cov(&alpha, &DVector::from_vec(vec![0.04]), &[false]).unwrap();
        assert_eq!(cov, DMatrix::from_row_slice(2, 2, &[0.04, 0.04, 0.04, 0.04]));
        let cov = build_input_cov(&alpha, &DVector::from_vec(vec![0.04]), &[true]).unwrap();
        assert_eq!(cov[(0, 1)], -0.04);
        let zero = build_input_cov(&DVector::from_vec(vec![0.5, 0.5]), &DVector::zeros(3), &[false; 3]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(build_input_cov(&DVector::from_vec(vec![0.7, 0.7]), &DVector::zeros(1), &[false]).is_err());
    }

    #[test]
    fn schema_cov_is_a_submatrix_of_the_full_cov() {
        let case = crate::grid::load_case(concat!(env!("CARGO_MANIFEST_DIR"), "/data/case9.json")).unwrap();
        let schema = crate::grid::io_schema(&case);
        let alpha = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let sd = DVector::from_fn(schema.n_d(), |i, _| 0.01 * (i + 1) as f64);
        let is_res: Vec<bool> = (0..schema.n_d()).map(|j| j >= schema.load_inputs.len()).collect();
        let full = build_input_cov(&alpha, &sd, &is_res).unwrap();
        let idx: Vec<usize> = schema.gen_inputs.iter().copied().chain((0..schema.n_d()).map(|j| 3 + j)).collect();
        let cov = schema_input_cov(&schema, &alpha, &sd);
        for i in 0..schema.n_x {
            for j in 0..schema.n_x {
                assert_eq!(cov[(i, j)], full[(idx[i], idx[j])]);
            }
        }
    }

    #[test]
    fn input_cov_is_psd_with_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..4).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let s: f64 = raw.iter().sum();
            let alpha = DVector::from_iterator(4, raw.iter().map(|v| v / s));
            let sig = DVector::from_fn(5, |_, _| rand::Rng::random::<f64>(&mut rng) * 0.1);
            let cov = build_input_cov(&alpha, &sig, &[false, false, true, false, true]).unwrap();
            let eig = cov.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-10);
            let rank = eig.eigenvalues.iter().filter(|&&e| e > 1e-10).count();
            assert!(rank <= 5 + 1);
        }
    }

    #[test]
    fn margins_closed_forms() {
        let m = compute_margins(&DVector::<f64>::from_vec(vec![0.0004]), &DVector::from_vec(vec![1.0]), &DVector::zeros(2), 0.025, 0.001).unwrap();
        assert!((m.lambda_y[0] - 1.959964 * 0.02).abs() < 1e-7);
        assert_eq!(m.lambda_pg[0], 0.0);
        let half = compute_margins(&DVector::from_vec(vec![0.3]), &DVector::from_vec(vec![0.5, 0.5]), &DVector::from_vec(vec![0.1]), 0.5, 0.5).unwrap();
        assert!(half.lambda_y.iter().chain(half.lambda_pg.iter()).all(|&v| v == 0.0));
        let a = compute_margins(&DVector::<f64>::from_vec(vec![0.3, 0.1]), &DVector::from_vec(vec![0.2, 0.8]), &DVector::from_vec(vec![0.1]), 0.1, 0.1).unwrap();
        let b = compute_margins(&DVector::<f64>::from_vec(vec![0.3, 0.1]), &DVector::from_vec(vec![0.2, 0.8]), &DVector::from_vec(vec![0.1]), 0.025, 0.025).unwrap();
        for k in 0..2 {
            assert!((a.lambda_y[k] / b.lambda_y[k] - a.tau_y / b.tau_y).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_margins_of_gaussian_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = DMatrix::from_fn(100_000, 1, |_, _| StandardNormal.sample(&mut rng));
        let (up, lo) = empirical_margins(&s, &DVector::zeros(1), 0.0027).unwrap();
        assert!((up[0] - 3.0).abs() < 0.3 && (lo[0] - 3.0).abs() < 0.3);
        let c = DMatrix::from_element(200, 2, 1.5);
        let (up, lo) = empirical_margins(&c, &DVector::from_element(2, 1.5), 0.05).unwrap();
        assert!(up.iter().chain(lo.iter()).all(|&v| v == 0.0));
        assert!(empirical_margins(&DMatrix::zeros(10, 1), &DVector::zeros(1), 0.1).is_err());
    }

    fn sine_model() -> GpModel<f64> {
        let x = DMatrix::from_fn(60, 1, |i, _| -1.5 + 3.0 * i as f64 / 59.0);
        let y = x.map(f64::sin);
        train_gp(&x, &y, &TrainOptions::default()).unwrap()
    }

    #[test]
    fn degenerate_input_reduces_to_hybrid_prediction() {
        let gp = sine_model();
        let sur: LinearSurrogate<f64> = LinearSurrogate { n_v: 0, a: DMatrix::from_element(1, 1, 0.5), b: DVector::from_element(1, 0.1), v_dc: 1.0 };
        let input = GaussianVector { mean: DVector::from_element(1, 0.3), cov: DMatrix::zeros(1, 1) };
        let out = ta1_propagate(Some(&sur), &gp, &input).unwrap();
        let (mu, var) = gp.predict(&[0.3]);
        assert!((out.mu_y[0] - (0.15 + 0.1 + mu[0])).abs() < 1e-15);
        assert_eq!(out.var_y[0], var[0]);
    }

    #[test]
    fn zero_weight_gp_adds_only_posterior_variance() {
        let x = DMatrix::<f64>::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let gp = GpModel::condition(&x, &DMatrix::zeros(3, 1), &[Hyperparams::isotropic(1, 1.0, 1.0, 0.01)]).unwrap();
        let sur = LinearSurrogate { n_v: 0, a: DMatrix::from_element(1, 1, 2.0), b: DVector::zeros(1), v_dc: 1.0 };
        let input = GaussianVector { mean: DVector::from_element(1, 0.5), cov: DMatrix::from_element(1, 1, 0.09) };
        let out = ta1_propagate(Some(&sur), &gp, &input).unwrap();
        let (_, var) = gp.predict(&[0.5]);
        assert!((out.var_y[0] - (4.0 * 0.09 + var[0])).abs() < 1e-14);
    }

    #[test]
    fn ta1_matches_monte_carlo_on_smooth_region() {
        let gp = sine_model();
        let input = GaussianVector { mean: DVector::zeros(1), cov: DMatrix::from_element(1, 1, 0.01) };
        let out = ta1_propagate(None, &gp, &input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let m = gp.outputs[0].predictor.mean(gp.centers(), &[normal.sample(&mut rng)]);
            s += m;
            s2 += m * m;
        }
        let mc = s2 / n as f64 - (s / n as f64).powi(2);
        assert!((out.var_y[0] - mc).abs() < 0.15 * mc, "ta1 {} mc {mc}", out.var_y[0]);
        let bigger = GaussianVector { mean: input.mean.clone(), cov: &input.cov * 2.0 };
        assert!(ta1_propagate(None, &gp, &bigger).unwrap().var_y[0] >= out.var_y[0]);
    }
}
