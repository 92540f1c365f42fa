//! Chance-constrained OPF on the hybrid model and the deterministic AC-OPF
//! used by the baselines.
//!
//! The CC-OPF decision vector is `u = [p_g (all generators, p.u.), α]`. The
//! output moments are substituted in, so each tightened output box becomes a
//! composite function of `u`:
//!
//! ```text
//! μ_y(u) = z(x) + μ_GP(x),   x = [p_g (non-slack), p_l, p_r forecasts]
//! σ²_y(u) = diag(A Σ_x Aᵀ) + σ²_GP(x) + diag(∇μ Σ_x ∇μᵀ)
//! y_min + τ σ_y ≤ μ_y ≤ y_max − τ σ_y
//! ```

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::acpf::{bus_powers, power_jacobian, solve_acpf, AcpfError, Injections, PfSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::dataset::UncertaintySpec;
use crate::grid::{build_admittance, io_schema, Generator, GridCase, IoSchema};
use crate::model::HybridModel;
use crate::nlp::{self, IpmOptions, Nlp, SolveStatus};
use crate::uncertainty::{compute_margins, input_distribution, normal_quantile, schema_input_cov, ta1_propagate, UncertaintyError};

/// Objective scaling inside the solver ($ → k$).
pub const COST_SCALE: f64 = 1e-3;
const VAR_FLOOR: f64 = 1e-14;

#[derive(Debug, thiserror::Error)]
pub enum CcopfError {
    #[error("forecast net load {net_load:.4} p.u. outside the tightened capacity [{lo:.4}, {hi:.4}]")]
    Infeasible { net_load: f64, lo: f64, hi: f64 },
    #[error("model does not match the case schema")]
    Schema,
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub lambda_y: Vec<f64>,
    pub lambda_pg: Vec<f64>,
    pub tau_y: f64,
    pub tau_pg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    /// Generator setpoints (MW), one per generator.
    pub p_g: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Expected cost ($).
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub mu_y: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub margins: MarginReport,
}

/// Expected cost `Σ c₂(p² + tr(Σ_d) α²) + c₁ p + c₀` in MW units and its
/// gradient with respect to `[p_g, α]`.
pub fn expected_cost(p_g: &[f64], alpha: &[f64], sigma_d: &DVector<f64>, gens: &[Generator]) -> (f64, DVector<f64>) {
    let n = gens.len();
    let tr = sigma_d.sum();
    let mut value = 0.0;
    let mut grad = DVector::zeros(2 * n);
    for (k, g) in gens.iter().enumerate() {
        value += g.c2 * (p_g[k] * p_g[k] + tr * alpha[k] * alpha[k]) + g.c1 * p_g[k] + g.c0;
        grad[k] = 2.0 * g.c2 * p_g[k] + g.c1;
        grad[n + k] = 2.0 * g.c2 * tr * alpha[k];
    }
    (value, grad)
}

/// Output moments and their derivatives with respect to `u`.
struct OutputEval {
    mu: DVector<f64>,
    var: DVector<f64>,
    d_mu: DMatrix<f64>,
    d_var: DMatrix<f64>,
}

/// The hybrid GP CC-OPF as a smooth NLP.
pub struct NlpProblem<'a> {
    case: &'a GridCase,
    model: &'a HybridModel<f64>,
    schema: IoSchema,
    d_mean: DVector<f64>,
    /// Input variances (p.u.²).
    sigma_d: DVector<f64>,
    net_load: f64,
    y_lo: DVector<f64>,
    y_hi: DVector<f64>,
    one_sided: Vec<bool>,
    pub eps_y: f64,
    pub eps_pg: f64,
    tau_y: f64,
    tau_pg: f64,
    /// Multiplies every margin; 1 is the actual problem.
    pub margin_scale: f64,
}

pub fn assemble_nlp<'a>(
    case: &'a GridCase,
    model: &'a HybridModel<f64>,
    spec: &UncertaintySpec,
    eps_y: f64,
    eps_pg: f64,
) -> Result<NlpProblem<'a>, CcopfError> {
    let schema = io_schema(case);
    model.check_schema(&schema).map_err(|_| CcopfError::Schema)?;
    let tau_y = normal_quantile(1.0 - eps_y)?;
    let tau_pg = normal_quantile(1.0 - eps_pg)?;
    let sigma_d = spec.variances(case, &schema);
    let d_mean = UncertaintySpec::forecast(case, &schema);
    let net_load: f64 = case.buses.iter().map(|b| b.p_load - b.p_res).sum();

    // Σ λ_pg = τ √tr Σ_d whatever α is
    let sd = sigma_d.sum().sqrt();
    let lo = case.generators.iter().map(|g| g.p_min).sum::<f64>() + tau_pg * sd;
    let hi = case.generators.iter().map(|g| g.p_max).sum::<f64>() - tau_pg * sd;
    if !(lo <= net_load && net_load <= hi) {
        return Err(CcopfError::Infeasible { net_load, lo, hi });
    }

    let n_y = schema.n_y;
    let mut y_lo = DVector::zeros(n_y);
    let mut y_hi = DVector::zeros(n_y);
    let mut one_sided = vec![false; n_y];
    for (k, &i) in schema.v_outputs.iter().enumerate() {
        y_lo[k] = case.buses[i].v_min;
        y_hi[k] = case.buses[i].v_max;
    }
    for (k, g) in case.generators.iter().enumerate() {
        y_lo[schema.qg_offset() + k] = g.q_min;
        y_hi[schema.qg_offset() + k] = g.q_max;
    }
    for (k, l) in case.lines.iter().enumerate() {
        let a = schema.s_offset() + k;
        y_hi[a] = l.s_max;
        one_sided[a] = true;
    }
    Ok(NlpProblem {
        case,
        model,
        schema,
        d_mean,
        sigma_d,
        net_load,
        y_lo,
        y_hi,
        one_sided,
        eps_y,
        eps_pg,
        tau_y,
        tau_pg,
        margin_scale: 1.0,
    })
}

impl NlpProblem<'_> {
    fn n_g(&self) -> usize {
        self.case.generators.len()
    }

    /// Model input at the forecast for decision `u`.
    pub fn input(&self, u: &DVector<f64>) -> DVector<f64> {
        let n_pg = self.schema.n_pg_inputs();
        DVector::from_fn(self.schema.n_x, |j, _| if j < n_pg { u[self.schema.gen_inputs[j]] } else { self.d_mean[j - n_pg] })
    }

    fn outputs(&self, u: &DVector<f64>) -> OutputEval {
        let n_g = self.n_g();
        let n_y = self.schema.n_y;
        let n_v = self.schema.n_v();
        let n_x = self.schema.n_x;
        let n_pg = self.schema.n_pg_inputs();
        let x = self.input(u);
        let alpha = u.rows(n_g, n_g).into_owned();
        let sx = schema_input_cov(&self.schema, &alpha, &self.sigma_d);
        let tr = self.sigma_d.sum();
        let n_l = self.schema.load_inputs.len();
        let sign = |d: usize| if d < n_l { 1.0 } else { -1.0 };
        let ders = self.model.regressor().derivatives(x.as_slice());
        let sur = self.model.surrogate.as_ref();
        let z = sur.map(|s| s.predict(&x).expect("schema-checked input"));

        let mut ev = OutputEval {
            mu: DVector::zeros(n_y),
            var: DVector::zeros(n_y),
            d_mu: DMatrix::zeros(n_y, 2 * n_g),
            d_var: DMatrix::zeros(n_y, 2 * n_g),
        };
        // ∂(wᵀΣ_x w)/∂α_k for the non-slack generator in input slot j
        let quad_alpha = |w: &DVector<f64>, out: &mut DMatrix<f64>, a: usize| {
            let uw: f64 = (0..n_pg).map(|j| w[j] * alpha[self.schema.gen_inputs[j]]).sum();
            let cw: f64 = (0..self.schema.n_d()).map(|d| sign(d) * w[n_pg + d] * self.sigma_d[d]).sum();
            for j in 0..n_pg {
                out[(a, n_g + self.schema.gen_inputs[j])] += 2.0 * w[j] * (tr * uw + cw);
            }
        };
        for (a, d) in ders.iter().enumerate() {
            let arow = match (sur, a >= n_v) {
                (Some(s), true) => s.a.row(a - n_v).transpose(),
                _ => DVector::zeros(n_x),
            };
            let g = &d.d_mean;
            let sg = &sx * g;
            ev.mu[a] = z.as_ref().map_or(0.0, |z| z[a]) + d.mean;
            ev.var[a] = arow.dot(&(&sx * &arow)) + d.var + g.dot(&sg);
            let hsg = &d.h_mean * &sg;
            for j in 0..n_pg {
                let k = self.schema.gen_inputs[j];
                ev.d_mu[(a, k)] = arow[j] + g[j];
                ev.d_var[(a, k)] = d.d_var[j] + 2.0 * hsg[j];
            }
            quad_alpha(&arow, &mut ev.d_var, a);
            quad_alpha(g, &mut ev.d_var, a);
        }
        ev
    }

    /// Output moments at decision `u` (for reporting).
    pub fn moments(&self, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let ev = self.outputs(u);
        (ev.mu, ev.var)
    }

    /// Forecast-balanced dispatch proportional to capacity, uniform α.
    pub fn default_start(&self) -> DVector<f64> {
        let n_g = self.n_g();
        let gens = &self.case.generators;
        let lo: f64 = gens.iter().map(|g| g.p_min).sum();
        let hi: f64 = gens.iter().map(|g| g.p_max).sum();
        let t = ((self.net_load - lo) / (hi - lo)).clamp(0.0, 1.0);
        DVector::from_fn(2 * n_g, |i, _| {
            if i < n_g {
                gens[i].p_min + t * (gens[i].p_max - gens[i].p_min)
            } else {
                1.0 / n_g as f64
            }
        })
    }
}

impl Nlp for NlpProblem<'_> {
    fn n_vars(&self) -> usize {
        2 * self.n_g()
    }

    fn n_eq(&self) -> usize {
        2
    }

    fn n_ineq(&self) -> usize {
        2 * self.schema.n_y + 2 * self.n_g()
    }

    fn var_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n_g = self.n_g();
        let gens = &self.case.generators;
        let lb = DVector::from_fn(2 * n_g, |i, _| if i < n_g { gens[i].p_min } else { 0.0 });
        let ub = DVector::from_fn(2 * n_g, |i, _| if i < n_g { gens[i].p_max } else { 1.0 });
        (lb, ub)
    }

    fn objective(&self, u: &DVector<f64>) -> (f64, DVector<f64>) {
        let n_g = self.n_g();
        let base = self.case.base_mva;
        let p: Vec<f64> = (0..n_g).map(|k| u[k] * base).collect();
        let alpha: Vec<f64> = (0..n_g).map(|k| u[n_g + k]).collect();
        let (c, mut grad) = expected_cost(&p, &alpha, &(&self.sigma_d * (base * base)), &self.case.generators);
        grad.rows_mut(0, n_g).scale_mut(base);
        (c * COST_SCALE, grad * COST_SCALE)
    }

    fn equalities(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n_g = self.n_g();
        let h = DVector::from_vec(vec![u.rows(n_g, n_g).sum() - 1.0, u.rows(0, n_g).sum() - self.net_load]);
        let j = DMatrix::from_fn(2, 2 * n_g, |r, c| if (r == 0) == (c >= n_g) { 1.0 } else { 0.0 });
        (h, j)
    }

    fn inequalities(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n_g = self.n_g();
        let n_y = self.schema.n_y;
        let ev = self.outputs(u);
        let mut g = DVector::zeros(self.n_ineq());
        let mut jac = DMatrix::zeros(self.n_ineq(), 2 * n_g);
        let ty = self.margin_scale * self.tau_y;
        for a in 0..n_y {
            let var = ev.var[a].max(VAR_FLOOR);
            let sd = var.sqrt();
            let d_sd = if ev.var[a] > VAR_FLOOR { ev.d_var.row(a) / (2.0 * sd) } else { ev.d_var.row(a) * 0.0 };
            g[2 * a] = ev.mu[a] + ty * sd - self.y_hi[a];
            jac.row_mut(2 * a).copy_from(&(ev.d_mu.row(a) + &d_sd * ty));
            if self.one_sided[a] {
                g[2 * a + 1] = self.y_lo[a] - ev.mu[a];
                jac.row_mut(2 * a + 1).copy_from(&(-ev.d_mu.row(a)));
            } else {
                g[2 * a + 1] = self.y_lo[a] + ty * sd - ev.mu[a];
                jac.row_mut(2 * a + 1).copy_from(&(&d_sd * ty - ev.d_mu.row(a)));
            }
        }
        let tp = self.margin_scale * self.tau_pg * self.sigma_d.sum().sqrt();
        for (k, gen) in self.case.generators.iter().enumerate() {
            let r = 2 * n_y + 2 * k;
            g[r] = u[k] + tp * u[n_g + k] - gen.p_max;
            jac[(r, k)] = 1.0;
            jac[(r, n_g + k)] = tp;
            g[r + 1] = gen.p_min + tp * u[n_g + k] - u[k];
            jac[(r + 1, k)] = -1.0;
            jac[(r + 1, n_g + k)] = tp;
        }
        (g, jac)
    }
}

/// Runs the interior-point solver from `u0` and packages the result with
/// moments recomputed at the returned point.
pub fn solve_nlp(problem: &NlpProblem, u0: &DVector<f64>, opts: &IpmOptions) -> Result<DispatchSolution, CcopfError> {
    let res = nlp::solve(problem, u0, opts);
    let n_g = problem.n_g();
    let mut alpha: Vec<f64> = (0..n_g).map(|k| res.x[n_g + k].max(0.0)).collect();
    let s: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= s);
    let base = problem.case.base_mva;
    let p_pu = res.x.rows(0, n_g).into_owned();
    let mut u = res.x.clone();
    u.rows_mut(n_g, n_g).copy_from_slice(&alpha);

    let alpha_v = DVector::from_vec(alpha.clone());
    let input = input_distribution(&problem.schema, problem.input(&u), &alpha_v, &problem.sigma_d)?;
    let moments = ta1_propagate(problem.model.surrogate.as_ref(), problem.model.regressor(), &input)?;
    let margins = compute_margins(&moments.var_y, &alpha_v, &problem.sigma_d, problem.eps_y, problem.eps_pg)?;
    let p_mw: Vec<f64> = p_pu.iter().map(|p| p * base).collect();
    let (cost, _) = expected_cost(&p_mw, &alpha, &(&problem.sigma_d * (base * base)), &problem.case.generators);
    Ok(DispatchSolution {
        p_g: p_mw,
        alpha,
        cost,
        kkt_residual: res.kkt_residual,
        iterations: res.iterations,
        status: res.status,
        mu_y: moments.mu_y.iter().copied().collect(),
        sigma_y: moments.var_y.iter().map(|v| v.sqrt()).collect(),
        margins: MarginReport {
            lambda_y: margins.lambda_y.iter().copied().collect(),
            lambda_pg: margins.lambda_pg.iter().map(|l| l * base).collect(),
            tau_y: margins.tau_y,
            tau_pg: margins.tau_pg,
        },
    })
}

/// Solves the hybrid GP CC-OPF: zero-margin start, then the full problem,
/// falling back to a three-step margin continuation.
pub fn solve_ccopf(
    case: &GridCase,
    model: &HybridModel<f64>,
    spec: &UncertaintySpec,
    eps_y: f64,
    eps_pg: f64,
    opts: &IpmOptions,
) -> Result<DispatchSolution, CcopfError> {
    let mut problem = assemble_nlp(case, model, spec, eps_y, eps_pg)?;
    problem.margin_scale = 0.0;
    let start = nlp::solve(&problem, &problem.default_start(), opts);
    let u0 = if start.status == SolveStatus::Optimal { start.x } else { problem.default_start() };
    problem.margin_scale = 1.0;
    let direct = solve_nlp(&problem, &u0, opts)?;
    if direct.status == SolveStatus::Optimal {
        return Ok(direct);
    }
    info!("direct CC-OPF solve ended {:?}; continuing over margins", direct.status);
    let mut u = u0;
    let mut last = direct;
    for step in 1..=3 {
        problem.margin_scale = step as f64 / 3.0;
        let r = nlp::solve(&problem, &u, opts);
        debug!("margin scale {:.3}: {:?} after {} iterations", problem.margin_scale, r.status, r.iterations);
        if r.status != SolveStatus::Optimal && step < 3 {
            break;
        }
        u = r.x;
        if step == 3 {
            last = solve_nlp(&problem, &u, opts)?;
        }
    }
    Ok(last)
}

// ---------------------------------------------------------------------------
// deterministic AC-OPF

/// Deterministic AC-OPF over `[p_g, q_g, θ, v]` with fixed generator voltage
/// setpoints and bus demands `p_d`, `q_d` (p.u.).
pub struct AcopfProblem<'a> {
    case: &'a GridCase,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    p_d: Vec<f64>,
    q_d: Vec<f64>,
    /// Buses with a voltage setpoint and the setpoint.
    v_fixed: Vec<(usize, f64)>,
}

impl<'a> AcopfProblem<'a> {
    pub fn new(case: &'a GridCase, p_d: Vec<f64>, q_d: Vec<f64>) -> Self {
        let (g, b) = build_admittance(case);
        let mut v_fixed: Vec<(usize, f64)> = Vec::new();
        for gen in &case.generators {
            if !v_fixed.iter().any(|&(i, _)| i == gen.bus) {
                v_fixed.push((gen.bus, gen.v_set));
            }
        }
        AcopfProblem { case, g, b, p_d, q_d, v_fixed }
    }

    fn n_g(&self) -> usize {
        self.case.generators.len()
    }

    fn n_b(&self) -> usize {
        self.case.n_bus()
    }

    fn split<'u>(&self, u: &'u DVector<f64>) -> (&'u [f64], &'u [f64], &'u [f64], &'u [f64]) {
        let (n_g, n_b) = (self.n_g(), self.n_b());
        let s = u.as_slice();
        (&s[..n_g], &s[n_g..2 * n_g], &s[2 * n_g..2 * n_g + n_b], &s[2 * n_g + n_b..])
    }

    /// Starting point from a power flow at a capacity-proportional dispatch.
    pub fn start(&self) -> DVector<f64> {
        let (n_g, n_b) = (self.n_g(), self.n_b());
        let gens = &self.case.generators;
        let net: f64 = self.p_d.iter().sum();
        let lo: f64 = gens.iter().map(|g| g.p_min).sum();
        let hi: f64 = gens.iter().map(|g| g.p_max).sum();
        let t = ((net - lo) / (hi - lo)).clamp(0.0, 1.0);
        let mut p: Vec<f64> = gens.iter().map(|g| g.p_min + t * (g.p_max - g.p_min)).collect();
        let inj = Injections {
            p_gen: {
                let mut v = vec![0.0; n_b];
                for (k, g) in gens.iter().enumerate() {
                    v[g.bus] += p[k];
                }
                v
            },
            p_demand: self.p_d.clone(),
            q_demand: self.q_d.clone(),
            v_set: {
                let mut v = vec![1.0; n_b];
                for &(i, s) in &self.v_fixed {
                    v[i] = s;
                }
                v
            },
        };
        let mut u = DVector::zeros(2 * n_g + 2 * n_b);
        match solve_acpf(self.case, &inj, DEFAULT_TOL, DEFAULT_MAX_ITER) {
            Ok(sol) => {
                p[self.case.slack_generator()] = sol.p_slack;
                for k in 0..n_g {
                    u[k] = p[k];
                    u[n_g + k] = sol.q_g[k];
                }
                for i in 0..n_b {
                    u[2 * n_g + i] = sol.theta[i];
                    u[2 * n_g + n_b + i] = sol.v[i];
                }
            }
            Err(_) => {
                for k in 0..n_g {
                    u[k] = p[k];
                }
                for i in 0..n_b {
                    u[2 * n_g + n_b + i] = inj.v_set[i];
                }
            }
        }
        u
    }

    /// Network state at `u`, in power-flow form.
    pub fn state(&self, u: &DVector<f64>) -> PfSolution {
        let (p, q, th, v) = self.split(u);
        PfSolution {
            v: v.to_vec(),
            theta: th.to_vec(),
            q_g: q.to_vec(),
            p_slack: p[self.case.slack_generator()],
            iterations: 0,
            max_mismatch: 0.0,
        }
    }
}

/// Flow at one end of a π-line and its partials with respect to
/// `(v_near, v_far, θ_near − θ_far)`.
fn end_flow(g: f64, b: f64, bsh: f64, vi: f64, vj: f64, th: f64) -> ([f64; 2], [[f64; 3]; 2]) {
    let (s, c) = th.sin_cos();
    let d = g * c + b * s;
    let e = g * s - b * c;
    let p = g * vi * vi - vi * vj * d;
    let q = -(b + bsh) * vi * vi - vi * vj * e;
    let dp = [2.0 * g * vi - vj * d, -vi * d, vi * vj * e];
    let dq = [-2.0 * (b + bsh) * vi - vj * e, -vi * e, -vi * vj * d];
    ([p, q], [dp, dq])
}

impl Nlp for AcopfProblem<'_> {
    fn n_vars(&self) -> usize {
        2 * self.n_g() + 2 * self.n_b()
    }

    fn n_eq(&self) -> usize {
        2 * self.n_b() + 1 + self.v_fixed.len()
    }

    fn n_ineq(&self) -> usize {
        2 * self.case.lines.len()
    }

    fn var_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let (n_g, n_b) = (self.n_g(), self.n_b());
        let gens = &self.case.generators;
        let buses = &self.case.buses;
        let n = self.n_vars();
        let lb = DVector::from_fn(n, |i, _| match i {
            i if i < n_g => gens[i].p_min,
            i if i < 2 * n_g => gens[i - n_g].q_min,
            i if i < 2 * n_g + n_b => f64::NEG_INFINITY,
            i => buses[i - 2 * n_g - n_b].v_min,
        });
        let ub = DVector::from_fn(n, |i, _| match i {
            i if i < n_g => gens[i].p_max,
            i if i < 2 * n_g => gens[i - n_g].q_max,
            i if i < 2 * n_g + n_b => f64::INFINITY,
            i => buses[i - 2 * n_g - n_b].v_max,
        });
        (lb, ub)
    }

    fn objective(&self, u: &DVector<f64>) -> (f64, DVector<f64>) {
        let base = self.case.base_mva;
        let mut grad = DVector::zeros(self.n_vars());
        let mut f = 0.0;
        for (k, g) in self.case.generators.iter().enumerate() {
            let p = u[k] * base;
            f += g.c2 * p * p + g.c1 * p + g.c0;
            grad[k] = (2.0 * g.c2 * p + g.c1) * base * COST_SCALE;
        }
        (f * COST_SCALE, grad)
    }

    fn equalities(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n_g, n_b) = (self.n_g(), self.n_b());
        let (_, _, th, v) = self.split(u);
        let (p, q) = bus_powers(&self.g, &self.b, v, th);
        let jac = power_jacobian(&self.g, &self.b, v, th, &p, &q);
        let mut h = DVector::zeros(self.n_eq());
        let mut j = DMatrix::zeros(self.n_eq(), self.n_vars());
        let (ot, ov) = (2 * n_g, 2 * n_g + n_b);
        for i in 0..n_b {
            h[i] = p[i] + self.p_d[i];
            h[n_b + i] = q[i] + self.q_d[i];
            for m in 0..n_b {
                j[(i, ot + m)] = jac.dp_dth[(i, m)];
                j[(i, ov + m)] = jac.dp_dv[(i, m)];
                j[(n_b + i, ot + m)] = jac.dq_dth[(i, m)];
                j[(n_b + i, ov + m)] = jac.dq_dv[(i, m)];
            }
        }
        for (k, g) in self.case.generators.iter().enumerate() {
            h[g.bus] -= u[k];
            h[n_b + g.bus] -= u[n_g + k];
            j[(g.bus, k)] = -1.0;
            j[(n_b + g.bus, n_g + k)] = -1.0;
        }
        let slack = self.case.slack_bus();
        h[2 * n_b] = th[slack];
        j[(2 * n_b, ot + slack)] = 1.0;
        for (r, &(i, vs)) in self.v_fixed.iter().enumerate() {
            h[2 * n_b + 1 + r] = v[i] - vs;
            j[(2 * n_b + 1 + r, ov + i)] = 1.0;
        }
        (h, j)
    }

    fn inequalities(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n_g, n_b) = (self.n_g(), self.n_b());
        let (_, _, th, v) = self.split(u);
        let (ot, ov) = (2 * n_g, 2 * n_g + n_b);
        let mut g = DVector::zeros(self.n_ineq());
        let mut j = DMatrix::zeros(self.n_ineq(), self.n_vars());
        for (l, line) in self.case.lines.iter().enumerate() {
            let smax2 = line.s_max * line.s_max;
            let bsh = 0.5 * line.b_shunt;
            for (r, (a, c)) in [(line.from, line.to), (line.to, line.from)].into_iter().enumerate() {
                let ([p, q], [dp, dq]) = end_flow(line.g(), line.b(), bsh, v[a], v[c], th[a] - th[c]);
                let row = 2 * l + r;
                g[row] = (p * p + q * q) / smax2 - 1.0;
                let d = |k: usize| 2.0 * (p * dp[k] + q * dq[k]) / smax2;
                j[(row, ov + a)] += d(0);
                j[(row, ov + c)] += d(1);
                j[(row, ot + a)] += d(2);
                j[(row, ot + c)] -= d(2);
            }
        }
        (g, j)
    }
}

/// Deterministic AC-OPF at the given bus demands.
pub fn solve_det_acopf_at(case: &GridCase, p_d: Vec<f64>, q_d: Vec<f64>, opts: &IpmOptions) -> (DispatchSolution, PfSolution) {
    let problem = AcopfProblem::new(case, p_d, q_d);
    let res = nlp::solve(&problem, &problem.start(), opts);
    let n_g = case.generators.len();
    let base = case.base_mva;
    let p_mw: Vec<f64> = (0..n_g).map(|k| res.x[k] * base).collect();
    let state = problem.state(&res.x);
    let schema = io_schema(case);
    let y = crate::acpf::evaluate_outputs(case, &schema, &state);
    let cost = res.objective / COST_SCALE;
    let alpha = vec![1.0 / n_g as f64; n_g];
    (
        DispatchSolution {
            p_g: p_mw,
            alpha,
            cost,
            kkt_residual: res.kkt_residual,
            iterations: res.iterations,
            status: res.status,
            mu_y: y.iter().copied().collect(),
            sigma_y: vec![0.0; schema.n_y],
            margins: MarginReport { lambda_y: vec![0.0; schema.n_y], lambda_pg: vec![0.0; n_g], tau_y: 0.0, tau_pg: 0.0 },
        },
        state,
    )
}

/// Deterministic AC-OPF at the forecast.
pub fn solve_det_acopf(case: &GridCase, opts: &IpmOptions) -> DispatchSolution {
    let inj = Injections::forecast(case, &vec![0.0; case.generators.len()]);
    solve_det_acopf_at(case, inj.p_demand, inj.q_demand, opts).0
}

/// Re-evaluates a power-flow state against a demand; used to certify
/// deterministic solutions.
pub fn acpf_residual(case: &GridCase, sol: &DispatchSolution, state: &PfSolution) -> Result<f64, AcpfError> {
    let p: Vec<f64> = sol.p_g.iter().map(|p| p / case.base_mva).collect();
    let inj = Injections::forecast(case, &p);
    Ok(crate::acpf::max_mismatch(case, &inj, &state.v, &state.theta))
}
