//! Scoring and Monte-Carlo validation: RMSE, empirical violation under AGC,
//! baselines A/B, margin coverage, the corrupted-data experiment and the
//! plain-text tables.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acpf::{branch_flows, evaluate_outputs, solve_acpf, Injections, PfSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::ccopf::{solve_det_acopf, solve_det_acopf_at, DispatchSolution};
use crate::dataset::{corrupt, sample_dataset, DatasetError, UncertaintySpec};
use crate::grid::{io_schema, GridCase, IoSchema};
use crate::model::{HybridModel, ModelError, ModelOptions, Mode};
use crate::nlp::{IpmOptions, SolveStatus};

/// Slack on limit checks (p.u.), well below any physical significance.
const LIMIT_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ValidateError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("need at least one sample")]
    Empty,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-column RMSE and their mean.
pub fn rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<(DVector<f64>, f64), ValidateError> {
    if pred.shape() != truth.shape() {
        return Err(ValidateError::Shape(pred.shape(), truth.shape()));
    }
    if pred.nrows() == 0 || pred.ncols() == 0 {
        return Err(ValidateError::Empty);
    }
    let n = pred.nrows() as f64;
    let per = DVector::from_fn(pred.ncols(), |a, _| ((pred.column(a) - truth.column(a)).norm_squared() / n).sqrt());
    let avg = per.mean();
    Ok((per, avg))
}

/// Seed used for held-out test sets; training seeds stay below 2⁶³.
pub fn test_seed(seed: u64) -> u64 {
    seed | (1 << 63)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRate {
    pub name: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub n_mc: usize,
    pub seed: u64,
    /// Share of samples violating any limit (non-convergent samples count).
    pub violation_prob: f64,
    pub nonconvergent: usize,
    /// Active-power violation rate per generator.
    pub pg_violation: Vec<f64>,
    pub per_constraint: Vec<ConstraintRate>,
    /// `n_mc × n_y` outputs; rows of non-convergent samples are NaN.
    #[serde(skip)]
    pub outputs: DMatrix<f64>,
}

/// Zero-mean forecast errors `[δp_l, δp_r]` (p.u.), one row per sample.
pub fn sample_deviations(case: &GridCase, schema: &IoSchema, spec: &UncertaintySpec, n: usize, seed: u64) -> DMatrix<f64> {
    let sd = spec.variances(case, schema).map(f64::sqrt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, schema.n_d());
    for i in 0..n {
        for j in 0..schema.n_d() {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[(i, j)] = sd[j] * z;
        }
    }
    out
}

fn constraint_names(case: &GridCase, schema: &IoSchema) -> Vec<String> {
    let id = |i: usize| case.buses[i].id;
    let mut names: Vec<String> = case.generators.iter().map(|g| format!("pg:{}", id(g.bus))).collect();
    names.extend(case.generators.iter().map(|g| format!("qg:{}", id(g.bus))));
    names.extend((0..case.n_bus()).map(|i| format!("v:{}", id(i))));
    names.extend(schema.output_names[schema.s_offset()..].iter().cloned());
    names
}

/// Limit checks in the order of [`constraint_names`].
fn violations(case: &GridCase, p_g: &[f64], pf: &PfSolution) -> Vec<bool> {
    let mut out = Vec::new();
    let gens = &case.generators;
    let slack = case.slack_generator();
    for (k, g) in gens.iter().enumerate() {
        let p = if k == slack { pf.p_slack } else { p_g[k] };
        out.push(p < g.p_min - LIMIT_TOL || p > g.p_max + LIMIT_TOL);
    }
    for (k, g) in gens.iter().enumerate() {
        out.push(pf.q_g[k] < g.q_min - LIMIT_TOL || pf.q_g[k] > g.q_max + LIMIT_TOL);
    }
    for (i, b) in case.buses.iter().enumerate() {
        out.push(pf.v[i] < b.v_min - LIMIT_TOL || pf.v[i] > b.v_max + LIMIT_TOL);
    }
    for (f, l) in branch_flows(case, &pf.v, &pf.theta).iter().zip(&case.lines) {
        out.push(f.s() > l.s_max + LIMIT_TOL);
    }
    out
}

/// Monte-Carlo check of a dispatch under AGC: every sample shifts the
/// non-slack generators by `α_k Ω`, solves the AC power flow and tests all
/// generator, voltage and line limits.
pub fn mc_violation(case: &GridCase, sol: &DispatchSolution, spec: &UncertaintySpec, n_mc: usize, seed: u64) -> McResult {
    let schema = io_schema(case);
    let dev = sample_deviations(case, &schema, spec, n_mc, seed);
    let base = case.base_mva;
    let n_l = schema.load_inputs.len();
    let n_pg = schema.n_pg_inputs();
    let forecast = UncertaintySpec::forecast(case, &schema);
    let names = constraint_names(case, &schema);

    let results: Vec<Option<(Vec<bool>, DVector<f64>)>> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let d = dev.row(i);
            let omega: f64 = (0..schema.n_d()).map(|j| if j < n_l { d[j] } else { -d[j] }).sum();
            let p_g: Vec<f64> = sol.p_g.iter().zip(&sol.alpha).map(|(p, a)| p / base + a * omega).collect();
            let mut x = vec![0.0; schema.n_x];
            for (j, &k) in schema.gen_inputs.iter().enumerate() {
                x[j] = p_g[k];
            }
            for j in 0..schema.n_d() {
                x[n_pg + j] = forecast[j] + d[j];
            }
            let inj = Injections::from_input_with(case, &schema, &x, spec.gamma);
            let pf = solve_acpf(case, &inj, DEFAULT_TOL, DEFAULT_MAX_ITER).ok()?;
            Some((violations(case, &p_g, &pf), evaluate_outputs(case, &schema, &pf)))
        })
        .collect();

    let mut counts = vec![0usize; names.len()];
    let mut failures = 0;
    let mut nonconvergent = 0;
    let mut outputs = DMatrix::from_element(n_mc, schema.n_y, f64::NAN);
    for (i, r) in results.iter().enumerate() {
        match r {
            Some((v, y)) => {
                if v.iter().any(|&b| b) {
                    failures += 1;
                }
                for (c, &b) in counts.iter_mut().zip(v) {
                    *c += b as usize;
                }
                outputs.row_mut(i).copy_from(&y.transpose());
            }
            None => {
                failures += 1;
                nonconvergent += 1;
            }
        }
    }
    if nonconvergent > 0 {
        warn!("{nonconvergent} of {n_mc} Monte-Carlo power flows did not converge");
    }
    let n = n_mc.max(1) as f64;
    let n_g = case.generators.len();
    McResult {
        n_mc,
        seed,
        violation_prob: failures as f64 / n,
        nonconvergent,
        pg_violation: counts[..n_g].iter().map(|&c| c as f64 / n).collect(),
        per_constraint: names.into_iter().zip(&counts).map(|(name, &c)| ConstraintRate { name, rate: c as f64 / n }).collect(),
        outputs,
    }
}

/// Share of Monte-Carlo outputs inside `μ ± k σ`, per output channel.
pub fn margin_coverage(outputs: &DMatrix<f64>, mu: &[f64], sigma: &[f64], k: f64) -> Vec<f64> {
    (0..outputs.ncols())
        .map(|a| {
            let col: Vec<f64> = outputs.column(a).iter().copied().filter(|v| v.is_finite()).collect();
            let inside = col.iter().filter(|&&v| (v - mu[a]).abs() <= k * sigma[a]).count();
            inside as f64 / col.len().max(1) as f64
        })
        .collect()
}

/// Drops the non-convergent rows of an MC output matrix.
pub fn convergent_rows(outputs: &DMatrix<f64>) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..outputs.nrows()).filter(|&i| outputs.row(i).iter().all(|v| v.is_finite())).collect();
    DMatrix::from_fn(keep.len(), outputs.ncols(), |i, j| outputs[(keep[i], j)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineA {
    pub cost: f64,
    pub solved: usize,
    pub failed: usize,
}

/// Baseline A: a deterministic AC-OPF per uncertainty realization; the cost
/// is the mean over the solved samples.
pub fn baseline_full_recourse(case: &GridCase, spec: &UncertaintySpec, n_mc: usize, seed: u64, opts: &IpmOptions) -> BaselineA {
    let schema = io_schema(case);
    let dev = sample_deviations(case, &schema, spec, n_mc, seed);
    let forecast = UncertaintySpec::forecast(case, &schema);
    let n_pg = schema.n_pg_inputs();
    let costs: Vec<Option<f64>> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut x = vec![0.0; schema.n_x];
            for j in 0..schema.n_d() {
                x[n_pg + j] = forecast[j] + dev[(i, j)];
            }
            let inj = Injections::from_input_with(case, &schema, &x, spec.gamma);
            let (sol, _) = solve_det_acopf_at(case, inj.p_demand, inj.q_demand, opts);
            (sol.status == SolveStatus::Optimal).then_some(sol.cost)
        })
        .collect();
    let solved: Vec<f64> = costs.iter().flatten().copied().collect();
    let failed = n_mc - solved.len();
    if failed > 0 {
        warn!("baseline A: {failed} of {n_mc} AC-OPF solves failed and were excluded");
    }
    BaselineA { cost: solved.iter().sum::<f64>() / solved.len().max(1) as f64, solved: solved.len(), failed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineB {
    pub cost: f64,
    pub violation_prob: f64,
    pub solution: DispatchSolution,
    pub mc: McResult,
}

/// Baseline B: one deterministic AC-OPF, AGC with uniform participation.
pub fn baseline_base_case(case: &GridCase, spec: &UncertaintySpec, n_mc: usize, seed: u64, opts: &IpmOptions) -> BaselineB {
    let solution = solve_det_acopf(case, opts);
    let mc = mc_violation(case, &solution, spec, n_mc, seed);
    BaselineB { cost: solution.cost, violation_prob: mc.violation_prob, solution, mc }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub column: String,
    pub seed: u64,
    pub window_mw: (f64, f64),
    pub dropped: f64,
    pub rmse_full: f64,
    pub rmse_hybrid: f64,
}

#[derive(Debug, Clone)]
pub struct RobustnessSetup {
    pub case_id: String,
    pub spec: UncertaintySpec,
    pub n_train: usize,
    pub n_test: usize,
    pub restarts: usize,
}

/// Trains full and hybrid GPs on a dataset with the rows of `column` in
/// `window` (MW) removed and scores both on an uncorrupted test set.
pub fn robustness_experiment(
    case: &GridCase,
    setup: &RobustnessSetup,
    column: &str,
    window: (f64, f64),
    seeds: &[u64],
) -> Result<Vec<RobustnessRow>, ValidateError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let ds = sample_dataset(case, &setup.case_id, &setup.spec, setup.n_train, seed)?;
        let (kept, dropped) = corrupt(&ds, column, window.0, window.1)?;
        let test = sample_dataset(case, &setup.case_id, &setup.spec, setup.n_test, test_seed(seed))?;
        let score = |mode: Mode| -> Result<f64, ValidateError> {
            let m = HybridModel::fit(&kept, &ModelOptions { mode, restarts: setup.restarts, seed, ..Default::default() })?;
            Ok(rmse(&m.predict_rows(&test.x), &test.y)?.1)
        };
        rows.push(RobustnessRow {
            column: column.to_string(),
            seed,
            window_mw: window,
            dropped,
            rmse_full: score(Mode::Full)?,
            rmse_hybrid: score(Mode::Hybrid)?,
        });
    }
    Ok(rows)
}

/// Accuracy row of the model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub n_train: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub cost: f64,
    pub failure_prob: Option<f64>,
}

pub fn render_accuracy_table(case_id: &str, rows: &[AccuracyRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{case_id}: prediction accuracy");
    let _ = writeln!(s, "{:<24} {:>8} {:>12}", "Method", "N", "RMSE, p.u.");
    for r in rows {
        let _ = writeln!(s, "{:<24} {:>8} {:>12.3e}", r.method, r.n_train, r.rmse);
    }
    s
}

pub fn render_cost_table(case_id: &str, rows: &[CostRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{case_id}: cost and reliability");
    let _ = writeln!(s, "{:<24} {:>12} {:>16}", "Method", "Cost, $", "Failure prob, %");
    for r in rows {
        let fp = r.failure_prob.map_or_else(|| "n/a".to_string(), |p| format!("{:.2}", 100.0 * p));
        let _ = writeln!(s, "{:<24} {:>12.2} {:>16}", r.method, r.cost, fp);
    }
    s
}

pub fn render_robustness_table(rows: &[RobustnessRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>6} {:>12} {:>14} {:>10}", "Experiment", "Seed", "RMSE GPR", "RMSE Hybrid", "% dropped");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>12.3e} {:>14.3e} {:>10.1}",
            r.column,
            r.seed,
            r.rmse_full,
            r.rmse_hybrid,
            100.0 * r.dropped
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub a: BaselineA,
    pub b_cost: f64,
    pub b_violation: f64,
}

/// Everything `validate` writes for one solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rmse_per_output: Option<Vec<f64>>,
    pub rmse_avg: Option<f64>,
    pub violation_prob: f64,
    pub pg_violation: Vec<f64>,
    pub per_constraint: Vec<ConstraintRate>,
    pub nonconvergent: usize,
    pub cost: f64,
    pub margins_analytic: crate::ccopf::MarginReport,
    pub margins_empirical_upper: Vec<f64>,
    pub margins_empirical_lower: Vec<f64>,
    /// Share of MC outputs within `μ_y ± 3σ_y`, per output.
    pub coverage_3sigma: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
    pub baselines: Option<Baselines>,
}

/// Builds the report of a solved dispatch; empirical margins use the
/// power-flow outputs at the forecast as center.
pub fn validation_report(
    case: &GridCase,
    sol: &DispatchSolution,
    spec: &UncertaintySpec,
    n_mc: usize,
    seed: u64,
    eps_y: f64,
) -> McReport {
    let mc = mc_violation(case, sol, spec, n_mc, seed);
    let schema = io_schema(case);
    let ok = convergent_rows(&mc.outputs);
    let p: Vec<f64> = sol.p_g.iter().map(|p| p / case.base_mva).collect();
    let center = solve_acpf(case, &Injections::forecast(case, &p), DEFAULT_TOL, DEFAULT_MAX_ITER)
        .map(|pf| evaluate_outputs(case, &schema, &pf))
        .unwrap_or_else(|_| DVector::from_column_slice(&sol.mu_y));
    let (upper, lower) = crate::uncertainty::empirical_margins(&ok, &center, eps_y)
        .map(|(u, l)| (u.iter().copied().collect(), l.iter().copied().collect()))
        .unwrap_or_default();
    let report = ValidationReport {
        rmse_per_output: None,
        rmse_avg: None,
        violation_prob: mc.violation_prob,
        pg_violation: mc.pg_violation.clone(),
        per_constraint: mc.per_constraint.clone(),
        nonconvergent: mc.nonconvergent,
        cost: sol.cost,
        margins_analytic: sol.margins.clone(),
        margins_empirical_upper: upper,
        margins_empirical_lower: lower,
        coverage_3sigma: margin_coverage(&mc.outputs, &sol.mu_y, &sol.sigma_y, 3.0),
        n_mc,
        seed,
        baselines: None,
    };
    McReport { report, mc }
}

/// A report plus the raw Monte-Carlo result it was built from.
pub struct McReport {
    pub report: ValidationReport,
    pub mc: McResult,
}

/// Writes MC outputs as CSV with the schema's output labels.
pub fn write_mc_csv(path: &std::path::Path, schema: &IoSchema, outputs: &DMatrix<f64>) -> std::io::Result<()> {
    let mut s = schema.output_names.join(",");
    s.push('\n');
    for i in 0..outputs.nrows() {
        let row: Vec<String> = outputs.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_case;

    fn case9() -> GridCase {
        load_case(concat!(env!("CARGO_MANIFEST_DIR"), "/data/case9.json")).unwrap()
    }

    #[test]
    fn rmse_basics() {
        let t = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (per, avg) = rmse(&t, &t).unwrap();
        assert_eq!(per, DVector::zeros(2));
        assert_eq!(avg, 0.0);
        let mut p = t.clone();
        p.column_mut(1).add_scalar_mut(-0.25);
        let (per, avg) = rmse(&p, &t).unwrap();
        assert_eq!(per[0], 0.0);
        assert!((per[1] - 0.25).abs() < 1e-15);
        assert!((avg - 0.125).abs() < 1e-15);
        assert!(rmse(&p, &DMatrix::zeros(2, 2)).is_err());
        assert!(rmse(&DMatrix::zeros(0, 2), &DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn deterministic_spec_never_fails_a_feasible_dispatch() {
        let case = case9();
        let det = solve_det_acopf(&case, &IpmOptions::default());
        let mc = mc_violation(&case, &det, &UncertaintySpec::deterministic(), 20, 1);
        assert_eq!(mc.violation_prob, 0.0);
        assert_eq!(mc.nonconvergent, 0);
        // every sample is the forecast
        let first = mc.outputs.row(0).into_owned();
        assert!((0..20).all(|i| mc.outputs.row(i) == first));
    }

    #[test]
    fn mc_is_deterministic_per_seed() {
        let case = case9();
        let det = solve_det_acopf(&case, &IpmOptions::default());
        let a = mc_violation(&case, &det, &UncertaintySpec::default(), 200, 7);
        let b = mc_violation(&case, &det, &UncertaintySpec::default(), 200, 7);
        assert_eq!(a.violation_prob, b.violation_prob);
        assert_eq!(a.per_constraint, b.per_constraint);
        assert!(a.violation_prob >= a.pg_violation.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn baseline_a_without_noise_is_the_deterministic_cost() {
        let case = case9();
        let opts = IpmOptions::default();
        let a = baseline_full_recourse(&case, &UncertaintySpec::deterministic(), 3, 0, &opts);
        let det = solve_det_acopf(&case, &opts);
        assert_eq!(a.failed, 0);
        assert!((a.cost - det.cost).abs() < 1e-9 * det.cost);
        let b = baseline_base_case(&case, &UncertaintySpec::deterministic(), 10, 0, &opts);
        assert_eq!(b.violation_prob, 0.0);
    }

    #[test]
    fn coverage_counts_inside_band() {
        let out = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.9, f64::NAN]);
        assert_eq!(margin_coverage(&out, &[0.0], &[1.0], 3.0), vec![1.0]);
        assert_eq!(margin_coverage(&out, &[0.0], &[0.5], 3.0), vec![2.0 / 3.0]);
    }

    #[test]
    fn tables_render() {
        let t = render_cost_table("case9", &[CostRow { method: "B".into(), cost: 3470.0, failure_prob: Some(0.0976) }]);
        assert!(t.contains("9.76"));
        let t = render_robustness_table(&[RobustnessRow {
            column: "pl:4".into(),
            seed: 0,
            window_mw: (82.5, 97.5),
            dropped: 0.55,
            rmse_full: 0.365,
            rmse_hybrid: 9.11e-3,
        }]);
        assert!(t.contains("55.0") && t.contains("9.110e-3"));
        assert!(render_accuracy_table("case9", &[]).lines().count() == 2);
    }
}
