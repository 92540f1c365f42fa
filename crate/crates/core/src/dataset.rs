//! Supervised power-flow data: sampled operating points, AC power-flow
//! outputs, residual targets, persistence and corruption.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acpf::{evaluate_outputs, solve_acpf, AcpfError, Injections, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::grid::{io_schema, GridCase, IoSchema};
use crate::linmodel::LinearSurrogate;

/// Largest tolerated share of non-convergent rows.
pub const MAX_FAILURE_SHARE: f64 = 0.2;
/// Draws per row before sampling gives up on a dispatch that keeps the
/// slack generator within its limits.
const MAX_DRAWS: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("infeasible case: {0}")]
    Infeasible(String),
    #[error("{failed} of {total} power flows failed to converge (more than 20%); first failure: {first}")]
    TooManyFailures { failed: usize, total: usize, first: AcpfError },
    #[error("unknown input column `{0}`")]
    UnknownColumn(String),
    #[error("window [{lo}, {hi}) is empty")]
    BadWindow { lo: f64, hi: f64 },
    #[error("corruption window drops every row")]
    AllDropped,
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

/// Forecast-error model for loads and renewables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    /// Load standard deviation as a fraction of its forecast.
    pub sigma_l: f64,
    /// Renewable standard deviation as a fraction of its forecast.
    pub sigma_r: f64,
    /// Common reactive fluctuation factor; `None` keeps each bus's forecast
    /// power factor.
    pub gamma: Option<f64>,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        UncertaintySpec { sigma_l: 0.15, sigma_r: 0.30, gamma: None }
    }
}

impl UncertaintySpec {
    pub fn deterministic() -> Self {
        UncertaintySpec { sigma_l: 0.0, sigma_r: 0.0, gamma: None }
    }

    /// Variances of the uncertain inputs `[p_l, p_r]` in schema order (p.u.²).
    pub fn variances(&self, case: &GridCase, schema: &IoSchema) -> DVector<f64> {
        let loads = schema.load_inputs.iter().map(|&i| (self.sigma_l * case.buses[i].p_load).powi(2));
        let res = schema.res_inputs.iter().map(|&i| (self.sigma_r * case.buses[i].p_res).powi(2));
        DVector::from_iterator(schema.n_d(), loads.chain(res))
    }

    /// Forecast values of `[p_l, p_r]` in schema order (p.u.).
    pub fn forecast(case: &GridCase, schema: &IoSchema) -> DVector<f64> {
        let loads = schema.load_inputs.iter().map(|&i| case.buses[i].p_load);
        let res = schema.res_inputs.iter().map(|&i| case.buses[i].p_res);
        DVector::from_iterator(schema.n_d(), loads.chain(res))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub seed: u64,
    pub spec: UncertaintySpec,
    pub dropped_rows: usize,
    pub base_mva: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: IoSchema,
    /// `N × n_x` inputs (p.u.).
    pub x: DMatrix<f64>,
    /// `N × n_y` AC power-flow outputs (p.u.).
    pub y: DMatrix<f64>,
    /// `N × n_y` residuals against the surrogate, once computed.
    pub r: Option<DMatrix<f64>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    fn select_rows(&self, keep: &[usize]) -> Dataset {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(keep.len(), m.ncols(), |i, j| m[(keep[i], j)]);
        Dataset {
            schema: self.schema.clone(),
            x: pick(&self.x),
            y: pick(&self.y),
            r: self.r.as_ref().map(pick),
            provenance: self.provenance.clone(),
        }
    }
}

/// Draws `n` input rows `[p_g, p_l, p_r]` (p.u.).
///
/// Loads and renewables are Gaussian around their forecasts. Non-slack
/// generators are uniform on their boxes, redrawn until the lossless slack
/// output implied by the balance stays within its limits.
pub fn sample_inputs(case: &GridCase, spec: &UncertaintySpec, n: usize, seed: u64) -> Result<DMatrix<f64>, DatasetError> {
    let schema = io_schema(case);
    let slack = &case.generators[case.slack_generator()];
    let cap: f64 = case.generators.iter().map(|g| g.p_max).sum();
    if cap < case.net_load() {
        return Err(DatasetError::Infeasible(format!(
            "total capacity {:.2} MW is below the forecast net load {:.2} MW",
            cap * case.base_mva,
            case.net_load() * case.base_mva
        )));
    }
    let mean = UncertaintySpec::forecast(case, &schema);
    let std = spec.variances(case, &schema).map(f64::sqrt);
    let n_g = schema.n_pg_inputs();
    let n_l = schema.load_inputs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, schema.n_x);
    for row in 0..n {
        let mut d = DVector::zeros(schema.n_d());
        for j in 0..schema.n_d() {
            d[j] = Normal::new(mean[j], std[j]).expect("finite nonnegative std").sample(&mut rng);
        }
        let net: f64 = d.rows(0, n_l).sum() - d.rows(n_l, schema.n_d() - n_l).sum();
        let mut accepted = false;
        for _ in 0..MAX_DRAWS {
            let mut total = 0.0;
            for (j, &k) in schema.gen_inputs.iter().enumerate() {
                let g = &case.generators[k];
                let p = if g.p_max > g.p_min { rng.random_range(g.p_min..g.p_max) } else { g.p_min };
                x[(row, j)] = p;
                total += p;
            }
            let p_slack = net - total;
            if p_slack >= slack.p_min && p_slack <= slack.p_max {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(DatasetError::Infeasible(format!(
                "row {row}: no generator dispatch keeps the slack within [{:.2}, {:.2}] MW",
                slack.p_min * case.base_mva,
                slack.p_max * case.base_mva
            )));
        }
        for j in 0..schema.n_d() {
            x[(row, n_g + j)] = d[j];
        }
    }
    Ok(x)
}

/// Runs the AC power flow for each row of `x` and returns the outputs of
/// the convergent rows with their row indices.
pub fn evaluate_rows(
    case: &GridCase,
    schema: &IoSchema,
    x: &DMatrix<f64>,
    gamma: Option<f64>,
) -> Result<(DMatrix<f64>, Vec<usize>), DatasetError> {
    if x.ncols() != schema.n_x {
        return Err(DatasetError::Dimension { expected: schema.n_x, got: x.ncols() });
    }
    let results: Vec<Result<DVector<f64>, AcpfError>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let inj = Injections::from_input_with(case, schema, &row, gamma);
            solve_acpf(case, &inj, DEFAULT_TOL, DEFAULT_MAX_ITER).map(|sol| evaluate_outputs(case, schema, &sol))
        })
        .collect();
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    let mut first = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(y) => {
                kept.push(i);
                rows.push(y);
            }
            Err(e) => {
                warn!("row {i}: {e}; dropped");
                first.get_or_insert(e);
            }
        }
    }
    let failed = x.nrows() - kept.len();
    if let Some(first) = first {
        if failed as f64 > MAX_FAILURE_SHARE * x.nrows() as f64 {
            return Err(DatasetError::TooManyFailures { failed, total: x.nrows(), first });
        }
    }
    let y = DMatrix::from_fn(rows.len(), schema.n_y, |i, j| rows[i][j]);
    Ok((y, kept))
}

/// Evaluates the AC power flow on every row of `x` and packs a dataset.
pub fn generate_dataset(case: &GridCase, x: &DMatrix<f64>, case_id: &str, spec: &UncertaintySpec, seed: u64) -> Result<Dataset, DatasetError> {
    let schema = io_schema(case);
    let (y, kept) = evaluate_rows(case, &schema, x, spec.gamma)?;
    let dropped = x.nrows() - kept.len();
    if dropped > 0 {
        info!("{dropped} of {} rows dropped for non-convergence", x.nrows());
    }
    let x = DMatrix::from_fn(kept.len(), x.ncols(), |i, j| x[(kept[i], j)]);
    Ok(Dataset {
        schema,
        x,
        y,
        r: None,
        provenance: Provenance { case_id: case_id.to_string(), seed, spec: *spec, dropped_rows: dropped, base_mva: case.base_mva },
    })
}

/// Samples `n` operating points and evaluates them.
pub fn sample_dataset(case: &GridCase, case_id: &str, spec: &UncertaintySpec, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    let x = sample_inputs(case, spec, n, seed)?;
    generate_dataset(case, &x, case_id, spec, seed)
}

/// Fills `R = Y − z(X)`.
pub fn residualize(dataset: &Dataset, sur: &LinearSurrogate<f64>) -> Result<Dataset, DatasetError> {
    if sur.n_x() != dataset.schema.n_x || sur.n_y() != dataset.schema.n_y || sur.n_v != dataset.schema.n_v() {
        return Err(DatasetError::Schema("surrogate does not match the dataset schema".into()));
    }
    let z = sur.predict_rows(&dataset.x).map_err(|e| DatasetError::Schema(e.to_string()))?;
    Ok(Dataset { r: Some(&dataset.y - z), ..dataset.clone() })
}

/// Removes rows whose input `column` (converted to MW) lies in `[lo, hi)`.
/// Returns the surviving dataset and the dropped fraction.
pub fn corrupt(dataset: &Dataset, column: &str, lo: f64, hi: f64) -> Result<(Dataset, f64), DatasetError> {
    if !(lo < hi) {
        return Err(DatasetError::BadWindow { lo, hi });
    }
    let c = dataset.schema.input_index(column).ok_or_else(|| DatasetError::UnknownColumn(column.to_string()))?;
    let base = dataset.provenance.base_mva;
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            let mw = dataset.x[(i, c)] * base;
            !(mw >= lo && mw < hi)
        })
        .collect();
    if keep.is_empty() {
        return Err(DatasetError::AllDropped);
    }
    let frac = (dataset.len() - keep.len()) as f64 / dataset.len() as f64;
    Ok((dataset.select_rows(&keep), frac))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    case_id: String,
    seed: u64,
    spec: UncertaintySpec,
    dropped_rows: usize,
    base_mva: f64,
    rows: usize,
    schema: IoSchema,
}

/// Path of the JSON sidecar next to a dataset CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let csv_err = |source| DatasetError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let s = &dataset.schema;
    let mut header: Vec<String> = s.input_names.iter().map(|n| format!("x:{n}")).collect();
    header.extend(s.output_names.iter().map(|n| format!("y:{n}")));
    if dataset.r.is_some() {
        header.extend(s.output_names.iter().map(|n| format!("r:{n}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        rec.extend(dataset.y.row(i).iter().map(|v| format!("{v:.16e}")));
        if let Some(r) = &dataset.r {
            rec.extend(r.row(i).iter().map(|v| format!("{v:.16e}")));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let side = Sidecar {
        case_id: dataset.provenance.case_id.clone(),
        seed: dataset.provenance.seed,
        spec: dataset.provenance.spec,
        dropped_rows: dataset.provenance.dropped_rows,
        base_mva: dataset.provenance.base_mva,
        rows: dataset.len(),
        schema: dataset.schema.clone(),
    };
    let sp = sidecar_path(path);
    let text = serde_json::to_string_pretty(&side).map_err(|source| DatasetError::Json { path: sp.clone(), source })?;
    fs::write(&sp, text + "\n").map_err(|source| DatasetError::Io { path: sp, source })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|source| DatasetError::Io { path: sp.clone(), source })?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: sp, source })?;
    let csv_err = |source| DatasetError::Csv { path: path.to_path_buf(), source };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let s = &side.schema;
    let mut expected: Vec<String> = s.input_names.iter().map(|n| format!("x:{n}")).collect();
    expected.extend(s.output_names.iter().map(|n| format!("y:{n}")));
    let has_r = header.len() == expected.len() + s.n_y;
    if has_r {
        expected.extend(s.output_names.iter().map(|n| format!("r:{n}")));
    }
    if header != expected {
        return Err(DatasetError::Schema(format!("{}: header does not match the sidecar schema", path.display())));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DatasetError::Parse { path: path.to_path_buf(), msg: format!("data line {}: {e}", line + 1) })?;
        rows.push(vals);
    }
    if rows.len() != side.rows {
        return Err(DatasetError::Parse {
            path: path.to_path_buf(),
            msg: format!("expected {} data lines, found {}", side.rows, rows.len()),
        });
    }
    let n = rows.len();
    let (n_x, n_y) = (s.n_x, s.n_y);
    let x = DMatrix::from_fn(n, n_x, |i, j| rows[i][j]);
    let y = DMatrix::from_fn(n, n_y, |i, j| rows[i][n_x + j]);
    let r = has_r.then(|| DMatrix::from_fn(n, n_y, |i, j| rows[i][n_x + n_y + j]));
    Ok(Dataset {
        schema: side.schema,
        x,
        y,
        r,
        provenance: Provenance { case_id: side.case_id, seed: side.seed, spec: side.spec, dropped_rows: side.dropped_rows, base_mva: side.base_mva },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::max_mismatch;
    use crate::grid::load_case;

    fn case9() -> GridCase {
        load_case(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/case9.json")).unwrap()
    }

    #[test]
    fn zero_spread_keeps_forecasts() {
        let case = case9();
        let schema = io_schema(&case);
        let x = sample_inputs(&case, &UncertaintySpec::deterministic(), 20, 1).unwrap();
        let f = UncertaintySpec::forecast(&case, &schema);
        for i in 0..20 {
            for j in 0..schema.n_d() {
                assert_eq!(x[(i, schema.n_pg_inputs() + j)], f[j]);
            }
        }
    }

    #[test]
    fn sampled_spread_and_determinism() {
        let case = case9();
        let schema = io_schema(&case);
        let spec = UncertaintySpec::default();
        let x = sample_inputs(&case, &spec, 75, 7).unwrap();
        assert_eq!(x, sample_inputs(&case, &spec, 75, 7).unwrap());
        let sd = spec.variances(&case, &schema).map(f64::sqrt);
        for j in 0..schema.load_inputs.len() {
            let col = x.column(schema.n_pg_inputs() + j);
            let m = col.mean();
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 74.0).sqrt();
            assert!((s / sd[j] - 1.0).abs() < 0.2, "column {j}: {s} vs {}", sd[j]);
        }
        for (j, &k) in schema.gen_inputs.iter().enumerate() {
            let g = &case.generators[k];
            assert!(x.column(j).iter().all(|&p| p >= g.p_min && p <= g.p_max));
        }
    }

    #[test]
    fn stored_outputs_satisfy_the_power_flow() {
        let case = case9();
        let spec = UncertaintySpec::default();
        let ds = sample_dataset(&case, "case9", &spec, 75, 3).unwrap();
        assert!(ds.len() <= 75 && ds.len() + ds.provenance.dropped_rows == 75);
        assert_eq!(ds.y.ncols(), 15);
        for i in 0..ds.len() {
            let row: Vec<f64> = ds.x.row(i).iter().copied().collect();
            let inj = Injections::from_input(&case, &ds.schema, &row);
            let sol = solve_acpf(&case, &inj, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert!(max_mismatch(&case, &inj, &sol.v, &sol.theta) <= 1e-8);
            assert_eq!(evaluate_outputs(&case, &ds.schema, &sol), ds.y.row(i).transpose());
        }
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let case = case9();
        let x1 = sample_inputs(&case, &UncertaintySpec::default(), 1, 9).unwrap();
        let x = DMatrix::from_fn(5, x1.ncols(), |_, j| x1[(0, j)]);
        let ds = generate_dataset(&case, &x, "case9", &UncertaintySpec::default(), 9).unwrap();
        for i in 1..5 {
            assert_eq!(ds.y.row(i), ds.y.row(0));
        }
    }

    #[test]
    fn residuals_reconstruct_outputs() {
        let case = case9();
        let ds = sample_dataset(&case, "case9", &UncertaintySpec::default(), 30, 5).unwrap();
        let zero = LinearSurrogate::zero(ds.schema.n_v(), ds.schema.n_y - ds.schema.n_v(), ds.schema.n_x);
        let r = residualize(&ds, &zero).unwrap().r.unwrap();
        for i in 0..ds.len() {
            for a in 0..ds.schema.n_y {
                let expect = if a < ds.schema.n_v() { ds.y[(i, a)] - 1.0 } else { ds.y[(i, a)] };
                assert_eq!(r[(i, a)], expect);
            }
        }
        let sur = crate::linmodel::fit_linear(&ds.x, &ds.y, ds.schema.n_v()).unwrap();
        let res = residualize(&ds, &sur).unwrap();
        let back = res.r.unwrap() + sur.predict_rows(&ds.x).unwrap();
        assert!((back - &ds.y).amax() < 1e-12);
    }

    #[test]
    fn corruption_counts_and_subsets() {
        let case = case9();
        let ds = sample_dataset(&case, "case9", &UncertaintySpec::default(), 200, 11).unwrap();
        let (same, f) = corrupt(&ds, "pl:4", 1e4, 2e4).unwrap();
        assert_eq!(f, 0.0);
        assert_eq!(same, ds);
        let (lo, hi) = (82.5, 97.5);
        let (cut, f) = corrupt(&ds, "pl:4", lo, hi).unwrap();
        let c = ds.schema.input_index("pl:4").unwrap();
        let inside = (0..ds.len()).filter(|&i| (lo..hi).contains(&(ds.x[(i, c)] * 100.0))).count();
        assert_eq!(f, inside as f64 / ds.len() as f64);
        assert_eq!(cut.len(), ds.len() - inside);
        for i in 0..cut.len() {
            assert!((0..ds.len()).any(|k| ds.x.row(k) == cut.x.row(i) && ds.y.row(k) == cut.y.row(i)));
        }
        assert!(matches!(corrupt(&ds, "pl:99", 0.0, 1.0), Err(DatasetError::UnknownColumn(_))));
        assert!(matches!(corrupt(&ds, "pl:4", -1e9, 1e9), Err(DatasetError::AllDropped)));
        assert!(matches!(corrupt(&ds, "pl:4", 5.0, 5.0), Err(DatasetError::BadWindow { .. })));
    }

    #[test]
    fn csv_round_trip_and_truncation() {
        let case = case9();
        let ds = sample_dataset(&case, "case9", &UncertaintySpec::default(), 75, 2).unwrap();
        let sur = crate::linmodel::fit_linear(&ds.x, &ds.y, ds.schema.n_v()).unwrap();
        let ds = residualize(&ds, &sur).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), ds.len() + 1);
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
