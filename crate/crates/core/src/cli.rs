//! Command-line pipeline: `generate`, `train`, `solve`, `validate`,
//! `robustness` and `all`. Every stage reads and writes files in the output
//! directory so stages can be chained from shell scripts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ccopf::{solve_ccopf, CcopfError, DispatchSolution};
use crate::dataset::{load_dataset, sample_dataset, save_dataset, Dataset, DatasetError, UncertaintySpec};
use crate::grid::{io_schema, load_case, GridCase};
use crate::model::{HybridModel, Mode, ModelError, ModelOptions};
use crate::nlp::{IpmOptions, SolveStatus};
use crate::sparsegp::InducingStrategy;
use crate::validate::{
    baseline_base_case, baseline_full_recourse, render_accuracy_table, render_cost_table, render_robustness_table, rmse,
    robustness_experiment, test_seed, validation_report, write_mc_csv, AccuracyRow, Baselines, CostRow, RobustnessRow,
    RobustnessSetup, ValidateError, ValidationReport,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Infeasible(_) | DatasetError::TooManyFailures { .. } | DatasetError::AllDropped => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } | ModelError::Json { .. } | ModelError::Schema => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CcopfError> for CliError {
    fn from(e: CcopfError) -> Self {
        match e {
            CcopfError::Schema => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ValidateError> for CliError {
    fn from(e: ValidateError) -> Self {
        match e {
            ValidateError::Dataset(d) => d.into(),
            ValidateError::Model(m) => m.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

/// Experiment settings; every key may appear in the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub case_path: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub mode: Mode,
    pub sparse_m: Option<usize>,
    pub inducing: InducingStrategy,
    pub restarts: usize,
    pub eps_y: f64,
    pub eps_pg: f64,
    pub sigma_l_frac: f64,
    pub sigma_r_frac: f64,
    pub n_mc: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub output_dir: PathBuf,
    /// Input columns corrupted in the robustness experiment; unset means
    /// every load column.
    pub robustness_columns: Option<Vec<String>>,
    /// Width of the removed window, centered on the forecast (MW).
    pub robustness_window_mw: f64,
    pub robustness_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case_path: PathBuf::from("crates/core/data/case9.json"),
            seed: 0,
            n_train: 75,
            n_test: 500,
            mode: Mode::Hybrid,
            sparse_m: None,
            inducing: InducingStrategy::Kmeans,
            restarts: 5,
            eps_y: 0.025,
            eps_pg: 0.001,
            sigma_l_frac: 0.15,
            sigma_r_frac: 0.30,
            n_mc: 1000,
            tol: 1e-5,
            max_iter: 500,
            output_dir: PathBuf::from("out"),
            robustness_columns: None,
            robustness_window_mw: 15.0,
            robustness_seeds: 5,
        }
    }
}

impl RunConfig {
    pub fn spec(&self) -> UncertaintySpec {
        UncertaintySpec { sigma_l: self.sigma_l_frac, sigma_r: self.sigma_r_frac, gamma: None }
    }

    pub fn ipm(&self) -> IpmOptions {
        IpmOptions { tol: self.tol, max_iter: self.max_iter, ..IpmOptions::default() }
    }

    pub fn case_id(&self) -> String {
        self.case_path.file_stem().map_or_else(|| "case".to_string(), |s| s.to_string_lossy().into_owned())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn check(&self) -> Result<(), CliError> {
        let prob = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(CliError::Usage(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        prob("eps_y", self.eps_y)?;
        prob("eps_pg", self.eps_pg)?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(CliError::Usage("n_train and n_test must be positive".into()));
        }
        if self.sigma_l_frac < 0.0 || self.sigma_r_frac < 0.0 {
            return Err(CliError::Usage("uncertainty fractions must be nonnegative".into()));
        }
        if !(self.tol > 0.0) {
            return Err(CliError::Usage("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gpopf", version, about = "Hybrid GP chance-constrained AC-OPF toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with RunConfig keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    case: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    sparse_m: Option<usize>,
    #[arg(long, global = true)]
    eps_y: Option<f64>,
    #[arg(long, global = true)]
    eps_pg: Option<f64>,
    #[arg(long, global = true)]
    n_mc: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample training and test datasets.
    Generate,
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Solve the CC-OPF on a trained model.
    Solve {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Monte-Carlo validation of a solution.
    Validate {
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Also evaluate baselines A and B.
        #[arg(long)]
        baselines: bool,
        /// Write the Monte-Carlo outputs as CSV.
        #[arg(long)]
        mc_csv: bool,
    },
    /// Corrupted-data experiment.
    Robustness,
    /// generate, train, solve and validate (with baselines).
    All,
}

/// Reads the config file (if any) and applies flag overrides.
fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = common.$field.clone() {
                cfg.$field = v;
            }
        };
    }
    if let Some(c) = &common.case {
        cfg.case_path = c.clone();
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    set!(seed);
    set!(n_train);
    set!(n_test);
    set!(mode);
    set!(eps_y);
    set!(eps_pg);
    set!(n_mc);
    set!(tol);
    if common.sparse_m.is_some() {
        cfg.sparse_m = common.sparse_m;
    }
    cfg.check()?;
    Ok(cfg)
}

fn read_case(cfg: &RunConfig) -> Result<GridCase, CliError> {
    load_case(&cfg.case_path).map_err(|e| CliError::Usage(format!("case file {}: {e}", cfg.case_path.display())))
}

fn ensure_dir(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", cfg.output_dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed {}: {e}", path.display())))
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let case = read_case(cfg)?;
    ensure_dir(cfg)?;
    let spec = cfg.spec();
    let train = sample_dataset(&case, &cfg.case_id(), &spec, cfg.n_train, cfg.seed)?;
    let test = sample_dataset(&case, &cfg.case_id(), &spec, cfg.n_test, test_seed(cfg.seed))?;
    save_dataset(&train, &cfg.out("dataset.csv"))?;
    save_dataset(&test, &cfg.out("test.csv"))?;
    println!(
        "generated {} training rows ({} dropped) and {} test rows ({} dropped) in {}",
        train.len(),
        train.provenance.dropped_rows,
        test.len(),
        test.provenance.dropped_rows,
        cfg.output_dir.display()
    );
    Ok((train, test))
}

/// Held-out accuracy of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub sparse_m: Option<usize>,
    pub n_train: usize,
    pub rmse_model: f64,
    pub rmse_per_output: Vec<f64>,
    pub rmse_linear: Option<f64>,
}

fn test_set(cfg: &RunConfig, case: &GridCase) -> Result<Dataset, CliError> {
    let p = cfg.out("test.csv");
    if p.exists() {
        Ok(load_dataset(&p)?)
    } else {
        Ok(sample_dataset(case, &cfg.case_id(), &cfg.spec(), cfg.n_test, test_seed(cfg.seed))?)
    }
}

pub fn cmd_train(cfg: &RunConfig, data: Option<&Path>) -> Result<(HybridModel<f64>, TrainSummary), CliError> {
    let case = read_case(cfg)?;
    ensure_dir(cfg)?;
    let path = data.map_or_else(|| cfg.out("dataset.csv"), Path::to_path_buf);
    let ds = load_dataset(&path)?;
    if ds.schema != io_schema(&case) {
        return Err(CliError::Usage(format!("{} does not match case {}", path.display(), cfg.case_path.display())));
    }
    if let Some(m) = cfg.sparse_m {
        if m == 0 || m > ds.len() {
            return Err(CliError::Usage(format!("sparse_m = {m} must be between 1 and the {} training rows", ds.len())));
        }
    }
    let opts = ModelOptions { mode: cfg.mode, sparse_m: cfg.sparse_m, strategy: cfg.inducing, restarts: cfg.restarts, seed: cfg.seed };
    let model = HybridModel::fit(&ds, &opts)?;
    model.save(&cfg.out("model.json"))?;

    for (name, hp) in ds.schema.output_names.iter().zip(model.hyperparams()) {
        let (lo, hi) = hp.lengthscales.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &l| (a.min(l), b.max(l)));
        println!("{name:>10}  lengthscale [{lo:.3e}, {hi:.3e}]  signal {:.3e}  noise {:.3e}", hp.signal_var, hp.noise_var);
    }
    let test = test_set(cfg, &case)?;
    let (per, avg) = rmse(&model.predict_rows(&test.x), &test.y)?;
    let rmse_linear = match &model.surrogate {
        Some(s) => Some(rmse(&s.predict_rows(&test.x).map_err(|e| CliError::Numerical(e.to_string()))?, &test.y)?.1),
        None => None,
    };
    println!("held-out RMSE {avg:.4e} p.u. over {} rows", test.len());
    if let Some(l) = rmse_linear {
        println!("linear surrogate RMSE {l:.4e} p.u.");
    }
    let summary = TrainSummary {
        mode: cfg.mode,
        sparse_m: cfg.sparse_m,
        n_train: ds.len(),
        rmse_model: avg,
        rmse_per_output: per.iter().copied().collect(),
        rmse_linear,
    };
    write_json(&cfg.out("train.json"), &summary)?;
    Ok((model, summary))
}

pub fn cmd_solve(cfg: &RunConfig, model_path: Option<&Path>) -> Result<DispatchSolution, CliError> {
    let case = read_case(cfg)?;
    ensure_dir(cfg)?;
    let path = model_path.map_or_else(|| cfg.out("model.json"), Path::to_path_buf);
    let model = HybridModel::load(&path)?;
    let sol = solve_ccopf(&case, &model, &cfg.spec(), cfg.eps_y, cfg.eps_pg, &cfg.ipm())?;
    write_json(&cfg.out("solution.json"), &sol)?;
    println!("status {:?} after {} iterations, KKT residual {:.3e}", sol.status, sol.iterations, sol.kkt_residual);
    println!("expected cost {:.2} $", sol.cost);
    for (k, (p, a)) in sol.p_g.iter().zip(&sol.alpha).enumerate() {
        println!("  generator {k}: p_g {p:.3} MW  alpha {a:.4}  margin {:.3} MW", sol.margins.lambda_pg[k]);
    }
    let widest = sol.margins.lambda_y.iter().cloned().fold(0.0, f64::max);
    println!("largest output margin {widest:.4e} p.u. (tau_y {:.4})", sol.margins.tau_y);
    if sol.status != SolveStatus::Optimal {
        return Err(CliError::Numerical(format!("CC-OPF solve ended with status {:?}", sol.status)));
    }
    Ok(sol)
}

pub fn cmd_validate(cfg: &RunConfig, solution: Option<&Path>, baselines: bool, mc_csv: bool) -> Result<ValidationReport, CliError> {
    if cfg.n_mc == 0 {
        return Err(CliError::Usage("n_mc must be at least 1".into()));
    }
    let case = read_case(cfg)?;
    ensure_dir(cfg)?;
    let path = solution.map_or_else(|| cfg.out("solution.json"), Path::to_path_buf);
    let sol: DispatchSolution = read_json(&path)?;
    if sol.p_g.len() != case.generators.len() || sol.mu_y.len() != io_schema(&case).n_y {
        return Err(CliError::Usage(format!("{} does not match case {}", path.display(), cfg.case_path.display())));
    }
    let spec = cfg.spec();
    let built = validation_report(&case, &sol, &spec, cfg.n_mc, cfg.seed, 0.0027);
    let mut report = built.report;
    if mc_csv {
        write_mc_csv(&cfg.out("mc_outputs.csv"), &io_schema(&case), &built.mc.outputs)
            .map_err(|e| CliError::Usage(format!("cannot write MC outputs: {e}")))?;
    }

    let mut accuracy = Vec::new();
    let train_path = cfg.out("train.json");
    if train_path.exists() {
        let t: TrainSummary = read_json(&train_path)?;
        report.rmse_per_output = Some(t.rmse_per_output.clone());
        report.rmse_avg = Some(t.rmse_model);
        if let Some(l) = t.rmse_linear {
            accuracy.push(AccuracyRow { method: "linear surrogate".into(), n_train: t.n_train, rmse: l });
        }
        let label = match (t.mode, t.sparse_m) {
            (Mode::Hybrid, None) => "hybrid GP".to_string(),
            (Mode::Full, None) => "full GP".to_string(),
            (Mode::Hybrid, Some(m)) => format!("hybrid sparse GP (m={m})"),
            (Mode::Full, Some(m)) => format!("full sparse GP (m={m})"),
        };
        accuracy.push(AccuracyRow { method: label, n_train: t.n_train, rmse: t.rmse_model });
    }

    let mut rows = Vec::new();
    if baselines {
        let opts = cfg.ipm();
        let a = baseline_full_recourse(&case, &spec, cfg.n_mc, cfg.seed, &opts);
        let b = baseline_base_case(&case, &spec, cfg.n_mc, cfg.seed, &opts);
        rows.push(CostRow { method: "A (full recourse)".into(), cost: a.cost, failure_prob: None });
        rows.push(CostRow { method: "B (base case)".into(), cost: b.cost, failure_prob: Some(b.violation_prob) });
        report.baselines = Some(Baselines { a, b_cost: b.cost, b_violation: b.violation_prob });
    }
    rows.push(CostRow { method: "GP CC-OPF".into(), cost: sol.cost, failure_prob: Some(report.violation_prob) });

    let mut text = String::new();
    if !accuracy.is_empty() {
        text.push_str(&render_accuracy_table(&cfg.case_id(), &accuracy));
        text.push('\n');
    }
    text.push_str(&render_cost_table(&cfg.case_id(), &rows));
    write_json(&cfg.out("report.json"), &report)?;
    write_text(&cfg.out("report.txt"), &text)?;
    print!("{text}");
    let worst_pg = report.pg_violation.iter().cloned().fold(0.0, f64::max);
    println!("joint violation {:.2}%, worst generator {:.2}%, {} non-convergent", 100.0 * report.violation_prob, 100.0 * worst_pg, report.nonconvergent);
    Ok(report)
}

pub fn cmd_robustness(cfg: &RunConfig) -> Result<Vec<RobustnessRow>, CliError> {
    let case = read_case(cfg)?;
    ensure_dir(cfg)?;
    let schema = io_schema(&case);
    let columns: Vec<String> = match &cfg.robustness_columns {
        Some(c) => c.clone(),
        None => schema.load_inputs.iter().map(|&i| format!("pl:{}", case.buses[i].id)).collect(),
    };
    let forecast = UncertaintySpec::forecast(&case, &schema);
    let setup = RobustnessSetup {
        case_id: cfg.case_id(),
        spec: cfg.spec(),
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        restarts: cfg.restarts,
    };
    let seeds: Vec<u64> = (0..cfg.robustness_seeds as u64).map(|s| cfg.seed + s).collect();
    let mut rows = Vec::new();
    for col in &columns {
        let j = schema
            .input_index(col)
            .filter(|&j| j >= schema.n_pg_inputs())
            .ok_or_else(|| CliError::Usage(format!("unknown uncertain input column `{col}`")))?;
        let center = forecast[j - schema.n_pg_inputs()] * case.base_mva;
        let half = 0.5 * cfg.robustness_window_mw;
        rows.extend(robustness_experiment(&case, &setup, col, (center - half, center + half), &seeds)?);
    }
    let text = render_robustness_table(&rows);
    write_json(&cfg.out("robustness.json"), &rows)?;
    write_text(&cfg.out("robustness.txt"), &text)?;
    print!("{text}");
    Ok(rows)
}

pub fn cmd_all(cfg: &RunConfig) -> Result<ValidationReport, CliError> {
    cmd_generate(cfg)?;
    cmd_train(cfg, None)?;
    cmd_solve(cfg, None)?;
    cmd_validate(cfg, None, true, false)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = resolve_config(&cli.common).and_then(|cfg| match &cli.command {
        Command::Generate => cmd_generate(&cfg).map(|_| ()),
        Command::Train { data } => cmd_train(&cfg, data.as_deref()).map(|_| ()),
        Command::Solve { model } => cmd_solve(&cfg, model.as_deref()).map(|_| ()),
        Command::Validate { solution, baselines, mc_csv } => cmd_validate(&cfg, solution.as_deref(), *baselines, *mc_csv).map(|_| ()),
        Command::Robustness => cmd_robustness(&cfg).map(|_| ()),
        Command::All => cmd_all(&cfg).map(|_| ()),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.eps_y, cfg.eps_pg, cfg.n_mc, cfg.tol), (0.025, 0.001, 1000, 1e-5));
        assert_eq!((cfg.sigma_l_frac, cfg.sigma_r_frac), (0.15, 0.30));
        let parsed: RunConfig = toml::from_str("seed = 4\nmode = \"full\"\nsparse_m = 10\n").unwrap();
        assert_eq!(parsed.seed, 4);
        assert_eq!(parsed.mode, Mode::Full);
        assert_eq!(parsed.sparse_m, Some(10));
        assert_eq!(parsed.n_train, 75);
        assert!(toml::from_str::<RunConfig>("nonsense = 1").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["gpopf", "generate", "--case", "/nonexistent/case.json"]), 2);
        assert_eq!(run(["gpopf", "validate", "--n-mc", "0"]), 2);
        assert_eq!(run(["gpopf", "frobnicate"]), 2);
        assert_eq!(run(["gpopf", "solve", "--eps-y", "1.5"]), 2);
    }
}
