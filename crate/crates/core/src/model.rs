//! Trained model container: schema, optional linear surrogate and the GP
//! residual (exact or sparse), persisted as one JSON document.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::gp::{train_gp, GpError, GpModel, TrainOptions};
use crate::grid::IoSchema;
use crate::kernel::{Hyperparams, Regressor};
use crate::linmodel::{fit_linear, LinModelError, LinearSurrogate};
use crate::scalar::Real;
use crate::sparsegp::{train_sparse, InducingStrategy, SparseGpError, SparseGpModel, SparseOptions};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Sparse(#[from] SparseGpError),
    #[error(transparent)]
    Linear(#[from] LinModelError),
    #[error("model does not match the case schema")]
    Schema,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed model file {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Linear surrogate plus GP on the residuals.
    #[default]
    Hybrid,
    /// GP directly on the outputs.
    Full,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "full" => Ok(Mode::Full),
            _ => Err(format!("unknown mode `{s}` (expected hybrid or full)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "kind", rename_all = "snake_case")]
pub enum Residual<T: Real> {
    Exact(GpModel<T>),
    Sparse(SparseGpModel<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub case_id: String,
    pub seed: u64,
    pub n_train: usize,
    pub mode: Mode,
    pub sparse_m: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HybridModel<T: Real> {
    pub schema: IoSchema,
    pub surrogate: Option<LinearSurrogate<T>>,
    pub residual: Residual<T>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone)]
pub struct ModelOptions {
    pub mode: Mode,
    pub sparse_m: Option<usize>,
    pub strategy: InducingStrategy,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { mode: Mode::Hybrid, sparse_m: None, strategy: InducingStrategy::Kmeans, restarts: 5, seed: 0 }
    }
}

impl<T: Real> HybridModel<T> {
    pub fn regressor(&self) -> &dyn Regressor<T> {
        match &self.residual {
            Residual::Exact(m) => m,
            Residual::Sparse(m) => m,
        }
    }

    pub fn hyperparams(&self) -> Vec<Hyperparams<T>> {
        match &self.residual {
            Residual::Exact(m) => m.hyperparams(),
            Residual::Sparse(m) => m.hyperparams(),
        }
    }

    /// Predictive mean and GP variance at one input.
    pub fn predict(&self, x: &[T]) -> (DVector<T>, DVector<T>) {
        let (mut mu, var) = self.regressor().predict(x);
        if let Some(s) = &self.surrogate {
            mu += s.predict(&DVector::from_column_slice(x)).expect("schema-checked input");
        }
        (mu, var)
    }

    /// Mean predictions for each row of `x`.
    pub fn predict_rows(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(x.nrows(), self.schema.n_y);
        for i in 0..x.nrows() {
            let row: Vec<T> = x.row(i).iter().copied().collect();
            out.row_mut(i).copy_from(&self.predict(&row).0.transpose());
        }
        out
    }
}

/// Fits the surrogate (hybrid mode) and the GP residual on a dataset.
pub fn train_model<T: Real>(ds: &Dataset, x: &DMatrix<T>, y: &DMatrix<T>, opts: &ModelOptions) -> Result<HybridModel<T>, ModelError> {
    let schema = ds.schema.clone();
    let (surrogate, targets) = match opts.mode {
        Mode::Hybrid => {
            let s = fit_linear(x, y, schema.n_v())?;
            let z = s.predict_rows(x)?;
            (Some(s), y - z)
        }
        Mode::Full => (None, y.clone()),
    };
    let train = TrainOptions { restarts: opts.restarts, seed: opts.seed, ..TrainOptions::default() };
    let residual = match opts.sparse_m {
        Some(m) => Residual::Sparse(train_sparse(x, &targets, &SparseOptions { m, strategy: opts.strategy, train })?),
        None => Residual::Exact(train_gp(x, &targets, &train)?),
    };
    Ok(HybridModel {
        schema,
        surrogate,
        residual,
        meta: TrainingMeta {
            case_id: ds.provenance.case_id.clone(),
            seed: opts.seed,
            n_train: x.nrows(),
            mode: opts.mode,
            sparse_m: opts.sparse_m,
        },
    })
}

impl HybridModel<f64> {
    pub fn fit(ds: &Dataset, opts: &ModelOptions) -> Result<Self, ModelError> {
        train_model(ds, &ds.x, &ds.y, opts)
    }

    pub fn check_schema(&self, schema: &IoSchema) -> Result<(), ModelError> {
        let n_ok = self.regressor().n_inputs() == schema.n_x && self.regressor().n_outputs() == schema.n_y;
        if &self.schema != schema || !n_ok {
            return Err(ModelError::Schema);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| ModelError::Json { path: path.display().to_string(), source: e })?;
        std::fs::write(path, text).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| ModelError::Json { path: path.display().to_string(), source: e })?;
        if m.regressor().n_outputs() != m.schema.n_y || m.regressor().n_inputs() != m.schema.n_x {
            return Err(ModelError::Schema);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sample_dataset, UncertaintySpec};
    use crate::grid::load_case;

    #[test]
    fn save_load_predicts_identically() {
        let case = load_case(concat!(env!("CARGO_MANIFEST_DIR"), "/data/case9.json")).unwrap();
        let ds = sample_dataset(&case, "case9", &UncertaintySpec::default(), 30, 3).unwrap();
        let opts = ModelOptions { restarts: 1, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        for sparse_m in [None, Some(8)] {
            let m = HybridModel::fit(&ds, &ModelOptions { sparse_m, ..opts.clone() }).unwrap();
            let p = dir.path().join("m.json");
            m.save(&p).unwrap();
            let back = HybridModel::load(&p).unwrap();
            let x: Vec<f64> = ds.x.row(4).iter().copied().collect();
            assert_eq!(m.predict(&x), back.predict(&x));
        }
        std::fs::write(dir.path().join("bad.json"), "{\"schema\": 3}").unwrap();
        assert!(HybridModel::load(&dir.path().join("bad.json")).is_err());
    }

    #[test]
    fn full_mode_has_no_surrogate() {
        let case = load_case(concat!(env!("CARGO_MANIFEST_DIR"), "/data/case9.json")).unwrap();
        let ds = sample_dataset(&case, "case9", &UncertaintySpec::default(), 20, 1).unwrap();
        let m = HybridModel::fit(&ds, &ModelOptions { mode: Mode::Full, restarts: 1, ..Default::default() }).unwrap();
        assert!(m.surrogate.is_none());
        assert_eq!(m.predict_rows(&ds.x).shape(), (20, 15));
    }
}
