//! Per-fold linear encoding heads: fold splits, AdamW training, random search and prediction.

mod search;
mod train;

pub use search::{
    random_search, select_by_skew, SearchOutcome, SearchSpace, SelectionCriterion, TrialRecord,
    TrialStatus,
};
pub use train::{fit, mse_gradient, objective, BatchSize, EpochMetrics, FitResult, TrainConfig};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::DesignMatrix;
use crate::stats::pearson_pairs;
use crate::types::{EncodingModel, ParticipantBold};

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

/// One leave-one-run-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub participant_id: String,
    pub heldout_run: usize,
    pub train_runs: Vec<usize>,
    /// Final contiguous fraction of each training run's valid rows used for validation.
    pub validation_fraction: f64,
}

/// Design-row indices of each split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRows {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldRows {
    pub fn train_and_validation(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.train.iter().chain(&self.validation).copied().collect();
        rows.sort_unstable();
        rows
    }
}

impl FoldSpec {
    pub fn new(
        participant_id: impl Into<String>,
        heldout_run: usize,
        run_count: usize,
        validation_fraction: f64,
    ) -> Result<Self> {
        let spec = Self {
            participant_id: participant_id.into(),
            heldout_run,
            train_runs: (0..run_count).filter(|&r| r != heldout_run).collect(),
            validation_fraction,
        };
        spec.validate(run_count)?;
        Ok(spec)
    }

    /// Every leave-one-run-out fold of a participant.
    pub fn all(participant_id: &str, run_count: usize, validation_fraction: f64) -> Result<Vec<Self>> {
        (0..run_count)
            .map(|r| Self::new(participant_id, r, run_count, validation_fraction))
            .collect()
    }

    pub fn validate(&self, run_count: usize) -> Result<()> {
        let what = "fold";
        if run_count < 2 {
            return Err(Error::invalid(what, "need at least two runs"));
        }
        if self.heldout_run >= run_count || self.train_runs.contains(&self.heldout_run) {
            return Err(Error::invalid(what, format!("bad heldout run {}", self.heldout_run)));
        }
        let mut covered: Vec<usize> = self.train_runs.iter().copied().chain([self.heldout_run]).collect();
        covered.sort_unstable();
        if covered != (0..run_count).collect::<Vec<_>>() {
            return Err(Error::invalid(what, "train and heldout runs must partition all runs"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid(
                what,
                format!("validation fraction {} outside (0, 1)", self.validation_fraction),
            ));
        }
        Ok(())
    }

    /// Splits the valid design rows. Each training run contributes its final
    /// `ceil(fraction * n)` valid rows to validation; the `max_lag` training rows right before
    /// that block are dropped so no validation feature window sees a training target.
    pub fn rows(&self, design: &DesignMatrix) -> Result<FoldRows> {
        let max_lag = design.lags().iter().copied().max().unwrap_or(0);
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for &run in &self.train_runs {
            let valid = design.valid_rows_of_run(run);
            let n = valid.len();
            let n_val = ((self.validation_fraction * n as f64).ceil() as usize).max(1);
            if n < n_val + max_lag + 1 {
                return Err(Error::invalid(
                    "fold",
                    format!("run {run} has {n} valid rows, too few to carve a validation block"),
                ));
            }
            train.extend_from_slice(&valid[..n - n_val - max_lag]);
            validation.extend_from_slice(&valid[n - n_val..]);
        }
        let test = design.valid_rows_of_run(self.heldout_run);
        if test.is_empty() {
            return Err(Error::invalid("fold", format!("heldout run {} has no valid rows", self.heldout_run)));
        }
        Ok(FoldRows {
            train,
            validation,
            test,
        })
    }
}

/// Features and targets of one split, in f64.
#[derive(Debug, Clone)]
pub struct Xy {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl Xy {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }
}

/// Collects design rows and the matching BOLD frames.
pub fn gather(design: &DesignMatrix, bold: &ParticipantBold, rows: &[usize]) -> Result<Xy> {
    let f = design.features();
    let v = bold.voxels();
    let mut x = Array2::zeros((rows.len(), f));
    let mut y = Array2::zeros((rows.len(), v));
    for (i, &r) in rows.iter().enumerate() {
        let info = design.rows().get(r).ok_or_else(|| {
            Error::Dimension(format!("row {r} outside design of {} rows", design.rows().len()))
        })?;
        let run = bold
            .run(info.run_id)
            .ok_or_else(|| Error::invalid("bold", format!("no run {}", info.run_id)))?;
        if info.tr_index >= run.trs() {
            return Err(Error::Dimension(format!(
                "run {} has {} TRs, design needs TR {}",
                info.run_id,
                run.trs(),
                info.tr_index
            )));
        }
        x.row_mut(i).assign(&design.x().row(r).mapv(f64::from));
        y.row_mut(i).assign(&run.data().row(info.tr_index).mapv(f64::from));
    }
    Ok(Xy { x, y })
}

/// `XW + b` for f64 features.
pub fn predict_rows(model: &EncodingModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.features() {
        return Err(Error::Dimension(format!(
            "design has {} features, model expects {}",
            x.ncols(),
            model.features()
        )));
    }
    let w = model.weights().mapv(f64::from);
    let b = Array1::from_iter(model.bias().iter().map(|&v| f64::from(v)));
    Ok(x.dot(&w) + &b)
}

/// Predictions over the valid rows of the model's heldout run.
pub fn predict(model: &EncodingModel, design: &DesignMatrix) -> Result<Array2<f64>> {
    let rows = design.valid_rows_of_run(model.heldout_run);
    let x = design.x().select(Axis(0), &rows).mapv(f64::from);
    predict_rows(model, &x)
}

/// Column-wise Pearson correlation; `None` where either column is constant.
pub fn column_correlations(pred: &Array2<f64>, actual: &Array2<f64>) -> Result<Vec<Option<f64>>> {
    if pred.dim() != actual.dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs recording {:?}",
            pred.dim(),
            actual.dim()
        )));
    }
    pred.axis_iter(Axis(1))
        .zip(actual.axis_iter(Axis(1)))
        .map(|(p, a)| pearson_pairs(p.iter().copied().zip(a.iter().copied())))
        .collect()
}

/// Per-voxel correlation between predictions and BOLD on the heldout run.
pub fn heldout_correlations(
    model: &EncodingModel,
    design: &DesignMatrix,
    bold: &ParticipantBold,
) -> Result<Vec<Option<f64>>> {
    if model.voxels() != bold.voxels() {
        return Err(Error::Dimension(format!(
            "model has {} voxels, recording {}",
            model.voxels(),
            bold.voxels()
        )));
    }
    let rows = design.valid_rows_of_run(model.heldout_run);
    let data = gather(design, bold, &rows)?;
    column_correlations(&predict_rows(model, &data.x)?, &data.y)
}
