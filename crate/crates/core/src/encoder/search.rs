use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{fit, BatchSize, EpochMetrics, FitResult, TrainConfig};
use super::{column_correlations, gather, FoldSpec, Xy};
use crate::error::{Error, Result};
use crate::featurize::DesignMatrix;
use crate::types::{EncodingModel, HyperParams, ModelHyperparameters, ParticipantBold, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
    /// Sampled uniformly.
    pub weight_decay: (f64, f64),
    pub max_epochs: usize,
    pub trials: usize,
    pub batch_size: BatchSize,
    pub patience: usize,
    pub criterion: SelectionCriterion,
}

/// Score used to rank trials; higher is better for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    /// Skewness of the validation voxel correlations.
    #[default]
    Skew,
    /// Mean of the validation voxel correlations.
    MeanCorrelation,
}

impl SelectionCriterion {
    pub fn score(self, correlations: &[Option<f64>]) -> Option<f64> {
        match self {
            SelectionCriterion::Skew => select_by_skew(correlations),
            SelectionCriterion::MeanCorrelation => {
                let xs: Vec<f64> = correlations.iter().flatten().copied().collect();
                (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
            }
        }
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: (1e-6, 1e-2),
            weight_decay: (0.0, 1e-5),
            max_epochs: 40,
            trials: 100,
            batch_size: BatchSize::Rows(32),
            patience: 3,
            criterion: SelectionCriterion::Skew,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let what = "search space";
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(what, format!("learning-rate range [{lo}, {hi}]")));
        }
        let (lo, hi) = self.weight_decay;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(what, format!("weight-decay range [{lo}, {hi}]")));
        }
        if self.trials == 0 || self.max_epochs == 0 {
            return Err(Error::invalid(what, "trials and max_epochs must be at least 1"));
        }
        if self.batch_size == BatchSize::Rows(0) {
            return Err(Error::invalid(what, "batch size 0"));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            patience: self.patience,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> HyperParams {
        let (lo, hi) = self.learning_rate;
        let u: f64 = rng.random();
        let learning_rate = (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi);
        let (lo, hi) = self.weight_decay;
        let weight_decay = lo + rng.random::<f64>() * (hi - lo);
        HyperParams {
            learning_rate,
            weight_decay,
        }
    }
}

/// Adjusted Fisher–Pearson sample skewness `G1` of the finite correlations.
///
/// `None` with fewer than three values or zero variance.
pub fn select_by_skew(correlations: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = correlations.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let n = xs.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return None;
    }
    let g1 = m3 / m2.powf(1.5);
    Some((nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    UndefinedScore,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub best_epoch: usize,
    pub score: Option<f64>,
    pub status: TrialStatus,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub model: EncodingModel,
    pub winner: usize,
    pub trials: Vec<TrialRecord>,
}

/// Seeds trial `trial` of a search, independent of scheduling.
fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

fn run_trial(
    trial: usize,
    hp: HyperParams,
    train: &Xy,
    validation: &Xy,
    cfg: &TrainConfig,
    criterion: SelectionCriterion,
    seed: u64,
) -> TrialRecord {
    let out = fit(train, Some(validation), hp, cfg, cfg.max_epochs, &mut trial_rng(seed, trial));
    let score = if out.diverged {
        None
    } else {
        let pred = validation.x.dot(&out.weights) + &out.bias;
        column_correlations(&pred, &validation.y)
            .ok()
            .and_then(|c| criterion.score(&c))
    };
    let status = match (out.diverged, score) {
        (true, _) => TrialStatus::Diverged,
        (false, None) => TrialStatus::UndefinedScore,
        (false, Some(_)) => TrialStatus::Ok,
    };
    TrialRecord {
        trial,
        learning_rate: hp.learning_rate,
        weight_decay: hp.weight_decay,
        best_epoch: out.best_epoch,
        score,
        status,
        history: out.history,
    }
}

/// Highest score wins; undefined scores rank last, ties go to the lower trial index.
fn pick_winner(trials: &[TrialRecord]) -> Option<usize> {
    let rank = |t: &TrialRecord| match t.status {
        TrialStatus::Ok => (2, t.score.unwrap_or(f64::NEG_INFINITY)),
        TrialStatus::UndefinedScore => (1, 0.0),
        TrialStatus::Diverged => (0, 0.0),
    };
    let mut best: Option<&TrialRecord> = None;
    for t in trials.iter().filter(|t| t.status != TrialStatus::Diverged) {
        if best.is_none_or(|b| {
            let (rt, rb) = (rank(t), rank(b));
            rt.0 > rb.0 || (rt.0 == rb.0 && rt.1 > rb.1)
        }) {
            best = Some(t);
        }
    }
    best.map(|t| t.trial)
}

/// Random search over one fold, then a retrain of the winner on train + validation rows for
/// its best epoch count.
pub fn random_search(
    design: &DesignMatrix,
    bold: &ParticipantBold,
    fold: &FoldSpec,
    space: &SearchSpace,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    if bold.participant_id() != fold.participant_id {
        return Err(Error::invalid(
            "fold",
            format!("fold is for {}, recording for {}", fold.participant_id, bold.participant_id()),
        ));
    }
    let rows = fold.rows(design)?;
    let train = gather(design, bold, &rows.train)?;
    let validation = gather(design, bold, &rows.validation)?;
    let cfg = space.train_config();

    let mut sampler = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<HyperParams> = (0..space.trials).map(|_| space.sample(&mut sampler)).collect();
    let trials: Vec<TrialRecord> = points
        .par_iter()
        .enumerate()
        .map(|(i, &hp)| run_trial(i, hp, &train, &validation, &cfg, space.criterion, seed))
        .collect();

    let Some(winner) = pick_winner(&trials) else {
        return Err(Error::AllTrialsFailed {
            trials: trials.len(),
            log: trials,
        });
    };
    let hp = points[winner];
    let full = gather(design, bold, &rows.train_and_validation())?;
    let FitResult {
        weights,
        bias,
        best_epoch,
        ..
    } = fit(&full, None, hp, &cfg, trials[winner].best_epoch, &mut trial_rng(seed, winner));

    let model = EncodingModel::new(
        fold.participant_id.clone(),
        fold.heldout_run,
        design.lags().to_vec(),
        weights.mapv(|v| v as f32),
        bias.iter().map(|&v| v as f32).collect(),
        ModelHyperparameters {
            learning_rate: hp.learning_rate,
            weight_decay: hp.weight_decay,
            epochs_trained: best_epoch,
        },
        Provenance {
            model_tag: design.model_tag.clone(),
            scramble_tag: design.scramble_tag.clone(),
            seed,
        },
    )?;
    Ok(SearchOutcome {
        model,
        winner,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook form: sqrt(n(n-1))/(n-2) * m3 / m2^1.5 written with two separate passes.
    fn skew_oracle(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean: f64 = x.iter().sum::<f64>() / n;
        let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let m2 = dev.iter().map(|d| d * d).sum::<f64>() / n;
        let m3 = dev.iter().map(|d| d * d * d).sum::<f64>() / n;
        (n * (n - 1.0)).sqrt() / (n - 2.0) * m3 / (m2 * m2.sqrt())
    }

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn skew_reference_values() {
        // scipy.stats.skew([1, 2, 2, 3, 7], bias=False)
        let s = select_by_skew(&some(&[1.0, 2.0, 2.0, 3.0, 7.0])).unwrap();
        assert!((s - 1.7443694974549941).abs() < 1e-12);
        assert!((s - skew_oracle(&[1.0, 2.0, 2.0, 3.0, 7.0])).abs() < 1e-12);
        assert!(select_by_skew(&some(&[-0.4, 0.0, 0.4])).unwrap().abs() < 1e-15);
        assert!(select_by_skew(&some(&[0.0, 0.0, 0.0, 0.0, 1.0])).unwrap() > 0.0);
    }

    #[test]
    fn skew_undefined_cases() {
        assert_eq!(select_by_skew(&some(&[1.0, 2.0])), None);
        assert_eq!(select_by_skew(&some(&[0.3; 5])), None);
        assert_eq!(select_by_skew(&[None, Some(1.0), Some(2.0)]), None);
    }

    #[test]
    fn winner_ranking() {
        let rec = |trial, score: Option<f64>, status| TrialRecord {
            trial,
            learning_rate: 0.0,
            weight_decay: 0.0,
            best_epoch: 0,
            score,
            status,
            history: vec![],
        };
        let trials = vec![
            rec(0, None, TrialStatus::UndefinedScore),
            rec(1, Some(0.5), TrialStatus::Ok),
            rec(2, None, TrialStatus::Diverged),
            rec(3, Some(0.5), TrialStatus::Ok),
            rec(4, Some(-1.0), TrialStatus::Ok),
        ];
        assert_eq!(pick_winner(&trials), Some(1));
        assert_eq!(pick_winner(&trials[..1]), Some(0));
        assert_eq!(pick_winner(&trials[2..3]), None);
    }

    #[test]
    fn space_sampling_stays_in_range() {
        let space = SearchSpace::default();
        space.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let hp = space.sample(&mut rng);
            assert!((1e-6..=1e-2).contains(&hp.learning_rate));
            assert!((0.0..=1e-5).contains(&hp.weight_decay));
        }
        let bad = SearchSpace {
            trials: 0,
            ..SearchSpace::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trial_streams_are_independent_of_order() {
        use rand::RngCore;
        let a = trial_rng(9, 3).next_u64();
        let _ = trial_rng(9, 1).next_u64();
        assert_eq!(a, trial_rng(9, 3).next_u64());
        assert_ne!(a, trial_rng(9, 4).next_u64());
    }
}
