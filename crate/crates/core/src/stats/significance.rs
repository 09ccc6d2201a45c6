use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::types::{AlignmentReport, ReportMetadata, VoxelAlignment};

/// Per-voxel heldout correlations, one column per fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldCorrelations {
    pub voxel_ids: Vec<String>,
    pub folds: Vec<usize>,
    /// `values[voxel][fold]`, `None` for undefined correlations.
    pub values: Vec<Vec<Option<f64>>>,
}

impl FoldCorrelations {
    pub fn new(voxel_ids: Vec<String>, folds: Vec<usize>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if values.len() != voxel_ids.len() || values.iter().any(|row| row.len() != folds.len()) {
            return Err(Error::Dimension(format!(
                "fold correlations must be {} voxels x {} folds",
                voxel_ids.len(),
                folds.len()
            )));
        }
        Ok(Self {
            voxel_ids,
            folds,
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    /// `None` when the sample has zero variance.
    pub t: Option<f64>,
    pub df: usize,
    pub p_value: f64,
}

/// One-sample t-test of `mean > 0`.
///
/// A zero-variance sample gets `p = 0` when its common value is positive and `p = 1`
/// otherwise.
pub fn one_sample_t_greater(values: &[f64]) -> Result<TTest> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewValues { needed: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let sd = (ss / (n - 1) as f64).sqrt();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return Ok(TTest {
            t: None,
            df: n - 1,
            p_value: if mean > 0.0 { 0.0 } else { 1.0 },
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1");
    Ok(TTest {
        t: Some(t),
        df: n - 1,
        p_value: dist.sf(t).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BhResult {
    pub rejected: Vec<bool>,
    /// Number of rejected hypotheses.
    pub k: usize,
    /// `k * alpha / m`, or 0 when nothing is rejected.
    pub threshold: f64,
}

/// Benjamini-Hochberg step-up procedure.
pub fn benjamini_hochberg(p: &[f64], alpha: f64) -> Result<BhResult> {
    if p.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("p-values", format!("{bad} not in [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));

    let k = (1..=m)
        .rev()
        .find(|&k| p[order[k - 1]] <= k as f64 * alpha / m as f64)
        .unwrap_or(0);
    let mut rejected = vec![false; m];
    for &i in &order[..k] {
        rejected[i] = true;
    }
    let threshold = if k == 0 { 0.0 } else { k as f64 * alpha / m as f64 };
    Ok(BhResult {
        rejected,
        k,
        threshold,
    })
}

/// Labels copied into the report metadata.
#[derive(Debug, Clone, Default)]
pub struct ReportLabels {
    pub participant_id: String,
    pub model_tag: String,
    pub scramble_tag: String,
}

/// Per-voxel one-sided t-tests over fold correlations, BH-corrected across voxels.
///
/// Voxels with fewer than two defined fold correlations are excluded from testing and
/// counted in the metadata.
pub fn voxel_significance(
    correlations: &FoldCorrelations,
    alpha: f64,
    labels: &ReportLabels,
) -> Result<AlignmentReport> {
    if correlations.folds.len() < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: correlations.folds.len(),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")));
    }

    let mut voxels = Vec::with_capacity(correlations.voxel_ids.len());
    let mut tested = Vec::new();
    let mut p_values = Vec::new();
    for (i, (id, row)) in correlations
        .voxel_ids
        .iter()
        .zip(&correlations.values)
        .enumerate()
    {
        let defined: Vec<f64> = row.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let correlation =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let p_value = if defined.len() >= 2 {
            let p = one_sample_t_greater(&defined)?.p_value;
            tested.push(i);
            p_values.push(p);
            Some(p)
        } else {
            None
        };
        voxels.push(VoxelAlignment {
            voxel_id: id.clone(),
            fold_correlations: row.clone(),
            correlation,
            p_value,
            significant: false,
        });
    }

    let threshold = if p_values.is_empty() {
        0.0
    } else {
        let bh = benjamini_hochberg(&p_values, alpha)?;
        for (&i, &rej) in tested.iter().zip(&bh.rejected) {
            voxels[i].significant = rej;
        }
        bh.threshold
    };

    let report = AlignmentReport {
        metadata: ReportMetadata {
            participant_id: labels.participant_id.clone(),
            model_tag: labels.model_tag.clone(),
            scramble_tag: labels.scramble_tag.clone(),
            folds: correlations.folds.clone(),
            alpha,
            bh_threshold: threshold,
            alternative: "greater".into(),
            tested_voxels: tested.len(),
            excluded_voxels: voxels.len() - tested.len(),
        },
        voxels,
    };
    debug_assert!(report.validate().is_ok());
    Ok(report)
}
