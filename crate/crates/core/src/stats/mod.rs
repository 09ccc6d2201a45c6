//! Voxelwise alignment statistics, FDR control and ROI contrasts.

mod contrast;
mod significance;

pub use contrast::{
    cross_perturbation_contrast, roi_mean_correlation, roi_percent_change,
    roi_percent_change_with_reference, ContrastResult, CrossContrast, RoiContrast, RoiMeanRow,
    VoxelSelection, MIN_BASELINE_MAGNITUDE,
};
pub(crate) use contrast::{condition_label, fmt_opt};
pub use significance::{
    benjamini_hochberg, one_sample_t_greater, voxel_significance, BhResult, FoldCorrelations,
    ReportLabels, TTest,
};

use crate::error::{Error, Result};

/// Sample Pearson correlation, `None` when either input has zero variance.
///
/// Uses streaming co-moment updates, so it never forms raw power sums.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "pearson inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    pearson_pairs(x.iter().copied().zip(y.iter().copied()))
}

pub fn pearson_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Option<f64>> {
    let mut n = 0.0f64;
    let (mut mx, mut my) = (0.0f64, 0.0f64);
    let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in pairs {
        n += 1.0;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if n < 2.0 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: n as usize,
        });
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Ok(None);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.is_finite().then(|| r.clamp(-1.0, 1.0)))
}

/// Mean and standard error of the mean (sample standard deviation over `sqrt(n)`).
///
/// The SEM of a single value is 0.
pub fn mean_sem(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook two-pass formula.
    fn pearson_two_pass(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut dx2 = 0.0;
        let mut dy2 = 0.0;
        for (a, b) in x.iter().zip(y) {
            num += (a - mx) * (b - my);
            dx2 += (a - mx) * (a - mx);
            dy2 += (b - my) * (b - my);
        }
        num / (dx2 * dy2).sqrt()
    }

    #[test]
    fn identity_and_antiidentity() {
        let x = [1.0, 3.0, 2.0, 5.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_is_undefined_and_short_input_errors() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn matches_two_pass_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random::<f64>()).collect();
            let got = pearson(&x, &y).unwrap().unwrap();
            assert!((got - pearson_two_pass(&x, &y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn mean_sem_hand_values() {
        assert_eq!(mean_sem(&[]), None);
        assert_eq!(mean_sem(&[4.0]), Some((4.0, 0.0)));
        // sd of {1,2,3} is 1
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn invariant_to_positive_affine_maps(
            x in prop::collection::vec(-10.0f64..10.0, 3..40),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
            let mapped: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            match (pearson(&x, &y).unwrap(), pearson(&mapped, &y).unwrap()) {
                (Some(r1), Some(r2)) => prop_assert!((r1 - r2).abs() < 1e-9),
                (None, None) => {}
                other => prop_assert!(false, "definedness changed: {:?}", other),
            }
        }
    }
}
