//! Word embeddings to TR-level lagged design matrices.

use std::path::Path;

use ndarray::{s, Array2};
use serde_json::json;

use crate::container::{read_container, write_container, Container, Tensor};
use crate::error::{Error, Result};
use crate::types::{EmbeddingTrack, StimulusTimeline};

pub const DEFAULT_LAGS: [usize; 5] = [1, 2, 3, 4, 5];

/// Word embeddings averaged onto the TR grid of every run, runs stacked in order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrEmbeddings {
    pub data: Array2<f32>,
    pub word_counts: Vec<usize>,
}

/// Averages the embeddings of all words whose onset falls in `[t * TR, (t + 1) * TR)`.
///
/// TRs without words (breaks between runs) get a zero row and a count of 0.
pub fn average_words_to_trs(
    track: &EmbeddingTrack,
    timeline: &StimulusTimeline,
) -> Result<TrEmbeddings> {
    track.check_aligned(timeline)?;
    let d = track.dim();
    let offsets = timeline.run_tr_offsets();
    let total = timeline.total_trs();
    let mut sums = Array2::<f64>::zeros((total, d));
    let mut counts = vec![0usize; total];
    let tr = timeline.tr_duration_s();

    for (word, emb) in timeline.words().iter().zip(track.embeddings().rows()) {
        let local = (word.onset_s / tr).floor() as usize;
        let local = local.min(timeline.run_tr_counts()[word.run_id] - 1);
        let row = offsets[word.run_id] + local;
        counts[row] += 1;
        sums.row_mut(row)
            .iter_mut()
            .zip(emb)
            .for_each(|(acc, &x)| *acc += f64::from(x));
    }

    let mut data = Array2::<f32>::zeros((total, d));
    for (row, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = n as f64;
            data.row_mut(row)
                .iter_mut()
                .zip(sums.row(row))
                .for_each(|(out, &s)| *out = (s / inv) as f32);
        }
    }
    Ok(TrEmbeddings {
        data,
        word_counts: counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowInfo {
    pub run_id: usize,
    pub tr_index: usize,
    pub valid: bool,
}

/// Lagged TR features; row order matches the stacked BOLD TR order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub model_tag: String,
    pub scramble_tag: String,
    x: Array2<f32>,
    rows: Vec<RowInfo>,
    lags: Vec<usize>,
    embedding_dim: usize,
}

impl DesignMatrix {
    pub fn x(&self) -> &Array2<f32> {
        &self.x
    }

    pub fn rows(&self) -> &[RowInfo] {
        &self.rows
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn features(&self) -> usize {
        self.x.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.rows.iter().filter(|r| r.valid).count()
    }

    /// Indices of valid rows of `run_id`, in TR order.
    pub fn valid_rows_of_run(&self, run_id: usize) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.valid && r.run_id == run_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let (n, f) = self.x.dim();
        c.insert("x", Tensor::f32(vec![n, f], self.x.iter().copied().collect()).unwrap())
            .unwrap();
        c.insert(
            "row_run",
            Tensor::i64(vec![n], self.rows.iter().map(|r| r.run_id as i64).collect()).unwrap(),
        )
        .unwrap();
        c.insert(
            "row_tr",
            Tensor::i64(vec![n], self.rows.iter().map(|r| r.tr_index as i64).collect()).unwrap(),
        )
        .unwrap();
        c.insert(
            "row_valid",
            Tensor::u8(vec![n], self.rows.iter().map(|r| r.valid as u8).collect()).unwrap(),
        )
        .unwrap();
        c.set_meta("kind", "design_matrix");
        c.set_meta("lags", json!(self.lags));
        c.set_meta("embedding_dim", self.embedding_dim);
        c.set_meta("invalid_rows", "masked");
        c.set_meta("model_tag", self.model_tag.as_str());
        c.set_meta("scramble_tag", self.scramble_tag.as_str());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let what = "design matrix";
        if c.meta("kind").and_then(|v| v.as_str()) != Some("design_matrix") {
            return Err(Error::invalid(what, "container is not a design matrix"));
        }
        let (shape, x) = c.f32_tensor("x")?;
        let &[n, f] = shape else {
            return Err(Error::invalid(what, "x must be 2-D"));
        };
        let (_, runs) = c.i64_tensor("row_run")?;
        let (_, trs) = c.i64_tensor("row_tr")?;
        let (_, valid) = c.u8_tensor("row_valid")?;
        if runs.len() != n || trs.len() != n || valid.len() != n {
            return Err(Error::invalid(what, "row annotations do not match x"));
        }
        let lags: Vec<usize> = c
            .meta("lags")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::invalid(what, "missing lags"))?;
        let embedding_dim = c
            .meta("embedding_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid(what, "missing embedding_dim"))? as usize;
        validate_lags(&lags)?;
        if lags.len() * embedding_dim != f {
            return Err(Error::invalid(what, "feature count is not lags x embedding_dim"));
        }
        let rows = runs
            .iter()
            .zip(trs)
            .zip(valid)
            .map(|((&r, &t), &v)| RowInfo {
                run_id: r as usize,
                tr_index: t as usize,
                valid: v != 0,
            })
            .collect();
        let tag = |key: &str| {
            c.meta(key)
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string()
        };
        Ok(Self {
            model_tag: tag("model_tag"),
            scramble_tag: tag("scramble_tag"),
            x: Array2::from_shape_vec((n, f), x.to_vec()).map_err(|e| Error::Dimension(e.to_string()))?,
            rows,
            lags,
            embedding_dim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

pub fn validate_lags(lags: &[usize]) -> Result<()> {
    if lags.is_empty() {
        return Err(Error::invalid("lags", "empty lag set"));
    }
    if lags[0] < 1 {
        return Err(Error::invalid("lags", "lags must be >= 1"));
    }
    if lags.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("lags", format!("{lags:?} not strictly increasing")));
    }
    Ok(())
}

/// Concatenates the TR embeddings `lags[0]`, ..., `lags[k-1]` TRs before each target TR.
///
/// Rows whose history would reach before the start of their run are marked invalid and left
/// as zeros.
pub fn build_lagged_design(
    tr_embeddings: &Array2<f32>,
    timeline: &StimulusTimeline,
    lags: &[usize],
) -> Result<DesignMatrix> {
    validate_lags(lags)?;
    let total = timeline.total_trs();
    if tr_embeddings.nrows() != total {
        return Err(Error::Dimension(format!(
            "{} TR rows for a timeline with {total} TRs",
            tr_embeddings.nrows()
        )));
    }
    let max_lag = *lags.last().unwrap();
    let shortest = timeline.run_tr_counts().iter().copied().min().unwrap();
    if max_lag >= shortest {
        return Err(Error::invalid(
            "lags",
            format!("lag {max_lag} leaves no valid row in a {shortest}-TR run"),
        ));
    }

    let d = tr_embeddings.ncols();
    let mut x = Array2::<f32>::zeros((total, lags.len() * d));
    let mut rows = Vec::with_capacity(total);
    for (run_id, (&start, &count)) in timeline
        .run_tr_offsets()
        .iter()
        .zip(timeline.run_tr_counts())
        .enumerate()
    {
        for t in 0..count {
            let valid = t >= max_lag;
            if valid {
                let row = start + t;
                for (k, &lag) in lags.iter().enumerate() {
                    x.slice_mut(s![row, k * d..(k + 1) * d])
                        .assign(&tr_embeddings.row(row - lag));
                }
            }
            rows.push(RowInfo {
                run_id,
                tr_index: t,
                valid,
            });
        }
    }
    Ok(DesignMatrix {
        model_tag: String::new(),
        scramble_tag: String::new(),
        x,
        rows,
        lags: lags.to_vec(),
        embedding_dim: d,
    })
}

/// Convenience wrapper: average to TRs, then lag.
pub fn featurize(
    track: &EmbeddingTrack,
    timeline: &StimulusTimeline,
    lags: &[usize],
) -> Result<DesignMatrix> {
    let trs = average_words_to_trs(track, timeline)?;
    let mut design = build_lagged_design(&trs.data, timeline, lags)?;
    design.model_tag = track.model_tag.clone();
    design.scramble_tag = track.scramble_tag.clone();
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Word;
    use ndarray::{array, Array2};

    fn timeline(onsets: &[(f64, usize)], tr: f64, counts: Vec<usize>) -> StimulusTimeline {
        let words = onsets
            .iter()
            .enumerate()
            .map(|(i, &(o, r))| Word {
                text: format!("w{i}"),
                onset_s: o,
                run_id: r,
            })
            .collect();
        StimulusTimeline::new(words, tr, counts).unwrap()
    }

    fn track(emb: Array2<f32>) -> EmbeddingTrack {
        let n = emb.nrows();
        EmbeddingTrack::new("m", "none", 0, 20, emb, vec![None; n]).unwrap()
    }

    #[test]
    fn four_words_per_tr_at_half_second_spacing() {
        let onsets: Vec<(f64, usize)> = (0..8).map(|i| (i as f64 * 0.5, 0)).collect();
        let tl = timeline(&onsets, 2.0, vec![2]);
        let emb = Array2::from_shape_fn((8, 1), |(i, _)| i as f32);
        let out = average_words_to_trs(&track(emb), &tl).unwrap();
        assert_eq!(out.word_counts, vec![4, 4]);
        assert_eq!(out.data, array![[1.5f32], [5.5]]);
    }

    #[test]
    fn identical_words_average_to_themselves() {
        let onsets: Vec<(f64, usize)> = (0..4).map(|i| (i as f64 * 0.5, 0)).collect();
        let tl = timeline(&onsets, 2.0, vec![1]);
        let e = [0.25f32, -1.5, 3.0];
        let emb = Array2::from_shape_fn((4, 3), |(_, j)| e[j]);
        let out = average_words_to_trs(&track(emb), &tl).unwrap();
        assert_eq!(out.data.row(0).to_vec(), e.to_vec());
    }

    #[test]
    fn break_tr_is_zero_with_count_zero() {
        // onsets 0.0, 1.0 -> TR 0; 4.0, 5.5 -> TR 2; TR 1 is a break
        let tl = timeline(&[(0.0, 0), (1.0, 0), (4.0, 0), (5.5, 0), (0.0, 1)], 2.0, vec![3, 1]);
        let emb = array![[2.0f32, 0.0], [4.0, 2.0], [1.0, 1.0], [3.0, 5.0], [7.0, 7.0]];
        let out = average_words_to_trs(&track(emb), &tl).unwrap();
        assert_eq!(out.word_counts, vec![2, 0, 2, 1]);
        assert_eq!(
            out.data,
            array![[3.0f32, 1.0], [0.0, 0.0], [2.0, 3.0], [7.0, 7.0]]
        );
    }

    #[test]
    fn boundary_onset_goes_to_later_tr() {
        let tl = timeline(&[(1.5, 0), (2.0, 0)], 2.0, vec![2]);
        let out = average_words_to_trs(&track(array![[1.0f32], [9.0]]), &tl).unwrap();
        assert_eq!(out.word_counts, vec![1, 1]);
        assert_eq!(out.data, array![[1.0f32], [9.0]]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let tl = timeline(&[(0.0, 0)], 2.0, vec![1]);
        assert!(average_words_to_trs(&track(array![[1.0f32], [2.0]]), &tl).is_err());
    }

    #[test]
    fn toy_three_tr_run_has_one_valid_row() {
        let tl = timeline(&[(0.0, 0)], 2.0, vec![3]);
        let trs = array![[1.0f32, 10.0], [2.0, 20.0], [3.0, 30.0]];
        let dm = build_lagged_design(&trs, &tl, &[1, 2]).unwrap();
        assert_eq!(dm.valid_count(), 1);
        assert_eq!(dm.rows()[2], RowInfo { run_id: 0, tr_index: 2, valid: true });
        assert_eq!(dm.x().row(2).to_vec(), vec![2.0, 20.0, 1.0, 10.0]);
    }

    #[test]
    fn default_lags_with_768_dims() {
        let tl = timeline(&[(0.0, 0), (0.0, 1)], 2.0, vec![8, 7]);
        let trs = Array2::<f32>::ones((15, 768));
        let dm = build_lagged_design(&trs, &tl, &DEFAULT_LAGS).unwrap();
        assert_eq!(dm.features(), 3840);
        for r in dm.rows() {
            assert_eq!(r.valid, r.tr_index >= 5);
        }
        assert_eq!(dm.valid_count(), 3 + 2);
    }

    #[test]
    fn lag_validation() {
        let tl = timeline(&[(0.0, 0)], 2.0, vec![4]);
        let trs = Array2::<f32>::ones((4, 2));
        assert!(build_lagged_design(&trs, &tl, &[]).is_err());
        assert!(build_lagged_design(&trs, &tl, &[0, 1]).is_err());
        assert!(build_lagged_design(&trs, &tl, &[2, 1]).is_err());
        assert!(build_lagged_design(&trs, &tl, &[4]).is_err());
        assert!(build_lagged_design(&trs, &tl, &[3]).is_ok());
    }

    #[test]
    fn design_container_round_trip() {
        let tl = timeline(&[(0.0, 0)], 2.0, vec![4]);
        let trs = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f32);
        let dm = build_lagged_design(&trs, &tl, &[1, 2]).unwrap();
        assert_eq!(DesignMatrix::from_container(&dm.to_container()).unwrap(), dm);
    }
}
