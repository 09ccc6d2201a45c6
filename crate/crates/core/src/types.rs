//! Shared domain types and their on-disk (EKC1) encodings.
//!
//! Every constructor and loader validates the type's invariants; invalid inputs are
//! rejected, never repaired.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{read_container, write_container, Container, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    /// Presentation onset relative to the start of the word's run.
    pub onset_s: f64,
    pub run_id: usize,
}

/// Ordered stimulus words with onsets and run structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusTimeline {
    words: Vec<Word>,
    tr_duration_s: f64,
    run_tr_counts: Vec<usize>,
}

impl StimulusTimeline {
    pub fn new(words: Vec<Word>, tr_duration_s: f64, run_tr_counts: Vec<usize>) -> Result<Self> {
        let what = "timeline";
        if words.is_empty() {
            return Err(Error::invalid(what, "no words"));
        }
        if !(tr_duration_s > 0.0 && tr_duration_s.is_finite()) {
            return Err(Error::invalid(what, format!("tr_duration_s = {tr_duration_s}")));
        }
        if run_tr_counts.is_empty() {
            return Err(Error::invalid(what, "no runs"));
        }
        let mut prev: Option<&Word> = None;
        for (i, w) in words.iter().enumerate() {
            let Some(&trs) = run_tr_counts.get(w.run_id) else {
                return Err(Error::invalid(
                    what,
                    format!("word {i} has run_id {} but only {} runs", w.run_id, run_tr_counts.len()),
                ));
            };
            let span = trs as f64 * tr_duration_s;
            if !(w.onset_s >= 0.0 && w.onset_s < span) {
                return Err(Error::invalid(
                    what,
                    format!("word {i} onset {} outside run {} span [0, {span})", w.onset_s, w.run_id),
                ));
            }
            match prev {
                None if w.run_id != 0 => {
                    return Err(Error::invalid(what, "first word must belong to run 0"));
                }
                Some(p) if w.run_id == p.run_id && w.onset_s <= p.onset_s => {
                    return Err(Error::invalid(
                        what,
                        format!("onsets not strictly increasing at word {i}"),
                    ));
                }
                Some(p) if w.run_id != p.run_id && w.run_id != p.run_id + 1 => {
                    return Err(Error::invalid(
                        what,
                        format!("run ids not contiguous at word {i}: {} -> {}", p.run_id, w.run_id),
                    ));
                }
                _ => {}
            }
            prev = Some(w);
        }
        let last_run = words.last().unwrap().run_id;
        if last_run + 1 != run_tr_counts.len() {
            return Err(Error::invalid(
                what,
                format!("{} runs declared but words cover only {}", run_tr_counts.len(), last_run + 1),
            ));
        }
        Ok(Self {
            words,
            tr_duration_s,
            run_tr_counts,
        })
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn tr_duration_s(&self) -> f64 {
        self.tr_duration_s
    }

    pub fn run_tr_counts(&self) -> &[usize] {
        &self.run_tr_counts
    }

    pub fn run_count(&self) -> usize {
        self.run_tr_counts.len()
    }

    pub fn total_trs(&self) -> usize {
        self.run_tr_counts.iter().sum()
    }

    /// Global row index of the first TR of each run.
    pub fn run_tr_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.run_tr_counts
            .iter()
            .map(|&n| {
                let start = acc;
                acc += n;
                start
            })
            .collect()
    }

    /// Word index range of each run.
    pub fn run_word_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = vec![0..0; self.run_count()];
        let mut start = 0;
        for i in 1..=self.words.len() {
            if i == self.words.len() || self.words[i].run_id != self.words[start].run_id {
                ranges[self.words[start].run_id] = start..i;
                start = i;
            }
        }
        ranges
    }

    pub fn texts(&self) -> Vec<&str> {
        self.words.iter().map(|w| w.text.as_str()).collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let n = self.words.len();
        c.insert(
            "onset_s",
            Tensor::f64(vec![n], self.words.iter().map(|w| w.onset_s).collect()).unwrap(),
        )
        .unwrap();
        c.insert(
            "run_id",
            Tensor::i64(vec![n], self.words.iter().map(|w| w.run_id as i64).collect()).unwrap(),
        )
        .unwrap();
        c.insert(
            "run_tr_counts",
            Tensor::i64(
                vec![self.run_tr_counts.len()],
                self.run_tr_counts.iter().map(|&x| x as i64).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        c.insert("tr_duration_s", Tensor::f64(vec![1], vec![self.tr_duration_s]).unwrap())
            .unwrap();
        c.set_meta("kind", "timeline");
        c.set_meta("words", json!(self.texts()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        expect_kind(c, "timeline")?;
        let (_, onsets) = c.f64_tensor("onset_s")?;
        let (_, runs) = c.i64_tensor("run_id")?;
        let (_, counts) = c.i64_tensor("run_tr_counts")?;
        let (_, tr) = c.f64_tensor("tr_duration_s")?;
        let texts: Vec<String> = meta_as(c, "words")?;
        if texts.len() != onsets.len() || runs.len() != onsets.len() {
            return Err(Error::invalid("timeline", "word, onset and run arrays differ in length"));
        }
        let &[tr] = tr else {
            return Err(Error::invalid("timeline", "tr_duration_s must hold one value"));
        };
        let words = texts
            .into_iter()
            .zip(onsets)
            .zip(runs)
            .map(|((text, &onset_s), &run)| {
                Ok(Word {
                    text,
                    onset_s,
                    run_id: to_index(run, "timeline")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let counts = counts
            .iter()
            .map(|&n| to_index(n, "timeline"))
            .collect::<Result<Vec<_>>>()?;
        Self::new(words, tr, counts)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

/// Per-word embeddings and next-word log-probabilities for one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTrack {
    pub model_tag: String,
    pub scramble_tag: String,
    pub layer: i64,
    pub context_window: usize,
    embeddings: Array2<f32>,
    log_probs: Vec<Option<f64>>,
}

impl EmbeddingTrack {
    pub fn new(
        model_tag: impl Into<String>,
        scramble_tag: impl Into<String>,
        layer: i64,
        context_window: usize,
        embeddings: Array2<f32>,
        log_probs: Vec<Option<f64>>,
    ) -> Result<Self> {
        let what = "embedding track";
        let (n, d) = embeddings.dim();
        if d == 0 || n == 0 {
            return Err(Error::invalid(what, format!("empty embedding matrix {n}x{d}")));
        }
        if log_probs.len() != n {
            return Err(Error::invalid(
                what,
                format!("{} log-probs for {n} embedding rows", log_probs.len()),
            ));
        }
        if context_window == 0 {
            return Err(Error::invalid(what, "context_window must be positive"));
        }
        if let Some(i) = log_probs
            .iter()
            .position(|lp| lp.is_some_and(|v| v.is_nan() || v > 0.0))
        {
            return Err(Error::invalid(
                what,
                format!("log-prob at word {i} is {:?}; must be <= 0", log_probs[i]),
            ));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(what, "non-finite embedding value"));
        }
        Ok(Self {
            model_tag: model_tag.into(),
            scramble_tag: scramble_tag.into(),
            layer,
            context_window,
            embeddings,
            log_probs,
        })
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn log_probs(&self) -> &[Option<f64>] {
        &self.log_probs
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_aligned(&self, timeline: &StimulusTimeline) -> Result<()> {
        if self.len() != timeline.len() {
            return Err(Error::Dimension(format!(
                "track has {} words, timeline has {}",
                self.len(),
                timeline.len()
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let (n, d) = self.embeddings.dim();
        c.insert(
            "embeddings",
            Tensor::f32(vec![n, d], self.embeddings.iter().copied().collect()).unwrap(),
        )
        .unwrap();
        c.insert(
            "log_probs",
            Tensor::f64(vec![n], self.log_probs.iter().map(|lp| lp.unwrap_or(0.0)).collect())
                .unwrap(),
        )
        .unwrap();
        c.insert(
            "log_prob_mask",
            Tensor::u8(vec![n], self.log_probs.iter().map(|lp| lp.is_some() as u8).collect())
                .unwrap(),
        )
        .unwrap();
        c.set_meta("kind", "embedding_track");
        c.set_meta("model_tag", self.model_tag.as_str());
        c.set_meta("scramble_tag", self.scramble_tag.as_str());
        c.set_meta("layer", self.layer);
        c.set_meta("context_window", self.context_window);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        expect_kind(c, "embedding_track")?;
        let (shape, emb) = c.f32_tensor("embeddings")?;
        let &[n, d] = shape else {
            return Err(Error::invalid("embedding track", "embeddings must be 2-D"));
        };
        let (_, lp) = c.f64_tensor("log_probs")?;
        let (_, mask) = c.u8_tensor("log_prob_mask")?;
        if lp.len() != n || mask.len() != n {
            return Err(Error::invalid("embedding track", "log-prob arrays do not match rows"));
        }
        let log_probs = lp
            .iter()
            .zip(mask)
            .map(|(&v, &m)| match m {
                0 => Ok(None),
                1 => Ok(Some(v)),
                other => Err(Error::invalid("embedding track", format!("mask value {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = Array2::from_shape_vec((n, d), emb.to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(
            meta_as::<String>(c, "model_tag")?,
            meta_as::<String>(c, "scramble_tag")?,
            meta_as(c, "layer")?,
            meta_as(c, "context_window")?,
            embeddings,
            log_probs,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

/// TR-by-voxel recording for one participant and run.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldRun {
    pub participant_id: String,
    pub run_id: usize,
    data: Array2<f32>,
    voxel_ids: Vec<String>,
}

impl BoldRun {
    pub fn new(
        participant_id: impl Into<String>,
        run_id: usize,
        data: Array2<f32>,
        voxel_ids: Vec<String>,
    ) -> Result<Self> {
        let what = "bold run";
        if data.ncols() != voxel_ids.len() {
            return Err(Error::invalid(
                what,
                format!("{} columns but {} voxel ids", data.ncols(), voxel_ids.len()),
            ));
        }
        if voxel_ids.is_empty() {
            return Err(Error::invalid(what, "no voxels"));
        }
        let mut seen = HashSet::with_capacity(voxel_ids.len());
        if let Some(dup) = voxel_ids.iter().find(|v| !seen.insert(v.as_str())) {
            return Err(Error::invalid(what, format!("duplicate voxel id `{dup}`")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(what, "non-finite sample"));
        }
        Ok(Self {
            participant_id: participant_id.into(),
            run_id,
            data,
            voxel_ids,
        })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn voxel_ids(&self) -> &[String] {
        &self.voxel_ids
    }

    pub fn trs(&self) -> usize {
        self.data.nrows()
    }

    pub fn voxels(&self) -> usize {
        self.data.ncols()
    }

    pub fn check_aligned(&self, timeline: &StimulusTimeline) -> Result<()> {
        let Some(&expected) = timeline.run_tr_counts().get(self.run_id) else {
            return Err(Error::invalid(
                "bold run",
                format!("run {} does not exist in the timeline", self.run_id),
            ));
        };
        if expected != self.trs() {
            return Err(Error::Dimension(format!(
                "participant {} run {} has {} TRs, timeline expects {expected}",
                self.participant_id,
                self.run_id,
                self.trs()
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let (t, v) = self.data.dim();
        c.insert(
            "data",
            Tensor::f32(vec![t, v], self.data.iter().copied().collect()).unwrap(),
        )
        .unwrap();
        c.set_meta("kind", "bold_run");
        c.set_meta("participant_id", self.participant_id.as_str());
        c.set_meta("run_id", self.run_id);
        c.set_meta("voxel_ids", json!(self.voxel_ids));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        expect_kind(c, "bold_run")?;
        let (shape, data) = c.f32_tensor("data")?;
        let &[t, v] = shape else {
            return Err(Error::invalid("bold run", "data must be 2-D"));
        };
        let data = Array2::from_shape_vec((t, v), data.to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(
            meta_as::<String>(c, "participant_id")?,
            meta_as(c, "run_id")?,
            data,
            meta_as(c, "voxel_ids")?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

/// All runs of one participant, keyed by run id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantBold {
    participant_id: String,
    runs: BTreeMap<usize, BoldRun>,
}

impl ParticipantBold {
    pub fn new(runs: Vec<BoldRun>) -> Result<Self> {
        let what = "participant recordings";
        let Some(first) = runs.first() else {
            return Err(Error::invalid(what, "no runs"));
        };
        let participant_id = first.participant_id.clone();
        let voxel_ids = first.voxel_ids.clone();
        let mut map = BTreeMap::new();
        for run in runs {
            if run.participant_id != participant_id {
                return Err(Error::invalid(
                    what,
                    format!("mixed participants `{participant_id}` and `{}`", run.participant_id),
                ));
            }
            if run.voxel_ids != voxel_ids {
                return Err(Error::invalid(
                    what,
                    format!("run {} voxel ids differ from the first run", run.run_id),
                ));
            }
            let id = run.run_id;
            if map.insert(id, run).is_some() {
                return Err(Error::invalid(what, format!("run {id} given twice")));
            }
        }
        Ok(Self {
            participant_id,
            runs: map,
        })
    }

    pub fn participant_id(&self) -> &str {
        &self.participant_id
    }

    pub fn run(&self, run_id: usize) -> Option<&BoldRun> {
        self.runs.get(&run_id)
    }

    pub fn runs(&self) -> impl Iterator<Item = &BoldRun> {
        self.runs.values()
    }

    pub fn voxel_ids(&self) -> &[String] {
        self.runs.values().next().unwrap().voxel_ids()
    }

    pub fn voxels(&self) -> usize {
        self.voxel_ids().len()
    }

    pub fn check_aligned(&self, timeline: &StimulusTimeline) -> Result<()> {
        for run in self.runs.values() {
            run.check_aligned(timeline)?;
        }
        for r in 0..timeline.run_count() {
            if !self.runs.contains_key(&r) {
                return Err(Error::invalid(
                    "participant recordings",
                    format!("participant {} is missing run {r}", self.participant_id),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    pub name: String,
    pub voxel_ids: BTreeSet<String>,
}

/// Validates a mask set against a participant's voxel universe.
pub fn validate_masks(masks: &[RoiMask], voxel_ids: &[String]) -> Result<()> {
    let universe: HashSet<&str> = voxel_ids.iter().map(String::as_str).collect();
    let mut names = HashSet::new();
    for m in masks {
        if !names.insert(m.name.as_str()) {
            return Err(Error::invalid("roi masks", format!("duplicate ROI name `{}`", m.name)));
        }
        if let Some(v) = m.voxel_ids.iter().find(|v| !universe.contains(v.as_str())) {
            return Err(Error::invalid(
                "roi masks",
                format!("ROI `{}` references unknown voxel `{v}`", m.name),
            ));
        }
    }
    Ok(())
}

pub fn load_masks(path: impl AsRef<Path>) -> Result<Vec<RoiMask>> {
    read_json(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyperparameters {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_tag: String,
    pub scramble_tag: String,
    pub seed: u64,
}

/// Linear head for one (participant, heldout run) fold.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingModel {
    pub participant_id: String,
    pub heldout_run: usize,
    pub lags: Vec<usize>,
    weights: Array2<f32>,
    bias: Vec<f32>,
    pub hyperparameters: ModelHyperparameters,
    pub provenance: Provenance,
}

impl EncodingModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        participant_id: impl Into<String>,
        heldout_run: usize,
        lags: Vec<usize>,
        weights: Array2<f32>,
        bias: Vec<f32>,
        hyperparameters: ModelHyperparameters,
        provenance: Provenance,
    ) -> Result<Self> {
        let what = "encoding model";
        let (f, v) = weights.dim();
        if lags.is_empty() || f % lags.len() != 0 || f == 0 {
            return Err(Error::invalid(
                what,
                format!("{f} features is not a positive multiple of {} lags", lags.len()),
            ));
        }
        if bias.len() != v {
            return Err(Error::invalid(what, format!("bias has {} entries for {v} voxels", bias.len())));
        }
        if weights.iter().chain(bias.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid(what, "non-finite parameter"));
        }
        Ok(Self {
            participant_id: participant_id.into(),
            heldout_run,
            lags,
            weights,
            bias,
            hyperparameters,
            provenance,
        })
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn voxels(&self) -> usize {
        self.weights.ncols()
    }

    /// Embedding dimension the model was trained on.
    pub fn embedding_dim(&self) -> usize {
        self.features() / self.lags.len()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let (f, v) = self.weights.dim();
        c.insert(
            "weights",
            Tensor::f32(vec![f, v], self.weights.iter().copied().collect()).unwrap(),
        )
        .unwrap();
        c.insert("bias", Tensor::f32(vec![v], self.bias.clone()).unwrap())
            .unwrap();
        c.set_meta("kind", "encoding_model");
        c.set_meta("participant_id", self.participant_id.as_str());
        c.set_meta("heldout_run", self.heldout_run);
        c.set_meta("lags", json!(self.lags));
        c.set_meta("hyperparameters", serde_json::to_value(&self.hyperparameters).unwrap());
        c.set_meta("provenance", serde_json::to_value(&self.provenance).unwrap());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        expect_kind(c, "encoding_model")?;
        let (shape, w) = c.f32_tensor("weights")?;
        let &[f, v] = shape else {
            return Err(Error::invalid("encoding model", "weights must be 2-D"));
        };
        let (_, bias) = c.f32_tensor("bias")?;
        let weights = Array2::from_shape_vec((f, v), w.to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(
            meta_as::<String>(c, "participant_id")?,
            meta_as(c, "heldout_run")?,
            meta_as(c, "lags")?,
            weights,
            bias.to_vec(),
            meta_as(c, "hyperparameters")?,
            meta_as(c, "provenance")?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelAlignment {
    pub voxel_id: String,
    /// Heldout correlation per fold, `None` where undefined (constant prediction or recording).
    pub fold_correlations: Vec<Option<f64>>,
    /// Mean of the defined fold correlations.
    pub correlation: Option<f64>,
    /// `None` when the voxel was excluded from testing (fewer than two defined folds).
    pub p_value: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub participant_id: String,
    pub model_tag: String,
    pub scramble_tag: String,
    pub folds: Vec<usize>,
    pub alpha: f64,
    /// Largest p-value cutoff the step-up procedure accepted; 0 when nothing was rejected.
    pub bh_threshold: f64,
    pub alternative: String,
    pub tested_voxels: usize,
    pub excluded_voxels: usize,
}

/// Voxelwise heldout alignment with significance marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub metadata: ReportMetadata,
    pub voxels: Vec<VoxelAlignment>,
}

impl AlignmentReport {
    pub fn validate(&self) -> Result<()> {
        let what = "alignment report";
        for v in &self.voxels {
            if let Some(c) = v.correlation {
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&c) {
                    return Err(Error::invalid(what, format!("voxel {} correlation {c}", v.voxel_id)));
                }
            }
            if let Some(p) = v.p_value {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid(what, format!("voxel {} p-value {p}", v.voxel_id)));
                }
            }
            if v.significant && !v.p_value.is_some_and(|p| p <= self.metadata.bh_threshold) {
                return Err(Error::invalid(
                    what,
                    format!("voxel {} significant above the BH threshold", v.voxel_id),
                ));
            }
        }
        Ok(())
    }

    pub fn significant_count(&self) -> usize {
        self.voxels.iter().filter(|v| v.significant).count()
    }

    pub fn by_voxel(&self) -> BTreeMap<&str, &VoxelAlignment> {
        self.voxels.iter().map(|v| (v.voxel_id.as_str(), v)).collect()
    }

    pub fn mean_correlation(&self) -> Option<f64> {
        let vals: Vec<f64> = self.voxels.iter().filter_map(|v| v.correlation).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let report: Self = read_json(path)?;
        report.validate()?;
        Ok(report)
    }
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    match c.meta("kind").and_then(Value::as_str) {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::invalid(
            "container",
            format!("expected kind `{kind}`, found {other:?}"),
        )),
    }
}

fn meta_as<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    let v = c
        .meta(key)
        .ok_or_else(|| Error::invalid("container", format!("missing metadata `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::invalid("container", format!("metadata `{key}`: {e}")))
}

fn to_index(v: i64, what: &'static str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::invalid(what, format!("negative index {v}")))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = crate::container::tmp_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
