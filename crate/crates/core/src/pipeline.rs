//! Manifest-driven pipeline: featurize, train, evaluate, statistics and reports.
//!
//! Every stage writes a stamp holding the hash of its inputs and parameters next to its
//! outputs; a stage whose stamp matches and whose outputs exist is skipped.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{write_container, Container, Tensor};
use crate::encoder::{heldout_correlations, random_search, FoldSpec, SearchSpace, DEFAULT_VALIDATION_FRACTION};
use crate::error::{Error, Result};
use crate::featurize::{featurize, DesignMatrix, DEFAULT_LAGS};
use crate::lmtasks::perplexity;
use crate::report;
use crate::stats::{
    cross_perturbation_contrast, roi_percent_change, voxel_significance, ContrastResult, FoldCorrelations,
    ReportLabels, VoxelSelection,
};
use crate::synth::{GroundTruth, SynthFiles, BASELINE, UNSCRAMBLED};
use crate::types::{
    load_masks, read_json, validate_masks, write_atomic, write_json, AlignmentReport, BoldRun,
    EmbeddingTrack, EncodingModel, ParticipantBold, RoiMask, StimulusTimeline,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantEntry {
    pub id: String,
    /// One BOLD container per run, in run order.
    pub runs: Vec<PathBuf>,
    /// JSON list of ROI masks.
    pub masks: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub model_tag: String,
    pub scramble_tag: String,
    pub track: PathBuf,
}

impl Condition {
    pub fn dir_name(&self) -> String {
        format!("{}__{}", self.model_tag, self.scramble_tag)
    }
}

fn default_lags() -> Vec<usize> {
    DEFAULT_LAGS.to_vec()
}
fn default_alpha() -> f64 {
    0.05
}
fn default_validation_fraction() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}
fn default_output() -> PathBuf {
    "out".into()
}
fn default_baseline() -> String {
    BASELINE.into()
}
fn default_unscrambled() -> String {
    UNSCRAMBLED.into()
}

/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub timeline: PathBuf,
    pub participants: Vec<ParticipantEntry>,
    pub conditions: Vec<Condition>,
    #[serde(default = "default_lags")]
    pub lags: Vec<usize>,
    #[serde(default)]
    pub search: SearchSpace,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Model tag that other models are contrasted against.
    #[serde(default = "default_baseline")]
    pub baseline_tag: String,
    #[serde(default = "default_unscrambled")]
    pub unscrambled_tag: String,
    #[serde(default = "default_selection")]
    pub voxel_selection: VoxelSelection,
    /// Ground-truth container of a synthetic dataset; adds noise ceilings to the summary.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

fn default_selection() -> VoxelSelection {
    VoxelSelection::SignificantByReference
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let manifest: Self = read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    /// Manifest for a synthetic dataset written by [`crate::synth::SynthData::write`], one
    /// condition per track.
    pub fn for_synth(files: &SynthFiles, lags: Vec<usize>, search: SearchSpace, seed: u64) -> Self {
        Self {
            timeline: files.timeline.clone(),
            participants: files
                .bold
                .iter()
                .map(|(id, runs)| ParticipantEntry {
                    id: id.clone(),
                    runs: runs.clone(),
                    masks: Some(files.masks.clone()),
                })
                .collect(),
            conditions: files
                .tracks
                .iter()
                .map(|(m, s, p)| Condition {
                    model_tag: m.clone(),
                    scramble_tag: s.clone(),
                    track: p.clone(),
                })
                .collect(),
            lags,
            search,
            alpha: default_alpha(),
            seed,
            output_dir: default_output(),
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            baseline_tag: default_baseline(),
            unscrambled_tag: default_unscrambled(),
            voxel_selection: default_selection(),
            truth: Some(files.truth.clone()),
        }
    }

    /// Structural checks and existence of every referenced file.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let what = "manifest";
        if self.participants.is_empty() || self.conditions.is_empty() {
            return Err(Error::invalid(what, "needs at least one participant and one condition"));
        }
        let mut ids = HashSet::new();
        for p in &self.participants {
            if !ids.insert(&p.id) {
                return Err(Error::invalid(what, format!("duplicate participant `{}`", p.id)));
            }
            if p.runs.len() < 2 {
                return Err(Error::invalid(what, format!("participant `{}` needs at least two runs", p.id)));
            }
        }
        let mut tags = HashSet::new();
        for c in &self.conditions {
            if c.model_tag.is_empty() || c.scramble_tag.is_empty() || c.dir_name().contains(['/', '\\']) {
                return Err(Error::invalid(what, format!("bad condition tags `{}`", c.dir_name())));
            }
            if !tags.insert((&c.model_tag, &c.scramble_tag)) {
                return Err(Error::invalid(what, format!("duplicate condition `{}`", c.dir_name())));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(what, format!("alpha {} outside (0, 1)", self.alpha)));
        }
        crate::featurize::validate_lags(&self.lags)?;
        self.search.validate()?;
        let files = std::iter::once(&self.timeline)
            .chain(self.participants.iter().flat_map(|p| p.runs.iter().chain(&p.masks)))
            .chain(self.conditions.iter().map(|c| &c.track))
            .chain(&self.truth);
        for f in files {
            let full = base.join(f);
            if !full.is_file() {
                return Err(Error::invalid(what, format!("missing input file {}", full.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub model_tag: String,
    pub scramble_tag: String,
    pub perplexity: Option<f64>,
    /// Mean over participants of the mean voxel correlation.
    pub mean_correlation: Option<f64>,
    pub significant_voxels: usize,
    pub models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub executed_stages: usize,
    pub skipped_stages: usize,
    pub final_models: usize,
    pub conditions: Vec<ConditionSummary>,
    /// Mean analytic noise ceiling when the manifest names a ground truth.
    pub mean_noise_ceiling: Option<f64>,
    pub output_dir: PathBuf,
}

impl RunSummary {
    pub fn condition(&self, model_tag: &str, scramble_tag: &str) -> Option<&ConditionSummary> {
        self.conditions
            .iter()
            .find(|c| c.model_tag == model_tag && c.scramble_tag == scramble_tag)
    }
}

/// Machine-readable failure written to `<output>/error.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub validation: bool,
    pub message: String,
}

impl ErrorReport {
    pub fn from_error(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            validation: e.is_validation(),
            message: e.to_string(),
        }
    }
}

struct Hasher {
    cache: Mutex<BTreeMap<PathBuf, String>>,
}

impl Hasher {
    fn file(&self, path: &Path) -> Result<String> {
        if let Some(h) = self.cache.lock().unwrap().get(path) {
            return Ok(h.clone());
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let h = hex::encode(Sha256::digest(&bytes));
        self.cache.lock().unwrap().insert(path.to_path_buf(), h.clone());
        Ok(h)
    }
}

fn key_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn stamp_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!(".{stage}.stamp"))
}

fn is_fresh(dir: &Path, stage: &str, key: &str, outputs: &[PathBuf]) -> bool {
    std::fs::read_to_string(stamp_path(dir, stage)).is_ok_and(|s| s == key) && outputs.iter().all(|o| o.is_file())
}

fn write_stamp(dir: &Path, stage: &str, key: &str) -> Result<()> {
    write_atomic(&stamp_path(dir, stage), key.as_bytes())
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stage_err(stage: String) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e if e.is_validation() => e,
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            reason: other.to_string(),
        },
    }
}

/// Per-fold search seed; identical across conditions so contrasts are paired.
fn fold_seed(seed: u64, participant: &str, fold: usize) -> u64 {
    let k = key_of(&[&seed.to_string(), participant, &fold.to_string()]);
    u64::from_str_radix(&k[..16], 16).unwrap()
}

struct Counter {
    executed: Mutex<usize>,
    skipped: Mutex<usize>,
}

impl Counter {
    fn hit(&self, ran: bool) {
        *if ran { &self.executed } else { &self.skipped }.lock().unwrap() += 1;
    }
}

struct Ctx<'a> {
    m: &'a RunManifest,
    base: &'a Path,
    out: PathBuf,
    hasher: Hasher,
    counter: Counter,
}

impl Ctx<'_> {
    fn input(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn hash(&self, p: &Path) -> Result<String> {
        self.hasher.file(&self.input(p))
    }

    fn cond_dir(&self, c: &Condition) -> PathBuf {
        self.out.join(c.dir_name())
    }

    fn search_json(&self) -> String {
        serde_json::to_string(&self.m.search).unwrap()
    }
}

fn load_participant(ctx: &Ctx, p: &ParticipantEntry) -> Result<ParticipantBold> {
    let runs = p
        .runs
        .iter()
        .map(|r| BoldRun::load(ctx.input(r)))
        .collect::<Result<Vec<_>>>()?;
    let bold = ParticipantBold::new(runs)?;
    if bold.participant_id() != p.id {
        return Err(Error::invalid(
            "manifest",
            format!("runs of `{}` belong to `{}`", p.id, bold.participant_id()),
        ));
    }
    Ok(bold)
}

/// Featurize stage; returns its key.
fn stage_featurize(ctx: &Ctx, c: &Condition, timeline: &StimulusTimeline) -> Result<String> {
    let dir = ctx.cond_dir(c);
    let key = key_of(&[
        "featurize",
        &ctx.hash(&ctx.m.timeline)?,
        &ctx.hash(&c.track)?,
        &format!("{:?}", ctx.m.lags),
    ]);
    let outputs = [dir.join("design.ekc")];
    let ran = !is_fresh(&dir, "featurize", &key, &outputs);
    if ran {
        debug!("featurize {}", c.dir_name());
        mkdir(&dir)?;
        let track = EmbeddingTrack::load(ctx.input(&c.track))?;
        if track.model_tag != c.model_tag || track.scramble_tag != c.scramble_tag {
            return Err(Error::invalid(
                "manifest",
                format!(
                    "track {} is tagged {}__{}, manifest says {}",
                    c.track.display(),
                    track.model_tag,
                    track.scramble_tag,
                    c.dir_name()
                ),
            ));
        }
        featurize(&track, timeline, &ctx.m.lags)?.save(&outputs[0])?;
        write_stamp(&dir, "featurize", &key)?;
    }
    ctx.counter.hit(ran);
    Ok(key)
}

fn stage_train(
    ctx: &Ctx,
    c: &Condition,
    design_key: &str,
    p: &ParticipantEntry,
    fold: usize,
) -> Result<String> {
    let dir = ctx.cond_dir(c).join(&p.id).join(format!("fold{fold}"));
    let run_hashes = p.runs.iter().map(|r| ctx.hash(r)).collect::<Result<Vec<_>>>()?.join(",");
    let seed = fold_seed(ctx.m.seed, &p.id, fold);
    let key = key_of(&[
        "train",
        design_key,
        &run_hashes,
        &ctx.search_json(),
        &seed.to_string(),
        &fold.to_string(),
        &ctx.m.validation_fraction.to_string(),
    ]);
    let outputs = [dir.join("model.ekc"), dir.join("trials.json")];
    let ran = !is_fresh(&dir, "train", &key, &outputs);
    if ran {
        debug!("train {} {} fold {fold}", c.dir_name(), p.id);
        mkdir(&dir)?;
        let design = DesignMatrix::load(ctx.cond_dir(c).join("design.ekc"))?;
        let bold = load_participant(ctx, p)?;
        let spec = FoldSpec::new(&p.id, fold, p.runs.len(), ctx.m.validation_fraction)?;
        let outcome = match random_search(&design, &bold, &spec, &ctx.m.search, seed) {
            Err(Error::AllTrialsFailed { trials, log }) => {
                write_json(&outputs[1], &log)?;
                return Err(Error::Stage {
                    stage: format!("train {} {} fold{fold}", c.dir_name(), p.id),
                    reason: format!("all {trials} trials failed; log in {}", outputs[1].display()),
                });
            }
            other => other?,
        };
        outcome.model.save(&outputs[0])?;
        write_json(&outputs[1], &serde_json::json!({ "winner": outcome.winner, "trials": outcome.trials }))?;
        write_stamp(&dir, "train", &key)?;
    }
    ctx.counter.hit(ran);
    Ok(key)
}

fn stage_evaluate(
    ctx: &Ctx,
    c: &Condition,
    design_key: &str,
    p: &ParticipantEntry,
    model_keys: &[String],
) -> Result<String> {
    let dir = ctx.cond_dir(c).join(&p.id);
    let masks_hash = p.masks.as_ref().map(|m| ctx.hash(m)).transpose()?.unwrap_or_default();
    let key = key_of(&[
        "evaluate",
        design_key,
        &model_keys.join(","),
        &ctx.m.alpha.to_string(),
        &masks_hash,
    ]);
    let outputs = [dir.join("report.json"), dir.join("fold_correlations.ekc")];
    let ran = !is_fresh(&dir, "evaluate", &key, &outputs);
    if ran {
        debug!("evaluate {} {}", c.dir_name(), p.id);
        let design = DesignMatrix::load(ctx.cond_dir(c).join("design.ekc"))?;
        let bold = load_participant(ctx, p)?;
        let folds: Vec<usize> = (0..p.runs.len()).collect();
        let mut per_fold = Vec::with_capacity(folds.len());
        for &k in &folds {
            let model = EncodingModel::load(dir.join(format!("fold{k}")).join("model.ekc"))?;
            per_fold.push(heldout_correlations(&model, &design, &bold)?);
        }
        let v = bold.voxels();
        let values: Vec<Vec<Option<f64>>> =
            (0..v).map(|j| per_fold.iter().map(|f| f[j]).collect()).collect();
        let mut c_out = Container::new();
        let flat: Vec<f64> = values.iter().flatten().map(|x| x.unwrap_or(f64::NAN)).collect();
        c_out.insert("correlations", Tensor::f64(vec![v, folds.len()], flat)?)?;
        c_out.set_meta("kind", "fold_correlations");
        c_out.set_meta("participant_id", p.id.as_str());
        c_out.set_meta("model_tag", c.model_tag.as_str());
        c_out.set_meta("scramble_tag", c.scramble_tag.as_str());
        c_out.set_meta("voxel_ids", serde_json::json!(bold.voxel_ids()));
        write_container(&c_out, &outputs[1])?;
        let fc = FoldCorrelations::new(bold.voxel_ids().to_vec(), folds, values)?;
        let labels = ReportLabels {
            participant_id: p.id.clone(),
            model_tag: c.model_tag.clone(),
            scramble_tag: c.scramble_tag.clone(),
        };
        voxel_significance(&fc, ctx.m.alpha, &labels)?.save(&outputs[0])?;
        write_stamp(&dir, "evaluate", &key)?;
    }
    ctx.counter.hit(ran);
    Ok(key)
}

/// Contrasts computed from the conditions present.
struct ContrastPlan {
    /// `(label, a, b)`, percent change of `a` over `b` on voxels significant in `a`.
    pairs: Vec<(String, usize, usize)>,
    /// `(scramble_tag, baseline, baseline scrambled, tuned, tuned scrambled)`.
    cross: Vec<(String, usize, usize, usize, usize)>,
}

fn plan_contrasts(m: &RunManifest) -> ContrastPlan {
    let find = |model: &str, scr: &str| {
        m.conditions
            .iter()
            .position(|c| c.model_tag == model && c.scramble_tag == scr)
    };
    let mut pairs = Vec::new();
    let mut cross = Vec::new();
    for (i, c) in m.conditions.iter().enumerate() {
        // scrambling effect: intact vs scrambled, same model
        if c.scramble_tag != m.unscrambled_tag {
            if let Some(j) = find(&c.model_tag, &m.unscrambled_tag) {
                pairs.push((format!("scramble__{}__{}", c.model_tag, c.scramble_tag), j, i));
            }
        }
        // model effect: other model vs baseline, same scramble
        if c.model_tag != m.baseline_tag {
            if let Some(j) = find(&m.baseline_tag, &c.scramble_tag) {
                pairs.push((format!("model__{}__{}", c.model_tag, c.scramble_tag), i, j));
            }
            if c.scramble_tag != m.unscrambled_tag {
                let parts = (
                    find(&m.baseline_tag, &m.unscrambled_tag),
                    find(&m.baseline_tag, &c.scramble_tag),
                    find(&c.model_tag, &m.unscrambled_tag),
                );
                if let (Some(b), Some(bs), Some(t)) = parts {
                    cross.push((format!("{}__{}", c.model_tag, c.scramble_tag), b, bs, t, i));
                }
            }
        }
    }
    ContrastPlan { pairs, cross }
}

fn load_masks_by_participant(ctx: &Ctx, reports: &[AlignmentReport]) -> Result<BTreeMap<String, Vec<RoiMask>>> {
    let mut out = BTreeMap::new();
    for p in &ctx.m.participants {
        let masks = match &p.masks {
            Some(path) => load_masks(ctx.input(path))?,
            None => Vec::new(),
        };
        if let Some(r) = reports.iter().find(|r| r.metadata.participant_id == p.id) {
            let ids: Vec<String> = r.voxels.iter().map(|v| v.voxel_id.clone()).collect();
            validate_masks(&masks, &ids)?;
        }
        out.insert(p.id.clone(), masks);
    }
    Ok(out)
}

fn load_reports(ctx: &Ctx) -> Result<Vec<Vec<AlignmentReport>>> {
    ctx.m
        .conditions
        .iter()
        .map(|c| {
            ctx.m
                .participants
                .iter()
                .map(|p| AlignmentReport::load(ctx.cond_dir(c).join(&p.id).join("report.json")))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn stage_contrasts(ctx: &Ctx, eval_keys: &[String]) -> Result<(String, Vec<Vec<AlignmentReport>>)> {
    let dir = ctx.out.join("contrasts");
    let key = key_of(&["contrasts", &eval_keys.join(","), &ctx.m.voxel_selection.to_string()]);
    let reports = load_reports(ctx)?;
    let plan = plan_contrasts(ctx.m);
    let mut outputs: Vec<PathBuf> = plan.pairs.iter().map(|(l, ..)| dir.join(format!("{l}.csv"))).collect();
    for (l, ..) in &plan.cross {
        outputs.push(dir.join(format!("cross__{l}.csv")));
        outputs.push(dir.join(format!("cross__{l}.ekc")));
    }
    let ran = !is_fresh(&dir, "contrasts", &key, &outputs);
    if ran {
        mkdir(&dir)?;
        let masks = load_masks_by_participant(ctx, &reports[0])?;
        let sel = ctx.m.voxel_selection;
        let mut all: Vec<ContrastResult> = Vec::new();
        for (label, a, b) in &plan.pairs {
            let res = roi_percent_change(&reports[*a], &reports[*b], &masks, sel)?;
            write_atomic(&dir.join(format!("{label}.csv")), res.to_csv().as_bytes())?;
            all.push(res);
        }
        for (label, b, bs, t, ts) in &plan.cross {
            let cc = cross_perturbation_contrast(&reports[*b], &reports[*bs], &reports[*t], &reports[*ts], &masks, sel)?;
            write_atomic(&dir.join(format!("cross__{label}.csv")), cc.summary.to_csv().as_bytes())?;
            write_container(&cc.to_container()?, dir.join(format!("cross__{label}.ekc")))?;
            all.push(cc.summary);
        }
        write_json(dir.join("contrasts.json"), &all)?;
        write_stamp(&dir, "contrasts", &key)?;
    }
    ctx.counter.hit(ran);
    Ok((key, reports))
}

fn condition_summaries(ctx: &Ctx, reports: &[Vec<AlignmentReport>]) -> Result<Vec<ConditionSummary>> {
    ctx.m
        .conditions
        .iter()
        .zip(reports)
        .map(|(c, reps)| {
            let track = EmbeddingTrack::load(ctx.input(&c.track))?;
            let ppl = perplexity(track.log_probs()).ok();
            let means: Vec<f64> = reps.iter().filter_map(AlignmentReport::mean_correlation).collect();
            Ok(ConditionSummary {
                model_tag: c.model_tag.clone(),
                scramble_tag: c.scramble_tag.clone(),
                perplexity: ppl,
                mean_correlation: (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64),
                significant_voxels: reps.iter().map(AlignmentReport::significant_count).sum(),
                models: ctx.m.participants.iter().map(|p| p.runs.len()).sum(),
            })
        })
        .collect()
}

fn summary_csv(ctx: &Ctx, reports: &[Vec<AlignmentReport>], ppl: &[Option<f64>]) -> String {
    let mut out = String::from(
        "model_tag,scramble_tag,participant_id,folds,mean_correlation,significant_voxels,tested_voxels,perplexity\n",
    );
    for ((c, reps), p) in ctx.m.conditions.iter().zip(reports).zip(ppl) {
        for r in reps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.model_tag,
                c.scramble_tag,
                r.metadata.participant_id,
                r.metadata.folds.len(),
                crate::stats::fmt_opt(r.mean_correlation()),
                r.significant_count(),
                r.metadata.tested_voxels,
                crate::stats::fmt_opt(*p),
            ));
        }
    }
    out
}

/// Last stage a partial run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StopAfter {
    Train,
    Evaluate,
    All,
}

/// Runs every stage that is not already up to date.
pub fn run_pipeline(manifest: &RunManifest, base: &Path) -> Result<RunSummary> {
    run_pipeline_until(manifest, base, StopAfter::All)
}

pub fn run_pipeline_until(manifest: &RunManifest, base: &Path, stop: StopAfter) -> Result<RunSummary> {
    manifest.validate(base)?;
    let ctx = Ctx {
        m: manifest,
        base,
        out: base.join(&manifest.output_dir),
        hasher: Hasher {
            cache: Mutex::new(BTreeMap::new()),
        },
        counter: Counter {
            executed: Mutex::new(0),
            skipped: Mutex::new(0),
        },
    };
    mkdir(&ctx.out)?;
    let timeline = StimulusTimeline::load(ctx.input(&manifest.timeline))?;
    for p in &manifest.participants {
        if p.runs.len() != timeline.run_count() {
            return Err(Error::invalid(
                "manifest",
                format!("participant `{}` has {} runs, timeline {}", p.id, p.runs.len(), timeline.run_count()),
            ));
        }
    }

    let design_keys = manifest
        .conditions
        .par_iter()
        .map(|c| stage_featurize(&ctx, c, &timeline).map_err(stage_err(format!("featurize {}", c.dir_name()))))
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(usize, usize, usize)> = manifest
        .conditions
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| {
            manifest
                .participants
                .iter()
                .enumerate()
                .flat_map(move |(pi, p)| (0..p.runs.len()).map(move |k| (ci, pi, k)))
        })
        .collect();
    let model_keys = cells
        .par_iter()
        .map(|&(ci, pi, k)| {
            let (c, p) = (&manifest.conditions[ci], &manifest.participants[pi]);
            stage_train(&ctx, c, &design_keys[ci], p, k)
                .map_err(stage_err(format!("train {} {} fold{k}", c.dir_name(), p.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    info!("{} final models", model_keys.len());
    let finish = |ctx: &Ctx, conditions| RunSummary {
        executed_stages: *ctx.counter.executed.lock().unwrap(),
        skipped_stages: *ctx.counter.skipped.lock().unwrap(),
        final_models: model_keys.len(),
        conditions,
        mean_noise_ceiling: None,
        output_dir: ctx.out.clone(),
    };
    if stop == StopAfter::Train {
        return Ok(finish(&ctx, Vec::new()));
    }

    let mut eval_keys = Vec::new();
    let mut offset = 0;
    for (ci, c) in manifest.conditions.iter().enumerate() {
        for p in &manifest.participants {
            let keys = &model_keys[offset..offset + p.runs.len()];
            offset += p.runs.len();
            eval_keys.push(
                stage_evaluate(&ctx, c, &design_keys[ci], p, keys)
                    .map_err(stage_err(format!("evaluate {} {}", c.dir_name(), p.id)))?,
            );
        }
    }

    if stop == StopAfter::Evaluate {
        let reports = load_reports(&ctx)?;
        let conditions = condition_summaries(&ctx, &reports)?;
        return Ok(finish(&ctx, conditions));
    }

    let (contrast_key, reports) = stage_contrasts(&ctx, &eval_keys).map_err(stage_err("contrasts".into()))?;
    let conditions = condition_summaries(&ctx, &reports)?;
    let mean_noise_ceiling = manifest
        .truth
        .as_ref()
        .map(|t| GroundTruth::load(ctx.input(t)).map(|g| g.mean_ceiling()))
        .transpose()?;

    let report_key = key_of(&["report", &contrast_key]);
    let figures = report::figure_paths(&ctx.out, manifest);
    let mut outputs = figures.clone();
    outputs.push(ctx.out.join("summary.csv"));
    outputs.push(ctx.out.join("comparison.csv"));
    let ran = !is_fresh(&ctx.out, "report", &report_key, &outputs);
    if ran {
        let ppl: Vec<Option<f64>> = conditions.iter().map(|c| c.perplexity).collect();
        write_atomic(&ctx.out.join("summary.csv"), summary_csv(&ctx, &reports, &ppl).as_bytes())?;
        write_atomic(&ctx.out.join("comparison.csv"), report::comparison_csv(&conditions).as_bytes())?;
        report::write_figures(&ctx.out, manifest, &conditions, &reports).map_err(stage_err("report".into()))?;
        write_stamp(&ctx.out, "report", &report_key)?;
    }
    ctx.counter.hit(ran);

    let summary = RunSummary {
        mean_noise_ceiling,
        ..finish(&ctx, conditions)
    };
    write_json(ctx.out.join("run_summary.json"), &summary)?;
    Ok(summary)
}

/// Loads the manifest file and runs it.
pub fn run_manifest(path: impl AsRef<Path>) -> Result<RunSummary> {
    let (m, base) = RunManifest::load(path)?;
    run_pipeline(&m, &base)
}

/// Reads a `fold_correlations.ekc` written by the evaluate stage.
pub fn load_fold_correlations(path: impl AsRef<Path>) -> Result<(FoldCorrelations, ReportLabels)> {
    let path = path.as_ref();
    let c = crate::container::read_container(path)?;
    let what = "fold correlations";
    let (shape, flat) = c.f64_tensor("correlations")?;
    let voxel_ids: Vec<String> = c
        .meta("voxel_ids")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::invalid(what, e.to_string()))?
        .ok_or_else(|| Error::invalid(what, format!("{} has no voxel_ids", path.display())))?;
    if shape.len() != 2 || shape[0] != voxel_ids.len() {
        return Err(Error::invalid(what, format!("shape {shape:?} for {} voxels", voxel_ids.len())));
    }
    let folds = shape[1];
    let values = flat
        .chunks(folds.max(1))
        .take(shape[0])
        .map(|row| row.iter().map(|v| v.is_finite().then_some(*v)).collect())
        .collect();
    let label = |k: &str| c.meta(k).and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let labels = ReportLabels {
        participant_id: label("participant_id"),
        model_tag: label("model_tag"),
        scramble_tag: label("scramble_tag"),
    };
    Ok((FoldCorrelations::new(voxel_ids, (0..folds).collect(), values)?, labels))
}
