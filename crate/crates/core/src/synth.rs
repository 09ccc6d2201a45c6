//! Synthetic stimuli, embedding tracks and BOLD with known ground truth.
//!
//! Construction, per word position `i` of a run:
//! - word types are drawn from a Zipf vocabulary; every type `s` gets a vector
//!   `u(s) = A z(s) + jitter * e(s)` with `z(s)` of size `latent_rank`, so tracks have low
//!   intrinsic rank;
//! - the first `(1 - order_sensitivity) * d` dimensions are lexical, `u(s)` of the word itself;
//! - the remaining dimensions are order sensitive:
//!   `o = sum_k decay^(j - k) u(s_k)` over positions `k <= j` of the word's scramble window,
//!   where `j` is where the word sits in the sequence the model reads;
//! - every dimension is then scaled to unit variance over the unscrambled stimulus;
//! - BOLD is the lagged design of the true (unscrambled, mismatch-free) track times the true
//!   weights, plus i.i.d. Gaussian noise.
//!
//! Log-probabilities are the unigram log-probability of the word, multiplied by
//! `1 - order_sensitivity / 2` when the word follows its true predecessor, and by a further
//! `1 - tuned_gain / 4` for the tuned model. The first word the model reads in a run has none.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, Container, Tensor};
use crate::error::{Error, Result};
use crate::featurize::{featurize, DEFAULT_LAGS};
use crate::lmtasks::{make_scramble_plan, ScramblePlan};
use crate::types::{
    write_json, BoldRun, EmbeddingTrack, ParticipantBold, RoiMask, StimulusTimeline, Word,
};

pub const WORD_SPACING_S: f64 = 0.5;
pub const TR_S: f64 = 2.0;
const ZIPF_EXPONENT: f64 = 1.1;

pub const BASELINE: &str = "baseline";
pub const TUNED: &str = "tuned";
pub const UNSCRAMBLED: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub participants: usize,
    pub runs: usize,
    pub trs_per_run: usize,
    /// Embedding dimension.
    pub d: usize,
    pub voxels: usize,
    /// `F x V` with `F = lags.len() * d`; drawn from the seed when absent.
    pub true_lag_weights: Option<Vec<Vec<f64>>>,
    pub noise_sigma: f64,
    pub order_sensitivity: f64,
    pub seed: u64,
    pub lags: Vec<usize>,
    pub vocab_size: usize,
    pub latent_rank: usize,
    pub jitter: f64,
    /// Scramble window and order-mixing window.
    pub window: usize,
    pub order_decay: f64,
    /// The last `null_voxels` voxels get zero weights (drawn weights only).
    pub null_voxels: usize,
    /// Number of contiguous ROI masks over the voxel list.
    pub rois: usize,
    /// Per-type feature noise separating the baseline model from the truth.
    pub mismatch: f64,
    /// When set, a tuned model is generated whose mismatch is scaled by `1 - tuned_gain`.
    pub tuned_gain: Option<f64>,
    /// Seed of the scramble plan; `seed + 1` when absent.
    pub scramble_seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            participants: 2,
            runs: 4,
            trs_per_run: 150,
            d: 16,
            voxels: 200,
            true_lag_weights: None,
            noise_sigma: 3f64.sqrt(),
            order_sensitivity: 0.5,
            seed: 0,
            lags: DEFAULT_LAGS.to_vec(),
            vocab_size: 400,
            latent_rank: 4,
            jitter: 0.1,
            window: 20,
            order_decay: 0.6,
            null_voxels: 0,
            rois: 4,
            mismatch: 0.0,
            tuned_gain: None,
            scramble_seed: None,
        }
    }
}

impl SynthSpec {
    pub fn features(&self) -> usize {
        self.lags.len() * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let what = "synth spec";
        let dims = [
            ("participants", self.participants),
            ("runs", self.runs),
            ("trs_per_run", self.trs_per_run),
            ("d", self.d),
            ("voxels", self.voxels),
            ("vocab_size", self.vocab_size),
            ("latent_rank", self.latent_rank),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(what, format!("{name} must be at least 1")));
        }
        if self.window < 2 {
            return Err(Error::invalid(what, "window must be at least 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(what, format!("noise_sigma {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.order_sensitivity) {
            return Err(Error::invalid(what, "order_sensitivity outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.order_decay) || self.jitter < 0.0 || self.mismatch < 0.0 {
            return Err(Error::invalid(what, "order_decay in [0, 1), jitter and mismatch >= 0"));
        }
        if self.tuned_gain.is_some_and(|g| !(0.0..=1.0).contains(&g)) {
            return Err(Error::invalid(what, "tuned_gain outside [0, 1]"));
        }
        if self.null_voxels > self.voxels {
            return Err(Error::invalid(what, "more null voxels than voxels"));
        }
        crate::featurize::validate_lags(&self.lags)?;
        if self.lags.last().is_some_and(|&l| l >= self.trs_per_run) {
            return Err(Error::invalid(what, "largest lag leaves no valid row"));
        }
        if let Some(w) = &self.true_lag_weights {
            if w.len() != self.features() || w.iter().any(|r| r.len() != self.voxels) {
                return Err(Error::invalid(
                    what,
                    format!("true_lag_weights must be {} x {}", self.features(), self.voxels),
                ));
            }
        }
        Ok(())
    }

    fn order_dims(&self) -> usize {
        (self.order_sensitivity * self.d as f64).round() as usize
    }

    fn plan_seed(&self) -> u64 {
        self.scramble_seed.unwrap_or(self.seed.wrapping_add(1))
    }
}

/// Known answers for a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub weights: Array2<f64>,
    pub noise_sigma: f64,
    /// Population variance of the noiseless signal over valid rows, per voxel.
    pub signal_variance: Vec<f64>,
    /// `sqrt(vs / (vs + sigma^2))`, the correlation of the noiseless with the noisy signal.
    pub noise_ceiling: Vec<f64>,
}

impl GroundTruth {
    /// Mean ceiling over voxels that carry signal.
    pub fn mean_ceiling(&self) -> f64 {
        let live: Vec<f64> = self.noise_ceiling.iter().copied().filter(|&c| c > 0.0).collect();
        live.iter().sum::<f64>() / live.len().max(1) as f64
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let (f, v) = self.weights.dim();
        c.insert("weights", Tensor::f64(vec![f, v], self.weights.iter().copied().collect()).unwrap())
            .unwrap();
        c.insert("signal_variance", Tensor::f64(vec![v], self.signal_variance.clone()).unwrap())
            .unwrap();
        c.insert("noise_ceiling", Tensor::f64(vec![v], self.noise_ceiling.clone()).unwrap())
            .unwrap();
        c.set_meta("kind", "ground_truth");
        c.set_meta("noise_sigma", self.noise_sigma);
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = read_container(path)?;
        let (shape, w) = c.f64_tensor("weights")?;
        let weights = Array2::from_shape_vec((shape[0], shape[1]), w.to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let noise_sigma = c
            .meta("noise_sigma")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::invalid("ground truth", "missing noise_sigma"))?;
        Ok(Self {
            weights,
            noise_sigma,
            signal_variance: c.f64_tensor("signal_variance")?.1.to_vec(),
            noise_ceiling: c.f64_tensor("noise_ceiling")?.1.to_vec(),
        })
    }
}

pub fn noise_ceiling(signal_variance: &[f64], sigma: f64) -> Vec<f64> {
    signal_variance
        .iter()
        .map(|&vs| if vs > 0.0 { (vs / (vs + sigma * sigma)).sqrt() } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub timeline: StimulusTimeline,
    /// `(model, unscrambled)` then `(model, scrambled)` for each model, baseline first.
    pub tracks: Vec<EmbeddingTrack>,
    pub participants: Vec<ParticipantBold>,
    pub masks: Vec<RoiMask>,
    pub plan: ScramblePlan,
    pub truth: GroundTruth,
}

impl SynthData {
    pub fn track(&self, model_tag: &str, scrambled: bool) -> Option<&EmbeddingTrack> {
        self.tracks
            .iter()
            .find(|t| t.model_tag == model_tag && (t.scramble_tag != UNSCRAMBLED) == scrambled)
    }
}

struct Stimulus {
    timeline: StimulusTimeline,
    types: Vec<usize>,
    unigram_logp: Vec<f64>,
}

fn stimulus(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Stimulus {
    let zipf = Zipf::new(spec.vocab_size as f64, ZIPF_EXPONENT).unwrap();
    let norm: f64 = (1..=spec.vocab_size).map(|k| (k as f64).powf(-ZIPF_EXPONENT)).sum();
    let unigram_logp = (1..=spec.vocab_size)
        .map(|k| -ZIPF_EXPONENT * (k as f64).ln() - norm.ln())
        .collect();
    let words_per_run = spec.trs_per_run * (TR_S / WORD_SPACING_S) as usize;
    let mut words = Vec::with_capacity(spec.runs * words_per_run);
    let mut types = Vec::with_capacity(words.capacity());
    for run_id in 0..spec.runs {
        for i in 0..words_per_run {
            let t = (zipf.sample(rng) as usize).clamp(1, spec.vocab_size) - 1;
            types.push(t);
            words.push(Word {
                text: format!("w{t}"),
                onset_s: i as f64 * WORD_SPACING_S,
                run_id,
            });
        }
    }
    let timeline = StimulusTimeline::new(words, TR_S, vec![spec.trs_per_run; spec.runs]).unwrap();
    Stimulus {
        timeline,
        types,
        unigram_logp,
    }
}

fn type_vectors(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let r = spec.latent_rank;
    let a = Array2::from_shape_fn((spec.d, r), |_| rng.sample::<f64, _>(StandardNormal) / (r as f64).sqrt());
    let z = Array2::from_shape_fn((spec.vocab_size, r), |_| rng.sample::<f64, _>(StandardNormal));
    let e = Array2::from_shape_fn((spec.vocab_size, spec.d), |_| rng.sample::<f64, _>(StandardNormal));
    z.dot(&a.t()) + e * spec.jitter
}

/// Raw (unscaled) per-word features as read in the order given by `plan`.
fn raw_embeddings(
    spec: &SynthSpec,
    types: &[usize],
    vectors: &Array2<f64>,
    plan: &ScramblePlan,
) -> Array2<f64> {
    let n = types.len();
    let lex = spec.d - spec.order_dims();
    let mut out = Array2::zeros((n, spec.d));
    for w in &plan.windows {
        // read[j] is the original position of the word read at window slot j
        let read: Vec<usize> = w.permutation.iter().map(|&p| w.start + p).collect();
        let mut acc = Array1::<f64>::zeros(spec.d - lex);
        for &orig in &read {
            acc *= spec.order_decay;
            acc += &vectors.slice(s![types[orig], lex..]);
            out.slice_mut(s![orig, ..lex]).assign(&vectors.slice(s![types[orig], ..lex]));
            out.slice_mut(s![orig, lex..]).assign(&acc);
        }
    }
    out
}

fn log_probs(spec: &SynthSpec, stim: &Stimulus, plan: &ScramblePlan, tuned: Option<f64>) -> Vec<Option<f64>> {
    let n = stim.types.len();
    let words = stim.timeline.words();
    let mut out = vec![None; n];
    let read: Vec<usize> = plan.windows.iter().flat_map(|w| w.permutation.iter().map(move |&p| w.start + p)).collect();
    for j in 0..n {
        let orig = read[j];
        if j == 0 || words[read[j - 1]].run_id != words[orig].run_id {
            continue;
        }
        let mut lp = stim.unigram_logp[stim.types[orig]];
        if orig > 0 && read[j - 1] == orig - 1 {
            lp *= 1.0 - spec.order_sensitivity / 2.0;
        }
        if let Some(g) = tuned {
            lp *= 1.0 - g / 4.0;
        }
        out[orig] = Some(lp.min(0.0));
    }
    out
}

fn scale_columns(x: &mut Array2<f64>, scale: &Array1<f64>) {
    for mut row in x.rows_mut() {
        row /= scale;
    }
}

/// Population variance of every column.
fn column_var(x: &Array2<f64>) -> Array1<f64> {
    let n = x.nrows().max(1) as f64;
    let mean = x.sum_axis(ndarray::Axis(0)) / n;
    x.rows().into_iter().fold(Array1::zeros(x.ncols()), |acc: Array1<f64>, r| {
        let d = &r - &mean;
        acc + &d * &d
    }) / n
}

fn column_std(x: &Array2<f64>) -> Array1<f64> {
    column_var(x).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
}

fn to_track(model: &str, scramble: &str, spec: &SynthSpec, x: Array2<f64>, lp: Vec<Option<f64>>) -> EmbeddingTrack {
    EmbeddingTrack::new(model, scramble, 0, spec.window, x.mapv(|v| v as f32), lp).unwrap()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Valid-row design of the truth track and the noiseless signal for given weights.
fn truth_signal(
    spec: &SynthSpec,
    timeline: &StimulusTimeline,
    truth: &EmbeddingTrack,
) -> Result<(crate::featurize::DesignMatrix, Option<Array2<f64>>)> {
    let design = featurize(truth, timeline, &spec.lags)?;
    let w = spec.true_lag_weights.as_ref().map(|rows| {
        Array2::from_shape_fn((spec.features(), spec.voxels), |(i, j)| rows[i][j])
    });
    Ok((design, w))
}

fn valid_signal_variance(design: &crate::featurize::DesignMatrix, w: &Array2<f64>) -> Vec<f64> {
    let valid: Vec<usize> = (0..design.rows().len()).filter(|&r| design.rows()[r].valid).collect();
    let x = design.x().select(ndarray::Axis(0), &valid).mapv(f64::from);
    column_var(&x.dot(w)).to_vec()
}

/// Generates the full dataset; bitwise deterministic given the spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let stim = stimulus(spec, &mut stream(spec.seed, 1));
    let vectors = type_vectors(spec, &mut stream(spec.seed, 2));
    let identity = ScramblePlan::identity(&stim.timeline, spec.window)?;
    let plan = make_scramble_plan(&stim.timeline, spec.window, spec.plan_seed())?;

    let mut truth_x = raw_embeddings(spec, &stim.types, &vectors, &identity);
    let scale = column_std(&truth_x);
    scale_columns(&mut truth_x, &scale);
    let truth_track = to_track("truth", UNSCRAMBLED, spec, truth_x, log_probs(spec, &stim, &identity, None));

    let mut eps_rng = stream(spec.seed, 4);
    let eps = Array2::from_shape_fn(vectors.dim(), |_| eps_rng.sample::<f64, _>(StandardNormal));
    let mut models = vec![(BASELINE, spec.mismatch, None)];
    if let Some(g) = spec.tuned_gain {
        models.push((TUNED, spec.mismatch * (1.0 - g), Some(g)));
    }
    let mut tracks = Vec::new();
    for (tag, mismatch, gain) in models {
        let v = &vectors + &(&eps * mismatch);
        for (p, scramble) in [(&identity, UNSCRAMBLED.to_string()), (&plan, plan.id())] {
            let mut x = raw_embeddings(spec, &stim.types, &v, p);
            scale_columns(&mut x, &scale);
            tracks.push(to_track(tag, &scramble, spec, x, log_probs(spec, &stim, p, gain)));
        }
    }

    let (design, given) = truth_signal(spec, &stim.timeline, &truth_track)?;
    let weights = match given {
        Some(w) => w,
        None => {
            let mut rng = stream(spec.seed, 3);
            let mut w = Array2::from_shape_fn((spec.features(), spec.voxels), |_| rng.sample::<f64, _>(StandardNormal));
            w.slice_mut(s![.., spec.voxels - spec.null_voxels..]).fill(0.0);
            let vs = valid_signal_variance(&design, &w);
            for (mut col, v) in w.columns_mut().into_iter().zip(vs) {
                if v > 0.0 {
                    col /= v.sqrt();
                }
            }
            w
        }
    };
    let signal_variance = valid_signal_variance(&design, &weights);
    let signal = design.x().mapv(f64::from).dot(&weights);

    let voxel_ids: Vec<String> = (0..spec.voxels).map(|v| format!("v{v:04}")).collect();
    let offsets = stim.timeline.run_tr_offsets();
    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let participants = (0..spec.participants)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(spec.seed, 100 + p as u64);
            let pid = format!("sub{:02}", p + 1);
            let runs = (0..spec.runs)
                .map(|r| {
                    let block = signal.slice(s![offsets[r]..offsets[r] + spec.trs_per_run, ..]);
                    let data = block.mapv(|v| (v + noise.sample(&mut rng)) as f32);
                    BoldRun::new(pid.clone(), r, data, voxel_ids.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            ParticipantBold::new(runs)
        })
        .collect::<Result<Vec<_>>>()?;

    let rois = spec.rois.clamp(1, spec.voxels);
    let masks = (0..rois)
        .map(|k| RoiMask {
            name: format!("roi{}", k + 1),
            voxel_ids: voxel_ids[k * spec.voxels / rois..(k + 1) * spec.voxels / rois]
                .iter()
                .cloned()
                .collect(),
        })
        .collect();

    Ok(SynthData {
        spec: spec.clone(),
        timeline: stim.timeline,
        tracks,
        participants,
        masks,
        plan,
        truth: GroundTruth {
            noise_ceiling: noise_ceiling(&signal_variance, spec.noise_sigma),
            weights,
            noise_sigma: spec.noise_sigma,
            signal_variance,
        },
    })
}

/// Noise level whose mean ceiling over signal-bearing voxels equals `target`.
pub fn calibrate_noise_sigma(signal_variance: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid("ceiling target", format!("{target} outside (0, 1)")));
    }
    let mean_ceiling = |sigma: f64| {
        let c = noise_ceiling(signal_variance, sigma);
        let live: Vec<f64> = c.into_iter().filter(|&v| v > 0.0).collect();
        live.iter().sum::<f64>() / live.len().max(1) as f64
    };
    if mean_ceiling(0.0) == 0.0 {
        return Err(Error::invalid("ceiling target", "no voxel carries signal"));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean_ceiling(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_ceiling(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Paths written by [`SynthData::write`], relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFiles {
    pub timeline: PathBuf,
    /// `(model_tag, scramble_tag, path)`.
    pub tracks: Vec<(String, String, PathBuf)>,
    /// `(participant_id, run paths)`.
    pub bold: Vec<(String, Vec<PathBuf>)>,
    pub masks: PathBuf,
    pub plan: PathBuf,
    pub truth: PathBuf,
    pub spec: PathBuf,
}

impl SynthData {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthFiles> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("bold")).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles {
            timeline: "timeline.ekc".into(),
            tracks: self
                .tracks
                .iter()
                .map(|t| {
                    let name = format!("track_{}__{}.ekc", t.model_tag, t.scramble_tag);
                    (t.model_tag.clone(), t.scramble_tag.clone(), name.into())
                })
                .collect(),
            bold: self
                .participants
                .iter()
                .map(|p| {
                    let pid = p.participant_id().to_string();
                    let runs = p.runs().map(|r| format!("bold/{pid}_run{}.ekc", r.run_id).into()).collect();
                    (pid, runs)
                })
                .collect(),
            masks: "masks.json".into(),
            plan: "plan.json".into(),
            truth: "truth.ekc".into(),
            spec: "synth_spec.json".into(),
        };
        self.timeline.save(dir.join(&files.timeline))?;
        for (t, (_, _, path)) in self.tracks.iter().zip(&files.tracks) {
            t.save(dir.join(path))?;
        }
        for (p, (_, paths)) in self.participants.iter().zip(&files.bold) {
            for (r, path) in p.runs().zip(paths) {
                r.save(dir.join(path))?;
            }
        }
        write_json(dir.join(&files.masks), &self.masks)?;
        self.plan.save(dir.join(&files.plan))?;
        write_container(&self.truth.to_container(), dir.join(&files.truth))?;
        write_json(dir.join(&files.spec), &self.spec)?;
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmtasks::perplexity;

    fn small() -> SynthSpec {
        SynthSpec {
            participants: 2,
            runs: 3,
            trs_per_run: 30,
            d: 8,
            voxels: 12,
            null_voxels: 2,
            mismatch: 0.5,
            tuned_gain: Some(0.8),
            seed: 42,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.participants, b.participants);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SynthSpec { seed: 43, ..small() }).unwrap();
        assert_ne!(a.participants, c.participants);
    }

    #[test]
    fn shapes_timing_and_tags() {
        let data = generate(&small()).unwrap();
        assert_eq!(data.timeline.len(), 3 * 30 * 4);
        assert_eq!(data.timeline.words()[5].onset_s, 2.5);
        assert_eq!(data.tracks.len(), 4);
        assert!(data.track(TUNED, true).is_some());
        assert_eq!(data.participants[1].participant_id(), "sub02");
        assert_eq!(data.participants[0].runs().count(), 3);
        assert_eq!(data.truth.weights.dim(), (40, 12));
        assert_eq!(data.masks.len(), 4);
        for p in &data.participants {
            p.check_aligned(&data.timeline).unwrap();
        }
    }

    #[test]
    fn null_voxels_have_zero_ceiling_and_live_ones_match_sigma() {
        let data = generate(&small()).unwrap();
        let c = &data.truth.noise_ceiling;
        assert_eq!(&c[10..], &[0.0, 0.0]);
        // drawn columns are scaled to unit signal variance
        for &v in &data.truth.signal_variance[..10] {
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!((data.truth.mean_ceiling() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_order_sensitivity_makes_scrambling_a_no_op_on_features() {
        let data = generate(&SynthSpec {
            order_sensitivity: 0.0,
            ..small()
        })
        .unwrap();
        let a = data.track(BASELINE, false).unwrap();
        let b = data.track(BASELINE, true).unwrap();
        assert_eq!(a.embeddings(), b.embeddings());
    }

    #[test]
    fn scrambling_changes_order_dims_only() {
        let data = generate(&small()).unwrap();
        let a = data.track(BASELINE, false).unwrap().embeddings();
        let b = data.track(BASELINE, true).unwrap().embeddings();
        assert_eq!(a.slice(s![.., ..4]), b.slice(s![.., ..4]));
        assert_ne!(a.slice(s![.., 4..]), b.slice(s![.., 4..]));
    }

    #[test]
    fn perplexity_ordering() {
        let data = generate(&small()).unwrap();
        let ppl = |m, s| perplexity(data.track(m, s).unwrap().log_probs()).unwrap();
        assert!(ppl(BASELINE, true) > ppl(BASELINE, false));
        assert!(ppl(TUNED, true) > ppl(TUNED, false));
        assert!(ppl(TUNED, false) < ppl(BASELINE, false));
        // first word of every run has no log-prob in the unscrambled track
        let lp = data.track(BASELINE, false).unwrap().log_probs();
        assert!(lp[0].is_none() && lp[120].is_none() && lp[1].is_some());
    }

    #[test]
    fn noiseless_bold_is_exactly_the_lagged_signal() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            mismatch: 0.0,
            ..small()
        };
        let data = generate(&spec).unwrap();
        assert!(data.truth.noise_ceiling[..10].iter().all(|&c| c == 1.0));
        // without mismatch the baseline track is the truth track
        let design = featurize(data.track(BASELINE, false).unwrap(), &data.timeline, &spec.lags).unwrap();
        let sig = design.x().mapv(f64::from).dot(&data.truth.weights);
        let run0 = data.participants[0].run(0).unwrap().data();
        for t in 5..30 {
            for v in 0..12 {
                assert!((run0[[t, v]] as f64 - sig[[t, v]]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn calibration_hits_target() {
        let vs = [1.0, 2.0, 0.0, 0.5];
        let sigma = calibrate_noise_sigma(&vs, 0.5).unwrap();
        let c = noise_ceiling(&vs, sigma);
        let mean = (c[0] + c[1] + c[3]) / 3.0;
        assert!((mean - 0.5).abs() < 1e-12);
        assert!(calibrate_noise_sigma(&[0.0], 0.5).is_err());
    }

    #[test]
    fn given_weights_are_used_verbatim() {
        let spec = SynthSpec {
            true_lag_weights: Some(vec![vec![0.25; 12]; 40]),
            ..small()
        };
        let data = generate(&spec).unwrap();
        assert!(data.truth.weights.iter().all(|&w| w == 0.25));
        let bad = SynthSpec {
            true_lag_weights: Some(vec![vec![0.25; 11]; 40]),
            ..small()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small()).unwrap();
        let files = data.write(dir.path()).unwrap();
        let tl = StimulusTimeline::load(dir.path().join(&files.timeline)).unwrap();
        assert_eq!(tl, data.timeline);
        let t = EmbeddingTrack::load(dir.path().join(&files.tracks[1].2)).unwrap();
        assert_eq!(&t, &data.tracks[1]);
        let truth = GroundTruth::load(dir.path().join(&files.truth)).unwrap();
        assert_eq!(truth, data.truth);
        let plan = ScramblePlan::load(dir.path().join(&files.plan)).unwrap();
        assert_eq!(plan, data.plan);
    }
}
