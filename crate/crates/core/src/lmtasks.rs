//! Perplexity from per-word log-probabilities, and seeded word-scrambling plans.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{read_json, write_json, StimulusTimeline};

pub const DEFAULT_WINDOW: usize = 20;

/// `exp(-mean(log q))` over the present entries.
///
/// The reduction sorts the values first and accumulates deviations from the smallest one, so
/// the result does not depend on input order and a constant vector reproduces its value
/// exactly.
pub fn perplexity(log_probs: &[Option<f64>]) -> Result<f64> {
    let mut present: Vec<f64> = log_probs.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    if let Some(bad) = present.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
        return Err(Error::invalid("log-probabilities", format!("{bad} is not a finite value <= 0")));
    }
    present.sort_by(f64::total_cmp);
    let base = present[0];
    let spread: f64 = present.iter().map(|v| v - base).sum();
    let mean = base + spread / present.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrambleWindow {
    pub start: usize,
    pub end: usize,
    /// `scrambled[start + k] = original[start + permutation[k]]`.
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScramblePlan {
    pub window_size: usize,
    pub seed: u64,
    pub word_count: usize,
    pub windows: Vec<ScrambleWindow>,
}

impl ScramblePlan {
    /// Plan id used as the scramble tag of tracks extracted with this plan.
    pub fn id(&self) -> String {
        format!("w{}s{}", self.window_size, self.seed)
    }

    /// Checks that windows tile `0..word_count` and that every permutation is a bijection.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, w) in self.windows.iter().enumerate() {
            if w.start != next || w.end <= w.start {
                return Err(Error::invalid(
                    "scramble plan",
                    format!("window {i} [{}, {}) does not continue at {next}", w.start, w.end),
                ));
            }
            let len = w.end - w.start;
            if w.permutation.len() != len {
                return Err(Error::invalid(
                    "scramble plan",
                    format!("window {i} permutation has {} entries for {len} words", w.permutation.len()),
                ));
            }
            let mut seen = vec![false; len];
            for &p in &w.permutation {
                if p >= len || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::invalid(
                        "scramble plan",
                        format!("window {i} permutation is not a bijection"),
                    ));
                }
            }
            next = w.end;
        }
        if next != self.word_count {
            return Err(Error::invalid(
                "scramble plan",
                format!("windows cover {next} of {} words", self.word_count),
            ));
        }
        Ok(())
    }

    /// Validates the plan against a timeline: same word count and no window crossing a run.
    pub fn check_against(&self, timeline: &StimulusTimeline) -> Result<()> {
        self.validate()?;
        if self.word_count != timeline.len() {
            return Err(Error::invalid(
                "scramble plan",
                format!("plan covers {} words, timeline has {}", self.word_count, timeline.len()),
            ));
        }
        let words = timeline.words();
        for w in &self.windows {
            if words[w.start].run_id != words[w.end - 1].run_id {
                return Err(Error::invalid(
                    "scramble plan",
                    format!("window [{}, {}) crosses a run boundary", w.start, w.end),
                ));
            }
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let windows = self
            .windows
            .iter()
            .map(|w| {
                let mut inv = vec![0; w.permutation.len()];
                for (k, &p) in w.permutation.iter().enumerate() {
                    inv[p] = k;
                }
                ScrambleWindow {
                    start: w.start,
                    end: w.end,
                    permutation: inv,
                }
            })
            .collect();
        Self {
            windows,
            ..self.clone()
        }
    }

    /// Plan that leaves every window untouched.
    pub fn identity(timeline: &StimulusTimeline, window_size: usize) -> Result<Self> {
        let windows = tile_windows(timeline, window_size)?
            .into_iter()
            .map(|(start, end)| ScrambleWindow {
                start,
                end,
                permutation: (0..end - start).collect(),
            })
            .collect();
        Ok(Self {
            window_size,
            seed: 0,
            word_count: timeline.len(),
            windows,
        })
    }

    /// Reorders `items` window by window.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        if items.len() != self.word_count {
            return Err(Error::Dimension(format!(
                "plan covers {} items, got {}",
                self.word_count,
                items.len()
            )));
        }
        let mut out = Vec::with_capacity(items.len());
        for w in &self.windows {
            out.extend(w.permutation.iter().map(|&p| items[w.start + p].clone()));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: Self = read_json(path)?;
        plan.validate()?;
        Ok(plan)
    }
}

fn tile_windows(timeline: &StimulusTimeline, window_size: usize) -> Result<Vec<(usize, usize)>> {
    if window_size < 2 {
        return Err(Error::invalid("window size", format!("{window_size} < 2")));
    }
    let mut out = Vec::new();
    for range in timeline.run_word_ranges() {
        let mut start = range.start;
        while start < range.end {
            let end = (start + window_size).min(range.end);
            out.push((start, end));
            start = end;
        }
    }
    Ok(out)
}

/// Splits every run into consecutive `window_size`-word windows (the last one may be short)
/// and draws one non-identity uniform permutation per window of two or more words.
pub fn make_scramble_plan(
    timeline: &StimulusTimeline,
    window_size: usize,
    seed: u64,
) -> Result<ScramblePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = tile_windows(timeline, window_size)?
        .into_iter()
        .map(|(start, end)| {
            let len = end - start;
            let mut permutation: Vec<usize> = (0..len).collect();
            if len >= 2 {
                loop {
                    permutation.shuffle(&mut rng);
                    if permutation.iter().enumerate().any(|(k, &p)| k != p) {
                        break;
                    }
                }
            }
            ScrambleWindow {
                start,
                end,
                permutation,
            }
        })
        .collect();
    Ok(ScramblePlan {
        window_size,
        seed,
        word_count: timeline.len(),
        windows,
    })
}

/// Scrambled word sequence; onsets and run structure stay with the positions.
pub fn apply_plan_to_text(timeline: &StimulusTimeline, plan: &ScramblePlan) -> Result<Vec<String>> {
    plan.check_against(timeline)?;
    plan.apply(&timeline.texts())
        .map(|v| v.into_iter().map(str::to_string).collect())
}
