use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::mean_sem;
use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::types::{AlignmentReport, RoiMask};

/// Baseline values with a smaller magnitude are left out of ratio statistics.
pub const MIN_BASELINE_MAGNITUDE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelSelection {
    /// Voxels significantly predicted by the reference model.
    SignificantByReference,
    All,
}

impl std::fmt::Display for VoxelSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VoxelSelection::SignificantByReference => "significant_by_reference",
            VoxelSelection::All => "all",
        })
    }
}

impl std::str::FromStr for VoxelSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "significant_by_reference" | "significant" => Ok(Self::SignificantByReference),
            "all" => Ok(Self::All),
            other => Err(Error::invalid("voxel selection", other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiContrast {
    pub roi_name: String,
    /// `None` when no participant had a usable voxel in this ROI.
    pub mean_percent_change: Option<f64>,
    pub sem: Option<f64>,
    pub n_participants: usize,
    pub voxel_selection: VoxelSelection,
    /// Selected voxels contributing to the mean, summed over participants.
    pub voxels_used: usize,
    /// Selected voxels dropped for an undefined or near-zero baseline.
    pub voxels_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub label: String,
    pub reference_model_tag: String,
    pub rows: Vec<RoiContrast>,
}

impl ContrastResult {
    pub fn row(&self, roi: &str) -> Option<&RoiContrast> {
        self.rows.iter().find(|r| r.roi_name == roi)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "roi,mean_percent_change,sem,n_participants,voxel_selection,voxels_used,voxels_excluded\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.roi_name,
                fmt_opt(r.mean_percent_change),
                fmt_opt(r.sem),
                r.n_participants,
                r.voxel_selection,
                r.voxels_used,
                r.voxels_excluded
            ));
        }
        out
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Per-voxel pair of (changed, baseline) values for one participant.
struct ParticipantPairs<'a> {
    participant_id: &'a str,
    pairs: BTreeMap<&'a str, (Option<f64>, Option<f64>)>,
    selected: BTreeSet<&'a str>,
}

fn by_participant<'a>(
    reports: &'a [AlignmentReport],
    what: &str,
) -> Result<BTreeMap<&'a str, &'a AlignmentReport>> {
    let mut map = BTreeMap::new();
    for r in reports {
        if map.insert(r.metadata.participant_id.as_str(), r).is_some() {
            return Err(Error::invalid(
                "reports",
                format!("{what}: participant `{}` appears twice", r.metadata.participant_id),
            ));
        }
    }
    Ok(map)
}

fn same_participants(sets: &[&BTreeMap<&str, &AlignmentReport>]) -> Result<()> {
    let first: Vec<&&str> = sets[0].keys().collect();
    for s in &sets[1..] {
        if s.keys().collect::<Vec<_>>() != first {
            return Err(Error::invalid("reports", "report sets cover different participants"));
        }
    }
    Ok(())
}

fn same_universe(reports: &[&AlignmentReport]) -> Result<()> {
    let first: BTreeSet<&str> = reports[0].voxels.iter().map(|v| v.voxel_id.as_str()).collect();
    for r in &reports[1..] {
        let ids: BTreeSet<&str> = r.voxels.iter().map(|v| v.voxel_id.as_str()).collect();
        if ids != first {
            return Err(Error::invalid(
                "reports",
                format!("participant `{}`: voxel universes differ", r.metadata.participant_id),
            ));
        }
    }
    Ok(())
}

fn selected_voxels(reference: &AlignmentReport, selection: VoxelSelection) -> BTreeSet<&str> {
    reference
        .voxels
        .iter()
        .filter(|v| selection == VoxelSelection::All || v.significant)
        .map(|v| v.voxel_id.as_str())
        .collect()
}

fn roi_names(masks: &BTreeMap<String, Vec<RoiMask>>) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for set in masks.values() {
        for m in set {
            if !names.contains(&m.name) {
                names.push(m.name.clone());
            }
        }
    }
    names
}

fn percent_change_table(
    participants: &[ParticipantPairs<'_>],
    masks: &BTreeMap<String, Vec<RoiMask>>,
    selection: VoxelSelection,
) -> Result<Vec<RoiContrast>> {
    let mut rows = Vec::new();
    for roi in roi_names(masks) {
        let mut per_participant = Vec::new();
        let mut used = 0;
        let mut excluded = 0;
        for p in participants {
            let Some(mask) = masks
                .get(p.participant_id)
                .and_then(|set| set.iter().find(|m| m.name == roi))
            else {
                continue;
            };
            let mut changes = Vec::new();
            for voxel in mask.voxel_ids.iter().map(String::as_str) {
                if !p.selected.contains(voxel) {
                    continue;
                }
                let Some(&pair) = p.pairs.get(voxel) else {
                    return Err(Error::invalid(
                        "roi masks",
                        format!("ROI `{roi}` voxel `{voxel}` missing from participant `{}`", p.participant_id),
                    ));
                };
                match pair {
                    (Some(a), Some(b)) if b.abs() >= MIN_BASELINE_MAGNITUDE => {
                        changes.push(100.0 * (a - b) / b);
                    }
                    _ => excluded += 1,
                }
            }
            if !changes.is_empty() {
                used += changes.len();
                per_participant.push(changes.iter().sum::<f64>() / changes.len() as f64);
            }
        }
        let stats = mean_sem(&per_participant);
        rows.push(RoiContrast {
            roi_name: roi,
            mean_percent_change: stats.map(|s| s.0),
            sem: stats.map(|s| s.1),
            n_participants: per_participant.len(),
            voxel_selection: selection,
            voxels_used: used,
            voxels_excluded: excluded,
        });
    }
    Ok(rows)
}

/// Percent change of `a` over `b`, selecting voxels significant in `a`.
pub fn roi_percent_change(
    report_a: &[AlignmentReport],
    report_b: &[AlignmentReport],
    masks: &BTreeMap<String, Vec<RoiMask>>,
    selection: VoxelSelection,
) -> Result<ContrastResult> {
    roi_percent_change_with_reference(report_a, report_b, report_a, masks, selection)
}

/// Per participant and ROI: mean over selected voxels of `100 (a - b) / b` using
/// fold-averaged correlations; then mean and SEM across participants.
pub fn roi_percent_change_with_reference(
    report_a: &[AlignmentReport],
    report_b: &[AlignmentReport],
    reference: &[AlignmentReport],
    masks: &BTreeMap<String, Vec<RoiMask>>,
    selection: VoxelSelection,
) -> Result<ContrastResult> {
    let a = by_participant(report_a, "a")?;
    let b = by_participant(report_b, "b")?;
    let r = by_participant(reference, "reference")?;
    same_participants(&[&a, &b, &r])?;

    let mut participants = Vec::new();
    for (pid, ra) in &a {
        let (rb, rr) = (b[pid], r[pid]);
        same_universe(&[ra, rb, rr])?;
        let bv = rb.by_voxel();
        let pairs = ra
            .voxels
            .iter()
            .map(|v| (v.voxel_id.as_str(), (v.correlation, bv[v.voxel_id.as_str()].correlation)))
            .collect();
        participants.push(ParticipantPairs {
            participant_id: pid,
            pairs,
            selected: selected_voxels(rr, selection),
        });
    }
    let rows = percent_change_table(&participants, masks, selection)?;
    let tag = |reports: &[AlignmentReport]| {
        reports
            .first()
            .map(|r| condition_label(&r.metadata.model_tag, &r.metadata.scramble_tag))
            .unwrap_or_default()
    };
    Ok(ContrastResult {
        label: format!("{} vs {}", tag(report_a), tag(report_b)),
        reference_model_tag: tag(reference),
        rows,
    })
}

pub(crate) fn condition_label(model_tag: &str, scramble_tag: &str) -> String {
    if scramble_tag == "none" || scramble_tag.is_empty() {
        model_tag.to_string()
    } else {
        format!("{model_tag} scrambled({scramble_tag})")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossContrast {
    /// Per participant, per voxel: `(tuned - tuned_scr) - (base - base_scr)`; `None` if any
    /// of the four correlations is undefined.
    pub delta: BTreeMap<String, Vec<(String, Option<f64>)>>,
    /// Percent change of the tuned scrambling gap over the baseline scrambling gap.
    pub summary: ContrastResult,
}

impl CrossContrast {
    pub fn delta_for(&self, participant: &str, voxel: &str) -> Option<f64> {
        self.delta
            .get(participant)?
            .iter()
            .find(|(v, _)| v == voxel)
            .and_then(|(_, d)| *d)
    }

    /// `delta` tensor of participants x voxels, NaN where undefined.
    pub fn to_container(&self) -> Result<Container> {
        let pids: Vec<&String> = self.delta.keys().collect();
        let ids: Vec<&String> = self
            .delta
            .values()
            .next()
            .map(|v| v.iter().map(|(id, _)| id).collect())
            .unwrap_or_default();
        let flat: Vec<f64> = self
            .delta
            .values()
            .flat_map(|row| row.iter().map(|(_, d)| d.unwrap_or(f64::NAN)))
            .collect();
        let mut c = Container::new();
        c.insert("delta", Tensor::f64(vec![pids.len(), ids.len()], flat)?)?;
        c.set_meta("kind", "cross_contrast");
        c.set_meta("participants", serde_json::json!(pids));
        c.set_meta("voxel_ids", serde_json::json!(ids));
        Ok(c)
    }
}

/// `(baseline - baseline scrambled)` vs `(tuned - tuned scrambled)`, voxelwise and per ROI.
pub fn cross_perturbation_contrast(
    r_base: &[AlignmentReport],
    r_base_scr: &[AlignmentReport],
    r_tuned: &[AlignmentReport],
    r_tuned_scr: &[AlignmentReport],
    masks: &BTreeMap<String, Vec<RoiMask>>,
    selection: VoxelSelection,
) -> Result<CrossContrast> {
    let b = by_participant(r_base, "baseline")?;
    let bs = by_participant(r_base_scr, "baseline scrambled")?;
    let t = by_participant(r_tuned, "tuned")?;
    let ts = by_participant(r_tuned_scr, "tuned scrambled")?;
    same_participants(&[&b, &bs, &t, &ts])?;

    let mut delta = BTreeMap::new();
    let mut participants = Vec::new();
    for (pid, rt) in &t {
        let (rb, rbs, rts) = (b[pid], bs[pid], ts[pid]);
        same_universe(&[rt, rb, rbs, rts])?;
        let (bv, bsv, tsv) = (rb.by_voxel(), rbs.by_voxel(), rts.by_voxel());
        let mut map = Vec::with_capacity(rt.voxels.len());
        let mut pairs = BTreeMap::new();
        for v in &rt.voxels {
            let id = v.voxel_id.as_str();
            let tuned_gap = v.correlation.zip(tsv[id].correlation).map(|(x, y)| x - y);
            let base_gap = bv[id].correlation.zip(bsv[id].correlation).map(|(x, y)| x - y);
            map.push((id.to_string(), tuned_gap.zip(base_gap).map(|(x, y)| x - y)));
            pairs.insert(id, (tuned_gap, base_gap));
        }
        delta.insert(pid.to_string(), map);
        participants.push(ParticipantPairs {
            participant_id: pid,
            pairs,
            selected: selected_voxels(rt, selection),
        });
    }
    let rows = percent_change_table(&participants, masks, selection)?;
    let tuned_tag = r_tuned
        .first()
        .map(|r| r.metadata.model_tag.clone())
        .unwrap_or_default();
    let base_tag = r_base
        .first()
        .map(|r| r.metadata.model_tag.clone())
        .unwrap_or_default();
    Ok(CrossContrast {
        delta,
        summary: ContrastResult {
            label: format!("({tuned_tag} - scrambled) vs ({base_tag} - scrambled)"),
            reference_model_tag: tuned_tag,
            rows,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMeanRow {
    pub roi_name: String,
    pub mean_correlation: Option<f64>,
    pub sem: Option<f64>,
    pub n_participants: usize,
}

/// ROI-average correlation over each model's own significant voxels (or all voxels), then
/// mean and SEM across participants.
pub fn roi_mean_correlation(
    reports: &[AlignmentReport],
    masks: &BTreeMap<String, Vec<RoiMask>>,
    selection: VoxelSelection,
) -> Result<Vec<RoiMeanRow>> {
    let by = by_participant(reports, "reports")?;
    let mut rows = Vec::new();
    for roi in roi_names(masks) {
        let mut means = Vec::new();
        for (pid, report) in &by {
            let Some(mask) = masks.get(*pid).and_then(|s| s.iter().find(|m| m.name == roi)) else {
                continue;
            };
            let vals: Vec<f64> = report
                .voxels
                .iter()
                .filter(|v| mask.voxel_ids.contains(&v.voxel_id))
                .filter(|v| selection == VoxelSelection::All || v.significant)
                .filter_map(|v| v.correlation)
                .collect();
            if !vals.is_empty() {
                means.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        let stats = mean_sem(&means);
        rows.push(RoiMeanRow {
            roi_name: roi,
            mean_correlation: stats.map(|s| s.0),
            sem: stats.map(|s| s.1),
            n_participants: means.len(),
        });
    }
    Ok(rows)
}
