//! `encodekit` command-line interface.
//!
//! Exit codes: 0 success, 2 validation error, 3 stage failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use encodekit::container::write_container;
use encodekit::encoder::SearchSpace;
use encodekit::featurize::{featurize, DEFAULT_LAGS};
use encodekit::lmtasks::{apply_plan_to_text, make_scramble_plan, perplexity, ScramblePlan, DEFAULT_WINDOW};
use encodekit::pipeline::{
    load_fold_correlations, run_pipeline_until, ErrorReport, RunManifest, RunSummary, StopAfter,
};
use encodekit::stats::{
    cross_perturbation_contrast, roi_percent_change_with_reference, voxel_significance, VoxelSelection,
};
use encodekit::synth::{generate, SynthSpec};
use encodekit::types::{load_masks, AlignmentReport, EmbeddingTrack, RoiMask, StimulusTimeline};

#[derive(Parser)]
#[command(name = "encodekit", version, about = "Voxelwise encoding models of language-model features")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic datasets with known ground truth.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Lagged design matrix from a timeline and an embedding track.
    Featurize(FeaturizeArgs),
    /// Featurize and fit every fold of every condition in a manifest.
    Train(PipelineArgs),
    /// Train, then heldout correlations and voxel significance.
    Eval(PipelineArgs),
    /// Statistics on existing reports.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Language-model tasks: perplexity and scramble plans.
    #[command(subcommand)]
    Lm(LmCmd),
    /// Contrasts, tables and figures (runs any stage still pending).
    Report(PipelineArgs),
    /// Every stage of a manifest.
    Run(PipelineArgs),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Writes a synthetic dataset and a matching `run.json` manifest.
    Gen {
        /// SynthSpec JSON; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Search trials written into the manifest.
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    timeline: PathBuf,
    #[arg(long)]
    track: PathBuf,
    /// Comma-separated TR lags.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAGS.to_vec())]
    lags: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the manifest's random-search trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Overrides the manifest's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Per-voxel t-tests with BH correction from a `fold_correlations.ekc`.
    Significance {
        #[arg(long)]
        correlations: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// ROI percent change of condition A over condition B.
    Contrast {
        /// Condition directory holding `<participant>/report.json`.
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Condition whose significant voxels are used (default: A).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        masks: MaskArgs,
        /// CSV table, one row per ROI.
        #[arg(long)]
        out: PathBuf,
    },
    /// (tuned - tuned scrambled) vs (baseline - baseline scrambled).
    CrossContrast {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        baseline_scrambled: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long)]
        tuned_scrambled: PathBuf,
        #[command(flatten)]
        masks: MaskArgs,
        /// CSV table; the voxelwise map is written next to it with an `.ekc` extension.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MaskArgs {
    /// Mask JSON, either `PATH` for every participant or `PARTICIPANT=PATH`.
    #[arg(long = "masks", required = true)]
    masks: Vec<String>,
    /// `significant_by_reference` or `all`.
    #[arg(long, default_value = "significant_by_reference")]
    selection: VoxelSelection,
}

#[derive(Subcommand)]
enum LmCmd {
    /// Perplexity of a track's log-probabilities.
    Perplexity {
        #[arg(long)]
        track: PathBuf,
    },
    /// Window-local word permutations.
    ScramblePlan {
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scrambled transcript, one run per line.
    ApplyPlan {
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let mut error_dir = None;
    match dispatch(cli.command, &mut error_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if let Some(dir) = error_dir {
                write_error_report(&dir, &e);
            }
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<encodekit::Error>() {
        Some(err) if !err.is_validation() => 3,
        _ => 2,
    }
}

fn write_error_report(dir: &Path, e: &anyhow::Error) {
    let report = match e.downcast_ref::<encodekit::Error>() {
        Some(err) => ErrorReport::from_error(err),
        None => ErrorReport {
            kind: "usage".into(),
            validation: true,
            message: format!("{e:#}"),
        },
    };
    let path = dir.join("error.json");
    let written = std::fs::create_dir_all(dir)
        .map_err(anyhow::Error::from)
        .and_then(|()| Ok(std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?));
    if let Err(w) = written {
        eprintln!("could not write {}: {w}", path.display());
    }
}

fn dispatch(command: Command, error_dir: &mut Option<PathBuf>) -> anyhow::Result<()> {
    match command {
        Command::Synth(SynthCmd::Gen {
            spec,
            out,
            seed,
            trials,
        }) => synth_gen(spec.as_deref(), &out, seed, trials),
        Command::Featurize(a) => {
            let timeline = StimulusTimeline::load(&a.timeline)?;
            let track = EmbeddingTrack::load(&a.track)?;
            let design = featurize(&track, &timeline, &a.lags)?;
            design.save(&a.out)?;
            info!("{} rows x {} features -> {}", design.x().nrows(), design.features(), a.out.display());
            Ok(())
        }
        Command::Train(a) => pipeline(a, StopAfter::Train, error_dir),
        Command::Eval(a) => pipeline(a, StopAfter::Evaluate, error_dir),
        Command::Report(a) | Command::Run(a) => pipeline(a, StopAfter::All, error_dir),
        Command::Stats(cmd) => stats(cmd),
        Command::Lm(cmd) => lm(cmd),
    }
}

fn synth_gen(spec: Option<&Path>, out: &Path, seed: Option<u64>, trials: Option<usize>) -> anyhow::Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;
    let files = data.write(out)?;
    let mut search = SearchSpace::default();
    if let Some(t) = trials {
        search.trials = t;
    }
    let manifest = RunManifest::for_synth(&files, spec.lags.clone(), search, spec.seed);
    manifest.save(out.join("run.json"))?;
    info!(
        "{} participants x {} runs, {} voxels, mean noise ceiling {:.4} -> {}",
        spec.participants,
        spec.runs,
        spec.voxels,
        data.truth.mean_ceiling(),
        out.display()
    );
    Ok(())
}

fn pipeline(a: PipelineArgs, stop: StopAfter, error_dir: &mut Option<PathBuf>) -> anyhow::Result<()> {
    let (mut m, base) = RunManifest::load(&a.manifest)?;
    if let Some(s) = a.seed {
        m.seed = s;
    }
    if let Some(t) = a.trials {
        m.search.trials = t;
    }
    if let Some(o) = a.out {
        m.output_dir = o;
    }
    *error_dir = Some(base.join(&m.output_dir));
    let summary = run_pipeline_until(&m, &base, stop)?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(s: &RunSummary) {
    println!(
        "stages executed {} skipped {}; {} final models -> {}",
        s.executed_stages,
        s.skipped_stages,
        s.final_models,
        s.output_dir.display()
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for c in &s.conditions {
        println!(
            "{}__{}: perplexity {} mean r {} significant voxels {}",
            c.model_tag,
            c.scramble_tag,
            fmt(c.perplexity),
            fmt(c.mean_correlation),
            c.significant_voxels
        );
    }
    if let Some(ceiling) = s.mean_noise_ceiling {
        println!("mean noise ceiling {ceiling:.4}");
    }
}

/// Every `<participant>/report.json` under a condition directory, sorted by participant.
fn load_condition_reports(dir: &Path) -> anyhow::Result<Vec<AlignmentReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no <participant>/report.json under {}", dir.display());
    }
    Ok(paths.iter().map(AlignmentReport::load).collect::<Result<_, _>>()?)
}

fn load_mask_args(args: &MaskArgs, participants: &[&str]) -> anyhow::Result<BTreeMap<String, Vec<RoiMask>>> {
    let mut out = BTreeMap::new();
    for spec in &args.masks {
        match spec.split_once('=') {
            Some((pid, path)) => {
                out.insert(pid.to_string(), load_masks(path)?);
            }
            None => {
                let masks = load_masks(spec)?;
                for pid in participants {
                    out.entry(pid.to_string()).or_insert_with(|| masks.clone());
                }
            }
        }
    }
    Ok(out)
}

fn participants(reports: &[AlignmentReport]) -> Vec<&str> {
    reports.iter().map(|r| r.metadata.participant_id.as_str()).collect()
}

fn stats(cmd: StatsCmd) -> anyhow::Result<()> {
    match cmd {
        StatsCmd::Significance {
            correlations,
            alpha,
            out,
        } => {
            let (fc, labels) = load_fold_correlations(&correlations)?;
            let report = voxel_significance(&fc, alpha, &labels)?;
            report.save(&out)?;
            println!(
                "{} of {} voxels significant (BH threshold {:.3e})",
                report.significant_count(),
                report.voxels.len(),
                report.metadata.bh_threshold
            );
        }
        StatsCmd::Contrast {
            a,
            b,
            reference,
            masks,
            out,
        } => {
            let ra = load_condition_reports(&a)?;
            let rb = load_condition_reports(&b)?;
            let rr = match &reference {
                Some(r) => load_condition_reports(r)?,
                None => ra.clone(),
            };
            let m = load_mask_args(&masks, &participants(&ra))?;
            let res = roi_percent_change_with_reference(&ra, &rb, &rr, &m, masks.selection)?;
            write_text(&out, &res.to_csv())?;
            print!("{}", res.to_csv());
        }
        StatsCmd::CrossContrast {
            baseline,
            baseline_scrambled,
            tuned,
            tuned_scrambled,
            masks,
            out,
        } => {
            let rb = load_condition_reports(&baseline)?;
            let rbs = load_condition_reports(&baseline_scrambled)?;
            let rt = load_condition_reports(&tuned)?;
            let rts = load_condition_reports(&tuned_scrambled)?;
            let m = load_mask_args(&masks, &participants(&rt))?;
            let cc = cross_perturbation_contrast(&rb, &rbs, &rt, &rts, &m, masks.selection)?;
            write_text(&out, &cc.summary.to_csv())?;
            write_container(&cc.to_container()?, out.with_extension("ekc")).map_err(encodekit::Error::from)?;
            print!("{}", cc.summary.to_csv());
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn lm(cmd: LmCmd) -> anyhow::Result<()> {
    match cmd {
        LmCmd::Perplexity { track } => {
            let t = EmbeddingTrack::load(&track)?;
            let ppl = perplexity(t.log_probs())?;
            println!("{ppl}");
        }
        LmCmd::ScramblePlan {
            timeline,
            seed,
            window,
            out,
        } => {
            let tl = StimulusTimeline::load(&timeline)?;
            let plan = make_scramble_plan(&tl, window, seed)?;
            plan.save(&out)?;
            info!("plan {} with {} windows -> {}", plan.id(), plan.windows.len(), out.display());
        }
        LmCmd::ApplyPlan { timeline, plan, out } => {
            let tl = StimulusTimeline::load(&timeline)?;
            let plan = ScramblePlan::load(&plan)?;
            let words = apply_plan_to_text(&tl, &plan)?;
            let text: String = tl
                .run_word_ranges()
                .into_iter()
                .map(|r| words[r].join(" ") + "\n")
                .collect();
            write_text(&out, &text)?;
        }
    }
    Ok(())
}
