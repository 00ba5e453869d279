//! The `selfcal` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure. Diagnostics go to stderr.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::geometry::NormalizedMatch;
use crate::io::{
    format_trace, read_json, read_matches, write_json, write_matches, write_text, CalibrationReport,
    EvaluationReport, ExtrinsicDocument, IntrinsicsDocument, TruthDocument,
};
use crate::optimizer::{rms_pixel_distance, CalibrationContext};
use crate::pipeline::{PipelineConfig, Session};
use crate::simulator::{group_frames, perturbed_prior, simulate, GroundTruth, SceneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Rotation offset per axis (degrees) of the prior written by `simulate`.
pub const SIMULATED_PRIOR_ROTATION_DEG: f64 = 3.0;
/// Translation-direction offset (degrees) of the prior written by `simulate`.
pub const SIMULATED_PRIOR_TRANSLATION_DEG: f64 = 2.0;

#[derive(Debug, Parser)]
#[command(name = "selfcal", version, about = "Markerless stereo extrinsic self-calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Scene configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Calibrate from matches and a prior extrinsic.
    Calibrate {
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        /// Pipeline configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-frame CSV trace of the estimate and lambda_max.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// RMS pixel epipolar distance of matches under an extrinsic.
    Evaluate {
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long, alias = "prior")]
        extrinsic: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in numerical oracles.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Simulate { out, config, seed } => cmd_simulate(&out, config.as_deref(), seed),
        Command::Calibrate {
            intrinsics,
            matches,
            prior,
            config,
            out,
            seed,
            trace,
        } => cmd_calibrate(
            &intrinsics,
            &matches,
            &prior,
            config.as_deref(),
            out.as_deref(),
            seed,
            trace.as_deref(),
        ),
        Command::Evaluate {
            intrinsics,
            matches,
            extrinsic,
            out,
        } => cmd_evaluate(&intrinsics, &matches, &extrinsic, out.as_deref()),
        Command::Selfcheck { seed } => cmd_selfcheck(seed),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::DegenerateGeometry { .. } | Error::StepTooLarge => EXIT_NUMERICAL,
        Error::InvalidInput(_)
        | Error::InsufficientData { .. }
        | Error::Config(_)
        | Error::Data { .. }
        | Error::Io { .. } => EXIT_DATA,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn cmd_simulate(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<i32> {
    let mut scene: SceneConfig = match config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    if let Some(s) = seed {
        scene.seed = s;
    }
    let truth = GroundTruth::default_rig();
    let data = simulate(&scene, &truth)?;
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    let prior = perturbed_prior(
        &truth.extrinsic,
        SIMULATED_PRIOR_ROTATION_DEG,
        SIMULATED_PRIOR_TRANSLATION_DEG,
    )?;
    write_json(
        &out.join("intrinsics.json"),
        &IntrinsicsDocument {
            left: truth.intrinsics_left,
            right: truth.intrinsics_right,
        },
    )?;
    write_matches(&out.join("matches.csv"), &data.matches)?;
    write_json(
        &out.join("truth.json"),
        &TruthDocument {
            extrinsic: ExtrinsicDocument::from_estimate(&truth.extrinsic),
            outlier_rows: data
                .truth
                .outlier_labels
                .iter()
                .enumerate()
                .filter_map(|(i, &o)| o.then_some(i))
                .collect(),
        },
    )?;
    write_json(&out.join("prior.json"), &ExtrinsicDocument::from_estimate(&prior))?;
    write_json(&out.join("scene.json"), &scene)?;
    eprintln!("wrote {} matches in {} frames to {}", data.matches.len(), scene.frames, out.display());
    Ok(EXIT_OK)
}

fn load_context(intrinsics: &Path, sigma_px: f64) -> Result<CalibrationContext> {
    let doc: IntrinsicsDocument = read_json(intrinsics)?;
    doc.validate()?;
    CalibrationContext::new(doc.left, doc.right, sigma_px)
}

fn cmd_calibrate(
    intrinsics: &Path,
    matches: &Path,
    prior: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    trace: Option<&Path>,
) -> Result<i32> {
    let mut cfg: PipelineConfig = match config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.rejection.seed = s;
    }
    cfg.validate()?;
    let ctx = load_context(intrinsics, cfg.sigma_px)?;
    let prior_doc: ExtrinsicDocument = read_json(prior)?;
    let prior = prior_doc.to_estimate(&prior.display().to_string())?;
    let all = read_matches(matches)?;

    let mut session = Session::new(prior, ctx.left, ctx.right, cfg)?;
    for frame in group_frames(&all) {
        session.process_frame(&frame);
    }
    let state = &session.state;
    for d in &state.diagnostics {
        if let Some(e) = &d.error {
            eprintln!("frame {}: {e}", d.frame_index);
        }
    }
    if let Some(path) = trace {
        write_text(path, &format_trace(&state.diagnostics))?;
    }
    let Some(result) = &state.last_optimization else {
        let degenerate = state.diagnostics.iter().any(|d| d.optimized);
        return Err(if degenerate {
            Error::degenerate("no optimization pass succeeded")
        } else {
            Error::InsufficientData {
                required: cfg.optimizer.min_matches,
                got: state.buffer.total_count,
            }
        });
    };
    let buffered: Vec<NormalizedMatch> = state.buffer.matches();
    let report = CalibrationReport::new(
        &state.estimate,
        &state.covariance,
        result.iterations,
        result.converged,
        state.terminated,
        state.frames_processed,
        buffered.len(),
        rms_pixel_distance(&state.estimate, &buffered, &ctx),
        state.counts,
        cfg,
    );
    emit(out, &to_json(&report)?)?;
    Ok(EXIT_OK)
}

fn cmd_evaluate(intrinsics: &Path, matches: &Path, extrinsic: &Path, out: Option<&Path>) -> Result<i32> {
    let ctx = load_context(intrinsics, 0.0)?;
    let doc: ExtrinsicDocument = read_json(extrinsic)?;
    let ext = doc.to_estimate(&extrinsic.display().to_string())?;
    let all = read_matches(matches)?;
    let normalized = all
        .iter()
        .map(|m| NormalizedMatch::from_pixels(&ctx.left, &ctx.right, *m))
        .collect::<Result<Vec<_>>>()?;
    let report = EvaluationReport {
        matches: normalized.len(),
        rms_epipolar_px: rms_pixel_distance(&ext, &normalized, &ctx),
    };
    emit(out, &to_json(&report)?)?;
    Ok(EXIT_OK)
}

fn cmd_selfcheck(seed: u64) -> Result<i32> {
    let results = crate::selfcheck::run_all(seed);
    let mut all = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        all &= r.passed;
    }
    Ok(if all { EXIT_OK } else { EXIT_NUMERICAL })
}
