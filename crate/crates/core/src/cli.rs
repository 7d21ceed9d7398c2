//! The `uvcg` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
//! error, 5 sidecar error. `--epsilon` and `--alpha` are given in 8-bit
//! units (`15` means 15/255).

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advisor::{self, DEFAULT_PROXIMITY_WEIGHT, DEFAULT_SIMPLICITY_WEIGHT};
use crate::artifacts::{self, ProtectionReport};
use crate::encoder::{
    build_encoder, finite_difference_gradient, max_relative_error, EncoderKind, EncoderSpec, ReferenceEncoder,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, Embedder, ReferenceEmbedder, SidecarEmbedder};
use crate::media::{dequantize, load_clip, quantize, save_clip, FrameImage};
use crate::protect::{protect_video, random_noise_baseline, IterateSelection, ProtectionConfig};

/// Overrides the command of `--encoder sidecar:<cmd>` and `--embedder sidecar:<cmd>`.
pub const SIDECAR_ENV: &str = "UVCG_SIDECAR_CMD";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_SIDECAR: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "uvcg", version, about = "Immunize videos against latent-diffusion editing")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align each frame's latent with a target clip under an l-inf budget.
    Protect(ProtectArgs),
    /// Add uniform random noise at the same budget.
    Baseline(BaselineArgs),
    /// Score a clip against a reference clip.
    Evaluate(EvaluateArgs),
    /// Rank candidate target clips.
    SelectTarget(SelectArgs),
    /// Check encoder gradients, or audit the budget of a protected clip.
    EncodeCheck(CheckArgs),
}

#[derive(Debug, Args)]
struct EncoderArgs {
    /// `reference`, `identity` or `sidecar:<command>`.
    #[arg(long, default_value = "reference")]
    encoder: String,

    /// Reference-encoder weight seed; defaults to `--seed`.
    #[arg(long)]
    encoder_seed: Option<u64>,

    #[arg(long, default_value_t = 8)]
    downsample_factor: usize,

    #[arg(long, default_value_t = 4)]
    latent_channels: usize,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    /// l-inf budget in 8-bit units.
    #[arg(long, default_value_t = 15.0)]
    epsilon: f32,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ProtectArgs {
    /// Clip directory; repeat to protect several clips.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,

    #[arg(long)]
    target: PathBuf,

    /// Output directory. With several inputs each clip goes to `<out>/<name>`.
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    budget: BudgetArgs,

    /// Step size in 8-bit units.
    #[arg(long, default_value_t = 2.0)]
    alpha: f32,

    #[arg(long, default_value_t = 200)]
    steps: usize,

    /// Start every frame from fresh noise.
    #[arg(long)]
    no_warm_start: bool,

    /// Keep the last PGD iterate instead of the lowest-loss one.
    #[arg(long)]
    last_iterate: bool,

    #[command(flatten)]
    encoder: EncoderArgs,

    /// Clips protected concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    /// Write wall-clock seconds per clip to this JSON file.
    #[arg(long)]
    timing_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,

    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Reference (usually original) clip.
    #[arg(long)]
    a: PathBuf,

    /// Clip under test.
    #[arg(long)]
    b: PathBuf,

    /// `reference` or `sidecar:<command>`.
    #[arg(long, default_value = "reference")]
    embedder: String,

    /// Reference-embedder weight seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    prompt: Option<String>,

    #[arg(long, default_value = "report.json")]
    out: PathBuf,

    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    input: PathBuf,

    #[arg(long = "candidate", required = true)]
    candidates: Vec<PathBuf>,

    #[arg(long, default_value_t = DEFAULT_PROXIMITY_WEIGHT)]
    w1: f64,

    #[arg(long, default_value_t = DEFAULT_SIMPLICITY_WEIGHT)]
    w2: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    encoder: EncoderArgs,

    /// Write the ranking as JSON here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Protected clip directory to audit instead of running a gradient check.
    #[arg(long)]
    audit: Option<PathBuf>,

    /// Original clip, to also audit the quantized frames.
    #[arg(long, requires = "audit")]
    original: Option<PathBuf>,

    /// Budget in 8-bit units; defaults to the one recorded with the perturbations.
    #[arg(long)]
    epsilon: Option<f32>,

    #[command(flatten)]
    encoder: EncoderArgs,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Random frames in the gradient check.
    #[arg(long, default_value_t = 10)]
    frames: usize,

    /// Side length of the gradient-check frames.
    #[arg(long, default_value_t = 8)]
    size: usize,

    #[arg(long, default_value_t = 1e-4)]
    step: f64,

    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,

    /// Write the result JSON here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors that come from the invocation itself rather than from the data.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Capability(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Sidecar { .. } => EXIT_SIDECAR,
        Error::Format(_) | Error::Integrity(_) | Error::Io { .. } | Error::Config(_) | Error::Schema(_) => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let outcome = match cli.command {
        Command::Protect(a) => cmd_protect(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SelectTarget(a) => cmd_select_target(a),
        Command::EncodeCheck(a) => cmd_encode_check(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn sidecar_command(flag: &str) -> Option<String> {
    let rest = flag.strip_prefix("sidecar")?;
    let inline = rest.strip_prefix(':').map(str::to_string);
    if !rest.is_empty() && inline.is_none() {
        return None;
    }
    match std::env::var(SIDECAR_ENV) {
        Ok(cmd) if !cmd.trim().is_empty() => Some(cmd),
        _ => inline.filter(|c| !c.trim().is_empty()),
    }
}

fn encoder_spec(args: &EncoderArgs, seed: u64) -> std::result::Result<EncoderSpec, Usage> {
    match args.encoder.as_str() {
        "reference" => Ok(EncoderSpec {
            kind: EncoderKind::Reference,
            seed: args.encoder_seed.unwrap_or(seed),
            downsample_factor: args.downsample_factor,
            latent_channels: args.latent_channels,
            sidecar_command: None,
        }),
        "identity" => Ok(EncoderSpec::identity()),
        other => match sidecar_command(other) {
            Some(cmd) => Ok(EncoderSpec::sidecar(cmd)),
            None if other.starts_with("sidecar") => Err(Usage(format!(
                "--encoder {other:?} needs a command: sidecar:<command> or {SIDECAR_ENV}"
            ))),
            None => Err(Usage(format!(
                "unknown encoder {other:?}; expected reference, identity or sidecar:<command>"
            ))),
        },
    }
}

fn budget(epsilon: f32) -> std::result::Result<f32, Usage> {
    if !(epsilon > 0.0 && epsilon <= 255.0) {
        return Err(Usage(format!("--epsilon must be in (0, 255], got {epsilon}")));
    }
    Ok(epsilon / 255.0)
}

fn validated(config: ProtectionConfig) -> std::result::Result<ProtectionConfig, Usage> {
    config.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(config)
}

fn write_json_stdout<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("results serialize");
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn path_label(path: &Path) -> String {
    path.display().to_string()
}

#[derive(Serialize)]
struct Timing {
    clip: String,
    wall_clock_seconds: f64,
}

fn cmd_protect(args: ProtectArgs) -> std::result::Result<i32, Failure> {
    let config = validated(ProtectionConfig {
        epsilon: budget(args.budget.epsilon)?,
        alpha: args.alpha / 255.0,
        steps: args.steps,
        warm_start: !args.no_warm_start,
        seed: args.budget.seed,
        pixel_min: 0.0,
        pixel_max: 1.0,
        iterate: if args.last_iterate {
            IterateSelection::Last
        } else {
            IterateSelection::Best
        },
    })?;
    let spec = encoder_spec(&args.encoder, args.budget.seed)?;
    if args.jobs == 0 {
        return Err(Usage("--jobs must be >= 1".into()).into());
    }

    let outputs: Vec<PathBuf> = if args.input.len() == 1 {
        vec![args.out.clone()]
    } else {
        let mut seen = BTreeSet::new();
        let mut outs = Vec::new();
        for input in &args.input {
            let name = input
                .file_name()
                .ok_or_else(|| Usage(format!("cannot name the output for {}", input.display())))?;
            if !seen.insert(name.to_owned()) {
                return Err(Usage(format!("two inputs are named {name:?}")).into());
            }
            outs.push(args.out.join(name));
        }
        outs
    };

    let target = load_clip(&args.target)?;
    let jobs: Vec<(&PathBuf, &PathBuf)> = args.input.iter().zip(&outputs).collect();
    let protect_one = |input: &PathBuf, out: &PathBuf| -> Result<Timing> {
        let clip = load_clip(input)?;
        // Each job owns its encoder; sidecars are one process per job.
        let encoder = build_encoder(&spec)?;
        info!("protecting {} ({} frames)", input.display(), clip.len());
        let result = protect_video(&clip, &target, encoder.as_ref(), &config)?;
        save_clip(&result.immunized, out)?;
        artifacts::write_perturbations(&result.perturbations, out)?;
        let report = ProtectionReport::new(
            "uvcg",
            &path_label(input),
            Some(&path_label(&args.target)),
            Some(&spec),
            &config,
            &result,
        );
        artifacts::write_protection_report(&report, out)?;
        eprintln!(
            "{}: {} frames in {:.2} s",
            input.display(),
            clip.len(),
            result.wall_clock_seconds
        );
        for f in &result.failures {
            eprintln!("warning: frame {} was left unprotected: {}", f.frame, f.reason);
        }
        Ok(Timing {
            clip: path_label(input),
            wall_clock_seconds: result.wall_clock_seconds,
        })
    };

    let results: Vec<Result<Timing>> = if args.jobs == 1 || jobs.len() == 1 {
        jobs.iter().map(|(i, o)| protect_one(i, o)).collect()
    } else {
        let workers = args.jobs.min(jobs.len());
        let mut slots: Vec<Option<Result<Timing>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    let protect_one = &protect_one;
                    s.spawn(move || {
                        (w..jobs.len())
                            .step_by(workers)
                            .map(|k| (k, protect_one(jobs[k].0, jobs[k].1)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (k, r) in h.join().expect("protect worker panicked") {
                    slots[k] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    };

    let mut timings = Vec::new();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(t) => timings.push(t),
            Err(e) => {
                eprintln!("error: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(path) = &args.timing_file {
        artifacts::write_json(path, &timings)?;
    }
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(EXIT_OK),
    }
}

fn cmd_baseline(args: BaselineArgs) -> std::result::Result<i32, Failure> {
    let epsilon = budget(args.budget.epsilon)?;
    let config = validated(ProtectionConfig {
        epsilon,
        alpha: epsilon,
        seed: args.budget.seed,
        ..ProtectionConfig::default()
    })?;
    let clip = load_clip(&args.input)?;
    let result = random_noise_baseline(&clip, &config)?;
    save_clip(&result.immunized, &args.out)?;
    artifacts::write_perturbations(&result.perturbations, &args.out)?;
    let report = ProtectionReport::new("random_noise", &path_label(&args.input), None, None, &config, &result);
    artifacts::write_protection_report(&report, &args.out)?;
    Ok(EXIT_OK)
}

fn embedder(flag: &str, seed: u64) -> std::result::Result<Box<dyn Embedder>, Failure> {
    if flag == "reference" {
        return Ok(Box::new(ReferenceEmbedder::new(ReferenceEncoder::new(seed, 8, 4)?)));
    }
    match sidecar_command(flag) {
        Some(cmd) => Ok(Box::new(SidecarEmbedder::launch(&cmd)?)),
        None => Err(Usage(format!(
            "unknown embedder {flag:?}; expected reference or sidecar:<command>"
        ))
        .into()),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> std::result::Result<i32, Failure> {
    let embedder = embedder(&args.embedder, args.seed)?;
    if let Some(prompt) = &args.prompt {
        // Fail on a text-less embedder before any frame work.
        embedder.embed_text(prompt)?;
    }
    let a = load_clip(&args.a)?;
    let b = load_clip(&args.b)?;
    let meta = serde_json::json!({
        "a": a.name(),
        "b": b.name(),
        "embedder": embedder.name(),
        "prompt": args.prompt,
    });
    let report = evaluation::evaluate(&a, &b, embedder.as_ref(), args.prompt.as_deref(), meta)?;
    evaluation::emit_report(&report, &args.out, args.csv.as_deref())?;
    print!("{}", report.csv());
    Ok(EXIT_OK)
}

fn cmd_select_target(args: SelectArgs) -> std::result::Result<i32, Failure> {
    let spec = encoder_spec(&args.encoder, args.seed)?;
    let protected = load_clip(&args.input)?;
    let candidates = args
        .candidates
        .iter()
        .map(|p| load_clip(p))
        .collect::<Result<Vec<_>>>()?;
    let encoder = build_encoder(&spec)?;
    let ranking = advisor::rank_targets(&protected, &candidates, encoder.as_ref(), args.w1, args.w2)?;
    for (rank, s) in ranking.iter().enumerate() {
        eprintln!(
            "{:>3}. {:<24} combined {:.6}  proximity {:.6}  simplicity {:.6}",
            rank + 1,
            s.candidate_name,
            s.combined,
            s.proximity,
            s.simplicity
        );
    }
    write_json_stdout(&ranking, args.out.as_deref())?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct GradientCheck {
    encoder: EncoderSpec,
    frames: usize,
    size: usize,
    step: f64,
    tolerance: f64,
    max_relative_error: f64,
    per_frame: Vec<f64>,
    pass: bool,
}

#[derive(Serialize)]
struct BudgetAudit {
    clip: String,
    epsilon: f32,
    frames: usize,
    max_abs_delta: f32,
    /// Largest `|protected - original|` in 8-bit steps, when an original is given.
    max_pixel_change_8bit: Option<u8>,
    pass: bool,
}

fn cmd_encode_check(args: CheckArgs) -> std::result::Result<i32, Failure> {
    match &args.audit {
        Some(dir) => audit(dir, &args),
        None => gradient_check(&args),
    }
}

fn gradient_check(args: &CheckArgs) -> std::result::Result<i32, Failure> {
    if args.frames == 0 || args.size == 0 {
        return Err(Usage("--frames and --size must be >= 1".into()).into());
    }
    let spec = encoder_spec(&args.encoder, args.seed)?;
    let encoder = build_encoder(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut per_frame = Vec::with_capacity(args.frames);
    for _ in 0..args.frames {
        let frame = FrameImage::from_fn(args.size, args.size, |_, _, _| rng.gen());
        let other = FrameImage::from_fn(args.size, args.size, |_, _, _| rng.gen());
        let target = encoder.encode(&other)?;
        let delta = vec![0.0; frame.len()];
        let analytic = encoder.loss_gradient(&frame, &delta, &target)?;
        let numeric = finite_difference_gradient(encoder.as_ref(), &frame, &delta, &target, args.step)?;
        per_frame.push(max_relative_error(&analytic.grad, &numeric));
    }
    let worst = per_frame.iter().copied().fold(0.0, f64::max);
    let result = GradientCheck {
        encoder: spec,
        frames: args.frames,
        size: args.size,
        step: args.step,
        tolerance: args.tolerance,
        max_relative_error: worst,
        per_frame,
        pass: worst < args.tolerance,
    };
    write_json_stdout(&result, args.out.as_deref())?;
    if result.pass {
        Ok(EXIT_OK)
    } else {
        Err(Error::Numerical(format!(
            "gradient relative error {worst:e} exceeds {:e}",
            args.tolerance
        ))
        .into())
    }
}

fn audit(dir: &Path, args: &CheckArgs) -> std::result::Result<i32, Failure> {
    let field = artifacts::read_perturbations(dir)?;
    let epsilon = match args.epsilon {
        Some(e) => budget(e)?,
        None => field.epsilon,
    };
    let protected = load_clip(dir)?;
    if field.len() != protected.len() || field.width != protected.width() || field.height != protected.height() {
        return Err(Error::Integrity("perturbations do not match the protected frames".into()).into());
    }
    let max_abs_delta = field.max_abs();
    let mut pass = max_abs_delta <= epsilon;

    let max_pixel_change_8bit = match &args.original {
        Some(path) => {
            let original = load_clip(path)?;
            if original.len() != protected.len() || !original.same_resolution(&protected) {
                return Err(Error::Integrity("original and protected clips differ in shape".into()).into());
            }
            let worst = original
                .frames()
                .iter()
                .zip(protected.frames())
                .flat_map(|(a, b)| a.pixels().iter().zip(b.pixels()))
                .map(|(x, y)| quantize(*x).abs_diff(quantize(*y)))
                .max()
                .unwrap_or(0);
            // Rounding each side to 8 bits can add at most one step.
            pass &= dequantize(worst) <= epsilon + 1.0 / 255.0 + f32::EPSILON;
            Some(worst)
        }
        None => None,
    };
    let result = BudgetAudit {
        clip: path_label(dir),
        epsilon,
        frames: field.len(),
        max_abs_delta,
        max_pixel_change_8bit,
        pass,
    };
    write_json_stdout(&result, args.out.as_deref())?;
    if pass {
        Ok(EXIT_OK)
    } else {
        Err(Error::Integrity(format!(
            "perturbation exceeds the budget: max |delta| = {max_abs_delta} > {epsilon}"
        ))
        .into())
    }
}
