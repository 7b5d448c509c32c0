//! `depthdeblur` command-line front end: synthesize benchmark bundles,
//! deblur them, evaluate results and render sharp frame sequences.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use depthdeblur::io::{self, Bundle, Manifest, SceneSource, Status};
use depthdeblur::metrics::{mean_endpoint_error, EvalReport};
use depthdeblur::pipeline::{deblur, render_frames};
use depthdeblur::synth::{procedural_instance, sample_motion, synthesize, DEFAULT_NOISE_SIGMA};
use depthdeblur::{EnergyParams, Error, Intrinsics};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "DEPTHDEBLUR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "depthdeblur", version, about = "Depth-aware single-image motion deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a blurry benchmark bundle from a clean image and depth.
    Synth(SynthArgs),
    /// Estimate camera motion and the sharp image of a bundle.
    Deblur(DeblurArgs),
    /// Score a deblur result against the bundle's ground truth.
    Eval(EvalArgs),
    /// Render the sharp frame sequence along the estimated motion.
    RenderSeq(RenderArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Use the seeded procedural scene on a slanted plane.
    #[arg(long, conflicts_with_all = ["clean", "depth", "manifest"])]
    procedural: bool,
    /// Side length of the procedural scene.
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, requires = "depth")]
    clean: Option<PathBuf>,
    #[arg(long, requires = "clean")]
    depth: Option<PathBuf>,
    /// Intrinsics TOML; defaults to focal length = width, centred.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Regenerate the bundle described by an existing manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    sigma_a: f64,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    sigma_t: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA, allow_negative_numbers = true)]
    noise_sigma: f64,
    /// Half sample count of the exposure.
    #[arg(long = "samples", default_value_t = 10)]
    half_samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DeblurArgs {
    /// Bundle directory.
    #[arg(long, required_unless_present_any = ["glob", "image"])]
    bundle: Option<PathBuf>,
    /// Process every bundle directory matching a pattern.
    #[arg(long, conflicts_with_all = ["bundle", "image"])]
    glob: Option<String>,
    /// Blurry PNG outside a bundle.
    #[arg(long, requires_all = ["depth", "intrinsics"], conflicts_with = "bundle")]
    image: Option<PathBuf>,
    /// Depth PFM for `--image`.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Intrinsics TOML for `--image`.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Output directory; defaults to `<bundle>/result`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    params: ParamArgs,
}

/// Solver settings; flags override the configuration file, which
/// overrides the defaults.
#[derive(Debug, Args)]
struct ParamArgs {
    /// TOML file with energy parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pyramid levels.
    #[arg(long)]
    levels: Option<usize>,
    /// Pose/latent alternations per level.
    #[arg(long)]
    alternations: Option<usize>,
    /// Number of initial pose candidates.
    #[arg(long)]
    starts: Option<usize>,
    /// Half sample count N of the exposure (2N + 1 warps).
    #[arg(long = "samples")]
    half_samples: Option<usize>,
    /// Motion reward weight (negative).
    #[arg(long, allow_negative_numbers = true)]
    mu1: Option<f64>,
    /// Total-variation weight.
    #[arg(long)]
    mu4: Option<f64>,
}

impl ParamArgs {
    fn resolve(&self) -> Result<EnergyParams, Error> {
        let mut p = match &self.config {
            Some(path) => io::read_params(path)?,
            None => EnergyParams::default(),
        };
        if let Some(v) = self.levels {
            p.pyramid_levels = v;
        }
        if let Some(v) = self.alternations {
            p.alternations = v;
        }
        if let Some(v) = self.starts {
            p.start_count = v;
        }
        if let Some(v) = self.half_samples {
            p.half_samples = v;
        }
        if let Some(v) = self.mu1 {
            p.mu1 = v;
        }
        if let Some(v) = self.mu4 {
            p.mu4 = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Bundle holding the ground truth.
    #[arg(long)]
    bundle: PathBuf,
    /// Result directory; defaults to `<bundle>/result`.
    #[arg(long)]
    result: Option<PathBuf>,
    /// Score the blurry observation instead of the result.
    #[arg(long)]
    baseline: bool,
    /// Report file; defaults to `report.toml` in the result directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Bundle providing depth and intrinsics.
    #[arg(long)]
    bundle: PathBuf,
    /// Result directory; defaults to `<bundle>/result`.
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    frames: u64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::CgBreakdown(_) => 1,
        Error::NotFound { .. } => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Io(_) => 1,
        Error::DimensionMismatch { .. }
        | Error::NonPositiveDepth { .. }
        | Error::AngleTooLarge { .. }
        | Error::InvalidParameter(_)
        | Error::ImageTooSmall { .. }
        | Error::Format { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match cli.command {
        Command::Synth(args) => run_synth(&args),
        Command::Deblur(args) => run_deblur(&args),
        Command::Eval(args) => run_eval(&args),
        Command::RenderSeq(args) => run_render(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run_synth(args: &SynthArgs) -> Result<(), Error> {
    let manifest = match &args.manifest {
        Some(path) => Manifest::read(path)?,
        None => {
            if !args.procedural && args.clean.is_none() {
                return Err(Error::InvalidParameter(
                    "give --procedural, --clean with --depth, or --manifest".into(),
                ));
            }
            let scene = match (&args.clean, &args.depth) {
                (Some(clean), Some(depth)) => SceneSource::Files {
                    clean: clean.clone(),
                    depth: depth.clone(),
                },
                _ => SceneSource::Procedural { size: args.size },
            };
            let intrinsics = match (&args.intrinsics, &scene) {
                (Some(path), _) => io::read_intrinsics(path)?,
                (None, SceneSource::Procedural { size }) => Intrinsics::centered(*size, *size),
                (None, SceneSource::Files { clean, .. }) => {
                    let img = io::read_png(clean, "clean image")?;
                    Intrinsics::centered(img.height(), img.width())
                }
            };
            Manifest {
                seed: args.seed,
                half_samples: args.half_samples,
                noise_sigma: args.noise_sigma,
                sigma_a: args.sigma_a,
                sigma_t: args.sigma_t,
                intrinsics,
                scene,
            }
        }
    };
    let instance = match &manifest.scene {
        SceneSource::Procedural { size } => {
            let inst = procedural_instance(
                *size,
                manifest.sigma_a,
                manifest.sigma_t,
                manifest.half_samples,
                manifest.noise_sigma,
                manifest.seed,
            )?;
            if inst.intrinsics != manifest.intrinsics {
                return Err(Error::InvalidParameter(
                    "procedural scenes use centred intrinsics".into(),
                ));
            }
            inst
        }
        SceneSource::Files { clean, depth } => {
            let clean = io::read_png(clean, "clean image")?;
            let depth = io::read_depth(depth)?;
            let p = sample_motion(manifest.sigma_a, manifest.sigma_t, manifest.seed)?;
            synthesize(
                &clean,
                &depth,
                &manifest.intrinsics,
                &p,
                manifest.half_samples,
                manifest.noise_sigma,
                manifest.seed,
            )?
        }
    };
    io::write_bundle(&args.out, &instance, &manifest)?;
    let mags: Vec<f64> = instance
        .true_flow
        .data()
        .iter()
        .zip(instance.true_flow.valid())
        .filter(|(_, &ok)| ok)
        .map(|(f, _)| f[0].hypot(f[1]))
        .collect();
    let mean = mags.iter().sum::<f64>() / mags.len().max(1) as f64;
    let max = mags.iter().cloned().fold(0.0, f64::max);
    print!("pose {}", io::format_pose(&instance.true_pose));
    println!("blur mean={mean:.3}px max={max:.3}px");
    Ok(())
}

fn bundle_from_args(args: &DeblurArgs, dir: Option<&Path>) -> Result<Bundle, Error> {
    match (dir, &args.image) {
        (Some(dir), _) => io::read_bundle(dir),
        (None, Some(image)) => Ok(Bundle {
            blurry: io::read_png(image, "blurry image")?,
            depth: io::read_depth(args.depth.as_deref().unwrap_or(Path::new("")))?,
            intrinsics: io::read_intrinsics(args.intrinsics.as_deref().unwrap_or(Path::new("")))?,
            clean: None,
            true_pose: None,
            true_flow: None,
            manifest: None,
        }),
        (None, None) => Err(Error::InvalidParameter("no input given".into())),
    }
}

fn run_deblur(args: &DeblurArgs) -> Result<(), Error> {
    let params = args.params.resolve()?;
    if let Some(pattern) = &args.glob {
        let dirs: Vec<PathBuf> = glob::glob(pattern)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .filter_map(|p| p.ok())
            .filter(|p| p.is_dir())
            .collect();
        if dirs.is_empty() {
            return Err(Error::NotFound {
                what: "bundle",
                path: PathBuf::from(pattern),
            });
        }
        let failures: Vec<(PathBuf, Error)> = dirs
            .par_iter()
            .filter_map(|dir| {
                let out = match &args.out {
                    Some(root) => root.join(dir.file_name().unwrap_or_default()),
                    None => dir.join("result"),
                };
                deblur_one(args, Some(dir), &out, &params).err().map(|e| (dir.clone(), e))
            })
            .collect();
        for (dir, e) in &failures {
            eprintln!("{}: {e}", dir.display());
        }
        return match failures.into_iter().next() {
            Some((_, e)) => Err(e),
            None => Ok(()),
        };
    }
    let out = match (&args.out, &args.bundle) {
        (Some(out), _) => out.clone(),
        (None, Some(bundle)) => bundle.join("result"),
        (None, None) => return Err(Error::InvalidParameter("--out is required without --bundle".into())),
    };
    deblur_one(args, args.bundle.as_deref(), &out, &params)
}

fn deblur_one(args: &DeblurArgs, dir: Option<&Path>, out: &Path, params: &EnergyParams) -> Result<(), Error> {
    let bundle = bundle_from_args(args, dir)?;
    std::fs::create_dir_all(out)?;
    let status_path = out.join(io::STATUS_FILE);
    let result = match deblur(&bundle.blurry, &bundle.depth, &bundle.intrinsics, params) {
        Ok(r) => r,
        Err(e) => {
            Status {
                ok: false,
                converged: false,
                partial: true,
                message: e.to_string(),
                wall_time_secs: 0.0,
            }
            .write(&status_path)?;
            return Err(e);
        }
    };
    io::write_png(&out.join(io::LATENT_FILE), &result.latent)?;
    io::write_pose(&out.join(io::POSE_FILE), &result.pose)?;
    io::write_flow(&out.join(io::FLOW_FILE), &result.flow)?;
    io::write_energy_csv(&out.join(io::ENERGY_FILE), &result.levels)?;
    Status {
        ok: true,
        converged: result.converged,
        partial: false,
        message: String::new(),
        wall_time_secs: result.wall_time.as_secs_f64(),
    }
    .write(&status_path)?;
    print!("{}: pose {}", out.display(), io::format_pose(&result.pose));
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), Error> {
    let bundle = io::read_bundle(&args.bundle)?;
    let clean = bundle.clean.as_ref().ok_or_else(|| Error::NotFound {
        what: "ground-truth clean image",
        path: args.bundle.join(io::CLEAN_FILE),
    })?;
    let result_dir = args.result.clone().unwrap_or_else(|| args.bundle.join("result"));
    let report = if args.baseline {
        EvalReport::evaluate(&bundle.blurry, clean, None)?
    } else {
        let result = io::read_result(&result_dir)?;
        let flows = bundle.true_flow.as_ref().map(|t| (&result.flow, t));
        let report = EvalReport::evaluate(&result.latent, clean, flows)?;
        if let Some(truth) = &bundle.true_flow {
            println!("meanEpe={}", mean_endpoint_error(&result.flow, truth)?);
        }
        report
    };
    print!("{}", report.to_key_value());
    let path = match &args.report {
        Some(p) => p.clone(),
        None if args.baseline => result_dir.join("baseline_report.toml"),
        None => result_dir.join(io::REPORT_FILE),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, report.to_toml()?)?;
    Ok(())
}

fn run_render(args: &RenderArgs) -> Result<(), Error> {
    let bundle = io::read_bundle(&args.bundle)?;
    let result_dir = args.result.clone().unwrap_or_else(|| args.bundle.join("result"));
    let result = io::read_result(&result_dir)?;
    let frames = render_frames(
        &result.latent,
        &result.pose,
        &bundle.depth,
        &bundle.intrinsics,
        args.frames as usize,
    )?;
    std::fs::create_dir_all(&args.out)?;
    let digits = (frames.len() - 1).to_string().len().max(3);
    for (i, frame) in frames.iter().enumerate() {
        io::write_png(&args.out.join(format!("frame_{i:0digits$}.png")), frame)?;
    }
    println!("{} frames written to {}", frames.len(), args.out.display());
    Ok(())
}
