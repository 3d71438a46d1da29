//! `graphwalk`: multiresolution random-walker segmentation from the command line.
//!
//! Every failure is reported as a single JSON object on stderr with a nonzero
//! exit code; results are summarized as JSON on stdout.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphwalk_core::phantom::{generate_phantom, PhantomKind, PhantomSpec};
use graphwalk_core::pipeline::{evaluate_run_dir, fuse_from_disk, run_pipeline, RunConfig, Variant, WeightKind};
use graphwalk_core::solver::SolverChoice;
use graphwalk_core::Error;
use serde_json::{json, Value};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "graphwalk", version, about = "Multiresolution random-walker segmentation with hierarchical CRF fusion")]
struct Cli {
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom with priors, labels and a segment config.
    Phantom(PhantomArgs),
    /// Solve every resolution, fuse, and write the artifacts.
    Segment(RunArgs),
    /// Re-fuse the posteriors of a run directory.
    Fuse(FuseArgs),
    /// Tune the couplings against the reference labels, then segment.
    Tune(RunArgs),
    /// Score the fused labels of a run directory.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long, default_value = "nested-shells")]
    kind: PhantomKind,
    /// Dimensions as X,Y,Z.
    #[arg(long, value_parser = parse_dims, default_value = "24,24,24")]
    dims: [usize; 3],
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    weak_boundary: f64,
    #[arg(long, default_value_t = 0.9)]
    prior_confidence: f64,
    #[arg(long, default_value_t = 1)]
    prior_blur: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for the artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// fpg, cfpg (constrained) or gfpg (guided).
    #[arg(long)]
    variant: Option<Variant>,
    /// Number of coarser resolutions above the voxel layer.
    #[arg(long)]
    n_lay: Option<usize>,
    /// One value, or one per resolution separated by commas.
    #[arg(long, value_delimiter = ',')]
    lambda_prior: Option<Vec<f64>>,
    #[arg(long)]
    lambda_hcrf: Option<f64>,
    /// auto, direct or iterative.
    #[arg(long, value_parser = parse_solver)]
    solver: Option<SolverChoice>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// tukey or plain.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<WeightKind>,
    #[arg(long)]
    sobel_quantile: Option<f64>,
    /// Triangle mesh (OBJ) for the guided variant.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Per-resolution susceptibility volume stems, separated by commas.
    #[arg(long, value_delimiter = ',')]
    susceptibilities: Option<Vec<PathBuf>>,
    #[arg(long, value_delimiter = ',')]
    class_names: Option<Vec<String>>,
    #[arg(long)]
    background: Option<usize>,
    /// Intensity volume stem (`.raw` + `.json`).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Generate a phantom of this kind as input, with default settings.
    #[arg(long)]
    phantom: Option<PhantomKind>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Run directory written by `segment` or `tune`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda_hcrf: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    out: PathBuf,
    /// Per-resolution reference label stems; defaults to those in the run directory.
    #[arg(long, value_delimiter = ',')]
    reference: Option<Vec<PathBuf>>,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected X,Y,Z, got {s:?}"))
}

fn parse_solver(s: &str) -> Result<SolverChoice, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown solver {s:?} (auto, direct, iterative)"))
}

fn parse_weights(s: &str) -> Result<WeightKind, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown weight kind {s:?} (tukey, plain)"))
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(seed, variant, n_lay, lambda_prior, lambda_hcrf, weights, sobel_quantile);
        macro_rules! set_opt {
            ($($field:ident),*) => {$(
                if self.$field.is_some() {
                    cfg.$field = self.$field.clone();
                }
            )*};
        }
        set_opt!(mesh, susceptibilities, class_names, background, input, priors, labels);
        if let Some(m) = self.solver {
            cfg.solver.method = m;
        }
        if let Some(t) = self.tol {
            cfg.solver.tol = t;
        }
        if self.max_iter.is_some() {
            cfg.solver.max_iter = self.max_iter;
        }
        if let Some(kind) = self.phantom {
            cfg.phantom = Some(PhantomSpec { kind, seed: cfg.seed, ..Default::default() });
        }
        Ok(cfg)
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("GRAPHWALK_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("GRAPHWALK_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("cannot build thread pool: {e}")))
}

fn phantom(args: &PhantomArgs) -> Result<Value, Error> {
    let spec = PhantomSpec {
        kind: args.kind,
        dims: args.dims,
        noise: args.noise,
        seed: args.seed,
        weak_boundary: args.weak_boundary,
        prior_confidence: args.prior_confidence,
        prior_blur: args.prior_blur,
    };
    let p = generate_phantom(&spec)?;
    let files = p.write(&args.out)?;
    let cfg = RunConfig {
        seed: args.seed,
        input: Some(files.volume.clone()),
        priors: Some(files.priors.clone()),
        labels: Some(files.labels.clone()),
        mesh: files.mesh.clone(),
        class_names: Some(p.class_names.clone()),
        background: Some(p.background),
        // piecewise-constant phantoms leave the robust scale at its floor,
        // where Tukey weights no longer see edges
        weights: WeightKind::Plain,
        ..Default::default()
    };
    let config_path = args.out.join("segment.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(json!({ "files": files, "config": config_path, "n_clas": p.n_clas }))
}

fn segment(args: &RunArgs, tune: bool) -> Result<Value, Error> {
    let mut cfg = args.config()?;
    cfg.tune |= tune;
    let run = run_pipeline(&cfg, Some(&args.out))?;
    Ok(json!({
        "out": args.out,
        "variant": cfg.variant,
        "lambda_prior": run.layout.lambda_prior,
        "lambda_hcrf": run.layout.lambda_hcrf,
        "energy": run.fusion.energy,
        "pooled": run.metrics.map(|m| m.pooled),
    }))
}

fn fuse(args: &FuseArgs) -> Result<Value, Error> {
    let (fusion, metrics) = fuse_from_disk(&args.out, args.lambda_hcrf)?;
    Ok(json!({ "out": args.out, "energy": fusion.energy, "pooled": metrics.map(|m| m.pooled) }))
}

fn eval(args: &EvalArgs) -> Result<Value, Error> {
    let m = evaluate_run_dir(&args.out, args.reference.as_deref())?;
    Ok(serde_json::to_value(m)?)
}

fn run(cli: &Cli) -> Result<Value, Error> {
    init_threads()?;
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Segment(a) => segment(a, false),
        Command::Tune(a) => segment(a, true),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
    }
}

fn emit_error(value: &Value, code: u8) -> ExitCode {
    eprintln!("{value}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            return emit_error(&json!({ "error": "usage", "message": msg.trim() }), EXIT_USAGE);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            // a closed pipe on stdout is not a failure of the run
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => emit_error(&e.to_json(), EXIT_FAILURE),
    }
}
