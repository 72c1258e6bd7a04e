//! `motion-nodes`: generate a synthetic scene, initialize control nodes,
//! fit their trajectories, refine them and evaluate against ground truth.
//!
//! Stages communicate only through files. Exit codes: 0 success, 2 bad
//! configuration, 3 node target not reached (nodes are still written),
//! 4 numerical failure, 1 anything else.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use motion_nodes::harness::format::{read_bundle, read_nodes, write_bundle, write_loss_log, write_metrics, write_nodes, NodeSet};
use motion_nodes::harness::{density_ratio, gen_scene, parse_scene_config, HarnessError, SceneBundle};
use motion_nodes::node_init::{CompressionParams, NodeInitError};
use motion_nodes::optimize::{LossWeights, OptimError};
use motion_nodes::pipeline::{self, PipelineError};
use serde::Deserialize;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (reads and writes format_version 1.x)");

#[derive(Parser)]
#[command(name = "motion-nodes", version = VERSION, about = "Sparse control-node deformation pipeline on synthetic scenes")]
struct Cli {
    /// Worker threads; 1 keeps every run reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// TOML file with run settings; command-line flags take precedence.
    #[arg(long, global = true)]
    run_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene bundle from a scene config.
    GenScene {
        /// Scene description (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Random seed; required here or in the run config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output bundle file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Back-project keyframe patches and compress them into nodes.
    InitNodes {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        init: InitFlags,
    },
    /// Fit node trajectories to tracklets.
    Fit {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keyframes per trajectory.
        #[arg(long)]
        spline_keyframes: Option<usize>,
    },
    /// Refine node keyframes by gradient descent.
    Optimize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss log (JSON lines).
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[command(flatten)]
        opt: OptFlags,
    },
    /// Compare deformed primitives and node trajectories with ground truth.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        nodes: PathBuf,
        /// Output metrics file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage, writing all files into one directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        init: InitFlags,
        #[command(flatten)]
        opt: OptFlags,
    },
}

#[derive(Args, Default, Clone)]
struct InitFlags {
    /// Use every n-th frame as a node source.
    #[arg(long)]
    keyframe_stride: Option<usize>,
    /// Target node count as a fraction of the candidates (ignored with --target-count).
    #[arg(long)]
    target_fraction: Option<f64>,
    #[arg(long)]
    target_count: Option<usize>,
    /// Keyframes per trajectory.
    #[arg(long)]
    spline_keyframes: Option<usize>,
    /// Initial voxel size, meters.
    #[arg(long)]
    v_init: Option<f64>,
    /// Voxel growth per iteration, meters.
    #[arg(long)]
    delta_v: Option<f64>,
    #[arg(long)]
    r_min: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    /// Foreground penalty in the token similarity.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha_dyn: Option<f64>,
    #[arg(long)]
    beta_dyn: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args, Default, Clone)]
struct OptFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// Must be 0: photometric loss is not modeled.
    #[arg(long)]
    lambda_rgb: Option<f64>,
    /// Must be 0: mask loss is not modeled.
    #[arg(long)]
    lambda_mask: Option<f64>,
    #[arg(long)]
    lambda_depth: Option<f64>,
    #[arg(long)]
    lambda_track: Option<f64>,
    #[arg(long)]
    lambda_arap: Option<f64>,
}

/// Run settings file; keys mirror the flag names with underscores.
#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    keyframe_stride: Option<usize>,
    target_fraction: Option<f64>,
    target_count: Option<usize>,
    spline_keyframes: Option<usize>,
    v_init: Option<f64>,
    delta_v: Option<f64>,
    r_min: Option<f64>,
    r_max: Option<f64>,
    eta: Option<f64>,
    alpha_dyn: Option<f64>,
    beta_dyn: Option<f64>,
    max_iterations: Option<usize>,
    iterations: Option<usize>,
    step_size: Option<f64>,
    lambda_rgb: Option<f64>,
    lambda_mask: Option<f64>,
    lambda_depth: Option<f64>,
    lambda_track: Option<f64>,
    lambda_arap: Option<f64>,
}

const DEFAULT_STRIDE: usize = 6;
const DEFAULT_FRACTION: f64 = 0.1;
const DEFAULT_SPLINE_KEYFRAMES: usize = 8;
const DEFAULT_ITERATIONS: usize = 100;
const DEFAULT_STEP: f64 = 1e-4;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Invalid(_)
            | PipelineError::NodeInit(NodeInitError::InvalidParams(_))
            | PipelineError::Optim(OptimError::InvalidWeights(_) | OptimError::InvalidStep(_))
            | PipelineError::Harness(HarnessError::InvalidConfig { .. }) => 2,
            PipelineError::NodeInit(NodeInitError::TargetNotReached { .. }) => 3,
            PipelineError::Optim(OptimError::NonFiniteLoss { .. })
            | PipelineError::Deform(motion_nodes::deform::DeformError::Rigid(_)) => 4,
            _ => 1,
        };
        Self { code, error: e.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        PipelineError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), HarnessError>) -> Outcome {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load_bundle(path: &Path) -> Result<SceneBundle, Failure> {
    read_bundle(open(path)?).map_err(|e| Failure::from(anyhow::Error::new(e).context(format!("reading {}", path.display()))))
}

fn load_nodes(path: &Path) -> Result<NodeSet, Failure> {
    read_nodes(open(path)?).map_err(|e| Failure::from(anyhow::Error::new(e).context(format!("reading {}", path.display()))))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
        let at = line.map(|l| format!(", line {l}")).unwrap_or_default();
        Failure::config(anyhow::anyhow!("invalid run config {}{at}: {}", path.display(), e.message()))
    })
}

fn compression_params(bundle: &SceneBundle, candidates: usize, f: &InitFlags, rc: &RunConfig) -> CompressionParams {
    let fraction = f.target_fraction.or(rc.target_fraction).unwrap_or(DEFAULT_FRACTION);
    let mut p = pipeline::default_params(bundle, candidates, fraction);
    if let Some(t) = f.target_count.or(rc.target_count) {
        p.target_count = t;
    }
    let pick = |flag: Option<f64>, file: Option<f64>, default: f64| flag.or(file).unwrap_or(default);
    p.v_init = pick(f.v_init, rc.v_init, p.v_init);
    p.delta_v = pick(f.delta_v, rc.delta_v, p.delta_v);
    p.r_min = pick(f.r_min, rc.r_min, p.r_min);
    p.r_max = pick(f.r_max, rc.r_max, p.r_max);
    p.eta = pick(f.eta, rc.eta, p.eta);
    p.alpha_dyn = pick(f.alpha_dyn, rc.alpha_dyn, p.alpha_dyn);
    p.beta_dyn = pick(f.beta_dyn, rc.beta_dyn, p.beta_dyn);
    p.max_iterations = f.max_iterations.or(rc.max_iterations).unwrap_or(p.max_iterations);
    p
}

fn loss_weights(f: &OptFlags, rc: &RunConfig) -> LossWeights {
    let d = LossWeights::default();
    LossWeights {
        lambda_rgb: f.lambda_rgb.or(rc.lambda_rgb).unwrap_or(d.lambda_rgb),
        lambda_mask: f.lambda_mask.or(rc.lambda_mask).unwrap_or(d.lambda_mask),
        lambda_depth: f.lambda_depth.or(rc.lambda_depth).unwrap_or(d.lambda_depth),
        lambda_track: f.lambda_track.or(rc.lambda_track).unwrap_or(d.lambda_track),
        lambda_arap: f.lambda_arap.or(rc.lambda_arap).unwrap_or(d.lambda_arap),
    }
}

fn spline_keyframes(flag: Option<usize>, rc: &RunConfig) -> Result<usize, Failure> {
    let k = flag.or(rc.spline_keyframes).unwrap_or(DEFAULT_SPLINE_KEYFRAMES);
    if k < 2 {
        return Err(Failure::config(anyhow::anyhow!("spline_keyframes must be at least 2")));
    }
    Ok(k)
}

fn cmd_gen_scene(config: &Path, seed: Option<u64>, out: &Path, rc: &RunConfig) -> Outcome {
    let seed = seed.or(rc.seed).ok_or_else(|| Failure::config(anyhow::anyhow!("a seed is required (--seed or run config)")))?;
    let text = std::fs::read_to_string(config).with_context(|| format!("cannot read {}", config.display()))?;
    let cfg = parse_scene_config(&text)
        .map_err(|e| Failure::config(anyhow::Error::new(e).context(format!("in {}", config.display()))))?;
    let bundle = gen_scene(&cfg, seed)?;
    write_file(out, |w| write_bundle(w, &bundle))?;
    println!("frames: {}", bundle.frame_count());
    println!("primitives: {}", bundle.primitives.len());
    println!("tracklets: {}", bundle.tracklets.len());
    Ok(())
}

fn cmd_init_nodes(bundle_path: &Path, out: &Path, f: &InitFlags, rc: &RunConfig) -> Outcome {
    let bundle = load_bundle(bundle_path)?;
    let stride = f.keyframe_stride.or(rc.keyframe_stride).unwrap_or(DEFAULT_STRIDE);
    if stride == 0 {
        return Err(Failure::config(anyhow::anyhow!("keyframe_stride must be positive")));
    }
    let k = spline_keyframes(f.spline_keyframes, rc)?;
    let candidates = pipeline::candidate_count(&bundle, stride);
    let params = compression_params(&bundle, candidates, f, rc);
    let init = pipeline::init_nodes(&bundle, stride, &params, k)?;
    write_file(out, |w| write_nodes(w, &init.set, "init"))?;
    println!("candidates: {}", init.candidates);
    println!("iterations: {}", init.iterations);
    println!("nodes: {}", init.set.nodes.len());
    match density_ratio(&bundle, &init.set.nodes, &init.set.source_frames()) {
        Some(r) => println!("density_ratio: {r:.16e}"),
        None => println!("density_ratio: undefined"),
    }
    if !init.reached_target {
        eprintln!(
            "warning: {} nodes remain above the target of {} after {} iterations; nodes written anyway",
            init.set.nodes.len(),
            params.target_count,
            init.iterations
        );
        return Err(Failure { code: 3, error: anyhow::anyhow!("node target not reached") });
    }
    Ok(())
}

fn cmd_fit(bundle_path: &Path, nodes_path: &Path, out: &Path, k: Option<usize>, rc: &RunConfig) -> Outcome {
    let bundle = load_bundle(bundle_path)?;
    let set = load_nodes(nodes_path)?;
    let fit = pipeline::fit_nodes(&bundle, &set, spline_keyframes(k, rc)?)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    write_file(out, |w| write_nodes(w, &fit.set, "fit"))?;
    let worst = fit.residuals.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    println!("fitted: {}", fit.residuals.iter().filter(|r| r.is_some()).count());
    println!("static: {}", fit.residuals.iter().filter(|r| r.is_none()).count());
    println!("max_residual: {worst:.16e}");
    Ok(())
}

fn cmd_optimize(bundle_path: &Path, nodes_path: &Path, out: &Path, log: Option<&Path>, f: &OptFlags, rc: &RunConfig) -> Outcome {
    let bundle = load_bundle(bundle_path)?;
    let set = load_nodes(nodes_path)?;
    let weights = loss_weights(f, rc);
    let iterations = f.iterations.or(rc.iterations).unwrap_or(DEFAULT_ITERATIONS);
    let step = f.step_size.or(rc.step_size).unwrap_or(DEFAULT_STEP);
    let result = pipeline::optimize_nodes(&bundle, &set, &weights, iterations, step)?;
    write_file(out, |w| write_nodes(w, &result.set, "optimize"))?;
    if let Some(path) = log {
        write_file(path, |w| write_loss_log(w, &result.history))?;
    }
    if let (Some(first), Some(last)) = (result.history.first(), result.history.last()) {
        println!("iterations: {}", result.history.len() - 1);
        println!("initial_loss: {:.16e}", first.total);
        println!("final_loss: {:.16e}", last.total);
    }
    Ok(())
}

fn cmd_eval(bundle_path: &Path, nodes_path: &Path, out: &Path) -> Outcome {
    let bundle = load_bundle(bundle_path)?;
    let set = load_nodes(nodes_path)?;
    let m = pipeline::evaluate(&bundle, &set)?;
    write_file(out, |w| write_metrics(w, &m))?;
    println!("deformed_rmse: {:.16e}", m.deformed_rmse);
    println!("relative_rmse: {:.16e}", m.relative_rmse);
    println!("node_count: {}", m.node_count);
    Ok(())
}

fn cmd_run(config: &Path, seed: Option<u64>, dir: &Path, init: &InitFlags, opt: &OptFlags, rc: &RunConfig) -> Outcome {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let (bundle, nodes, fitted, refined) = (dir.join("bundle.jsonl"), dir.join("nodes.jsonl"), dir.join("fitted.jsonl"), dir.join("optimized.jsonl"));
    cmd_gen_scene(config, seed, &bundle, rc)?;
    cmd_init_nodes(&bundle, &nodes, init, rc)?;
    cmd_fit(&bundle, &nodes, &fitted, init.spline_keyframes, rc)?;
    cmd_optimize(&bundle, &fitted, &refined, Some(&dir.join("loss.jsonl")), opt, rc)?;
    cmd_eval(&bundle, &refined, &dir.join("metrics.json"))
}

fn run(cli: Cli) -> Outcome {
    let rc = load_run_config(cli.run_config.as_deref())?;
    let threads = if cli.threads != 1 { cli.threads } else { rc.threads.unwrap_or(1) };
    if threads == 0 {
        return Err(Failure::config(anyhow::anyhow!("threads must be positive")));
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("cannot start worker threads")?;
    match &cli.command {
        Command::GenScene { config, seed, out } => cmd_gen_scene(config, *seed, out, &rc),
        Command::InitNodes { bundle, out, init } => cmd_init_nodes(bundle, out, init, &rc),
        Command::Fit { bundle, nodes, out, spline_keyframes } => cmd_fit(bundle, nodes, out, *spline_keyframes, &rc),
        Command::Optimize { bundle, nodes, out, loss_log, opt } => cmd_optimize(bundle, nodes, out, loss_log.as_deref(), opt, &rc),
        Command::Eval { bundle, nodes, out } => cmd_eval(bundle, nodes, out),
        Command::Run { config, seed, out_dir, init, opt } => cmd_run(config, *seed, out_dir, init, opt, &rc),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
