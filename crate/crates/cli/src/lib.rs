//! Command-line front end: scene generation, proposal generation, denoiser
//! training, refinement, evaluation and gradient checks.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod manifest;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use commands::{Ctx, TrainArgs};
use config::{parse_criterion, CategorySet, RunConfig};
use ovlabel_core::denoiser::{FuseWeights, SystematicBias};
use ovlabel_core::Error;
use std::ffi::OsString;
use std::path::PathBuf;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ovlabel",
    version,
    about = "Pseudo-labels for open-vocabulary 3D detection"
)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(
        long,
        global = true,
        env = "OVLABEL_OUT",
        default_value = "ovlabel-out"
    )]
    pub out: PathBuf,
    /// Worker threads (1 gives a serial run).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Global seed; replaces every block-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes `scene_{i}.json` and a manifest.
    GenScenes(GenScenesArgs),
    /// Run the 2D seeker and lift its detections to 3D proposals.
    Propose(ProposeArgs),
    /// Train the denoiser on a base-category corpus.
    Train(TrainCmdArgs),
    /// Refine proposals with a trained denoiser.
    Refine(RefineArgs),
    /// Score proposals against ground truth.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long)]
    pub count: usize,
    /// Surface points per m² at 1 m range.
    #[arg(long)]
    pub point_density: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    /// Scenes manifest, or a directory holding one.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Keep proposals of `all`, `base`, `novel` or listed categories.
    #[arg(long)]
    pub categories: Option<String>,
    /// Apply the default systematic bias to the proposals.
    #[arg(long)]
    pub bias: bool,
}

#[derive(Debug, Args)]
pub struct TrainCmdArgs {
    /// Scenes manifest of the training corpus, or its directory.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stop_after_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Also save a checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Proposals manifest, or a directory holding one.
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub t_start: Option<usize>,
    /// Weight of the confidence head in the fused score; the seeker score
    /// gets the rest.
    #[arg(long)]
    pub w_iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Proposals or refined manifest, or a directory holding one.
    #[arg(long)]
    pub proposals: PathBuf,
    /// `all`, `base`, `novel` or a comma-separated list of names.
    #[arg(long)]
    pub categories: Option<String>,
    /// `iou:<threshold>` or `center:<meters>`.
    #[arg(long)]
    pub criterion: Option<String>,
    /// Also write per-category PR curves.
    #[arg(long)]
    pub pr_csv: bool,
    /// Score the boxes before refinement.
    #[arg(long)]
    pub initial: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random denoiser states to check.
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Check at most this many entries per tensor (default: all).
    #[arg(long)]
    pub max_per_param: Option<usize>,
}

/// Exit status for an error: 2 for invalid input, 3 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::Schema { .. }
                | Error::UnsupportedVersion { .. }
                | Error::UnknownCategory(_)
                | Error::Weight { .. }
                | Error::Domain { .. } => EXIT_VALIDATION,
                _ => EXIT_RUNTIME,
            };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

/// Builds the effective configuration: file, then flags, then the global
/// seed pushed into every block.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match &cli.command {
        Command::GenScenes(a) => {
            if let Some(d) = a.point_density {
                cfg.scene.point_density = d;
            }
        }
        Command::Propose(a) => {
            if let Some(c) = &a.categories {
                cfg.propose.categories = c.parse::<CategorySet>()?;
            }
            if a.bias && cfg.propose.bias.is_none() {
                cfg.propose.bias = Some(SystematicBias::default());
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if a.stop_after_steps.is_some() {
                cfg.train.stop_after_steps = a.stop_after_steps;
            }
            if let Some(lr) = a.lr {
                cfg.train.optimizer.lr = lr;
            }
        }
        Command::Refine(a) => {
            let s = &mut cfg.refine.sampler;
            s.steps = a.steps.unwrap_or(s.steps);
            s.eta = a.eta.unwrap_or(s.eta);
            s.t_start = a.t_start.unwrap_or(s.t_start);
            if let Some(w) = a.w_iou {
                cfg.refine.fuse = FuseWeights::new(w);
            }
        }
        Command::Eval(a) => {
            if let Some(c) = &a.categories {
                cfg.eval.categories = c.parse::<CategorySet>()?;
            }
            if let Some(c) = &a.criterion {
                cfg.eval.criterion = parse_criterion(c)?;
            }
            cfg.eval.pr_csv |= a.pr_csv;
            cfg.eval.initial |= a.initial;
        }
        Command::Gradcheck(a) => {
            let g = &mut cfg.gradcheck;
            g.states = a.states.unwrap_or(g.states);
            g.tolerance = a.tolerance.unwrap_or(g.tolerance);
            if a.max_per_param.is_some() {
                g.max_per_param = a.max_per_param;
            }
        }
    }
    cfg.apply_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, ctx: &Ctx) -> Result<()> {
    match &cli.command {
        Command::GenScenes(a) => {
            let paths = commands::gen_scenes(ctx, a.count)?;
            eprintln!("wrote {} scenes to {}", paths.len() - 1, ctx.out.display());
        }
        Command::Propose(a) => {
            let paths = commands::propose(ctx, &a.scenes)?;
            eprintln!(
                "wrote proposals for {} scenes to {}",
                (paths.len() - 1) / 2,
                ctx.out.display()
            );
        }
        Command::Train(a) => {
            let args = TrainArgs {
                resume: a.resume.clone(),
                checkpoint_every: a.checkpoint_every,
            };
            commands::train_cmd(ctx, &a.scenes, &args)?;
            eprintln!(
                "wrote checkpoint to {}",
                ctx.out.join("checkpoint.json").display()
            );
        }
        Command::Refine(a) => {
            let paths = commands::refine(ctx, &a.proposals, &a.checkpoint)?;
            eprintln!(
                "refined {} scenes into {}",
                paths.len() - 1,
                ctx.out.display()
            );
        }
        Command::Eval(a) => {
            let (report, _) = commands::eval(ctx, &a.proposals)?;
            print!("{}", ovlabel_core::eval::render_table(&report));
        }
        Command::Gradcheck(_) => {
            let (summary, _) = commands::gradcheck(ctx)?;
            for c in &summary.checks {
                eprintln!(
                    "{:<40} max rel err {:.3e} over {} entries",
                    c.name, c.report.max_rel_err, c.report.checked
                );
            }
            println!(
                "gradient check passed: max relative error {:.3e}",
                summary.max_rel_err
            );
        }
    }
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
    };
    match cli.jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into()).into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(cli, &ctx))
        }
        None => dispatch(cli, &ctx),
    }
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
