mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use funknn_core::solvers::Problem;
use funknn_core::training::Mode;

#[derive(Parser, Debug)]
#[command(name = "funknn", version, about = "Patch-based continuous super-resolution and inverse solvers")]
struct Cli {
    /// Worker threads for pixel evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Seed for all randomness; overrides every seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a FunkNN.
    Train(TrainArgs),
    /// Train the autoencoder, then the flow on its latents.
    TrainPrior(ConfigArgs),
    /// Repeated super-resolution of one image.
    Superres(SuperresArgs),
    /// Draw images from a trained prior.
    Sample(SampleArgs),
    /// Parallel-beam projections of an image.
    Radon(RadonArgs),
    /// Filtered back-projection of a sinogram.
    Fbp(FbpArgs),
    /// Solve an inverse problem with the prior and a FunkNN.
    Solve(SolveArgs),
    /// Score a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_parser = ["gaussian", "phantom"])]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    count: usize,
    /// Items at the end reserved as the test split.
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: ConfigArgs,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct SuperresArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    prior: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RadonArgs {
    #[arg(long)]
    input: PathBuf,
    /// Inclusive angle range in degrees, `lo:hi`.
    #[arg(long, default_value = "-70:70", allow_hyphen_values = true)]
    angles_range: String,
    #[arg(long, default_value_t = 60)]
    views: usize,
    /// Projection SNR; noiseless when absent.
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FbpArgs {
    #[arg(long)]
    sino: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    run: ConfigArgs,
    #[arg(long, value_parser = parse_problem)]
    problem: Option<Problem>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalKind {
    Superres,
    Derivatives,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum)]
    kind: EvalKind,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Super-resolution factor per level.
    #[arg(long, default_value_t = 2)]
    factor: usize,
    /// Hierarchical levels scored by `superres`.
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_problem(s: &str) -> Result<Problem, String> {
    s.parse().map_err(|e: funknn_core::Error| e.to_string())
}

/// Marks an error as a validation failure (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a.kind, a.n, a.count, a.test, seed.unwrap_or(0), &a.out),
        Command::Train(a) => commands::train(a.run.config.as_deref(), &a.run.out, seed, a.mode, a.steps),
        Command::TrainPrior(a) => commands::train_prior(a.config.as_deref(), &a.out, seed),
        Command::Superres(a) => commands::superres(&a.ckpt, &a.input, a.scale, a.levels, &a.out),
        Command::Sample(a) => commands::sample(&a.prior, a.count, seed.unwrap_or(0), &a.out),
        Command::Radon(a) => {
            commands::radon(&a.input, &a.angles_range, a.views, a.snr_db, seed.unwrap_or(0), &a.out)
        }
        Command::Fbp(a) => commands::fbp(&a.sino, &a.out),
        Command::Solve(a) => commands::solve(a.run.config.as_deref(), &a.run.out, seed, a.problem),
        Command::Eval(a) => match a.kind {
            EvalKind::Superres => commands::eval_superres(&a.ckpt, &a.data, a.factor, a.levels, &a.out),
            EvalKind::Derivatives => commands::eval_derivatives(&a.ckpt, &a.data, a.factor, &a.out),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Invalid>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
