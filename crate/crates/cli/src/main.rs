use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankroute::error::Error;
use rankroute::pipeline::{self, Figure, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "rankroute", version, about = "Compress, route and serve a toy language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Compression ratio (overrides `compression.ratio`).
    #[arg(long, global = true)]
    ratio: Option<f64>,

    /// Stored-rank multiplier (overrides `compression.store_multiplier`).
    #[arg(long, global = true)]
    store_multiplier: Option<f64>,

    /// Shared-expert threshold for the aggregated layout (overrides `bench.psi`).
    #[arg(long, global = true)]
    psi: Option<f64>,

    /// Benchmark the grouped-query launch plan.
    #[arg(long, global = true)]
    gqa: bool,

    /// Figure for `observe`.
    #[arg(long, global = true)]
    figure: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the corpus and train the dense model.
    TrainDense,
    /// Whiten, factorize and allocate ranks.
    Compress,
    /// Train per-matrix routers and write held-out router stats.
    TrainRouter,
    /// Build the pattern cache from prompts.
    BuildCache,
    /// Per-domain perplexity of every available variant.
    Eval,
    /// Time the execution variants.
    Bench,
    /// Emit one measurement as CSV (`--figure`, or every figure when omitted).
    Observe,
    /// Every stage, then every figure.
    All,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn effective_config(cli: &Cli) -> rankroute::error::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(ratio) = cli.ratio {
        cfg.compression.ratio = ratio;
    }
    if let Some(m) = cli.store_multiplier {
        cfg.compression.store_multiplier = m;
    }
    if let Some(psi) = cli.psi {
        cfg.bench.psi = psi;
    }
    if cli.gqa {
        cfg.bench.gqa = Some(true);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> rankroute::error::Result<()> {
    let cfg = effective_config(cli)?;
    let figure = cli.figure.as_deref().map(str::parse::<Figure>).transpose()?;
    if figure.is_some() && !matches!(cli.command, Command::Observe) {
        return Err(Error::Config("--figure only applies to `observe`".into()));
    }
    match cli.command {
        Command::TrainDense => drop(pipeline::cmd_train_dense(&cfg)?),
        Command::Compress => drop(pipeline::cmd_compress(&cfg)?),
        Command::TrainRouter => drop(pipeline::cmd_train_router(&cfg)?),
        Command::BuildCache => drop(pipeline::cmd_build_cache(&cfg)?),
        Command::Eval => {
            for r in pipeline::cmd_eval(&cfg)? {
                println!("{:<12} {:<7} ppl {:>9.4}  delta {:+.4}", r.domain, r.variant, r.ppl, r.delta_ppl);
            }
        }
        Command::Bench => drop(pipeline::cmd_bench(&cfg)?),
        Command::Observe => match figure {
            Some(f) => pipeline::cmd_observe(&cfg, f)?,
            None => {
                for f in Figure::ALL {
                    pipeline::cmd_observe(&cfg, f)?;
                }
            }
        },
        Command::All => pipeline::run_all(&cfg)?,
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::MissingArtifact { .. } => 3,
                _ => 1,
            })
        }
    }
}
