use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use safe_lcmdp::cmdp::EnvironmentDocument;
use safe_lcmdp::envs::{self, EnvKind};
use safe_lcmdp::harness::metrics::write_atomic;
use safe_lcmdp::harness::{run_experiment, write_summaries, Algo, EnvName, ExperimentConfig};

#[derive(Parser)]
#[command(name = "safe-lcmdp", version, about = "Safe exploration experiments for linear CMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment and write it as JSON.
    GenEnv {
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = envs::LINEAR_STATES)]
        num_states: usize,
        #[arg(long, default_value_t = envs::LINEAR_DIM)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an algorithm on one or more seeds and write metrics files.
    Run {
        /// TOML or JSON experiment file; command-line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long)]
        env: Option<EnvName>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// `1..10` (inclusive) or a comma-separated list.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        env_file: Option<PathBuf>,
        #[arg(long)]
        eval_stride: Option<usize>,
        #[arg(long)]
        record_timing: bool,
    },
    /// Aggregate per-seed metrics files into per-episode mean and std.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().context("bad seed range start")?;
        let hi: u64 = hi.trim().trim_start_matches('=').parse().context("bad seed range end")?;
        if lo > hi {
            bail!("empty seed range {text}");
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    config: Option<PathBuf>,
    algo: Option<Algo>,
    env: Option<EnvName>,
    episodes: Option<usize>,
    seed: Option<u64>,
    seeds: Option<String>,
    out: Option<PathBuf>,
    env_file: Option<PathBuf>,
    eval_stride: Option<usize>,
    record_timing: bool,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => {
            let (Some(algo), Some(env), Some(episodes)) = (algo, env, episodes) else {
                bail!("--algo, --env and --episodes are required without --config");
            };
            ExperimentConfig::new(env, algo, episodes, vec![1], "results")
        }
    };
    if let Some(algo) = algo {
        cfg.algo = algo;
    }
    if let Some(env) = env {
        cfg.env = env;
    }
    if let Some(episodes) = episodes {
        cfg.episodes = episodes;
    }
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    if let Some(seeds) = seeds {
        cfg.seeds = parse_seeds(&seeds)?;
    }
    if let Some(out) = out {
        cfg.output = out;
    }
    if env_file.is_some() {
        cfg.env_file = env_file;
    }
    if let Some(stride) = eval_stride {
        cfg.eval_stride = stride;
    }
    cfg.record_timing |= record_timing;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenEnv {
            env,
            seed,
            num_states,
            dim,
            out,
        } => {
            let (cmdp, safe) = envs::generate(env, seed, num_states, dim)?;
            let json = EnvironmentDocument::from_env(&cmdp, &safe).to_json()?;
            write_atomic(&out, json.as_bytes())?;
            println!("{}", out.display());
            Ok(true)
        }
        Command::Run {
            config,
            algo,
            env,
            episodes,
            seed,
            seeds,
            out,
            env_file,
            eval_stride,
            record_timing,
        } => {
            let cfg = build_config(
                config,
                algo,
                env,
                episodes,
                seed,
                seeds,
                out,
                env_file,
                eval_stride,
                record_timing,
            )?;
            let mut all_ok = true;
            for report in run_experiment(&cfg)? {
                match report.outcome {
                    Ok(path) => println!("{}", path.display()),
                    Err(e) => {
                        all_ok = false;
                        eprintln!("seed {}: {e}", report.seed);
                    }
                }
            }
            Ok(all_ok)
        }
        Command::Summarize { input } => {
            let written = write_summaries(&input)?;
            if written.is_empty() {
                bail!("no per-seed metrics files in {}", input.display());
            }
            for path in written {
                println!("{}", path.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
