use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sabr_cli::{
    bench, collect, evaluate, gen_corpus, simulate, split, train, BenchArgs, BenchEnv, CliError, CollectArgs,
    EvaluateArgs, GenCorpusArgs, SimulateArgs, SplitArgs, TrainArgs,
};

/// Short-video prefetch and bitrate experiments.
///
/// Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 validation error,
/// 4 configuration error.
#[derive(Parser)]
#[command(name = "sabr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (traces/ and videos/) to --out.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a corpus into <out>/train and <out>/test.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one policy over seeded sessions; one CSV row per session plus the mean.
    Simulate {
        #[arg(long)]
        policy: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        sessions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record expert decisions as JSON lines.
    Collect {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        sessions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Imitation pretraining followed by policy-gradient fine-tuning.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Expert dataset to imitate instead of collecting one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Skip imitation and fine-tune from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare policies on shared sessions; writes summary.csv and cdf.csv.
    Evaluate {
        #[arg(long = "policy", required = true)]
        policies: Vec<String>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        sessions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-decision inference latency in the E1 and E2 environments.
    Bench {
        #[arg(long = "policy")]
        policies: Vec<String>,
        #[arg(long = "env")]
        envs: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus { config, seed, out } => {
            let c = gen_corpus(&GenCorpusArgs { config, seed, out })?;
            println!("{} traces, {} videos", c.network_traces.len(), c.videos.len());
        }
        Command::Split { corpus, ratio, seed, out } => {
            let (a, b) = split(&SplitArgs { corpus, ratio, seed, out })?;
            println!(
                "train: {} traces, {} videos; test: {} traces, {} videos",
                a.network_traces.len(),
                a.videos.len(),
                b.network_traces.len(),
                b.videos.len()
            );
        }
        Command::Simulate {
            policy,
            corpus,
            config,
            seed,
            sessions,
            out,
        } => {
            let r = simulate(&SimulateArgs {
                policy,
                corpus,
                config,
                seed,
                sessions,
                out,
            })?;
            println!("mean utility {:.4} over {} sessions", r.mean.utility, r.sessions.len());
        }
        Command::Collect {
            corpus,
            config,
            seed,
            sessions,
            out,
        } => {
            let ds = collect(&CollectArgs {
                corpus,
                config,
                seed,
                sessions,
                out,
            })?;
            println!("{} decisions, {} with a bitrate choice", ds.bm_pairs(), ds.ba_pairs());
        }
        Command::Train {
            config,
            out,
            corpus,
            dataset,
            resume,
        } => {
            let o = train(&TrainArgs {
                config,
                out,
                corpus,
                dataset,
                resume,
            })?;
            println!("best checkpoint from RL epoch {}", o.best_epoch);
        }
        Command::Evaluate {
            policies,
            corpus,
            config,
            seed,
            sessions,
            out,
        } => {
            for r in evaluate(&EvaluateArgs {
                policies,
                corpus,
                config,
                seed,
                sessions,
                out,
            })? {
                println!("{:<24} {:>10.4}", r.label, r.mean.utility);
            }
        }
        Command::Bench {
            policies,
            envs,
            reps,
            seed,
            config,
            out,
        } => {
            let envs = envs.iter().map(|e| BenchEnv::parse(e)).collect::<Result<Vec<_>, _>>()?;
            let rows = bench(&BenchArgs {
                policies,
                envs,
                reps,
                seed,
                config,
                out,
            })?;
            for r in &rows {
                println!(
                    "{:<16} {} {:>12.2} us  {:>10.1} nodes",
                    r.policy,
                    r.env.name(),
                    r.mean_latency_s * 1e6,
                    r.nodes_per_decision
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
