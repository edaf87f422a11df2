use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use filmppo::collector::CollectMode;
use filmppo::env::generate_initial_states;
use filmppo::trainer::{self, checkpoint, EnvKind, EvalPolicy, RunConfig, RunFiles, TrainerError};

#[derive(Parser)]
#[command(name = "filmppo", version, about = "PPO with EOE/PT bootstrapping on falling-film and pendulum control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a run configuration.
#[derive(Args)]
struct Common {
    /// Configuration file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<CollectMode>,
    #[arg(long)]
    n_env: Option<usize>,
    /// Environment: shkadov or pendulum.
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate developed-film initial states for the Shkadov environment.
    GenStates {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
    },
    /// Train an agent, writing the resolved config, a CSV log and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        total_transitions: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Roll out one deterministic episode from a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Action counts at which film snapshots are written.
        #[arg(long, value_delimiter = ',', default_value = "0,100,200,300,400")]
        snapshots: Vec<usize>,
        /// Apply zero actuation instead of the policy mean.
        #[arg(long)]
        uncontrolled: bool,
    },
    /// Fixed-budget walltime comparison across environment counts.
    BenchSpeedup {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        env_counts: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        budget: usize,
    },
    /// Mean/min/max curves across training logs.
    Aggregate {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration file.
    DefaultConfig,
}

fn parse_mode(s: &str) -> Result<CollectMode, String> {
    s.parse().map_err(|e: filmppo::collector::CollectError| e.to_string())
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    s.parse()
}

fn resolve(common: &Common) -> Result<RunConfig, TrainerError> {
    let mut config = match &common.config {
        Some(path) => trainer::read_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(mode) = common.mode {
        config.mode = mode;
    }
    if let Some(n) = common.n_env {
        config.n_env = n;
    }
    if let Some(env) = common.env {
        config.env = env;
    }
    Ok(config)
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> Result<(), TrainerError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|source| TrainerError::Io { path: path.display().to_string(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), TrainerError> {
    match cli.command {
        Command::GenStates { common, count } => {
            let config = resolve(&common)?;
            let dir = common.out.clone().unwrap_or_else(|| config.shkadov.init_state_dir.clone());
            let files = generate_initial_states(&config.shkadov, count as usize, config.seed, &dir)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Train { common, total_transitions, run_id } => {
            let mut config = resolve(&common)?;
            if let Some(out) = &common.out {
                config.out_dir = out.clone();
            }
            if let Some(t) = total_transitions {
                config.total_transitions = t;
            }
            if let Some(id) = run_id {
                config.run_id = id;
            }
            let files = RunFiles::new(&config);
            let (_, trace) = trainer::train(&config, Some(&files))?;
            let last = trace.updates.last();
            println!(
                "{} updates, final score {}, log {}",
                trace.updates.len(),
                last.map_or(f64::NAN, |u| u.score_mean),
                files.log.display()
            );
        }
        Command::Eval { common, checkpoint: path, snapshots, uncontrolled } => {
            let config = resolve(&common)?;
            let agent = checkpoint::load(&path, config.ppo.clone())?;
            let policy = if uncontrolled { EvalPolicy::Uncontrolled } else { EvalPolicy::Mean };
            let report =
                trainer::evaluate(&config, &agent, policy, &snapshots, common.out.as_deref(), config.seed)?;
            println!("step,reward,max_deviation");
            for (k, r) in report.rewards.iter().enumerate() {
                let dev = report.max_deviation.get(k).map_or_else(|| "-".to_string(), |d| d.to_string());
                println!("{},{r},{dev}", k + 1);
            }
            println!("# score {}", report.score());
            for f in &report.snapshot_files {
                println!("# snapshot {}", f.display());
            }
        }
        Command::BenchSpeedup { common, env_counts, budget } => {
            let config = resolve(&common)?;
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
            if env_counts.iter().any(|&n| n > threads) {
                eprintln!("note: {threads} hardware threads available; larger environment counts cannot scale");
            }
            let rows = trainer::bench_speedup(&config, &env_counts, budget)?;
            write_or_print(common.out.as_ref(), &trainer::format_speedup_table(config.mode, &rows))?;
        }
        Command::Aggregate { logs, out } => {
            let text = trainer::aggregate_files(&logs)?;
            write_or_print(out.as_ref(), &text)?;
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
