use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpc_core::harness::{
    cmd_ablate, cmd_run, exit_code, gen_data, parse_config, AblationSpec, ExperimentConfig, GenDataParams,
};
use tpc_core::Result;

/// Continual-learning experiments: strategy comparisons, ablations and
/// synthetic data generation.
#[derive(Parser, Debug)]
#[command(name = "tpc", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured strategy over every seed.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare full TPC with single-mechanism ablations.
    Ablate {
        config: PathBuf,
        /// Comma separated: no_bias_correction, no_gradient_masking,
        /// no_phase3, no_replay, all or none. Defaults to all.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        toggles: Option<Vec<String>>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic Gaussian dataset (train to OUT, test to OUT's
    /// stem + `.test.csv`).
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Overrides {
    /// Comma separated seeds; the first one is the tuning run.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    eval_interval: Option<usize>,
    /// Record measured wall-clock seconds in the summary.
    #[arg(long)]
    wall_clock: bool,
}

impl Overrides {
    fn apply(self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(seeds) = self.seed_list {
            cfg.seeds = seeds;
        }
        if let Some(dir) = self.out_dir {
            cfg.out_dir = dir;
        }
        if let Some(n) = self.eval_interval {
            cfg.eval.interval = n;
        }
        if self.wall_clock {
            cfg.record_wall_clock = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, overrides } => {
            let cfg = overrides.apply(parse_config(&config)?)?;
            let outcome = cmd_run(&cfg)?;
            for f in &outcome.files {
                println!("{}", f.display());
            }
        }
        Command::Ablate {
            config,
            toggles,
            overrides,
        } => {
            let spec = match toggles {
                Some(list) => AblationSpec::parse(&list.join(","))?,
                None => AblationSpec::all(),
            };
            let cfg = overrides.apply(parse_config(&config)?)?;
            let outcome = cmd_ablate(&cfg, &spec)?;
            for f in &outcome.files {
                println!("{}", f.display());
            }
        }
        Command::GenData {
            classes,
            dim,
            per_class,
            separation,
            seed,
            out,
        } => {
            let params = GenDataParams {
                classes,
                dim,
                per_class,
                separation,
                seed,
            };
            let (train, test) = gen_data(&params, &out)?;
            println!("{}\n{}", train.display(), test.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = execute(cli.command);
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&outcome) as u8)
}
