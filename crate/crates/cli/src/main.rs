use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gammanet::config::ExperimentConfig;
use gammanet::experiment::{self, RunOptions, RunOutput};

#[derive(Parser)]
#[command(name = "gammanet", version, about = "Train and evaluate Γ-nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write its metrics.
    Run(RunArgs),
    /// Join metrics files into one normalized comparison table.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print exact values for an environment.
    Oracle {
        #[command(subcommand)]
        kind: OracleKind,
    },
    /// Train one fixed-timescale baseline per probe.
    Probes(RunArgs),
    /// Evaluate interpolation between probe baselines.
    Interp(RunArgs),
}

#[derive(Subcommand)]
enum OracleKind {
    /// State values of a Markov chain at every probe timescale.
    Mdp { config: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Validate the config without training.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, RunOptions), String> {
        let cfg = load(&self.config)?;
        let opts = RunOptions {
            seeds: self.seeds.clone(),
            out_dir: self.out_dir.clone(),
            dry_run: self.dry_run,
        };
        Ok((cfg, opts))
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, String> {
    ExperimentConfig::load(path).map_err(|e| format!("invalid config: {e}"))
}

fn report(cfg: &ExperimentConfig, dry_run: bool, out: RunOutput) -> Result<(), String> {
    if dry_run {
        println!("{}: config ok (hash {})", cfg.name, out.config_hash);
        return Ok(());
    }
    for f in &out.files {
        println!("{}", f.display());
    }
    if out.failures.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = out
            .failures
            .iter()
            .map(|(seed, e)| format!("seed {seed} failed: {e}"))
            .collect();
        Err(lines.join("\n"))
    }
}

type Runner = fn(&ExperimentConfig, &RunOptions) -> gammanet::Result<RunOutput>;

fn execute(args: &RunArgs, run: Runner) -> Result<(), String> {
    let (cfg, opts) = args.load()?;
    let out = run(&cfg, &opts).map_err(|e| e.to_string())?;
    report(&cfg, opts.dry_run, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => execute(args, experiment::run_experiment),
        Command::Probes(args) => execute(args, experiment::run_probes),
        Command::Interp(args) => execute(args, experiment::run_interp),
        Command::Compare { files, out } => experiment::compare_series(files, out)
            .map(|table| {
                for bar in &table.bars {
                    println!("{}\t{:.6}\t{:.6}", bar.series, bar.avg_norm_mse, bar.avg_norm_var);
                }
            })
            .map_err(|e| e.to_string()),
        Command::Oracle {
            kind: OracleKind::Mdp { config },
        } => load(config).and_then(|cfg| {
            let values = experiment::oracle_mdp(&cfg).map_err(|e| e.to_string())?;
            println!("tau,gamma,{}", {
                let n = values.first().map_or(0, |v| v.1.len());
                (0..n).map(|s| format!("s{s}")).collect::<Vec<_>>().join(",")
            });
            for (ts, v) in values {
                let cols: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                println!("{},{},{}", ts.tau(), ts.gamma(), cols.join(","));
            }
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
