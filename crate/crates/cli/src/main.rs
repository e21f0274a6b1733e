use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iada::data::{save_csv, Dataset};
use iada_cli::compare::{compare, load_summaries};
use iada_cli::config::RunConfig;
use iada_cli::run::{run_config, sweep, sweep_means, ALPHA_GRID};
use iada_cli::scenario;
use iada_cli::verify::{report_line, run_suites, VerifyOptions};
use iada_cli::CliError;

#[derive(Parser)]
#[command(name = "iada", version, about = "Meta-learned implicit adversarial augmentation experiments")]
struct Cli {
    /// Root under which run directories are created.
    #[arg(long, global = true, env = "IADA_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, summaries and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Repeat a run over a grid of α values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = ALPHA_GRID.to_vec())]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Per-seed differences of candidate minus baseline.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the oracle suites; exits 1 if any fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        quick: bool,
        /// Negate ρ in the closed form to check the Jensen suite catches it.
        #[arg(long)]
        flip_rho_sign: bool,
    },
    /// Write the train/test/metadata CSVs a config would train on.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, seeds: Option<Vec<u64>>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seeds {
        cfg = cfg.with_seeds(s);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let root = cli.output_root;
    match cli.command {
        Command::Run { config, seeds } => {
            let cfg = load(&config, seeds)?;
            for s in run_config(&cfg, &root)? {
                println!(
                    "seed {}: accuracy {} worst class {} worst group {}",
                    s.seed,
                    fmt(s.accuracy),
                    fmt(s.worst_class_recall),
                    fmt(s.worst_group_accuracy)
                );
            }
            println!("artifacts in {}", root.join(&cfg.output_dir).display());
        }
        Command::Sweep { config, alphas, seeds } => {
            let cfg = load(&config, seeds)?;
            let rows = sweep(&cfg, &alphas, &root)?;
            println!("{:>6} {:>10} {:>12}", "alpha", "accuracy", "worst_class");
            for (a, acc, worst) in sweep_means(&rows) {
                println!("{a:>6} {:>10} {:>12}", fmt(acc), fmt(worst));
            }
            println!("table in {}", root.join(&cfg.output_dir).join("sweep.csv").display());
        }
        Command::Compare { baseline, candidate, json } => {
            let report = compare(&load_summaries(&baseline)?, &load_summaries(&candidate)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Verify { seed, quick, flip_rho_sign } => {
            let reports = run_suites(&VerifyOptions { seed, quick, flip_rho_sign })?;
            for r in &reports {
                println!("{}", report_line(r));
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::Verify(failed.join(", ")));
            }
        }
        Command::GenData { config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let s = scenario::build(&cfg.data, seed)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::Io { path: out.clone(), detail: e.to_string() })?;
            save_csv(&s.train, &out.join("train.csv"))?;
            if let Some(test) = &s.test {
                save_csv(test, &out.join("test.csv"))?;
            }
            let meta = Dataset::new(s.meta.features, s.meta.labels, s.meta.num_classes)?;
            save_csv(&meta, &out.join("meta.csv"))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
