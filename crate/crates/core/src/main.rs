use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spatial_plm::config::ExperimentConfig;
use spatial_plm::dgp::ScenarioTag;
use spatial_plm::error::Error;
use spatial_plm::harness::{
    run_experiment, run_lemma_diagnostics, run_trend, summarize, LemmaKind,
};
use spatial_plm::report::{
    read_per_rep_csv, write_diagnostics, write_report, Format,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURES: u8 = 3;

#[derive(Parser)]
#[command(
    name = "spatial-plm",
    about = "Bias and coverage simulations for spatial partially linear models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured simulation scenario and write reports.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; replication streams make results independent of
        /// this setting.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Comma-separated list from csv, json, svg.
        #[arg(long, default_value = "csv,json")]
        formats: String,
    },
    /// Per-replication exact vs. spectrally predicted GLS bias in the
    /// eigenfunction scenario, with a scatter figure.
    EigenBias {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concentration diagnostics for the cross-term and quadratic-form
    /// statistics over a size sweep.
    Diagnose {
        /// "cross" or "quadform".
        #[arg(long)]
        lemma: String,
        /// Comma-separated sample sizes, e.g. 250,500,1000,2000.
        #[arg(long, value_delimiter = ',')]
        n_sweep: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute and print the summary table from an existing per-rep CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = true)]
        summary: bool,
    },
}

fn classify(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Simulate { config, out, threads, formats } => {
            let cfg = load_config(&config)?;
            let formats = Format::parse_list(&formats)?;
            if threads > 1 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            }
            if let Some(sweep) = &cfg.n_sweep {
                eprintln!("size sweep over n in {sweep:?}");
                let diags = run_trend(&cfg)?;
                write_diagnostics(&diags, &out)?;
                println!("wrote {} diagnostic rows to {}", diags.len(), out.display());
                return Ok(0);
            }
            let report = run_experiment(&cfg)?;
            write_report(&report, &out, &formats)?;
            for s in &report.summaries {
                println!(
                    "{:<14} reps {:>5}  mean bias {:+.4}  sd {:.4}  coverage {:.3}",
                    s.estimator, s.replications, s.mean_bias, s.sd_bias, s.coverage
                );
            }
            let frac = report.failure_fraction();
            if frac > 0.05 {
                eprintln!(
                    "{} of {} fits failed ({:.1}%)",
                    report.errors.len(),
                    report.rows.len() + report.errors.len(),
                    100.0 * frac
                );
                return Ok(EXIT_FAILURES);
            }
            Ok(0)
        }
        Command::EigenBias { config, out } => {
            let cfg = load_config(&config)?;
            if cfg.scenario != ScenarioTag::Eigen {
                return Err(Error::Config("eigen-bias requires scenario = \"eigen\"".into()));
            }
            let report = run_experiment(&cfg)?;
            write_report(&report, &out, &[Format::Csv, Format::Json, Format::Svg])?;
            let frac = report.failure_fraction();
            if frac > 0.05 {
                return Ok(EXIT_FAILURES);
            }
            let pairs = report
                .diagnostics
                .iter()
                .filter(|d| d.statistic == "exact_bias")
                .count();
            println!("wrote {pairs} exact/predicted bias pairs to {}", out.display());
            Ok(0)
        }
        Command::Diagnose { lemma, n_sweep, reps, seed, out } => {
            let kind = LemmaKind::parse(&lemma)?;
            let diags = run_lemma_diagnostics(kind, &n_sweep, reps, seed)?;
            write_diagnostics(&diags, &out)?;
            println!(
                "wrote {} {} rows to {}",
                diags.len(),
                kind.statistic_name(),
                out.display()
            );
            Ok(0)
        }
        Command::Report { input, summary } => {
            let text = fs::read_to_string(&input)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", input.display())))?;
            let rows = read_per_rep_csv(&text)?;
            if summary {
                let mut ids: Vec<String> = Vec::new();
                for r in &rows {
                    if !ids.contains(&r.estimator) {
                        ids.push(r.estimator.clone());
                    }
                }
                println!("estimator,replications,mean_bias,sd_bias,coverage");
                for s in summarize(&rows, &ids) {
                    println!(
                        "{},{},{:.6},{:.6},{:.4}",
                        s.estimator, s.replications, s.mean_bias, s.sd_bias, s.coverage
                    );
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}
