//! Command-line front end: execute configured runs, post-process chain
//! logs into reports, and fit offline error models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use damcmc::config::RunConfig;
use damcmc::record::parse_chain_csv;
use damcmc::report::{build_report, chain_metrics, plot_files, TimingOverride};
use damcmc::runner::{execute_fit_prior_eem, execute_run};
use damcmc::{Error, Result};

/// Environment variable naming the root directory for run outputs when no
/// explicit `--output` is given.
const OUTPUT_ROOT_VAR: &str = "DAMCMC_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "damcmc",
    version,
    about = "Delayed-acceptance MCMC runs over reduced forward models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the run described by a JSON config and write all artifacts.
    Run {
        /// Path to the run configuration JSON.
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir` (or the
        /// config file stem) under $DAMCMC_OUTPUT_ROOT or the working
        /// directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize one or more chain logs into a report with plot CSVs.
    Report {
        /// Chain CSV files, one per chain; each is labeled by its path.
        #[arg(required = true, num_args = 1..)]
        chains: Vec<PathBuf>,
        /// The single-stage chain to compare the others against; must be
        /// one of the listed chain files.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Override the reduced-map seconds per evaluation.
        #[arg(long = "t-star")]
        t_star: Option<f64>,
        /// Override the exact-map seconds per evaluation.
        #[arg(long = "t")]
        t_exact: Option<f64>,
        /// Directory for report.json and plots/ (default: current).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Fraction of steps discarded before computing diagnostics.
        #[arg(long, default_value_t = 0.2)]
        burn_in: f64,
    },
    /// Fit the offline reduced-map error model from prior draws and write
    /// eem.json.
    FitPriorEem {
        /// Path to the run configuration JSON.
        config: PathBuf,
        /// Output directory, resolved like `run`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
        field: path.display().to_string(),
        reason: format!("cannot read config: {e}"),
    })?;
    RunConfig::from_json(&text)
}

fn resolve_out_dir(explicit: Option<PathBuf>, config: &RunConfig, config_path: &Path) -> PathBuf {
    if let Some(dir) = explicit {
        return dir;
    }
    let leaf = config.output_dir.clone().unwrap_or_else(|| {
        config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) => PathBuf::from(root).join(leaf),
        None => PathBuf::from(leaf),
    }
}

fn cmd_run(config_path: &Path, output: Option<PathBuf>) -> Result<u8> {
    let config = read_config(config_path)?;
    let out_dir = resolve_out_dir(output, &config, config_path);
    let summary = execute_run(&config, &out_dir)?;
    println!(
        "wrote {} ({} steps, {} exact and {} reduced evaluations, content hash {})",
        summary.out_dir.join("chain.csv").display(),
        summary.steps_completed,
        summary.exact_calls,
        summary.reduced_calls,
        &summary.chain_hash[..12],
    );
    if let Some(msg) = summary.failure {
        eprintln!("error: run stopped early, partial chain kept: {msg}");
        return Ok(3);
    }
    println!("wrote {}", summary.out_dir.join("report.json").display());
    Ok(0)
}

fn cmd_report(
    chains: &[PathBuf],
    baseline: Option<&Path>,
    t_star: Option<f64>,
    t_exact: Option<f64>,
    output: Option<PathBuf>,
    burn_in: f64,
) -> Result<u8> {
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::InvalidConfig {
            field: "burn_in".into(),
            reason: format!("must lie in [0, 1), got {burn_in}"),
        });
    }
    let out_dir = output.unwrap_or_else(|| PathBuf::from("."));
    let mut metrics = Vec::with_capacity(chains.len());
    let mut parsed_rows = Vec::with_capacity(chains.len());
    for path in chains {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
            field: path.display().to_string(),
            reason: format!("cannot read chain log: {e}"),
        })?;
        let parsed = parse_chain_csv(&text)?;
        if let Some(marker) = &parsed.error_marker {
            eprintln!(
                "note: {} is a partial chain from a failed run ({marker})",
                path.display()
            );
        }
        let label = path.display().to_string();
        metrics.push(chain_metrics(&label, &parsed.rows, burn_in)?);
        parsed_rows.push(parsed.rows);
    }
    let baseline_label = baseline.map(|p| p.display().to_string());
    let report = build_report(
        metrics,
        baseline_label.as_deref(),
        burn_in,
        None,
        TimingOverride {
            t_reduced_s: t_star,
            t_exact_s: t_exact,
        },
    )?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::InvalidConfig {
        field: out_dir.display().to_string(),
        reason: format!("cannot create output directory: {e}"),
    })?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json()).map_err(|e| Error::InvalidConfig {
        field: report_path.display().to_string(),
        reason: format!("cannot write report: {e}"),
    })?;
    for (k, rows) in parsed_rows.iter().enumerate() {
        let plot_dir = out_dir.join("plots").join(format!("chain_{k}"));
        std::fs::create_dir_all(&plot_dir).map_err(|e| Error::InvalidConfig {
            field: plot_dir.display().to_string(),
            reason: format!("cannot create plot directory: {e}"),
        })?;
        for (name, content) in plot_files(rows, burn_in)? {
            let path = plot_dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::InvalidConfig {
                field: path.display().to_string(),
                reason: format!("cannot write plot file: {e}"),
            })?;
        }
    }
    println!("wrote {}", report_path.display());
    Ok(0)
}

fn cmd_fit_prior_eem(config_path: &Path, output: Option<PathBuf>) -> Result<u8> {
    let config = read_config(config_path)?;
    let out_dir = resolve_out_dir(output, &config, config_path);
    let path = execute_fit_prior_eem(&config, &out_dir)?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { config, output } => cmd_run(&config, output),
        Command::Report {
            chains,
            baseline,
            t_star,
            t_exact,
            output,
            burn_in,
        } => cmd_report(
            &chains,
            baseline.as_deref(),
            t_star,
            t_exact,
            output,
            burn_in,
        ),
        Command::FitPriorEem { config, output } => cmd_fit_prior_eem(&config, output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Solver(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
