use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use kac_chaos::error::KacError;
use kac_chaos::experiments::{run_experiment, Experiment, ExperimentReport, PartialConfig};
use kac_chaos::kac_system::Parametrization;

/// Kac particle system experiments.
#[derive(Parser, Debug)]
#[command(name = "kac-chaos", version)]
struct Cli {
    /// chaos-rate | chaos-rate-w4 | chaos-rate-w2 | covariance | decoupling |
    /// gap-decay | equilibrium | iid-rate
    experiment: Option<Experiment>,
    /// System sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Observation times, comma separated.
    #[arg(long, value_delimiter = ',')]
    t: Option<Vec<f64>>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Initial law: gaussian:E, uniform:a,b or student-like:p.
    #[arg(long)]
    f0: Option<String>,
    /// Moment order for the theoretical rates.
    #[arg(long)]
    p_init: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reference-flow size for non-Gaussian f0.
    #[arg(long)]
    n_ref: Option<usize>,
    /// rotation | polar
    #[arg(long)]
    param: Option<Parametrization>,
    /// Block sizes for the decoupling experiment, comma separated.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    /// Transport order for iid-rate.
    #[arg(long)]
    q: Option<u32>,
    /// CSV destination (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also emit the JSON report (next to --out, or on stdout).
    #[arg(long)]
    json: bool,
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exit with status 3 if an acceptance threshold fails.
    #[arg(long)]
    check: bool,
}

impl Cli {
    fn flags(&self) -> PartialConfig {
        PartialConfig {
            experiment: self.experiment,
            n_list: self.n.clone(),
            t_grid: self.t.clone(),
            replicas: self.replicas,
            p_init: self.p_init,
            f0: self.f0.clone(),
            seed: self.seed,
            n_ref: self.n_ref,
            param: self.param,
            output: self.out.clone(),
            blocks: self.blocks.clone(),
            q: self.q,
        }
    }
}

fn emit(report: &ExperimentReport, json: bool) -> Result<(), KacError> {
    match &report.config.output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            report.table.write_csv(&mut w)?;
            w.flush()?;
            if json {
                std::fs::write(path.with_extension("json"), report.to_json()? + "\n")?;
            }
        }
        None => {
            let mut out = io::stdout().lock();
            if json {
                writeln!(out, "{}", report.to_json()?)?;
            } else {
                report.table.write_csv(&mut out)?;
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<ExperimentReport, KacError> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| KacError::Config(format!("{}: {e}", path.display())))?;
            PartialConfig::from_json(&text)?
        }
        None => PartialConfig::default(),
    };
    let config = file.overlay(cli.flags()).resolve()?;
    let report = run_experiment(&config)?;
    emit(&report, cli.json)?;
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            for c in &report.checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                eprintln!("{status} {}: {}", c.name, c.detail);
            }
            for n in &report.notes {
                eprintln!("note: {n}");
            }
            if cli.check && !report.all_checks_pass() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                KacError::Io(_) => ExitCode::FAILURE,
                _ => ExitCode::from(2),
            }
        }
    }
}
