//! `pcmvt`: simulate trials, run the responder pipeline and render reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcmvt_core::dataset::write_csv;
use pcmvt_core::pipeline::{report, run, RunConfig};
use pcmvt_core::trialsim::{simulate, write_truth_csv, SimConfig};
use pcmvt_core::Error;

#[derive(Parser)]
#[command(name = "pcmvt", version, about = "Responder identification and characterisation for longitudinal trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trial and write `trial.csv` and `truth.csv`.
    Simulate(Common),
    /// Run the configured pipeline and write the artifact bundle.
    Run(Common),
    /// Render the summary and ROC figures of a finished bundle.
    Report {
        /// Bundle directory (defaults to `--out`).
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_json_file(path).map_err(|e| e.in_stage("config"))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.workers.is_some() {
            config.workers = self.workers;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate().map_err(|e| e.in_stage("config"))?;
        Ok(config)
    }
}

fn cmd_simulate(args: &Common) -> Result<(), Error> {
    let config = args.load()?;
    let sim = config
        .sim
        .clone()
        .ok_or_else(|| Error::Configuration("simulate needs `sim` settings".into()).in_stage("config"))?;
    let study = simulate(&SimConfig { seed: config.seed, ..sim }).map_err(|e| e.in_stage("simulate"))?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    write_csv(&study.trial, out.join("trial.csv")).map_err(|e| e.in_stage("write"))?;
    write_truth_csv(&study.truth, out.join("truth.csv")).map_err(|e| e.in_stage("write"))?;
    println!("wrote {} patients to {}", study.trial.patients.len(), out.display());
    Ok(())
}

fn cmd_run(args: &Common) -> Result<(), Error> {
    let config = args.load()?;
    let manifest = run(&config)?;
    println!(
        "{}: {} repeat(s), tables {:?}, bundle {}",
        manifest.status,
        manifest.repeats.len(),
        manifest.aggregate_tables,
        config.output_dir.display()
    );
    Ok(())
}

fn cmd_report(bundle: &Path) -> Result<(), Error> {
    let r = report(bundle).map_err(|e| e.in_stage("report"))?;
    print!("{}", r.summary);
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    for f in &r.figures {
        println!("figure: {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report { bundle, out } => match bundle.as_ref().or(out.as_ref()) {
            Some(b) => cmd_report(b),
            None => Err(Error::Configuration("report needs a bundle directory".into()).in_stage("config")),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // stage errors already carry their cause in the message
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
