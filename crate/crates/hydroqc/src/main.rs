// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hydroqc::config::RunConfig;
use hydroqc::fixtures::{write_fixtures, FixtureSpec};
use hydroqc::stages::{Runner, Stage};
use hydroqc::{Error, Result};

/// Streamflow quality control and anomaly-detection benchmark.
#[derive(Parser)]
#[command(name = "hydroqc", version)]
struct Cli {
    /// TOML run configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set qc.outlier_sigma=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Artifact directory.
    #[arg(long, global = true, env = "HYDROQC_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse the site table, series files and paired archives.
    Ingest,
    /// Flag, gap-fill and accept or reject each site.
    Qc,
    /// Fit normalization statistics on training sites.
    FitStats,
    /// Place evaluation and training windows.
    Windows,
    /// Apply the training injector to training windows.
    InjectTrain,
    /// Apply the test injector to evaluation windows.
    InjectTest,
    /// Build weak and pattern labels from paired archives.
    Labels,
    /// Run the baseline detectors.
    Detect,
    /// Train the detection head and run it.
    TrainHead,
    /// Compute benchmark metrics.
    Evaluate,
    /// Write the report bundle.
    Report,
    /// Recompute the report from artifacts and compare.
    Verify,
    /// Every stage in order.
    Run,
    /// Write a synthetic corpus with a matching config file.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        sites: usize,
        #[arg(long, default_value_t = 8760)]
        hours: usize,
        /// Seed for the corpus itself.
        #[arg(long)]
        corpus_seed: Option<u64>,
    },
    /// Print the effective configuration.
    Config,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        for o in &cli.set {
            if let Some((k, v)) = o.split_once('=') {
                if k.trim() == "seed" && v.trim() != seed.to_string() {
                    return Err(Error::Usage(format!("--seed {seed} conflicts with --set {o}")));
                }
            }
        }
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(dir) = &cli.output_dir {
        cfg.paths.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn stage(cmd: &Cmd) -> Option<Stage> {
    Some(match cmd {
        Cmd::Ingest => Stage::Ingest,
        Cmd::Qc => Stage::Qc,
        Cmd::FitStats => Stage::FitStats,
        Cmd::Windows => Stage::Windows,
        Cmd::InjectTrain => Stage::InjectTrain,
        Cmd::InjectTest => Stage::InjectTest,
        Cmd::Labels => Stage::Labels,
        Cmd::Detect => Stage::Detect,
        Cmd::TrainHead => Stage::TrainHead,
        Cmd::Evaluate => Stage::Evaluate,
        Cmd::Report => Stage::Report,
        Cmd::Verify => Stage::Verify,
        _ => return None,
    })
}

fn run(cli: &Cli) -> Result<()> {
    if let Cmd::Fixtures {
        out,
        sites,
        hours,
        corpus_seed,
    } = &cli.cmd
    {
        let mut spec = FixtureSpec::default();
        spec.synth.sites = *sites;
        spec.synth.hours = *hours;
        if let Some(s) = corpus_seed {
            spec.seed = *s;
        }
        let cfg = write_fixtures(out, &spec)?;
        println!("fixtures: wrote {} sites; config {}", sites, cfg.display());
        return Ok(());
    }
    let cfg = load(cli)?;
    if let Cmd::Config = cli.cmd {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let runner = Runner::new(&cfg, cli.jobs);
    let stages: Vec<Stage> = match stage(&cli.cmd) {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    for s in stages {
        let msg = runner.run(s)?;
        println!("{}: {msg}", s.name());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
