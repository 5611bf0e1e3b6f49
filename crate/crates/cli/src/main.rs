use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cskn_cli::commands::{self, Queries};
use cskn_cli::config::RunConfig;
use cskn_cli::manifest::DatasetManifest;
use cskn_cli::persist::save_model;
use cskn_cli::report::Report;
use cskn_cli::selftest::run_selftest;
use cskn_cli::{CliError, Result};

/// Convolutional sparse kernel network features for image retrieval and
/// classification.
#[derive(Parser)]
#[command(name = "cskn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a network from the train entries of a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Model path; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the descriptor of every manifest entry.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank train entries for each query and report precision at Q.
    Retrieve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `test` for every test entry, or comma-separated manifest paths.
        #[arg(long, default_value = "test")]
        queries: String,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,30")]
        q: Vec<usize>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train the linear SVM on train entries and score the test entries.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the built-in synthetic grating benchmark.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also save the benchmark model here.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Check core invariants against brute-force oracles.
    Selftest {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<ExitCode> {
    let mode = commands::parallelism_from_env()?;
    match command {
        Command::Train { config, manifest, out } => {
            let config = RunConfig::load(&config)?;
            let out = out
                .or_else(|| config.output.clone())
                .ok_or_else(|| CliError::Usage("no model path: pass --out or set 'output' in the config".into()))?;
            let manifest = DatasetManifest::load(&manifest)?;
            let model = commands::train(&config, &manifest, &out, mode)?;
            eprintln!("wrote {} ({} layers, descriptor length {})", out.display(), model.layers.len(), model.descriptor_len());
        }
        Command::Extract { model, manifest, out } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let set = commands::extract(&model, &manifest, &out, mode)?;
            eprintln!("wrote {} descriptors of length {} to {}", set.len(), set.dim, out.display());
        }
        Command::Retrieve { model, manifest, queries, q, report, json } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let queries: Queries = queries.parse()?;
            let r = commands::retrieve(&model, &manifest, &queries, &q, mode)?;
            emit(&r, &report, json.as_deref())?;
        }
        Command::Classify { model, manifest, report, json } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let r = commands::classify(&model, &manifest, mode)?;
            emit(&r, &report, json.as_deref())?;
        }
        Command::Evaluate { report, json, seed, model_out } => {
            let (r, model) = commands::evaluate(seed, mode)?;
            if let Some(path) = model_out {
                save_model(&model, &path)?;
            }
            emit(&r, &report, json.as_deref())?;
        }
        Command::Selftest { report, seed } => {
            let outcomes = run_selftest(seed);
            let mut r = Report::new();
            for o in &outcomes {
                println!("{}\t{}\t{}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                r.text(o.name, if o.passed { "pass" } else { "fail" });
            }
            if let Some(path) = report {
                r.write(&path, None)?;
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                eprintln!("{failed} self-test check(s) failed");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn emit(report: &Report, path: &std::path::Path, json: Option<&std::path::Path>) -> Result<()> {
    report.write(path, json)?;
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
