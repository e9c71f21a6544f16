//! `dsfl`: command-line driver for simulation, training, attacks, benchmarks,
//! self-checks and replay.

mod commands;
mod error;
mod output;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Job, Mutation, SelftestConfig};
use error::{exit, load_config, CliError};
use output::{read_manifest, OutDir};

#[derive(Parser)]
#[command(name = "dsfl", version, about = "Sharded verifiable secure aggregation for federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; receives the artifacts and manifest.json.
    #[arg(long, env = "DSFL_OUT_DIR", default_value = "dsfl-out")]
    out: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run protocol rounds on random inputs and write transcripts.
    Simulate(Common),
    /// Federated logistic-regression training over a fraud dataset.
    Train(Common),
    /// Poisoning, collusion and curious-server experiments.
    Attack(Common),
    /// Key-exchange and latency scaling benchmark.
    Bench(Common),
    /// Built-in correctness checks.
    Selftest {
        /// Inject a known defect; the checks are then expected to fail.
        #[arg(long, value_enum)]
        mutate: Option<Mutation>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Re-run a previous invocation and compare its deterministic outputs.
    Replay {
        /// manifest.json written by the original run.
        #[arg(long)]
        manifest: PathBuf,
        /// Where the re-run writes; defaults to `replay/` next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(job: &Job, origin: &Path, out_root: &Path) -> Result<(u8, output::Manifest), CliError> {
    let mut out = OutDir::create(out_root)?;
    let code = match job.run(origin, &mut out) {
        Ok(code) => code,
        Err(e) if e.exit_code() == exit::UNRECOVERABLE => {
            eprintln!("error: {e}");
            exit::UNRECOVERABLE
        }
        Err(e) => return Err(e),
    };
    let manifest = out.finish(job.name(), Some(job.seed()), job.config_value(), code)?;
    Ok((code, manifest))
}

fn run_job(mut job: Job, origin: &Path, args: &OutArgs) -> Result<u8, CliError> {
    if let Some(s) = args.seed {
        job.override_seed(s);
    }
    let (code, _) = execute(&job, origin, &args.out)?;
    Ok(code)
}

fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<u8, CliError> {
    let original = read_manifest(manifest_path)?;
    let job = Job::from_value(&original.subcommand, original.config.clone()).map_err(|m| CliError::Invalid {
        path: manifest_path.display().to_string(),
        message: m,
    })?;
    let out_root = out.unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new(".")).join("replay"));
    let (code, again) = execute(&job, manifest_path, &out_root)?;
    let mut mismatches = Vec::new();
    if code != original.exit_code {
        mismatches.push(format!("exit code {} vs {}", code, original.exit_code));
    }
    let mut compared = 0;
    for a in &original.artifacts {
        let Some(want) = &a.sha256 else { continue };
        match again.artifacts.iter().find(|b| b.path == a.path) {
            Some(b) if b.sha256.as_ref() == Some(want) => compared += 1,
            Some(_) => mismatches.push(format!("{} differs", a.path)),
            None => mismatches.push(format!("{} missing", a.path)),
        }
    }
    for b in &again.artifacts {
        if !original.artifacts.iter().any(|a| a.path == b.path) {
            mismatches.push(format!("{} not in the original run", b.path));
        }
    }
    if mismatches.is_empty() {
        println!("replay: {compared} artifacts byte-identical");
        Ok(exit::OK)
    } else {
        for m in &mismatches {
            eprintln!("replay mismatch: {m}");
        }
        Err(CliError::CheckFailed(format!("{} replay mismatches", mismatches.len())))
    }
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Simulate(c) => run_job(Job::Simulate(load_config(&c.config)?), &c.config, &c.out),
        Command::Train(c) => run_job(Job::Train(load_config(&c.config)?), &c.config, &c.out),
        Command::Attack(c) => run_job(Job::Attack(load_config(&c.config)?), &c.config, &c.out),
        Command::Bench(c) => run_job(Job::Bench(load_config(&c.config)?), &c.config, &c.out),
        Command::Selftest { mutate, out } => {
            let job = Job::Selftest(SelftestConfig { seed: 0, mutate });
            run_job(job, Path::new("selftest"), &out)
        }
        Command::Replay { manifest, out } => replay(&manifest, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::BAD_INPUT } else { exit::OK });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
