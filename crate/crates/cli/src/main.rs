//! `dislocgas`: run a verification suite or experiment from a TOML config.
//!
//! Exit codes: 0 pass, 1 fail, 2 invalid usage or config (nothing written),
//! 3 inconclusive, 4 runtime error (manifest records the error).

mod artifacts;
mod config;
mod run;

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use dislocgas_core::report::Verdict;
use tracing::{error, info};

use artifacts::{ManifestInput, Output};
use config::{ExperimentConfig, Setup};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "dislocgas", version, about = "Dislocation-line gas verification suites and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out` or `runs/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the config value.
    #[arg(long, global = true, env = "DISLOCGAS_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Spectral operator identities on random fields.
    VerifyCalculus,
    /// Source-freeness of smoothed densities of Kirchhoff currents.
    VerifyBurgers,
    /// Elastic minimizer energy and residuals for the configured currents.
    Energy,
    /// Gram form of the elastic energy on cycle coordinates.
    Gram,
    /// Gibbs measure by exact enumeration or Metropolis sampling.
    Sample,
    /// Cluster coefficients, partition identity and Peierls certification.
    Cluster,
    /// Gaussian lower bound and observable decay bound.
    Bound,
    /// Dipole remainder bounds for the free-space kernels.
    Dipole,
    /// Variance of the observable against β.
    SweepVariance,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::VerifyCalculus => "verify-calculus",
            Command::VerifyBurgers => "verify-burgers",
            Command::Energy => "energy",
            Command::Gram => "gram",
            Command::Sample => "sample",
            Command::Cluster => "cluster",
            Command::Bound => "bound",
            Command::Dipole => "dipole",
            Command::SweepVariance => "sweep-variance",
        }
    }

    fn run(self, cfg: &ExperimentConfig, s: &Setup, seed: u64) -> Result<Output, String> {
        match self {
            Command::VerifyCalculus => run::verify_calculus(cfg, s, seed),
            Command::VerifyBurgers => run::verify_burgers(cfg, s, seed),
            Command::Energy => run::energy(cfg, s),
            Command::Gram => run::gram_cmd(cfg, s),
            Command::Sample => run::sample(cfg, s, seed),
            Command::Cluster => run::cluster_cmd(cfg, s),
            Command::Bound => run::bound(cfg, s),
            Command::Dipole => run::dipole_cmd(cfg, s),
            Command::SweepVariance => run::sweep_variance(cfg, s),
        }
    }
}

/// Log sink copying every line to stderr and `run.log`.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.0.flush()
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("dislocgas: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn exit_code(v: Verdict) -> u8 {
    match v {
        Verdict::Pass => 0,
        Verdict::Fail => EXIT_FAIL,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let Some(path) = cli.config.as_deref() else {
        return usage_error("--config is required");
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return usage_error(format!("{}: {e}", path.display())),
    };
    let cfg = match ExperimentConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => return usage_error(format!("{}: {e}", path.display())),
    };
    let setup = match cfg.validate() {
        Ok(s) => s,
        Err(e) => return usage_error(format!("{}: {e}", path.display())),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let threads =
        cli.threads.or(cfg.threads).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return usage_error("threads must be positive");
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        return usage_error(format!("thread pool: {e}"));
    }
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| Path::new("runs").join(name));
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("dislocgas: {}: {e}", dir.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    let log = match File::create(dir.join("run.log")) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("dislocgas: {}: {e}", dir.display());
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    tracing_subscriber::fmt().with_writer(Mutex::new(Tee(log))).with_target(false).init();
    info!(subcommand = name, seed, threads, config = %path.display(), out = %dir.display(), "start");

    let result = cli.command.run(&cfg, &setup, seed);
    let (output, code, err) = match result {
        Ok(out) => {
            let code = exit_code(out.verdict);
            info!(verdict = %out.verdict, "done");
            (Some(out), code, None)
        }
        Err(e) => {
            error!("{e}");
            (None, EXIT_RUNTIME, Some(e))
        }
    };
    let manifest = ManifestInput {
        subcommand: name,
        config_text: &text,
        config: &cfg,
        seed,
        threads,
        exit_code: code as i32,
        error: err.as_deref(),
    };
    match artifacts::write(&dir, output.as_ref(), &manifest) {
        Ok(files) => {
            for f in files {
                info!(file = %f.display(), "wrote");
            }
            ExitCode::from(code)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
