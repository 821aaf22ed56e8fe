use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rsmfc_core::runner::{
    load_config, resolve_seed, run, ExperimentConfig, RunManifest, RunOptions, RunnerError, Suite,
    SEED_ENV,
};

/// Risk-sensitive mean-field control experiments.
#[derive(Parser)]
#[command(name = "rsmfc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the suites listed in a configuration file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one suite with the default configuration (or `--config`).
    Check {
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; beats RSMFC_SEED and the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Run the reproduction at full time resolution.
    #[arg(long)]
    paper_exact: bool,
}

fn report(manifest: &RunManifest) {
    for s in &manifest.suites {
        let verdict = if s.passed { "PASS" } else { "FAIL" };
        println!("{:<12} {verdict}  ({:.3} s)", s.name, s.wall_clock_s);
        if let Some(err) = s.details.get("error").and_then(|e| e.as_str()) {
            println!("    {err}");
        }
    }
    if let Some(dir) = manifest
        .files
        .first()
        .map(|_| manifest.config.outputs.display())
    {
        println!("outputs in {dir}");
    }
}

fn execute(cli: Cli) -> Result<bool, RunnerError> {
    let (mut config, common, dry) = match cli.command {
        Command::Run { config, common } => (load_config(&config)?, common, false),
        Command::Check {
            suite,
            config,
            common,
        } => {
            let suite: Suite = suite.parse()?;
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            cfg.suites = vec![suite];
            let dry = common.out.is_none();
            (cfg, common, dry)
        }
    };
    let env = std::env::var(SEED_ENV).ok();
    config.seed = resolve_seed(common.seed, env.as_deref(), config.seed)?;
    let options = RunOptions {
        out: common.out,
        dry,
        paper_exact: common.paper_exact,
    };

    let manifest = match common.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(std::io::Error::other)?;
            pool.install(|| run(&config, &options))?
        }
        None => run(&config, &options)?,
    };
    report(&manifest);
    Ok(manifest.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("rsmfc: {e}");
            ExitCode::from(2)
        }
    }
}
