//! `seqkrr`: spectra, theory curves and Monte Carlo runs from a config file.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use seqkrr::checks::{self, CheckOptions, Status};
use seqkrr::config::Config;
use seqkrr::experiment::{ntk_spectrum, run_experiment, theory_points, write_report_csv};
use seqkrr::par::{set_thread_limit, Execution};
use seqkrr::spectral::{Spectrum, TRACE_TOLERANCE};
use seqkrr::theory::write_curve_csv;
use seqkrr::Error;

/// Default output directory when `--out` is not given.
const OUT_ENV: &str = "SEQKRR_OUT_DIR";

const BUNDLED: &[(&str, &str)] = &[
    ("fig1a", include_str!("../../../configs/fig1a.cfg")),
    ("fig1b", include_str!("../../../configs/fig1b.cfg")),
    ("fig2", include_str!("../../../configs/fig2.cfg")),
    ("fig3a1", include_str!("../../../configs/fig3a1.cfg")),
    ("fig3a2", include_str!("../../../configs/fig3a2.cfg")),
    ("figS6", include_str!("../../../configs/figS6.cfg")),
    ("figS7", include_str!("../../../configs/figS7.cfg")),
    ("smoke", include_str!("../../../configs/smoke.cfg")),
];

#[derive(Parser)]
#[command(name = "seqkrr", version, about = "Learning curves of sequential NTK regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose the configured kernel and write spectrum.csv.
    Spectrum,
    /// Evaluate theory curves and write theory.csv.
    Theory,
    /// Run the Monte Carlo experiment and write report.csv.
    Simulate,
    /// Run the acceptance checks.
    Check,
}

#[derive(Args)]
struct Common {
    /// Config file, or the name of a bundled config (fig1a, ..., smoke).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Skip Monte Carlo checks.
    #[arg(long, global = true)]
    fast: bool,
}

/// Process outcome with its exit code.
enum Failure {
    Config(String),
    Numerical(String),
    Invariant(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Invariant(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) | Error::Csv(_) => Failure::Io(msg),
            e if e.is_config() => Failure::Config(msg),
            _ => Failure::Numerical(msg),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct Timing {
    stage: &'static str,
    seconds: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_source: &'a str,
    config: &'a Config,
    seed: u64,
    threads: Option<usize>,
    timings: Vec<Timing>,
    outputs: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Failure::Config("`--threads` must be at least 1".into()));
        }
        set_thread_limit(n);
    }
    let exec = if c.threads == Some(1) {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Check => return check(c, exec),
        Command::Spectrum | Command::Theory | Command::Simulate => {}
    }
    let (source, mut cfg) = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.experiment.seed = seed;
    }
    fs::create_dir_all(&c.out).map_err(|e| io_err(&c.out, e))?;

    let mut timings = Vec::new();
    let start = Instant::now();
    let spectrum = match cli.command {
        Command::Spectrum => spectrum_stage(&cfg)?,
        _ => load_spectrum(&cfg)?,
    };
    timings.push(Timing {
        stage: "spectrum",
        seconds: start.elapsed().as_secs_f64(),
    });

    let (name, file) = match cli.command {
        Command::Spectrum => ("spectrum", "spectrum.csv"),
        Command::Theory => ("theory", "theory.csv"),
        _ => ("simulate", "report.csv"),
    };
    let path = c.out.join(file);
    let start = Instant::now();
    let writer = || -> Result<BufWriter<fs::File>, Failure> {
        Ok(BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?))
    };
    match cli.command {
        Command::Spectrum => spectrum.write_csv(writer()?)?,
        Command::Theory => {
            let points = theory_points(&cfg, &spectrum)?;
            write_curve_csv(&points, writer()?)?;
            println!("{} theory points", points.len());
        }
        _ => {
            let rows = run_experiment(&cfg, &spectrum, exec)?;
            write_report_csv(&rows, writer()?)?;
            let checked: Vec<bool> = rows.iter().filter_map(|r| r.within(0.15, 3.0)).collect();
            println!(
                "{} rows; theory within max(15%, 3 s.e.) of the MC mean for {}/{}",
                rows.len(),
                checked.iter().filter(|&&b| b).count(),
                checked.len()
            );
        }
    }
    timings.push(Timing {
        stage: name,
        seconds: start.elapsed().as_secs_f64(),
    });
    println!("wrote {}", path.display());

    let manifest = Manifest {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        config_source: &source,
        config: &cfg,
        seed: cfg.experiment.seed,
        threads: c.threads,
        timings,
        outputs: vec![file.to_string()],
    };
    let mpath = c.out.join(format!("{name}.manifest.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&mpath, e))?;
    fs::write(&mpath, text + "\n").map_err(|e| io_err(&mpath, e))?;
    Ok(())
}

fn load_config(arg: Option<&str>) -> Result<(String, Config), Failure> {
    let arg = arg.ok_or_else(|| Failure::Config("`--config` is required for this command".into()))?;
    let path = Path::new(arg);
    if path.exists() {
        return Ok((arg.to_string(), Config::load(path)?));
    }
    let stem = arg.strip_suffix(".cfg").unwrap_or(arg);
    match BUNDLED.iter().find(|(n, _)| *n == stem) {
        Some((n, text)) => Ok((format!("bundled:{n}"), Config::parse(text)?)),
        None => Err(Failure::Config(format!(
            "config `{arg}` is neither a file nor a bundled config ({})",
            BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn load_spectrum(cfg: &Config) -> Result<Spectrum, Failure> {
    Ok(seqkrr::experiment::config_spectrum(cfg)?)
}

/// Computes the spectrum and prints the trace diagnostics.
fn spectrum_stage(cfg: &Config) -> Result<Spectrum, Failure> {
    if cfg.spectrum.file.is_some() {
        let s = load_spectrum(cfg)?;
        println!("loaded {} levels; trace sum N(d,k) eta_k = {:.6}", s.levels().len(), s.trace());
        return Ok(s);
    }
    let dec = ntk_spectrum(&cfg.kernel, cfg.spectrum.k_max, cfg.spectrum.r)?;
    println!("kernel trace Theta(1)      {:.6}", dec.kernel_trace);
    println!("constant mode eta_0        {:.6} (set to zero)", dec.constant_mode);
    println!("resolved trace (k<=k_max)  {:.6}", dec.resolved_trace);
    println!(
        "trace gap                  {:.4}% (tolerance {:.0}%)",
        100.0 * dec.trace_gap(),
        100.0 * TRACE_TOLERANCE
    );
    println!("reconstruction error       {:.3e} (relative to Theta(1))", dec.reconstruction_error);
    let unresolved = dec.resolved.iter().filter(|&&r| !r).count();
    println!("unresolved levels          {unresolved} of {}", dec.resolved.len());
    Ok(dec.spectrum)
}

fn check(c: &Common, exec: Execution) -> Result<(), Failure> {
    let mut opts = CheckOptions {
        fast: c.fast,
        exec,
        seed: c.seed.unwrap_or(0),
        ..Default::default()
    };
    if let Some(arg) = c.config.as_deref() {
        let (_, cfg) = load_config(Some(arg))?;
        opts.spectrum_file = cfg.spectrum.file.clone();
        opts.input_dim = Some(cfg.kernel.input_dim);
    }
    let reports = checks::run_all(&opts);
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| r.status == Status::Fail).map(|r| r.name).collect();
    let skipped = reports.iter().filter(|r| r.status == Status::Skipped).count();
    println!(
        "{} passed, {} failed, {} skipped",
        reports.len() - failed.len() - skipped,
        failed.len(),
        skipped
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("failed: {}", failed.join(", "))))
    }
}
