//! `metaspec` command-line front end.
//!
//! Every command writes one canonical JSON report (config, tool version,
//! input digests, result). Exit codes: 0 pass, 2 soft deviations, 3 hard
//! failure, 4 input error, 5 invariant violation, 6 degeneracy, 7 numerical
//! or domain error.

mod commands;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metaspec::report::canonical_string;
use metaspec::{Error, Tolerances};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "metaspec", version, about = "Metastability analysis of finite reversible Markov chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "METASPEC_JOBS")]
    jobs: Option<usize>,
    /// Write the JSON report to this file instead of stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Directory for CSV exports; nothing is exported without it.
    #[arg(long, global = true)]
    csv_dir: Option<PathBuf>,
    /// Tolerance override such as `identity=1e-9`; repeatable.
    #[arg(long = "tol", global = true, value_parser = parse_override)]
    tol: Vec<(String, f64)>,
    /// JSON file with tolerance overrides.
    #[arg(long, global = true)]
    tolerances: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ChainArgs {
    /// Chain file, `.json` or `.csv` edge list.
    #[arg(long)]
    chain: PathBuf,
    /// Measure file `state,q` for a CSV edge list.
    #[arg(long)]
    measure: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct MetastableArgs {
    /// Metastable states, comma separated labels or indices.
    #[arg(long, conflicts_with = "auto")]
    metastable: Option<String>,
    /// Propose a metastable set of this size.
    #[arg(long)]
    auto: Option<usize>,
    /// Exclusion set the hierarchy starts from.
    #[arg(long)]
    exclude: Option<String>,
    /// Separation threshold for the metastable set.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Build a chain from a potential specification.
    Build {
        /// Landscape JSON: dimension, size, preset or potential table, beta.
        #[arg(long)]
        spec: PathBuf,
        /// Output chain file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Hitting probabilities, Laplace transforms and conditioned mean times.
    Hit {
        #[command(flatten)]
        chain: ChainArgs,
        /// Target states, comma separated labels or indices.
        #[arg(long)]
        target: String,
        /// States that kill the walk before it reaches the target.
        #[arg(long)]
        avoid: Option<String>,
        /// Real Laplace argument; omitted means hitting probabilities.
        #[arg(long, allow_hyphen_values = true)]
        u: Option<f64>,
        /// Also report conditioned mean hitting times.
        #[arg(long)]
        mean: bool,
    },
    /// Metastable set, valleys, capacities and hierarchy.
    Analyze {
        #[command(flatten)]
        chain: ChainArgs,
        #[command(flatten)]
        set: MetastableArgs,
    },
    /// Low Dirichlet spectrum, optionally checked against a hierarchy.
    Spectrum {
        #[command(flatten)]
        chain: ChainArgs,
        /// Dirichlet set the spectrum is taken on; empty by default.
        #[arg(long)]
        exclude: Option<String>,
        /// Number of eigenpairs to report.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Hierarchy or analyze report to verify the spectrum against.
        #[arg(long)]
        verify: Option<PathBuf>,
    },
    /// Exit-time law from one state to a target set.
    Exitlaw {
        #[command(flatten)]
        chain: ChainArgs,
        /// Starting state.
        #[arg(long)]
        from: String,
        /// Target states, comma separated labels or indices.
        #[arg(long)]
        target: String,
        /// Number of low modes in the truncated residue expansion.
        #[arg(long, default_value_t = 1)]
        keep: usize,
        /// Monte Carlo trajectories; zero disables sampling.
        #[arg(long, default_value_t = 0)]
        mc: usize,
        /// Seed of the Monte Carlo streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full check matrix on one chain.
    Verify {
        #[command(flatten)]
        chain: ChainArgs,
        #[command(flatten)]
        set: MetastableArgs,
        /// Monte Carlo trajectories per exit-law comparison; zero disables sampling.
        #[arg(long, default_value_t = 0)]
        mc: usize,
        /// Seed of the Monte Carlo streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_override(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("{v:?}: {e}"))?;
    Ok((k.trim().to_string(), v))
}

/// Outcome class of a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Pass,
    Soft,
    Hard,
}

impl Outcome {
    fn code(self) -> u8 {
        match self {
            Outcome::Pass => 0,
            Outcome::Soft => 2,
            Outcome::Hard => 3,
        }
    }
}

/// Failure before a report could be produced.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Input(_) => ("input", 4),
            Failure::Lib(e) => match e {
                Error::Structural(_) | Error::Data(_) | Error::Argument(_) | Error::EmptyOperator => ("input", 4),
                Error::Io(_) | Error::Json(_) | Error::Csv(_) => ("input", 4),
                Error::Invariant(_) => ("invariant", 5),
                Error::Degeneracy(_) => ("degeneracy", 6),
                Error::Domain { .. } | Error::Numerical(_) => ("numerical", 7),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Input(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

/// Files read during a run, keyed by path, with their SHA-256 digests.
#[derive(Default)]
pub struct Inputs {
    digests: BTreeMap<String, String>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        self.digests.insert(path.display().to_string(), format!("{:x}", Sha256::digest(&bytes)));
        Ok(bytes)
    }

    pub fn note(&mut self, path: &Path) -> Result<(), Failure> {
        self.read(path).map(|_| ())
    }
}

/// Settings shared by every command.
pub struct Context {
    pub tol: Tolerances,
    pub csv_dir: Option<PathBuf>,
    pub inputs: Inputs,
}

fn tolerances(cli: &Cli, inputs: &mut Inputs) -> Result<Tolerances, Failure> {
    let mut value = serde_json::to_value(Tolerances::default()).map_err(Error::from)?;
    if let Some(path) = &cli.tolerances {
        let bytes = inputs.read(path)?;
        let file: BTreeMap<String, f64> =
            serde_json::from_slice(&bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        for (k, v) in file {
            set_tolerance(&mut value, &k, v)?;
        }
    }
    for (k, v) in &cli.tol {
        set_tolerance(&mut value, k, *v)?;
    }
    let tol: Tolerances = serde_json::from_value(value).map_err(Error::from)?;
    tol.check()?;
    Ok(tol)
}

fn set_tolerance(value: &mut Value, key: &str, v: f64) -> Result<(), Failure> {
    let map = value.as_object_mut().expect("tolerances serialize as an object");
    match map.get_mut(key) {
        Some(slot) => {
            *slot = json!(v);
            Ok(())
        }
        None => Err(Failure::Input(format!("unknown tolerance {key:?}"))),
    }
}

fn run(cli: &Cli) -> Result<(Value, Outcome), Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Input("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Input(format!("thread pool: {e}")))?;
    }
    let mut inputs = Inputs::default();
    let tol = tolerances(cli, &mut inputs)?;
    let mut ctx = Context { tol, csv_dir: cli.csv_dir.clone(), inputs };
    if let Some(dir) = &ctx.csv_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    }
    let (result, outcome) = commands::dispatch(&cli.command, &mut ctx)?;
    let name = match &cli.command {
        Command::Build { .. } => "build",
        Command::Hit { .. } => "hit",
        Command::Analyze { .. } => "analyze",
        Command::Spectrum { .. } => "spectrum",
        Command::Exitlaw { .. } => "exitlaw",
        Command::Verify { .. } => "verify",
    };
    let report = json!({
        "tool": "metaspec",
        "version": env!("CARGO_PKG_VERSION"),
        "command": name,
        "config": {
            "arguments": serde_json::to_value(&cli.command).map_err(Error::from)?,
            "tolerances": serde_json::to_value(&ctx.tol).map_err(Error::from)?,
        },
        "inputs": ctx.inputs.digests,
        "result": result,
    });
    Ok((report, outcome))
}

fn emit(text: &str, path: Option<&Path>) -> std::io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()
        }
    }
}

fn fail(f: &Failure) -> ExitCode {
    let (kind, code) = f.kind_and_code();
    let body = json!({"error": {"kind": kind, "message": f.message(), "exit_code": code}});
    let text = canonical_string(&body).unwrap_or_else(|_| format!("{body}\n"));
    eprint!("{text}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            return fail(&Failure::Input(e.to_string().trim_end().to_string()));
        }
    };
    match run(&cli) {
        Ok((report, outcome)) => {
            let text = match canonical_string(&report) {
                Ok(t) => t,
                Err(e) => return fail(&Failure::Lib(e)),
            };
            if let Err(e) = emit(&text, cli.report.as_deref()) {
                return fail(&Failure::Input(format!("writing report: {e}")));
            }
            ExitCode::from(outcome.code())
        }
        Err(f) => fail(&f),
    }
}
