//! Command-line driver: loads a problem, runs one library operation and
//! writes JSON to standard output plus optional CSV files and a manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pathio;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "omkit", version, about = "Onsager-Machlup actions, most probable paths and tube probabilities")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "OMKIT_WORKERS", default_value_t = 0)]
    pub workers: usize,

    /// Directory for CSV outputs, result.json and manifest.json.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Problem {
    /// Problem file (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,

    /// Builtin problem: paper-ex-4, ou-degenerate or ou.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActionForm {
    /// Second-component form with symbolic divergence.
    Reduced,
    /// Full-state form through the generalized inverse of the noise matrix.
    Global,
    /// Second-order form, needs p = x2.
    Hamiltonian,
    /// Reduced non-degenerate equation, needs p independent of x2.
    Nondegenerate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Target {
    Full,
    Second,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Action functional of a path.
    Action {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_enum, default_value = "reduced")]
        form: ActionForm,
    },
    /// Most probable path between boundary states.
    Mpp {
        #[command(flatten)]
        problem: Problem,
        /// Terminal data: (phi1, dphi1/dt) for p = x2 systems, else phi2.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        end: Vec<f64>,
        /// Grid intervals (default: T / 0.001).
        #[arg(long)]
        steps: Option<usize>,
        /// `linear`, `tanh:WIDTH` or `path:FILE`; repeat for several starts.
        #[arg(long, default_value = "linear")]
        init: Vec<String>,
        #[arg(long, default_value_t = 1e-6)]
        grad_tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
        /// Node spacing for the Euler-Lagrange residual.
        #[arg(long, default_value_t = 0.01)]
        residual_spacing: f64,
        /// Also report the nested-difference residual of the scalar
        /// double-well example.
        #[arg(long)]
        example_residual: bool,
    },
    /// Monte Carlo tube probabilities around a path.
    Tube {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        /// `sup`, `lp:P` or `holder:ALPHA`.
        #[arg(long, default_value = "sup")]
        norm: String,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Brownian-bridge correction between grid points (sup norm only).
        #[arg(long)]
        bridge: bool,
        #[arg(long, value_enum, default_value = "full")]
        target: Target,
    },
    /// Tube-probability ratio of two paths against the action difference.
    Ratio {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        psi: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        #[arg(long, default_value = "sup")]
        norm: String,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, value_enum, default_value = "full")]
        target: Target,
    },
    /// Interacting-particle simulation.
    Simulate {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, default_value_t = 1000)]
        particles: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Defaults to the problem's T.
        #[arg(long)]
        horizon: Option<f64>,
        /// Record every `stride`-th grid time.
        #[arg(long, default_value_t = 10)]
        stride: usize,
        /// Number of trajectories written to trajectories.csv.
        #[arg(long, default_value_t = 10)]
        save: usize,
    },
    /// Penrose identities and the block formula on random matrices.
    PinvCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        max_dim: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 1e-8)]
        partitioned_tol: f64,
    },
    /// Assumption audits.
    Audit {
        #[command(subcommand)]
        kind: Audit,
    },
}

#[derive(Debug, Subcommand)]
pub enum Audit {
    /// Sign-flip invariance of the path norms on simulated paths.
    H1 {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        #[arg(long, value_delimiter = ',', default_value = "sup,lp:2,lp:4,holder:0.25")]
        norms: Vec<String>,
    },
    /// Small-ball exponents of Brownian motion.
    H3 {
        #[arg(long, default_value = "sup")]
        norm: String,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.8,0.65,0.55,0.5,0.45,0.4")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long)]
        bridge: bool,
    },
    /// First-component deviation against the Gronwall constant.
    H4 {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sup,lp:2,lp:4,holder:0.25")]
        norms: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// d/dt E[h] against E[(d/dt + L) h].
    Generator {
        #[command(flatten)]
        problem: Problem,
        /// Test functional in the drift language.
        #[arg(long)]
        h: String,
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value_t = 5)]
        windows: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Action { .. } => "action",
            Command::Mpp { .. } => "mpp",
            Command::Tube { .. } => "tube",
            Command::Ratio { .. } => "ratio",
            Command::Simulate { .. } => "simulate",
            Command::PinvCheck { .. } => "pinv-check",
            Command::Audit { kind } => match kind {
                Audit::H1 { .. } => "audit h1",
                Audit::H3 { .. } => "audit h3",
                Audit::H4 { .. } => "audit h4",
                Audit::Generator { .. } => "audit generator",
            },
        }
    }
}

/// Parses arguments, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(std::io::stdout(), "{e}");
                return 0;
            }
            return emit_error(&CliError::Usage(e.kind().to_string() + ": " + e.to_string().trim()));
        }
    };
    match run(&cli) {
        Ok(out) => {
            // A closed pipe downstream is not an error of the run.
            let _ = writeln!(std::io::stdout(), "{}", out.stdout);
            match out.failure {
                Some(err) => emit_error(&err),
                None => 0,
            }
        }
        Err(e) => emit_error(&e),
    }
}

fn emit_error(e: &CliError) -> i32 {
    let doc = serde_json::json!({ "error": e.report() });
    let _ = writeln!(std::io::stderr(), "{doc}");
    e.exit_code()
}
