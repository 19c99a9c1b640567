//! Command-line front end.
//!
//! Exit codes: 0 success, 2 design or verification infeasible, 3 malformed
//! input, 4 certification failure.

pub mod files;

use std::ffi::OsString;
use std::io::Write;

use clap::{Args, Parser, Subcommand};

use crate::blockla::{min_eigen_sym, norm_inf};
use crate::model::validate_network;
use crate::oracle::{
    assemble_closed_loop, centralized_sp_check_with, dissipation_trial, CheckOptions, DEFAULT_DT,
    DEFAULT_HORIZON,
};
use crate::protocol::{
    add_subsystem, run_cascade_design, DesignError, DesignOptions, NetworkDesignState,
};

use files::{fingerprint, read_json, write_json, AddFile, FileError, NetworkFile, StateFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_MALFORMED: i32 = 3;
pub const EXIT_CERTIFICATION: i32 = 4;

/// Default tolerance on the simulated dissipation margin.
pub const DEFAULT_DISSIPATION_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(
    name = "cascade-passivity",
    version,
    about = "Sequential passivity design for cascade networks"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Equality tolerance for `check`; dissipation tolerance for `simulate`.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Positivity margin for design solves and for the `check` eigenvalue test.
    #[arg(long, global = true)]
    margin: Option<f64>,
    /// Disturbance seed for `simulate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Structural check of a network file.
    Validate {
        #[arg(long)]
        net: String,
    },
    /// Sequential design of every subsystem; writes a state file.
    Design {
        #[arg(long)]
        net: String,
        #[arg(long)]
        out: String,
    },
    /// Appends one subsystem to a designed cascade.
    Add {
        #[arg(long)]
        state: String,
        #[arg(long)]
        sub: String,
        #[arg(long)]
        out: String,
        /// Network the state must have been designed for.
        #[arg(long)]
        net: Option<String>,
    },
    /// Centralized certificate of a design state.
    Check {
        #[arg(long)]
        state: String,
        /// Network the state must have been designed for.
        #[arg(long)]
        net: Option<String>,
    },
    /// Disturbance trial from rest; prints the dissipation margin.
    Simulate {
        #[arg(long)]
        state: String,
        #[arg(long = "T", default_value_t = DEFAULT_HORIZON)]
        horizon: f64,
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        #[arg(long)]
        csv: Option<String>,
    },
    /// Human-readable summary of a design state.
    Report {
        #[arg(long)]
        state: String,
    },
}

#[derive(Debug)]
enum Failure {
    Infeasible(String),
    Malformed(String),
    Certification(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Infeasible(_) => EXIT_INFEASIBLE,
            Failure::Malformed(_) => EXIT_MALFORMED,
            Failure::Certification(_) => EXIT_CERTIFICATION,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Infeasible(m) | Failure::Malformed(m) | Failure::Certification(m) => m,
        }
    }
}

impl From<FileError> for Failure {
    fn from(e: FileError) -> Self {
        Failure::Malformed(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Malformed(format!("output: {e}"))
    }
}

impl From<DesignError> for Failure {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::Infeasible { .. }
            | DesignError::DesignFailed { .. }
            | DesignError::GainRecoveryFailed { .. } => Failure::Infeasible(e.to_string()),
            DesignError::DimensionMismatch(_)
            | DesignError::InvalidNetwork(_)
            | DesignError::Solver { .. } => Failure::Malformed(e.to_string()),
        }
    }
}

/// Runs one command line. `args` includes the program name.
pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => write!(out, "{e}"),
                _ => write!(err, "{e}"),
            };
            return if e.use_stderr() {
                EXIT_MALFORMED
            } else {
                EXIT_OK
            };
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.code()
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let g = &cli.global;
    for (name, value) in [("--tol", g.tol), ("--margin", g.margin)] {
        if value.is_some_and(|v| !(v.is_finite() && v >= 0.0)) {
            return Err(Failure::Malformed(format!(
                "{name} must be a finite non-negative number"
            )));
        }
    }
    let design_opts = DesignOptions {
        margin: g.margin,
        ..Default::default()
    };
    match cli.command {
        Command::Validate { net } => {
            let net = read_json::<NetworkFile>(&net)?.to_network_unchecked()?;
            let report = validate_network(&net);
            if report.is_ok() {
                writeln!(
                    out,
                    "ok: {} subsystems, {} coupling blocks",
                    net.len(),
                    net.couplings.len()
                )?;
                Ok(())
            } else {
                writeln!(out, "{report}")?;
                Err(Failure::Malformed(format!(
                    "{} structural violation(s)",
                    report.violations.len()
                )))
            }
        }
        Command::Design { net, out: path } => {
            let net = read_json::<NetworkFile>(&net)?.to_network_unchecked()?;
            let state = run_cascade_design(&net, &design_opts)?;
            require_audits(&state)?;
            write_json(&path, &StateFile::from_state(&state))?;
            write_routes(out, &state)?;
            Ok(())
        }
        Command::Add {
            state,
            sub,
            out: path,
            net,
        } => {
            let state = load_state(&state, net.as_deref())?;
            let addition = read_json::<AddFile>(&sub)?.to_addition(&state.net)?;
            let grown = add_subsystem(
                &state,
                addition.sub,
                addition.h_self,
                addition.h_to_prev,
                addition.h_from_prev,
                &design_opts,
            )?;
            require_audits(&grown)?;
            write_json(&path, &StateFile::from_state(&grown))?;
            write_routes(out, &grown)?;
            Ok(())
        }
        Command::Check { state, net } => {
            let state = load_state(&state, net.as_deref())?;
            let cl = assemble_closed_loop(&state).map_err(|e| Failure::Malformed(e.to_string()))?;
            let cert = centralized_sp_check_with(
                &cl,
                &CheckOptions {
                    margin: g.margin,
                    eq_tolerance: g.tol,
                },
            );
            writeln!(out, "{cert}")?;
            if cert.passed() {
                Ok(())
            } else {
                let reasons: Vec<&str> = cert.failures.iter().map(|f| f.name()).collect();
                Err(Failure::Certification(format!(
                    "certificate failed: {}",
                    reasons.join(", ")
                )))
            }
        }
        Command::Simulate {
            state,
            horizon,
            dt,
            csv,
        } => {
            let state = load_state(&state, None)?;
            let cl = assemble_closed_loop(&state).map_err(|e| Failure::Malformed(e.to_string()))?;
            let seed = g.seed.unwrap_or(0);
            let (traj, margin) =
                dissipation_trial(&cl, seed, horizon, dt).map_err(|e| match e {
                    crate::oracle::OracleError::NonFinite { .. } => {
                        Failure::Certification(e.to_string())
                    }
                    other => Failure::Malformed(other.to_string()),
                })?;
            if let Some(path) = csv {
                let file = std::fs::File::create(&path)
                    .map_err(|e| Failure::Malformed(format!("{path}: {e}")))?;
                traj.write_csv(std::io::BufWriter::new(file))
                    .map_err(|e| Failure::Malformed(format!("{path}: {e}")))?;
            }
            writeln!(out, "seed: {seed}")?;
            writeln!(out, "samples: {}", traj.len())?;
            writeln!(out, "dissipation margin: {margin:e}")?;
            let tol = g.tol.unwrap_or(DEFAULT_DISSIPATION_TOL);
            if margin >= -tol {
                Ok(())
            } else {
                Err(Failure::Certification(format!(
                    "dissipation margin {margin:e} below -{tol:e}"
                )))
            }
        }
        Command::Report { state } => {
            let state = load_state(&state, None)?;
            write_report(out, &state)?;
            Ok(())
        }
    }
}

fn load_state(path: &str, net: Option<&str>) -> Result<NetworkDesignState, Failure> {
    let file: StateFile = read_json(path)?;
    if let Some(net_path) = net {
        let net = read_json::<NetworkFile>(net_path)?.to_network()?;
        let actual = fingerprint(&net);
        if actual != file.fingerprint {
            return Err(FileError::Fingerprint {
                stored: file.fingerprint,
                actual,
            }
            .into());
        }
    }
    Ok(file.to_state()?)
}

/// Every solver point behind a design must survive recertification.
fn require_audits(state: &NetworkDesignState) -> Result<(), Failure> {
    match state.audits().find(|a| !a.certificate.passed()) {
        None => Ok(()),
        Some(a) => Err(Failure::Certification(format!(
            "solver point for subsystem {} ({:?}) failed recertification",
            a.index + 1,
            a.stage
        ))),
    }
}

fn write_routes(out: &mut dyn Write, state: &NetworkDesignState) -> std::io::Result<()> {
    writeln!(
        out,
        "{:>4}  {:<12} {:>14} {:>14}",
        "step", "route", "epsilon", "min eig M_cl"
    )?;
    for r in &state.records {
        let m = min_eigen_sym(&r.m_cl).unwrap_or(f64::NAN);
        writeln!(
            out,
            "{:>4}  {:<12} {:>14.6e} {:>14.6e}",
            r.index + 1,
            r.route.as_str(),
            r.epsilon,
            m
        )?;
    }
    writeln!(out, "global epsilon: {:e}", state.global_epsilon)
}

fn write_report(out: &mut dyn Write, state: &NetworkDesignState) -> std::io::Result<()> {
    writeln!(out, "subsystems: {}", state.net.len())?;
    writeln!(out, "designed: {}", state.records.len())?;
    writeln!(out, "network fingerprint: {}", fingerprint(&state.net))?;
    write_routes(out, state)?;
    writeln!(out, "gain norms (infinity norm, '-' when absent):")?;
    writeln!(
        out,
        "{:>4}  {:>12} {:>12} {:>12} {:>12}",
        "step", "K(i,i)", "K(i,i-1)", "K(i-1,i)", "K(i,i+1)"
    )?;
    let norm = |m: &Option<crate::model::Matrix>| {
        m.as_ref()
            .map_or_else(|| "-".to_string(), |m| format!("{:.4e}", norm_inf(m)))
    };
    for r in &state.records {
        writeln!(
            out,
            "{:>4}  {:>12} {:>12} {:>12} {:>12}",
            r.index + 1,
            norm(&r.k_self),
            norm(&r.k_to_prev),
            norm(&r.k_prev_to_self),
            norm(&r.k_to_next)
        )?;
    }
    Ok(())
}
