//! Command-line front end.
//!
//! Exit codes: `0` success, `1` usage error, `2` data error, `3` when the
//! oracle's perturbation space exceeds its cap.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::certification::{certify_with_counterexamples, Method};
use crate::collective::{robust_limits, DEFAULT_SEARCH_CAP};
use crate::error::{Error, Result};
use crate::graph_model::{GcnModel, Graph};
use crate::io;
use crate::metrics::run_sweep;
use crate::perturbation::{
    minimal_breaking_flips, oracle_cap_from_env, FlipMode, PerturbationBudget,
};
use crate::training::{train_robust, LossKind, RobustLossConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_ORACLE_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gcn-cert",
    version,
    about = "Certify GCN node classifications against binary feature flips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Graph file (JSON)
    #[arg(long)]
    graph: PathBuf,
    /// Model file (JSON)
    #[arg(long)]
    model: PathBuf,
    /// Maximum flips per node
    #[arg(long, default_value_t = 1)]
    local: usize,
    /// Which flips are allowed: both, add-only (0 to 1) or delete-only (1 to 0)
    #[arg(long, default_value_t = FlipMode::Both)]
    mode: FlipMode,
    /// Worker threads; defaults to the number of cores
    #[arg(long)]
    threads: Option<usize>,
    /// Write results here instead of standard output
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Certify every node; CSV: node,margin,certified,counterexample_flips
    Certify {
        #[command(flatten)]
        inputs: Inputs,
        /// Maximum flips in total
        #[arg(long, default_value_t = 1)]
        global: usize,
        #[arg(long, default_value_t = Method::PolyTopK)]
        method: Method,
    },
    /// List verified counterexamples; CSV: node,label,flipped_label,flips
    Counterexample {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 1)]
        global: usize,
        #[arg(long, default_value_t = Method::PolyTopK)]
        method: Method,
    },
    /// Robustness bounds over a range of global budgets; CSV: p_l,p_g,lower,upper,runtime_ms
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        /// Inclusive range of global budgets, LO:HI
        #[arg(long, value_parser = parse_range)]
        global_range: (usize, usize),
        #[arg(long, default_value_t = Method::PolyTopK)]
        method: Method,
    },
    /// Largest certified global budget per node; CSV: node,max_robust_limit,never_certified
    Collective {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = Method::PolyTopK)]
        method: Method,
        /// Largest global budget tried
        #[arg(long, default_value_t = DEFAULT_SEARCH_CAP)]
        cap: usize,
    },
    /// Robust training by gradient descent; writes the trained model as JSON
    Train {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 1)]
        global: usize,
        #[arg(long, default_value_t = Method::PolyTopK)]
        method: Method,
        /// JSON array of per-node labels, null for unlabeled nodes
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = LossKind::Hinge)]
        loss: LossKind,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Nodes per step; full batch when omitted
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact robustness by enumeration; CSV: node,robust,min_breaking_flips
    Oracle {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 1)]
        global: usize,
        /// Maximum number of perturbations to enumerate
        #[arg(long)]
        cap: Option<u64>,
    },
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let lo: usize = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad lower end {lo:?}: {e}"))?;
    let hi: usize = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad upper end {hi:?}: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn exit_code(error: &Error) -> i32 {
    match error {
        Error::OracleInfeasible { .. } => EXIT_ORACLE_INFEASIBLE,
        _ => EXIT_DATA,
    }
}

/// Runs the CLI with `argv` (including the program name), printing to the
/// process's standard streams.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_command_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Like [`run_command`], with results sent to `out` unless `--output` is
/// given, and diagnostics to `err`.
pub fn run_command_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load(inputs: &Inputs) -> Result<(Graph, GcnModel)> {
    Ok((
        io::load_graph(&inputs.graph)?,
        io::load_model(&inputs.model)?,
    ))
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    job: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start thread pool: {e}")))?;
    pool.install(job)
}

fn emit(
    path: Option<&PathBuf>,
    out: &mut dyn Write,
    render: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let label = path.cloned().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let wrap = |source| Error::Io {
        path: label.clone(),
        source,
    };
    match path {
        Some(_) => {
            let mut sink = io::output_sink(path)?;
            render(&mut *sink).map_err(wrap)?;
            sink.flush().map_err(wrap)
        }
        None => render(out).map_err(wrap),
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Certify {
            inputs,
            global,
            method,
        } => {
            let (graph, model) = load(&inputs)?;
            let budget = PerturbationBudget::new(inputs.local, global).with_mode(inputs.mode);
            let rows = with_threads(inputs.threads, || {
                certify_with_counterexamples(&model, &graph, &budget, method)
            })?;
            emit(inputs.output.as_ref(), out, |w| {
                io::write_certify_csv(w, &rows)
            })
        }
        Command::Counterexample {
            inputs,
            global,
            method,
        } => {
            let (graph, model) = load(&inputs)?;
            let budget = PerturbationBudget::new(inputs.local, global).with_mode(inputs.mode);
            let rows = with_threads(inputs.threads, || {
                certify_with_counterexamples(&model, &graph, &budget, method)
            })?;
            emit(inputs.output.as_ref(), out, |w| {
                io::write_counterexample_csv(w, &rows)
            })
        }
        Command::Sweep {
            inputs,
            global_range: (lo, hi),
            method,
        } => {
            let (graph, model) = load(&inputs)?;
            let budgets: Vec<usize> = (lo..=hi).collect();
            let sweep = with_threads(inputs.threads, || {
                run_sweep(&model, &graph, inputs.local, inputs.mode, &budgets, method)
            })?;
            for b in sweep.upper_monotonicity_violations() {
                let _ = writeln!(
                    err,
                    "warning: upper bound rises at p_g={b}; counterexample search missed a smaller-budget example"
                );
            }
            emit(inputs.output.as_ref(), out, |w| {
                io::write_sweep_csv(w, &sweep)
            })
        }
        Command::Collective {
            inputs,
            method,
            cap,
        } => {
            let (graph, model) = load(&inputs)?;
            let limits = with_threads(inputs.threads, || {
                robust_limits(&model, &graph, inputs.local, inputs.mode, method, cap)
            })?;
            for r in limits.iter().filter(|r| r.capped) {
                let _ = writeln!(
                    err,
                    "note: node {} is still certified at the search cap; its limit is at least {}",
                    r.node, r.limit
                );
            }
            emit(inputs.output.as_ref(), out, |w| {
                io::write_collective_csv(w, &limits)
            })
        }
        Command::Train {
            inputs,
            global,
            method,
            labels,
            loss,
            steps,
            lr,
            batch_size,
            seed,
        } => {
            let (graph, model) = load(&inputs)?;
            let labels = io::load_labels(&labels)?;
            let budget = PerturbationBudget::new(inputs.local, global).with_mode(inputs.mode);
            let config = RobustLossConfig {
                kind: loss,
                method,
                batch_size,
                ..RobustLossConfig::default()
            };
            let outcome = with_threads(inputs.threads, || {
                train_robust(&model, &graph, &labels, &budget, &config, steps, lr, seed)
            })?;
            if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
                let _ = writeln!(err, "loss {first} -> {last} over {steps} steps");
            }
            let json = io::model_to_json(&outcome.model);
            emit(inputs.output.as_ref(), out, |w| writeln!(w, "{json}"))
        }
        Command::Oracle {
            inputs,
            global,
            cap,
        } => {
            let (graph, model) = load(&inputs)?;
            let budget = PerturbationBudget::new(inputs.local, global).with_mode(inputs.mode);
            let cap = cap.unwrap_or_else(oracle_cap_from_env);
            let breaking = with_threads(inputs.threads, || {
                minimal_breaking_flips(&model, &graph, &budget, cap)
            })?;
            emit(inputs.output.as_ref(), out, |w| {
                io::write_oracle_csv(w, &breaking)
            })
        }
    }
}
