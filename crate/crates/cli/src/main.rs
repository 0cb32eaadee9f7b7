use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tustin_sm::ident::Simulation;
use tustin_sm::lti::{ContinuousTf, MimoModel};
use tustin_sm::signals::Dataset;
use tustin_sm::{Error, Result};
use tustin_sm_cli::*;

#[derive(Parser)]
#[command(name = "tustin-sm", version, about = "Set-membership identification of continuous-time LTI systems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Overrides `output_dir` of the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: example1, example2, example3, tiso-circuit.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Dataset CSV (replaces simulation).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Fixed discretization bound `d`.
    #[arg(long)]
    d: Option<f64>,
    /// Skip the `d*` estimate (requires `--d` or `delta.d`).
    #[arg(long)]
    no_estimate: bool,
    #[arg(long)]
    rho: Option<usize>,
    /// Term-sparsity rounds; 0 keeps dense blocks.
    #[arg(long)]
    ts_iterations: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    theta_e: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (and validation record) from a config.
    Simulate(ConfigArgs),
    /// Print the Tustin coefficients of a model.
    Tustin {
        /// Model JSON or run config with a model.
        #[arg(long, conflicts_with_all = ["alpha", "beta"])]
        model: Option<PathBuf>,
        /// SISO denominator coefficients `α_0..α_{n-1}`, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "beta")]
        alpha: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "alpha")]
        beta: Option<Vec<f64>>,
        #[arg(long)]
        ts: f64,
    },
    /// Estimate the discretization-error scale `d*`.
    EstimateDelta {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dry_run: bool,
    },
    /// Compute parameter uncertainty intervals.
    Identify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print problem dimensions without solving.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a model on a dataset.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// PUI report or model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Validation dataset; defaults to a fresh record from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use θ^E from the report instead of θ^C.
        #[arg(long)]
        use_theta_e: bool,
        #[arg(long)]
        continuous: bool,
    },
}

fn config(a: &ConfigArgs, out: &Option<PathBuf>) -> Result<RunConfig> {
    let mut c = match (&a.config, &a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Err(Error::Argument("one of --config or --preset is required".into())),
    };
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(n) = a.n {
        c.n = n;
    }
    if let Some(p) = &a.dataset {
        c.dataset = Some(p.clone());
    }
    if let Some(d) = a.d {
        c.delta.d = Some(d);
    }
    if a.no_estimate {
        c.delta.estimate = false;
    }
    if let Some(r) = a.rho {
        c.rho = r;
    }
    if let Some(t) = a.ts_iterations {
        c.ts_iterations = (t > 0).then_some(t);
    }
    if let Some(t) = a.tol {
        c.solver.tol = t;
    }
    if a.theta_e {
        c.theta_e = true;
    }
    if let Some(o) = out {
        c.output_dir = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn emit<T: Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Table => print!("{}", table()),
    }
    Ok(())
}

fn truth_theta(ds: &Dataset) -> Option<Vec<f64>> {
    ds.truth.as_ref()?.model.as_ref().map(|m| m.theta())
}

fn run(cli: Cli) -> Result<()> {
    let fmt = cli.format;
    match cli.cmd {
        Cmd::Simulate(a) => {
            let c = config(&a, &cli.output_dir)?;
            let r = cmd_simulate(&c)?;
            emit(fmt, &r, || {
                let mut s = format!("wrote {} (N = {}, T_s = {})\n", r.dataset.display(), r.n, r.ts);
                if let Some(v) = &r.validation {
                    s += &format!("wrote {}\n", v.display());
                }
                s + &format!("SNR_u = {:.1?} dB, SNR_y = {:.1?} dB\n", r.snr_u_db, r.snr_y_db)
            })
        }
        Cmd::Tustin { model, alpha, beta, ts } => {
            let m = match (model, alpha, beta) {
                (Some(p), _, _) => load_model(&p)?,
                (None, Some(a), Some(b)) => MimoModel::siso(ContinuousTf::new(a, b)?),
                _ => return Err(Error::Argument("give --model or both --alpha and --beta".into())),
            };
            let maps = cmd_tustin(&m, ts)?;
            emit(fmt, &maps, || {
                maps.iter()
                    .map(|c| format!("channel ({}, {}): gamma = {:?}\n                xi = {:?}\n", c.output, c.input, c.gamma, c.xi))
                    .collect()
            })
        }
        Cmd::EstimateDelta { cfg, dry_run: dry } => {
            let c = config(&cfg, &cli.output_dir)?;
            let ds = c.dataset()?;
            if dry {
                let d = dry_run(&c, &ds, c.delta.d.unwrap_or(0.0))?;
                return emit(fmt, &d, || format!("{d:#?}\n"));
            }
            let r = cmd_estimate_delta(&c, &ds)?;
            emit(fmt, &r, || format!("d* = {:e} ({:?}), cap {:e}, per start {:?}\n", r.d_star, r.kind, r.d_max, r.per_start))
        }
        Cmd::Identify { cfg, dry_run: dry } => {
            let c = config(&cfg, &cli.output_dir)?;
            let ds = c.dataset()?;
            if dry {
                let d = dry_run(&c, &ds, c.delta.d.unwrap_or(0.0))?;
                return emit(fmt, &d, || {
                    format!(
                        "variables {}, constraints {} ({} eq, {} ineq), cliques {}, moments {}, rows {}, blocks {}, largest {:?}\n",
                        d.pop.variables,
                        d.pop.constraints,
                        d.pop.equalities,
                        d.pop.inequalities,
                        d.pop.cliques,
                        d.moments,
                        d.rows,
                        d.blocks,
                        &d.block_sizes[..d.block_sizes.len().min(5)]
                    )
                });
            }
            let r = cmd_identify(&c, &ds)?;
            let truth = truth_theta(&ds);
            write_report(&c, &r, truth.as_deref())?;
            emit(fmt, &r, || r.table(truth.as_deref()))
        }
        Cmd::Validate { cfg, model, data, use_theta_e, continuous } => {
            let c = config(&cfg, &cli.output_dir)?;
            let which = if use_theta_e { Estimate::SimulationError } else { Estimate::Central };
            let m = model_from_file(&model, &c.orders()?, which)?;
            let ds = match data {
                Some(p) => Dataset::read(&p)?,
                None => c.simulate_validation()?.ok_or_else(|| Error::Argument("no --data and the config has no validation section".into()))?,
            };
            let how = if continuous { Simulation::Continuous } else { Simulation::Tustin };
            let r = cmd_validate(&m, &ds, how)?;
            emit(fmt, &r, || {
                r.outputs.iter().enumerate().map(|(i, m)| format!("output {i}: MSE = {:.6}, FIT = {:.2}%\n", m.mse, 100.0 * m.fit)).collect()
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    if let Some(t) = std::env::var(THREADS_ENV).ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
