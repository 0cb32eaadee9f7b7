//! Run configuration, presets and command implementations behind the
//! `tustin-sm` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tustin_sm::ident::{self, IdentOptions, PuiReport, Simulation};
use tustin_sm::lti::{tustin_map, ContinuousTf, MimoModel, Orders};
use tustin_sm::nlp::{estimate_delta_bound, DeltaEstimate, NlpOptions};
use tustin_sm::pop::{build_pop, ObjectiveSpec, PopDimensions, PriorSpec};
use tustin_sm::relax::{AffineScaling, RelaxOptions, Relaxation};
use tustin_sm::sdp::SolverSettings;
use tustin_sm::signals::{generate_signal, make_dataset, snr_db, Dataset, DeltaBoundSpec, DeltaKind, Metrics, NoiseSpec, SignalSpec};
use tustin_sm::{Error, Result};

pub const PRESETS: [(&str, &str); 4] = [
    ("example1", include_str!("../../../presets/example1.json")),
    ("example2", include_str!("../../../presets/example2.json")),
    ("example3", include_str!("../../../presets/example3.json")),
    ("tiso-circuit", include_str!("../../../presets/tiso-circuit.json")),
];

pub const THREADS_ENV: &str = "TUSTIN_SM_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaConfig {
    pub kind: DeltaKind,
    /// User-supplied `d`; combined with the estimate by taking the larger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    /// Run the data-driven estimate of `d*`.
    #[serde(default = "yes")]
    pub estimate: bool,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self { kind: DeltaKind::Uniform, d: None, estimate: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub signals: Vec<SignalSpec>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    /// Defaults to the identification noise spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn yes() -> bool {
    true
}

fn default_rho() -> usize {
    2
}

fn default_ts_iterations() -> Option<usize> {
    Some(1)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A complete run description; every command reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    /// `n_y × n_u` channel orders.
    pub orders: Vec<Vec<usize>>,
    pub ts: f64,
    pub n: usize,
    /// True channels, row-major, for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<Vec<ContinuousTf>>,
    #[serde(default)]
    pub signals: Vec<SignalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    /// Measured dataset; when absent the data are simulated from `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub delta: DeltaConfig,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default = "default_rho")]
    pub rho: usize,
    /// `null` keeps dense clique blocks.
    #[serde(default = "default_ts_iterations")]
    pub ts_iterations: Option<usize>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub nlp: NlpOptions,
    #[serde(default)]
    pub theta_e: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

fn finite_pos(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        bad(format!("{name} must be positive and finite, got {v}"))
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Argument(format!("unknown preset {name:?}; expected one of example1, example2, example3, tiso-circuit")))?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Argument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        finite_pos("ts", self.ts)?;
        if self.n == 0 {
            return bad("n must be positive");
        }
        let orders = self.orders()?;
        if let Some(d) = self.delta.d {
            if !(d.is_finite() && d >= 0.0) {
                return bad(format!("delta.d must be finite and nonnegative, got {d}"));
            }
        }
        if !self.delta.estimate && self.delta.d.is_none() {
            return bad("delta.d is required when delta.estimate is false");
        }
        if self.rho == 0 {
            return bad("rho must be at least 1");
        }
        finite_pos("solver.tol", self.solver.tol)?;
        finite_pos("solver.reduced_tol", self.solver.reduced_tol)?;
        finite_pos("nlp.feas_tol", self.nlp.feas_tol)?;
        if self.solver.time_limit.is_nan() || self.solver.time_limit <= 0.0 {
            return bad("solver.time_limit must be positive");
        }
        self.priors.theta_box(orders.n_theta())?;
        if self.model.is_some() {
            self.true_model()?;
        }
        if self.dataset.is_none() && self.model.is_none() {
            return bad("config needs either a dataset path or a model to simulate");
        }
        if let Some(v) = &self.validation {
            if v.n == 0 {
                return bad("validation.n must be positive");
            }
            if let Some(ts) = v.ts {
                finite_pos("validation.ts", ts)?;
            }
        }
        Ok(())
    }

    pub fn orders(&self) -> Result<Orders> {
        Orders::from_rows(&self.orders)
    }

    /// The synthetic model, checked against `orders`.
    pub fn true_model(&self) -> Result<MimoModel> {
        let orders = self.orders()?;
        let chans = self.model.as_ref().ok_or_else(|| Error::Argument("config has no model".into()))?;
        let chans = chans.iter().map(|h| ContinuousTf::new(h.alpha().to_vec(), h.beta().to_vec())).collect::<Result<Vec<_>>>()?;
        let model = MimoModel::new(orders.n_y(), orders.n_u(), chans)?;
        if model.orders() != orders {
            return bad("model channel orders do not match `orders`");
        }
        Ok(model)
    }

    fn noise_spec(&self, n_u: usize, n_y: usize) -> NoiseSpec {
        self.noise.clone().unwrap_or_else(|| NoiseSpec::absolute(n_u, 0.0, n_y, 0.0))
    }

    /// Synthetic identification dataset from `model`, `signals` and `noise`.
    pub fn simulate(&self) -> Result<Dataset> {
        let model = self.true_model()?;
        synth(&model, &self.signals, self.ts, self.n, &self.noise_spec(model.n_u(), model.n_y()), self.seed)
    }

    /// Fresh validation record, if configured.
    pub fn simulate_validation(&self) -> Result<Option<Dataset>> {
        let Some(v) = &self.validation else { return Ok(None) };
        let model = self.true_model()?;
        let noise = v.noise.clone().unwrap_or_else(|| self.noise_spec(model.n_u(), model.n_y()));
        let seed = v.seed.unwrap_or(self.seed.wrapping_add(1000));
        synth(&model, &v.signals, v.ts.unwrap_or(self.ts), v.n, &noise, seed).map(Some)
    }

    /// The configured dataset, reading `dataset` or simulating.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(p) => Dataset::read(p),
            None => self.simulate(),
        }
    }

    pub fn ident_options(&self) -> IdentOptions {
        IdentOptions {
            rho: self.rho,
            ts_iterations: self.ts_iterations,
            solver: self.solver,
            mode: self.nlp.mode,
            theta_e: self.theta_e,
            nlp: NlpOptions { seed: self.seed, ..self.nlp },
        }
    }
}

fn synth(model: &MimoModel, specs: &[SignalSpec], ts: f64, n: usize, noise: &NoiseSpec, seed: u64) -> Result<Dataset> {
    let signals = specs.iter().map(generate_signal).collect::<Result<Vec<_>>>()?;
    let mut ds = make_dataset(model, &signals, ts, n, noise, seed)?;
    ds.provenance.signals = Some(specs.to_vec());
    Ok(ds)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub dataset: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    pub n: usize,
    pub ts: f64,
    /// Per input.
    pub snr_u_db: Vec<f64>,
    /// Per output.
    pub snr_y_db: Vec<f64>,
}

fn snrs(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let Some(t) = &ds.truth else { return (Vec::new(), Vec::new()) };
    let col = |m: &nalgebra::DMatrix<f64>, j: usize| m.column(j).iter().copied().collect::<Vec<_>>();
    let su = (0..ds.n_u()).map(|l| snr_db(&col(&t.u, l), &ds.u_col(l))).collect();
    let sy = (0..ds.n_y()).map(|m| snr_db(&col(&t.y, m), &ds.y_col(m))).collect();
    (su, sy)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateReport> {
    fs::create_dir_all(&cfg.output_dir)?;
    let ds = cfg.simulate()?;
    let path = cfg.output_dir.join("dataset.csv");
    ds.write(&path)?;
    let validation = match cfg.simulate_validation()? {
        Some(v) => {
            let p = cfg.output_dir.join("validation.csv");
            v.write(&p)?;
            Some(p)
        }
        None => None,
    };
    let (snr_u_db, snr_y_db) = snrs(&ds);
    log::info!("SNR_u = {snr_u_db:?} dB, SNR_y = {snr_y_db:?} dB");
    Ok(SimulateReport { dataset: path, validation, n: ds.n(), ts: ds.ts, snr_u_db, snr_y_db })
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelMap {
    pub output: usize,
    pub input: usize,
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
}

pub fn cmd_tustin(model: &MimoModel, ts: f64) -> Result<Vec<ChannelMap>> {
    let mut out = Vec::new();
    for m in 0..model.n_y() {
        for l in 0..model.n_u() {
            let t = tustin_map(model.channel(m, l), ts)?;
            out.push(ChannelMap { output: m, input: l, gamma: t.gamma().to_vec(), xi: t.xi().to_vec() });
        }
    }
    Ok(out)
}

/// Reads a model file: either a bare model or a run config with `model`.
pub fn load_model(path: &Path) -> Result<MimoModel> {
    let text = fs::read_to_string(path)?;
    if let Ok(m) = serde_json::from_str::<MimoModel>(&text) {
        let chans = m.channels().iter().map(|h| ContinuousTf::new(h.alpha().to_vec(), h.beta().to_vec())).collect::<Result<Vec<_>>>()?;
        return MimoModel::new(m.n_y(), m.n_u(), chans);
    }
    RunConfig::from_json(&text)?.true_model()
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    pub kind: DeltaKind,
    pub d_star: f64,
    pub d_max: f64,
    pub per_start: Vec<f64>,
    pub theta_witness: Vec<f64>,
}

pub fn cmd_estimate_delta(cfg: &RunConfig, ds: &Dataset) -> Result<DeltaReport> {
    let orders = cfg.orders()?;
    let est: DeltaEstimate = estimate_delta_bound(ds, &orders, cfg.delta.kind, &cfg.priors, &cfg.ident_options().nlp)?;
    Ok(DeltaReport {
        kind: cfg.delta.kind,
        d_star: est.d_star,
        d_max: est.d_max,
        per_start: est.per_start,
        theta_witness: est.witness.point[..orders.n_theta()].to_vec(),
    })
}

/// The `d` used for identification: the larger of the estimate and the
/// user value when both exist.
pub fn resolve_delta(cfg: &RunConfig, ds: &Dataset) -> Result<(DeltaBoundSpec, Option<f64>)> {
    let d_star = if cfg.delta.estimate { Some(cmd_estimate_delta(cfg, ds)?.d_star) } else { None };
    let d = match (d_star, cfg.delta.d) {
        (Some(a), Some(b)) => {
            log::info!("d* = {a:e}, user d = {b:e}; using {:e}", a.max(b));
            a.max(b)
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return bad("no discretization bound: enable delta.estimate or set delta.d"),
    };
    Ok((DeltaBoundSpec { kind: cfg.delta.kind, d }, d_star))
}

#[derive(Debug, Clone, Serialize)]
pub struct DryRun {
    pub pop: PopDimensions,
    pub theta: usize,
    pub moments: usize,
    pub rows: usize,
    pub blocks: usize,
    pub block_sizes: Vec<usize>,
}

pub fn dry_run(cfg: &RunConfig, ds: &Dataset, d: f64) -> Result<DryRun> {
    let orders = cfg.orders()?;
    let delta = DeltaBoundSpec { kind: cfg.delta.kind, d };
    let pop = build_pop(ds, &orders, &delta, &ObjectiveSpec::Feasibility, &cfg.priors)?;
    let relax = Relaxation::assemble(
        &pop,
        &RelaxOptions { rho: cfg.rho, ts_iterations: cfg.ts_iterations, scaling: Some(AffineScaling::identity(pop.n_vars())) },
    )?;
    let mut block_sizes = relax.block_sizes();
    block_sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(DryRun {
        pop: pop.dimensions(),
        theta: orders.n_theta(),
        moments: relax.n_moments(),
        rows: relax.prepared().n_rows(),
        blocks: block_sizes.len(),
        block_sizes,
    })
}

pub fn cmd_identify(cfg: &RunConfig, ds: &Dataset) -> Result<PuiReport> {
    let orders = cfg.orders()?;
    let (delta, d_star) = resolve_delta(cfg, ds)?;
    let mut report = ident::compute_puis(ds, &orders, &delta, &cfg.priors, &cfg.ident_options())?;
    if let Some(s) = d_star {
        report.d_star = s;
    }
    Ok(report)
}

pub fn write_report(cfg: &RunConfig, report: &PuiReport, truth: Option<&[f64]>) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(&cfg.output_dir)?;
    let json = cfg.output_dir.join("pui_report.json");
    let table = cfg.output_dir.join("pui_report.txt");
    fs::write(&json, serde_json::to_string_pretty(report)?)?;
    fs::write(&table, report.table(truth))?;
    Ok((json, table))
}

/// Which estimate of a report to validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimate {
    Central,
    SimulationError,
}

/// Model from a PUI report or a plain model file.
pub fn model_from_file(path: &Path, orders: &Orders, which: Estimate) -> Result<MimoModel> {
    let text = fs::read_to_string(path)?;
    if let Ok(r) = serde_json::from_str::<PuiReport>(&text) {
        let theta = match which {
            Estimate::Central => r.theta_c,
            Estimate::SimulationError => r.theta_e.ok_or_else(|| Error::Argument("report has no theta_e".into()))?,
        };
        return MimoModel::from_theta(orders, &theta);
    }
    load_model(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub simulation: Simulation,
    pub outputs: Vec<Metrics>,
}

pub fn cmd_validate(model: &MimoModel, ds: &Dataset, how: Simulation) -> Result<ValidationReport> {
    Ok(ValidationReport { simulation: how, outputs: ident::validate(model, ds, how)? })
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Infeasible(_) => 3,
        Error::RelaxationFailure(_) | Error::BoundEstimation(_) => 4,
        _ => 1,
    }
}
