//! Identification pipeline: parameter uncertainty intervals, the central and
//! simulation-error estimates, validation and a fixed-θ feasibility oracle.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::lti::{ct_simulate, dt_simulate_from_rest, tustin_map, MimoModel, Orders, DEFAULT_SUBSTEPS};
use crate::nlp::{fixed_theta_program, least_squares_theta, refine_theta_e, FixedThetaGoal, NlpOptions, NlpStatus};
use crate::par::{self, ExecMode};
use crate::poly::Polynomial;
use crate::pop::{build_pop, ObjectiveSpec, PopProblem, PriorSpec};
use crate::relax::{AffineScaling, RelaxOptions, Relaxation};
use crate::sdp::{SolveStatus, SolverSettings};
use crate::signals::{metrics, Dataset, DeltaBoundSpec, Metrics};

/// Absolute slack below which the oracle's inflation LP counts as feasible,
/// relative to the largest noise bound.
pub const ORACLE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentOptions {
    pub rho: usize,
    pub ts_iterations: Option<usize>,
    pub solver: SolverSettings,
    pub mode: ExecMode,
    /// Also compute the minimum simulation-error estimate inside the FPS.
    pub theta_e: bool,
    pub nlp: NlpOptions,
}

impl Default for IdentOptions {
    fn default() -> Self {
        Self {
            rho: 2,
            ts_iterations: Some(1),
            solver: SolverSettings::default(),
            mode: ExecMode::Parallel,
            theta_e: false,
            nlp: NlpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInterval {
    pub name: String,
    pub lo: f64,
    pub center: f64,
    pub hi: f64,
    pub width: f64,
}

/// Diagnostics of one relaxation solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub param: usize,
    pub sense: Sense,
    pub status: SolveStatus,
    /// Bound actually reported (prior box when the solve did not converge).
    pub bound: f64,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub name: String,
    pub settings: SolverSettings,
    pub moments: usize,
    pub rows: usize,
    pub blocks: usize,
    pub largest_block: usize,
    pub solves: Vec<SolveRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub reference: f64,
    pub assembly: f64,
    /// Sum of per-solve wall times.
    pub solves: f64,
    pub theta_e: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuiReport {
    pub params: Vec<ParamInterval>,
    pub theta_c: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_e: Option<Vec<f64>>,
    pub d_star: f64,
    pub delta: DeltaBoundSpec,
    pub rho: usize,
    pub solver: SolverInfo,
    pub timings: Timings,
}

impl PuiReport {
    pub fn lower(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.lo).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.hi).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.width).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.params.len() && self.params.iter().zip(theta).all(|(p, &t)| p.lo <= t && t <= p.hi)
    }

    /// Plain-text table with one row per parameter; `truth` adds a column.
    pub fn table(&self, truth: Option<&[f64]>) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<14}", "param");
        if truth.is_some() {
            let _ = write!(s, "{:>14}", "true");
        }
        let _ = write!(s, "{:>14}{:>14}{:>14}", "lo", "center", "hi");
        if self.theta_e.is_some() {
            let _ = write!(s, "{:>14}", "theta_E");
        }
        s.push('\n');
        for (i, p) in self.params.iter().enumerate() {
            let _ = write!(s, "{:<14}", p.name);
            if let Some(t) = truth {
                let _ = write!(s, "{:>14.4}", t[i]);
            }
            let _ = write!(s, "{:>14.4}{:>14.4}{:>14.4}", p.lo, p.center, p.hi);
            if let Some(e) = &self.theta_e {
                let _ = write!(s, "{:>14.4}", e[i]);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "d = {:e} ({:?}), rho = {}, {} solves, {:.1}s", self.delta.d, self.delta.kind, self.rho, self.solver.solves.len(), self.timings.total);
        s
    }
}

/// Reference point for variable scaling: least-squares `θ` completed by the
/// inflation program at that `θ`.
fn reference_point(ds: &Dataset, orders: &Orders, delta: &DeltaBoundSpec, priors: &PriorSpec, pop: &PopProblem) -> Result<Vec<f64>> {
    let theta = least_squares_theta(ds, orders, priors)?;
    let fx = fixed_theta_program(ds, orders, delta, &theta, FixedThetaGoal::Inflation, &SolverSettings::default())?;
    let mut x = pop.lift(&theta, &fx.psi, &fx.z, &fx.u);
    for v in x.iter_mut().filter(|v| !v.is_finite()) {
        *v = 1.0;
    }
    Ok(x)
}

/// Outer bounds on every parameter from the moment relaxation of the
/// identification program; `2 n_θ` solves over one assembled relaxation.
pub fn compute_puis(
    ds: &Dataset,
    orders: &Orders,
    delta: &DeltaBoundSpec,
    priors: &PriorSpec,
    opts: &IdentOptions,
) -> Result<PuiReport> {
    if !(delta.d.is_finite() && delta.d >= 0.0) {
        return arg(format!("discretization bound must be finite and nonnegative, got {}", delta.d));
    }
    let start = Instant::now();
    let n_theta = orders.n_theta();
    let boxes = priors.theta_box(n_theta)?;
    let pop = build_pop(ds, orders, delta, &ObjectiveSpec::Feasibility, priors)?;

    let x_ref = reference_point(ds, orders, delta, priors, &pop).unwrap_or_else(|_| vec![1.0; pop.n_vars()]);
    let t_ref = start.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let relax = Relaxation::assemble(
        &pop,
        &RelaxOptions {
            rho: opts.rho,
            ts_iterations: opts.ts_iterations,
            scaling: Some(AffineScaling::from_reference(&pop, &x_ref)),
        },
    )?;
    let t_asm = t0.elapsed().as_secs_f64();

    let jobs: Vec<(usize, Sense)> = (0..n_theta).flat_map(|i| [(i, Sense::Min), (i, Sense::Max)]).collect();
    let results = par::map(opts.mode, &jobs, |&(i, sense)| -> Result<SolveRecord> {
        let sign = if sense == Sense::Min { 1.0 } else { -1.0 };
        let obj = relax.objective(&Polynomial::var(i).scale(sign))?;
        let sol = relax.prepared().solve(&obj, &opts.solver)?;
        if matches!(sol.status, SolveStatus::Infeasible) {
            return Err(Error::Infeasible(format!("relaxation for {:?} {} is infeasible", sense, pop.vars.name(i))));
        }
        let (lo, hi) = boxes[i];
        let bound = if sol.status.is_solved() {
            let b = sign * sol.lower_bound();
            if sense == Sense::Min { b.max(lo) } else { b.min(hi) }
        } else {
            log::warn!("{:?} {} ended with {:?}; using the prior box", sense, pop.vars.name(i), sol.status);
            if sense == Sense::Min { lo } else { hi }
        };
        Ok(SolveRecord {
            param: i,
            sense,
            status: sol.status,
            bound,
            primal_objective: sign * sol.primal_objective,
            dual_objective: sign * sol.dual_objective,
            iterations: sol.iterations,
            seconds: sol.wall_time,
        })
    });
    let solves: Vec<SolveRecord> = results.into_iter().collect::<Result<_>>()?;

    let names = pop.vars.theta_names();
    let params: Vec<ParamInterval> = (0..n_theta)
        .map(|i| {
            let mut lo = solves[2 * i].bound;
            let mut hi = solves[2 * i + 1].bound;
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            ParamInterval { name: names[i].clone(), lo, center: 0.5 * (lo + hi), hi, width: hi - lo }
        })
        .collect();
    let theta_c: Vec<f64> = params.iter().map(|p| p.center).collect();

    let t_e = Instant::now();
    let theta_e = if opts.theta_e {
        let sol = refine_theta_e(ds, orders, delta, priors, &theta_c, &opts.nlp)?;
        (sol.status == NlpStatus::FeasibleLocal).then(|| sol.point[..n_theta].to_vec())
    } else {
        None
    };
    let t_theta_e = if opts.theta_e { t_e.elapsed().as_secs_f64() } else { 0.0 };

    let sizes = relax.block_sizes();
    Ok(PuiReport {
        params,
        theta_c,
        theta_e,
        d_star: delta.d,
        delta: *delta,
        rho: opts.rho,
        solver: SolverInfo {
            name: "clarabel".into(),
            settings: opts.solver,
            moments: relax.n_moments(),
            rows: relax.prepared().n_rows(),
            blocks: sizes.len(),
            largest_block: sizes.iter().copied().max().unwrap_or(0),
            solves: solves.clone(),
        },
        timings: Timings {
            reference: t_ref,
            assembly: t_asm,
            solves: solves.iter().map(|s| s.seconds).sum(),
            theta_e: t_theta_e,
            total: start.elapsed().as_secs_f64(),
        },
    })
}

/// Decides whether `θ` belongs to the feasible parameter set.
///
/// Constraints on `θ` alone (prior boxes, relative degree, DC gain, leading
/// coefficient margin) are checked directly; with `θ` fixed, what remains is
/// affine in `(z, u)` and is decided by the inflation LP.
pub fn feasibility_oracle(ds: &Dataset, orders: &Orders, delta: &DeltaBoundSpec, priors: &PriorSpec, theta: &[f64]) -> Result<bool> {
    if theta.len() != orders.n_theta() {
        return arg(format!("expected {} parameters, got {}", orders.n_theta(), theta.len()));
    }
    let pop = build_pop(ds, orders, delta, &ObjectiveSpec::Feasibility, priors)?;
    let n_theta = orders.n_theta();
    let mut x = vec![0.0; pop.n_vars()];
    x[..n_theta].copy_from_slice(theta);
    for c in &pop.constraints {
        if c.poly.variables().iter().all(|&v| v < n_theta) && c.violation(&x) > ORACLE_TOL * (1.0 + c.poly.max_abs_coeff()) {
            return Ok(false);
        }
    }
    let sol = fixed_theta_program(ds, orders, delta, theta, FixedThetaGoal::Inflation, &SolverSettings::default())?;
    if !sol.status.is_solved() {
        return Err(Error::RelaxationFailure(format!("oracle LP ended with {:?}", sol.status)));
    }
    let scale = ds.eta_hi.iter().chain(ds.eps_hi.iter()).fold(1.0f64, |a, v| a.max(v.abs()));
    Ok(sol.value <= ORACLE_TOL * scale)
}

/// How the model is simulated for validation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simulation {
    /// Tustin DT model from rest on the sampled inputs.
    #[default]
    Tustin,
    /// RK4 on the CT model with the sampled inputs linearly interpolated.
    Continuous,
}

/// Simulated outputs of `model` driven by the measured inputs, `N × n_y`.
pub fn simulate_outputs(model: &MimoModel, ds: &Dataset, how: Simulation) -> Result<DMatrix<f64>> {
    if model.n_u() != ds.n_u() || model.n_y() != ds.n_y() {
        return arg(format!(
            "model is {}x{} but dataset has {} outputs and {} inputs",
            model.n_y(),
            model.n_u(),
            ds.n_y(),
            ds.n_u()
        ));
    }
    let n = ds.n();
    let mut y = DMatrix::zeros(n, ds.n_y());
    for m in 0..ds.n_y() {
        for l in 0..ds.n_u() {
            let u = ds.u_col(l);
            let h = model.channel(m, l);
            let part = match how {
                Simulation::Tustin => dt_simulate_from_rest(&tustin_map(h, ds.ts)?, &u),
                Simulation::Continuous => {
                    let ts = ds.ts;
                    // samples sit at t = k T_s, k = 1..N; hold the first one back to t = 0
                    let interp = move |t: f64| {
                        let s = t / ts - 1.0;
                        if s <= 0.0 {
                            return u[0];
                        }
                        let k = (s.floor() as usize).min(n - 1);
                        if k + 1 >= n {
                            return u[n - 1];
                        }
                        let w = s - k as f64;
                        (1.0 - w) * u[k] + w * u[k + 1]
                    };
                    ct_simulate(h, &interp, ts, n, DEFAULT_SUBSTEPS)?
                }
            };
            for (k, v) in part.into_iter().enumerate() {
                y[(k, m)] += v;
            }
        }
    }
    Ok(y)
}

/// MSE and FIT of `model` against the measured outputs, one entry per output.
pub fn validate(model: &MimoModel, ds: &Dataset, how: Simulation) -> Result<Vec<Metrics>> {
    let y = simulate_outputs(model, ds, how)?;
    (0..ds.n_y())
        .map(|m| {
            let sim: Vec<f64> = y.column(m).iter().copied().collect();
            metrics(&sim, &ds.y_col(m))
        })
        .collect()
}
