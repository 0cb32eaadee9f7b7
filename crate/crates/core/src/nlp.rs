//! Local solvers for the discretization-bound program `d*` and the
//! simulation-error estimate `θ^E`.
//!
//! For fixed `θ` every remaining constraint is affine in `(z, u, d)`, so each
//! candidate `θ` is finished by a conic LP/QP and the witness is rebuilt by
//! exact simulation. An augmented Lagrangian over all variables moves `θ`.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::lti::{dt_simulate, tustin_map, ContinuousTf, DiscreteTf, Orders, TustinForms};
use crate::par::{self, ExecMode};
use crate::poly::Polynomial;
use crate::pop::{build_pop, ConstraintKind, ConstraintTag, ObjectiveSpec, PopProblem, PriorSpec, VarKind};
use crate::sdp::{self, AffineExpr, Objective, PsdBlock, SdpProblem, SolveStatus, SolverSettings};
use crate::signals::{delta_shape, Dataset, DeltaBoundSpec, DeltaKind};

pub const FEAS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    FeasibleLocal,
    InfeasibleLocal,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    pub point: Vec<f64>,
    pub objective: f64,
    /// Largest constraint violation, evaluated on the original constraints.
    pub violation: f64,
    pub status: NlpStatus,
    /// Merit value after each accepted inner step, one list per outer round.
    #[serde(skip)]
    pub merit_history: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpOptions {
    pub feas_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub starts: usize,
    pub seed: u64,
    pub mode: ExecMode,
    /// Relative spread of the randomized restarts around the first start.
    pub restart_spread: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self { feas_tol: FEAS_TOL, max_outer: 30, max_inner: 60, starts: 5, seed: 0, mode: ExecMode::Parallel, restart_spread: 0.1 }
    }
}

/// Polynomial of degree at most two in flat form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadPoly {
    pub constant: f64,
    pub linear: Vec<(usize, f64)>,
    /// `(i, j, q)` with `i <= j` for the monomial `x_i x_j`.
    pub quad: Vec<(usize, usize, f64)>,
}

impl QuadPoly {
    pub fn from_poly(p: &Polynomial) -> Result<Self> {
        let mut q = QuadPoly::default();
        for (m, c) in p.terms() {
            let v: Vec<usize> = m.vars().collect();
            match v.len() {
                0 => q.constant += c,
                1 => q.linear.push((v[0], *c)),
                2 => q.quad.push((v[0].min(v[1]), v[0].max(v[1]), *c)),
                d => return arg(format!("local solver handles degree <= 2, got {d}")),
            }
        }
        Ok(q)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant
            + self.linear.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
            + self.quad.iter().map(|&(i, j, q)| q * x[i] * x[j]).sum::<f64>()
    }

    /// Sparse gradient; indices may repeat.
    fn grad(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.extend_from_slice(&self.linear);
        for &(i, j, q) in &self.quad {
            if i == j {
                out.push((i, 2.0 * q * x[i]));
            } else {
                out.push((i, q * x[j]));
                out.push((j, q * x[i]));
            }
        }
    }

    fn scaled(&self, s: &[f64], row: f64) -> Self {
        QuadPoly {
            constant: self.constant * row,
            linear: self.linear.iter().map(|&(i, a)| (i, a * s[i] * row)).collect(),
            quad: self.quad.iter().map(|&(i, j, q)| (i, j, q * s[i] * s[j] * row)).collect(),
        }
    }

    fn max_coeff(&self) -> f64 {
        self.linear.iter().map(|t| t.1.abs()).chain(self.quad.iter().map(|t| t.2.abs())).chain([self.constant.abs()]).fold(0.0, f64::max)
    }

    fn add_linear(&mut self, i: usize, a: f64) {
        self.linear.push((i, a));
    }
}

/// `min f` s.t. `h(x) = 0`, `g(x) >= 0`, `lo <= x <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpProblem {
    pub n: usize,
    pub objective: QuadPoly,
    pub eqs: Vec<QuadPoly>,
    pub ineqs: Vec<QuadPoly>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Elimination order key for the sparse factorization (smaller first).
    pub elim_key: Vec<usize>,
}

impl NlpProblem {
    pub fn project(&self, x: &mut [f64]) {
        for i in 0..self.n {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn violation(&self, x: &[f64]) -> f64 {
        let e = self.eqs.iter().map(|h| h.eval(x).abs()).fold(0.0, f64::max);
        let g = self.ineqs.iter().map(|g| (-g.eval(x)).max(0.0)).fold(0.0, f64::max);
        let b = (0..self.n).map(|i| (self.lo[i] - x[i]).max(x[i] - self.hi[i]).max(0.0)).fold(0.0, f64::max);
        e.max(g).max(b)
    }

    /// Same problem in `x̂ = x / s` with each constraint row normalized.
    fn scaled(&self, s: &[f64], objective_scale: f64) -> Self {
        let norm = |p: &QuadPoly| {
            let q = p.scaled(s, 1.0);
            let m = q.max_coeff();
            if m > 0.0 { q.scaled(&vec![1.0; self.n], 1.0 / m) } else { q }
        };
        NlpProblem {
            n: self.n,
            objective: self.objective.scaled(s, 1.0 / objective_scale),
            eqs: self.eqs.iter().map(norm).collect(),
            ineqs: self.ineqs.iter().map(norm).collect(),
            lo: (0..self.n).map(|i| self.lo[i] / s[i]).collect(),
            hi: (0..self.n).map(|i| self.hi[i] / s[i]).collect(),
            elim_key: self.elim_key.clone(),
        }
    }
}

struct Merit<'a> {
    p: &'a NlpProblem,
    lambda: Vec<f64>,
    nu: Vec<f64>,
    mu: f64,
}

impl Merit<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut v = self.p.objective.eval(x);
        for (h, l) in self.p.eqs.iter().zip(&self.lambda) {
            let hv = h.eval(x);
            v += l * hv + 0.5 * self.mu * hv * hv;
        }
        for (g, n) in self.p.ineqs.iter().zip(&self.nu) {
            let t = (n - self.mu * g.eval(x)).max(0.0);
            v += (t * t - n * n) / (2.0 * self.mu);
        }
        v
    }

    /// Gradient and a Gauss-Newton-style Hessian (constraint curvature kept).
    fn derivatives(&self, x: &[f64], hess: bool) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
        let n = self.p.n;
        let mut g = vec![0.0; n];
        let mut h = Vec::new();
        let mut buf = Vec::new();
        let add_term = |p: &QuadPoly, w: f64, outer: f64, g: &mut [f64], h: &mut Vec<(usize, usize, f64)>, buf: &mut Vec<(usize, f64)>| {
            p.grad(x, buf);
            for &(i, v) in buf.iter() {
                g[i] += w * v;
            }
            if hess {
                for &(i, j, q) in &p.quad {
                    if i == j {
                        h.push((i, i, 2.0 * w * q));
                    } else {
                        h.push((i, j, w * q));
                        h.push((j, i, w * q));
                    }
                }
                if outer != 0.0 {
                    for &(i, a) in buf.iter() {
                        for &(j, b) in buf.iter() {
                            h.push((i, j, outer * a * b));
                        }
                    }
                }
            }
        };
        add_term(&self.p.objective, 1.0, 0.0, &mut g, &mut h, &mut buf);
        for (p, l) in self.p.eqs.iter().zip(&self.lambda) {
            let w = l + self.mu * p.eval(x);
            add_term(p, w, self.mu, &mut g, &mut h, &mut buf);
        }
        for (p, nu) in self.p.ineqs.iter().zip(&self.nu) {
            let t = nu - self.mu * p.eval(x);
            if t > 0.0 {
                add_term(p, -t, self.mu, &mut g, &mut h, &mut buf);
            }
        }
        (g, h)
    }
}

fn sparse_solve(n_free: usize, trip: &[(usize, usize, f64)], rhs: &[f64]) -> Option<Vec<f64>> {
    let mut diag = vec![0.0f64; n_free];
    for &(i, j, v) in trip {
        if i == j {
            diag[i] += v;
        }
    }
    let scale = diag.iter().fold(1e-12f64, |a, d| a.max(d.abs()));
    let mut tau = 0.0;
    for _ in 0..12 {
        let mut coo = CooMatrix::new(n_free, n_free);
        for &(i, j, v) in trip {
            coo.push(i, j, v);
        }
        for i in 0..n_free {
            coo.push(i, i, tau + 1e-12 * scale);
        }
        let csc = CscMatrix::from(&coo);
        if let Ok(chol) = CscCholesky::factor(&csc) {
            let b = DMatrix::from_column_slice(n_free, 1, rhs);
            let sol = chol.solve(&b);
            if sol.iter().all(|v| v.is_finite()) {
                return Some(sol.column(0).iter().copied().collect());
            }
        }
        tau = if tau == 0.0 { 1e-8 * scale } else { tau * 100.0 };
    }
    None
}

fn inner_solve(m: &Merit, x: &mut Vec<f64>, max_inner: usize, tol: f64, history: &mut Vec<f64>) -> bool {
    let p = m.p;
    let n = p.n;
    // Free variables in elimination order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (p.elim_key[i], i));
    let mut fx = m.value(x);
    history.push(fx);
    for _ in 0..max_inner {
        let (g, h) = m.derivatives(x, true);
        let pg = (0..n).map(|i| (x[i] - (x[i] - g[i]).clamp(p.lo[i], p.hi[i])).abs()).fold(0.0, f64::max);
        if pg <= tol {
            return true;
        }
        let eps = pg.min(1e-6);
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= p.lo[i] + eps && g[i] > 0.0) || (x[i] >= p.hi[i] - eps && g[i] < 0.0) || p.lo[i] == p.hi[i])
            .collect();
        let mut pos = vec![usize::MAX; n];
        let mut free = Vec::new();
        for &i in &order {
            if !active[i] {
                pos[i] = free.len();
                free.push(i);
            }
        }
        let trip: Vec<(usize, usize, f64)> = h
            .iter()
            .filter(|&&(i, j, _)| !active[i] && !active[j])
            .map(|&(i, j, v)| (pos[i], pos[j], v))
            .collect();
        let rhs: Vec<f64> = free.iter().map(|&i| -g[i]).collect();
        let mut dir = vec![0.0; n];
        match sparse_solve(free.len(), &trip, &rhs) {
            Some(step) => {
                for (k, &i) in free.iter().enumerate() {
                    dir[i] = step[k];
                }
            }
            None => {
                for &i in &free {
                    dir[i] = -g[i];
                }
            }
        }
        if (0..n).map(|i| g[i] * dir[i]).sum::<f64>() >= 0.0 {
            for &i in &free {
                dir[i] = -g[i];
            }
        }
        let mut accepted = false;
        for use_gradient in [false, true] {
            if use_gradient {
                dir = g.iter().map(|v| -v).collect();
            }
            let mut alpha = 1.0;
            for _ in 0..40 {
                let mut xn: Vec<f64> = (0..n).map(|i| x[i] + alpha * dir[i]).collect();
                p.project(&mut xn);
                let decrease: f64 = (0..n).map(|i| g[i] * (xn[i] - x[i])).sum();
                let fnew = m.value(&xn);
                if fnew <= fx + 1e-4 * decrease && fnew <= fx {
                    *x = xn;
                    fx = fnew;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            return false;
        }
        history.push(fx);
    }
    false
}

/// Augmented Lagrangian (PHR) with projected Newton inner iterations.
///
/// The problem is solved in variables scaled by `scale`; `x0` and the
/// returned point are in original units.
pub fn solve_al(problem: &NlpProblem, x0: &[f64], scale: &[f64], opts: &NlpOptions) -> NlpSolution {
    let obj_scale = problem.objective.max_coeff().max(1e-300);
    let sp = problem.scaled(scale, obj_scale);
    let mut x: Vec<f64> = x0.iter().zip(scale).map(|(v, s)| v / s).collect();
    sp.project(&mut x);
    let mut m = Merit { p: &sp, lambda: vec![0.0; sp.eqs.len()], nu: vec![0.0; sp.ineqs.len()], mu: 10.0 };
    let mut history = Vec::new();
    let mut prev_viol = sp.violation(&x);
    let mut prev_obj = sp.objective.eval(&x);
    let mut done = false;
    for outer in 0..opts.max_outer {
        let tol = (1e-2 * 0.3f64.powi(outer as i32)).max(1e-9);
        let mut h = Vec::new();
        let converged = inner_solve(&m, &mut x, opts.max_inner, tol, &mut h);
        history.push(h);
        let viol = sp.violation(&x);
        for (l, p) in m.lambda.iter_mut().zip(&sp.eqs) {
            *l += m.mu * p.eval(&x);
        }
        for (nu, p) in m.nu.iter_mut().zip(&sp.ineqs) {
            *nu = (*nu - m.mu * p.eval(&x)).max(0.0);
        }
        let obj = sp.objective.eval(&x);
        if viol <= 0.1 * opts.feas_tol && converged && (obj - prev_obj).abs() <= 1e-8 * (1.0 + obj.abs()) {
            done = true;
            break;
        }
        if viol > 0.25 * prev_viol {
            m.mu = (m.mu * 10.0).min(1e10);
        }
        prev_viol = viol;
        prev_obj = obj;
    }
    let point: Vec<f64> = x.iter().zip(scale).map(|(v, s)| v * s).collect();
    let violation = problem.violation(&point);
    let status = if violation <= opts.feas_tol {
        NlpStatus::FeasibleLocal
    } else if done {
        NlpStatus::InfeasibleLocal
    } else {
        NlpStatus::IterationLimit
    };
    NlpSolution { objective: problem.objective.eval(&point), point, violation, status, merit_history: history }
}

/// Goal of the affine program at fixed `θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedThetaGoal {
    /// Smallest uniform widening `t` of all noise intervals (at the given `d`).
    Inflation,
    /// Smallest discretization scale `d >= 0` (the given `d` is ignored).
    MinDelta,
    /// Smallest `Σ (ỹ - Σ z)^2` at the given `d`.
    MinSimulationError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedThetaSolution {
    pub status: SolveStatus,
    /// `t*`, `d*` or the simulation error, depending on the goal.
    pub value: f64,
    pub psi: Vec<f64>,
    /// `N × n_channels`
    pub z: DMatrix<f64>,
    /// `N × n_u`
    pub u: DMatrix<f64>,
}

/// Discretizes every channel of `θ`.
pub fn channel_maps(orders: &Orders, theta: &[f64], ts: f64) -> Result<Vec<DiscreteTf>> {
    if theta.len() != orders.n_theta() {
        return arg(format!("expected {} parameters, got {}", orders.n_theta(), theta.len()));
    }
    (0..orders.n_channels())
        .map(|c| {
            let off = orders.theta_offset(c);
            let n = orders.as_slice()[c];
            let h = ContinuousTf::from_theta(&theta[off..off + 2 * n])?;
            tustin_map(&h, ts)
        })
        .collect()
}

/// Solves the affine program in `(z, u)` obtained by fixing `θ`.
pub fn fixed_theta_program(
    ds: &Dataset,
    orders: &Orders,
    delta: &DeltaBoundSpec,
    theta: &[f64],
    goal: FixedThetaGoal,
    settings: &SolverSettings,
) -> Result<FixedThetaSolution> {
    let maps = channel_maps(orders, theta, ds.ts)?;
    let (n, n_u, n_ch) = (ds.n(), orders.n_u(), orders.n_channels());
    let zi = |c: usize, k: usize| c * n + k;
    let ui = |l: usize, k: usize| n_ch * n + l * n + k;
    let extra = n_ch * n + n_u * n;
    let has_extra = goal != FixedThetaGoal::MinSimulationError;
    let nv = extra + usize::from(has_extra);
    let phi = delta_shape(delta.kind, ds);
    let d = delta.d.max(0.0);

    let mut eqs = Vec::new();
    for (c, t) in maps.iter().enumerate() {
        let nc = t.order();
        let l = c % n_u;
        for k in nc..n {
            let mut terms = vec![(zi(c, k), 1.0)];
            terms.extend((0..nc).map(|j| (zi(c, k - nc + j), t.gamma()[j])));
            terms.extend((0..=nc).map(|j| (ui(l, k - nc + j), -t.xi()[j])));
            eqs.push(AffineExpr::new(terms, 0.0));
        }
    }
    let mut rows: Vec<AffineExpr> = Vec::new();
    for m in 0..orders.n_y() {
        for k in 0..n {
            // r = ỹ - Σ z, lo - slack <= r <= hi + slack
            let zs: Vec<(usize, f64)> = (0..n_u).map(|l| (zi(m * n_u + l, k), -1.0)).collect();
            let y = ds.y_tilde[(k, m)];
            let (mut lo, mut hi) = (ds.eta_lo[(k, m)], ds.eta_hi[(k, m)]);
            let slack = match goal {
                FixedThetaGoal::Inflation => {
                    lo -= d * phi[(k, m)];
                    hi += d * phi[(k, m)];
                    Some(1.0)
                }
                FixedThetaGoal::MinDelta => Some(phi[(k, m)]),
                FixedThetaGoal::MinSimulationError => {
                    lo -= d * phi[(k, m)];
                    hi += d * phi[(k, m)];
                    None
                }
            };
            let mut lower = AffineExpr::new(zs.clone(), y - lo);
            let mut upper = AffineExpr::new(zs.iter().map(|&(i, c)| (i, -c)).collect(), hi - y);
            if let Some(w) = slack {
                lower.terms.push((extra, w));
                upper.terms.push((extra, w));
            }
            rows.push(lower);
            rows.push(upper);
        }
    }
    for l in 0..n_u {
        for k in 0..n {
            let ut = ds.u_tilde[(k, l)];
            let (lo, hi) = (ds.eps_lo[(k, l)], ds.eps_hi[(k, l)]);
            let inflate = goal == FixedThetaGoal::Inflation;
            if lo == hi && !inflate {
                eqs.push(AffineExpr::new(vec![(ui(l, k), -1.0)], ut - lo));
                continue;
            }
            let mut lower = AffineExpr::new(vec![(ui(l, k), -1.0)], ut - lo);
            let mut upper = AffineExpr::new(vec![(ui(l, k), 1.0)], hi - ut);
            if inflate {
                lower.terms.push((extra, 1.0));
                upper.terms.push((extra, 1.0));
            }
            rows.push(lower);
            rows.push(upper);
        }
    }
    if goal == FixedThetaGoal::MinDelta {
        rows.push(AffineExpr::var(extra));
    }
    let blocks = rows.into_iter().map(|e| PsdBlock { size: 1, entries: vec![(0, 0, e)] }).collect();
    let objective = match goal {
        FixedThetaGoal::Inflation | FixedThetaGoal::MinDelta => Objective::linear(vec![(extra, 1.0)], 0.0),
        FixedThetaGoal::MinSimulationError => {
            let mut o = Objective::default();
            for m in 0..orders.n_y() {
                for k in 0..n {
                    let y = ds.y_tilde[(k, m)];
                    o.constant += y * y;
                    for l in 0..n_u {
                        o.linear.push((zi(m * n_u + l, k), -2.0 * y));
                        for l2 in l..n_u {
                            o.quadratic.push((zi(m * n_u + l, k), zi(m * n_u + l2, k), 2.0));
                        }
                    }
                }
            }
            o
        }
    };
    let prob = SdpProblem { n_vars: nv, equalities: eqs, blocks, objective };
    let sol = sdp::solve(&prob, settings)?;
    let z = DMatrix::from_fn(n, n_ch, |k, c| sol.y.get(zi(c, k)).copied().unwrap_or(f64::NAN));
    let u = DMatrix::from_fn(n, n_u, |k, l| sol.y.get(ui(l, k)).copied().unwrap_or(f64::NAN));
    let psi = maps.iter().flat_map(|t| t.psi()).collect();
    Ok(FixedThetaSolution { status: sol.status, value: sol.primal_objective, psi, z, u })
}

/// Rebuilds `z` by exact simulation from `u` and the first samples of `z`,
/// clamping `u` into its noise box. Returns the repaired `(z, u)`.
fn repair(ds: &Dataset, orders: &Orders, maps: &[DiscreteTf], z: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = ds.n();
    let u = DMatrix::from_fn(n, orders.n_u(), |k, l| {
        let ut = ds.u_tilde[(k, l)];
        u[(k, l)].clamp(ut - ds.eps_hi[(k, l)], ut - ds.eps_lo[(k, l)])
    });
    let mut zr = DMatrix::zeros(n, orders.n_channels());
    for (c, t) in maps.iter().enumerate() {
        let l = c % orders.n_u();
        let init: Vec<f64> = (0..t.order()).map(|k| z[(k, c)]).collect();
        let col: Vec<f64> = u.column(l).iter().copied().collect();
        let sim = dt_simulate(t, &col, &init)?;
        zr.set_column(c, &DVector::from_vec(sim));
    }
    Ok((zr, u))
}

/// Smallest `d` making the output bounds hold for the given partial outputs.
fn required_d(ds: &Dataset, orders: &Orders, kind: DeltaKind, z: &DMatrix<f64>) -> f64 {
    let phi = delta_shape(kind, ds);
    let n_u = orders.n_u();
    let mut d: f64 = 0.0;
    for m in 0..orders.n_y() {
        for k in 0..ds.n() {
            let r = ds.y_tilde[(k, m)] - (0..n_u).map(|l| z[(k, m * n_u + l)]).sum::<f64>();
            let excess = (r - ds.eta_hi[(k, m)]).max(ds.eta_lo[(k, m)] - r).max(0.0);
            if excess > 0.0 {
                d = d.max(if phi[(k, m)] > 0.0 { excess / phi[(k, m)] } else if excess <= 1e-12 { 0.0 } else { f64::INFINITY });
            }
        }
    }
    d
}

/// Least squares on the Tustin equation error `Σ_j a_j(α) y(k-n+j) = Σ_j b_j(β) u(k-n+j)`,
/// which is affine in `θ`. Multi-input outputs are fitted channel by channel
/// against the residual of the others (a few backfitting sweeps).
pub fn least_squares_theta(ds: &Dataset, orders: &Orders, priors: &PriorSpec) -> Result<Vec<f64>> {
    let (n, n_u) = (ds.n(), orders.n_u());
    let boxes = priors.theta_box(orders.n_theta())?;
    let mut theta = vec![0.0; orders.n_theta()];
    let mut contrib = DMatrix::<f64>::zeros(n, orders.n_channels());
    let sweeps = if n_u > 1 { 4 } else { 1 };
    for _ in 0..sweeps {
        for c in 0..orders.n_channels() {
            let (m, l) = (c / n_u, c % n_u);
            let nc = orders.as_slice()[c];
            let off = orders.theta_offset(c);
            let forms = TustinForms::new(nc, ds.ts)?;
            let target: Vec<f64> = (0..n)
                .map(|k| ds.y_tilde[(k, m)] - (0..n_u).filter(|&o| o != l).map(|o| contrib[(k, m * n_u + o)]).sum::<f64>())
                .collect();
            let u: Vec<f64> = ds.u_col(l);
            // Unknown columns: α_0..α_{n-1}, β_0..β_{n-1} minus fixed ones.
            let zeroed: Vec<bool> = (0..2 * nc)
                .map(|i| {
                    let p = off + i;
                    boxes[p].0 == boxes[p].1
                        || priors.relative_degree.iter().any(|rd| rd.output * n_u + rd.input == c && i >= nc && i - nc >= nc + 1 - rd.r)
                })
                .collect();
            let fixed_val = |i: usize| if boxes[off + i].0 == boxes[off + i].1 { boxes[off + i].0 } else { 0.0 };
            let cols: Vec<usize> = (0..2 * nc).filter(|&i| !zeroed[i]).collect();
            let rows = n.saturating_sub(nc);
            if rows < cols.len() {
                return arg(format!("{n} samples are too few for least squares on order {nc}"));
            }
            let mut a = DMatrix::zeros(rows, cols.len());
            let mut b = DVector::zeros(rows);
            for r in 0..rows {
                let k = r + nc;
                let mut rhs = 0.0;
                let mut row = vec![0.0; 2 * nc];
                for j in 0..=nc {
                    let (y, uu) = (target[k - nc + j], u[k - nc + j]);
                    rhs -= forms.constant[j] * y;
                    for i in 0..nc {
                        row[i] += forms.weights[j][i] * y;
                        row[nc + i] -= forms.weights[j][i] * uu;
                    }
                }
                for i in 0..2 * nc {
                    if zeroed[i] {
                        rhs -= row[i] * fixed_val(i);
                    }
                }
                for (ci, &i) in cols.iter().enumerate() {
                    a[(r, ci)] = row[i];
                }
                b[r] = rhs;
            }
            // Column equilibration before the SVD solve.
            let norms: Vec<f64> = (0..cols.len()).map(|j| a.column(j).norm().max(1e-300)).collect();
            for (j, s) in norms.iter().enumerate() {
                a.column_mut(j).scale_mut(1.0 / s);
            }
            let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|e| Error::BoundEstimation(format!("least squares: {e}")))?;
            for i in 0..2 * nc {
                theta[off + i] = fixed_val(i);
            }
            for (ci, &i) in cols.iter().enumerate() {
                theta[off + i] = (sol[ci] / norms[ci]).clamp(boxes[off + i].0, boxes[off + i].1);
            }
            let h = ContinuousTf::from_theta(&theta[off..off + 2 * nc])?;
            if let Ok(t) = tustin_map(&h, ds.ts) {
                let sim = crate::lti::dt_simulate_from_rest(&t, &u);
                contrib.set_column(c, &DVector::from_vec(sim));
            }
        }
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub d_star: f64,
    pub d_max: f64,
    /// Full POP point `[θ, ψ, z, u]` feasible at `d = d_star`.
    pub witness: NlpSolution,
    /// Best `d` found from each start.
    pub per_start: Vec<f64>,
}

/// Cap on `d`: ten times the largest noise bound expressed in `φ` units.
pub fn delta_cap(ds: &Dataset, kind: DeltaKind) -> f64 {
    let phi = delta_shape(kind, ds);
    let phi_ref = phi.iter().fold(0.0f64, |a, v| a.max(*v)).max(1e-12);
    let mut eta = ds.max_output_bound();
    if eta <= 0.0 {
        eta = ds.y_tilde.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    }
    10.0 * eta / phi_ref
}

struct Candidate {
    d: f64,
    x: Vec<f64>,
}

/// Evaluates `θ` by the fixed-θ LP and exact repair; `None` if unusable.
fn delta_at_theta(ds: &Dataset, orders: &Orders, kind: DeltaKind, pop: &PopProblem, theta: &[f64]) -> Option<Candidate> {
    let spec = DeltaBoundSpec { kind, d: 0.0 };
    let lp = fixed_theta_program(ds, orders, &spec, theta, FixedThetaGoal::MinDelta, &SolverSettings::default()).ok()?;
    if !lp.status.is_solved() {
        return None;
    }
    let maps = channel_maps(orders, theta, ds.ts).ok()?;
    let (z, u) = repair(ds, orders, &maps, &lp.z, &lp.u).ok()?;
    let d = required_d(ds, orders, kind, &z);
    if !d.is_finite() {
        return None;
    }
    let x = pop.lift(theta, &lp.psi, &z, &u);
    Some(Candidate { d, x })
}

/// NLP in `[x, d]` with the output bounds widened by `d φ_k`.
fn delta_nlp(pop: &PopProblem, ds: &Dataset, kind: DeltaKind, d_max: f64) -> Result<NlpProblem> {
    let n = pop.n_vars() + 1;
    let di = n - 1;
    let phi = delta_shape(kind, ds);
    let mut p = nlp_from_pop(pop, n)?;
    for (q, c) in pop.constraints.iter().enumerate() {
        if let ConstraintTag::OutputLower { output, k } | ConstraintTag::OutputUpper { output, k } = c.tag {
            let idx = p.ineq_origin.iter().position(|&o| o == q).expect("output bound kept as inequality");
            p.problem.ineqs[idx].add_linear(di, phi[(k, output)]);
        }
    }
    p.problem.objective = QuadPoly { constant: 0.0, linear: vec![(di, 1.0)], quad: vec![] };
    p.problem.lo[di] = 0.0;
    p.problem.hi[di] = d_max;
    p.problem.elim_key[di] = usize::MAX;
    Ok(p.problem)
}

struct PopNlp {
    problem: NlpProblem,
    ineq_origin: Vec<usize>,
}

/// Converts the POP to NLP form: single-variable affine constraints become
/// bounds, everything else is kept. `n` may exceed the POP size.
fn nlp_from_pop(pop: &PopProblem, n: usize) -> Result<PopNlp> {
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    let mut eqs = Vec::new();
    let mut ineqs = Vec::new();
    let mut ineq_origin = Vec::new();
    let keep_as_row = |t: &ConstraintTag| matches!(t, ConstraintTag::OutputLower { .. } | ConstraintTag::OutputUpper { .. });
    for (s, c) in pop.constraints.iter().enumerate() {
        let q = QuadPoly::from_poly(&c.poly)?;
        if q.quad.is_empty() && q.linear.len() == 1 && !keep_as_row(&c.tag) {
            let (i, a) = q.linear[0];
            let v = -q.constant / a;
            match c.kind {
                ConstraintKind::Equality => {
                    lo[i] = lo[i].max(v);
                    hi[i] = hi[i].min(v);
                }
                ConstraintKind::Inequality if a > 0.0 => lo[i] = lo[i].max(v),
                ConstraintKind::Inequality => hi[i] = hi[i].min(v),
            }
            continue;
        }
        match c.kind {
            ConstraintKind::Equality => eqs.push(q),
            ConstraintKind::Inequality => {
                ineqs.push(q);
                ineq_origin.push(s);
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| lo[i] > hi[i] + 1e-12) {
        return Err(Error::Infeasible(format!("empty bound interval on variable {i}")));
    }
    for i in 0..n {
        if lo[i] > hi[i] {
            let m = 0.5 * (lo[i] + hi[i]);
            lo[i] = m;
            hi[i] = m;
        }
    }
    let v = &pop.vars;
    let elim_key = (0..n)
        .map(|i| {
            if i >= v.len() {
                return usize::MAX;
            }
            match v.kind(i) {
                VarKind::Z { k, .. } | VarKind::U { k, .. } => k,
                _ => usize::MAX - 1,
            }
        })
        .collect();
    let objective = QuadPoly::from_poly(&pop.objective)?;
    Ok(PopNlp { problem: NlpProblem { n, objective, eqs, ineqs, lo, hi, elim_key }, ineq_origin })
}

/// Per-variable scale: `θ`/`ψ` coordinates by magnitude, `z`/`u` per sequence.
fn nlp_scale(pop: &PopProblem, x: &[f64], n: usize) -> Vec<f64> {
    let mut s = crate::relax::AffineScaling::from_reference(pop, x).scale;
    s.resize(n, 1.0);
    s
}

/// Local solution of a POP (degree <= 2) from `x0` by the augmented Lagrangian.
pub fn solve_pop_local(pop: &PopProblem, x0: &[f64], opts: &NlpOptions) -> Result<NlpSolution> {
    let nlp = nlp_from_pop(pop, pop.n_vars())?.problem;
    let scale = nlp_scale(pop, x0, pop.n_vars());
    let mut sol = solve_al(&nlp, x0, &scale, opts);
    sol.violation = pop.max_violation(&sol.point);
    Ok(sol)
}

fn perturbed_theta(base: &[f64], spread: f64, rng: &mut ChaCha8Rng, boxes: &[(f64, f64)]) -> Vec<f64> {
    base.iter()
        .zip(boxes)
        .map(|(&v, &(lo, hi))| {
            if lo == hi {
                return lo;
            }
            let e: f64 = StandardNormal.sample(rng);
            (v * (1.0 + spread * e)).clamp(lo, hi)
        })
        .collect()
}

/// Upper bound `d*` on the smallest discretization scale that makes the
/// identification constraints feasible, with a verified witness.
pub fn estimate_delta_bound(
    ds: &Dataset,
    orders: &Orders,
    kind: DeltaKind,
    priors: &PriorSpec,
    opts: &NlpOptions,
) -> Result<DeltaEstimate> {
    let pop = build_pop(ds, orders, &DeltaBoundSpec { kind, d: 0.0 }, &ObjectiveSpec::Feasibility, priors)?;
    let d_max = delta_cap(ds, kind);
    let theta0 = least_squares_theta(ds, orders, priors)?;
    let boxes = priors.theta_box(orders.n_theta())?;
    let first = delta_at_theta(ds, orders, kind, &pop, &theta0);
    let verified = |c: &Candidate| -> bool {
        build_pop(ds, orders, &DeltaBoundSpec { kind, d: c.d }, &ObjectiveSpec::Feasibility, priors)
            .map(|p| p.max_violation(&c.x) <= opts.feas_tol)
            .unwrap_or(false)
    };
    if let Some(c) = &first {
        if c.d <= 1e-12 && verified(c) {
            return Ok(finish(c, d_max, vec![c.d]));
        }
    }
    let nlp = delta_nlp(&pop, ds, kind, d_max)?;
    let starts: Vec<usize> = (0..opts.starts.max(1)).collect();
    let results: Vec<Option<Candidate>> = par::map(opts.mode, &starts, |&s| {
        let theta = if s == 0 {
            theta0.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s as u64));
            perturbed_theta(&theta0, opts.restart_spread, &mut rng, &boxes)
        };
        let start = if s == 0 { first.as_ref().map(|c| Candidate { d: c.d, x: c.x.clone() }) } else { delta_at_theta(ds, orders, kind, &pop, &theta) }?;
        let mut x0 = start.x.clone();
        x0.push(start.d.min(d_max));
        let scale = {
            let mut s = nlp_scale(&pop, &x0, x0.len());
            *s.last_mut().unwrap() = start.d.max(1e-3 * d_max).max(1e-12);
            s
        };
        let sol = solve_al(&nlp, &x0, &scale, opts);
        let theta_al = &sol.point[..orders.n_theta()];
        let polished = delta_at_theta(ds, orders, kind, &pop, theta_al);
        match polished {
            Some(p) if p.d < start.d && verified(&p) => Some(p),
            _ if verified(&start) => Some(start),
            _ => None,
        }
    });
    let per_start: Vec<f64> = results.iter().map(|r| r.as_ref().map_or(f64::INFINITY, |c| c.d)).collect();
    let best = results
        .into_iter()
        .flatten()
        .min_by(|a, b| a.d.total_cmp(&b.d))
        .ok_or_else(|| Error::BoundEstimation("no start produced a verified feasible point".into()))?;
    if best.d > d_max {
        return Err(Error::BoundEstimation(format!("smallest feasible d found is {:e}, above the cap {d_max:e}", best.d)));
    }
    Ok(finish(&best, d_max, per_start))
}

fn finish(c: &Candidate, d_max: f64, per_start: Vec<f64>) -> DeltaEstimate {
    DeltaEstimate {
        d_star: c.d,
        d_max,
        witness: NlpSolution {
            point: c.x.clone(),
            objective: c.d,
            violation: 0.0,
            status: NlpStatus::FeasibleLocal,
            merit_history: Vec::new(),
        },
        per_start,
    }
}

/// Locally minimizes the simulation error over the feasible set at a fixed
/// discretization bound, starting from `theta_init`.
pub fn refine_theta_e(
    ds: &Dataset,
    orders: &Orders,
    delta: &DeltaBoundSpec,
    priors: &PriorSpec,
    theta_init: &[f64],
    opts: &NlpOptions,
) -> Result<NlpSolution> {
    let pop = build_pop(ds, orders, delta, &ObjectiveSpec::SimulationError, priors)?;
    let settings = SolverSettings::default();
    let qp_at = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let qp = fixed_theta_program(ds, orders, delta, theta, FixedThetaGoal::MinSimulationError, &settings).ok()?;
        if !qp.status.is_solved() {
            return None;
        }
        let maps = channel_maps(orders, theta, ds.ts).ok()?;
        let (z, u) = repair(ds, orders, &maps, &qp.z, &qp.u).ok()?;
        let x = pop.lift(theta, &qp.psi, &z, &u);
        (pop.max_violation(&x) <= opts.feas_tol).then(|| (pop.objective.eval(&x), x))
    };
    let init = qp_at(theta_init);
    let x0 = match &init {
        Some((_, x)) => x.clone(),
        None => {
            // Infeasible start: begin from the simulated completion and let
            // the penalty restore feasibility.
            let maps = channel_maps(orders, theta_init, ds.ts)?;
            let z0 = DMatrix::from_fn(ds.n(), orders.n_channels(), |k, c| ds.y_tilde[(k, c / orders.n_u())] / orders.n_u() as f64);
            let (z, u) = repair(ds, orders, &maps, &z0, &ds.u_tilde)?;
            let psi: Vec<f64> = maps.iter().flat_map(|t| t.psi()).collect();
            pop.lift(theta_init, &psi, &z, &u)
        }
    };
    let nlp = nlp_from_pop(&pop, pop.n_vars())?.problem;
    let scale = nlp_scale(&pop, &x0, pop.n_vars());
    let sol = solve_al(&nlp, &x0, &scale, opts);
    let refined = qp_at(&sol.point[..orders.n_theta()]);
    let best = match (init, refined) {
        (Some(a), Some(b)) => Some(if b.0 <= a.0 { b } else { a }),
        (a, b) => a.or(b),
    };
    match best {
        Some((obj, x)) => Ok(NlpSolution {
            violation: pop.max_violation(&x),
            point: x,
            objective: obj,
            status: NlpStatus::FeasibleLocal,
            merit_history: sol.merit_history,
        }),
        None => Ok(NlpSolution { status: NlpStatus::InfeasibleLocal, ..sol }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::MimoModel;
    use crate::signals::{generate_signal, make_dataset, NoiseSpec, SignalSpec};

    fn example1(n: usize, eta: f64, seed: u64) -> Dataset {
        let model = MimoModel::siso(ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap());
        let s = generate_signal(&SignalSpec::multisine(50, 0.1, seed)).unwrap();
        make_dataset(&model, &[s], 0.05, n, &NoiseSpec::absolute(1, 0.0, 1, eta), seed).unwrap()
    }

    #[test]
    fn al_solves_small_qp() {
        // min (x-2)^2 + (y-1)^2  s.t. x + y = 1, x >= 0, y in [0, 0.25]
        let p = NlpProblem {
            n: 2,
            objective: QuadPoly { constant: 5.0, linear: vec![(0, -4.0), (1, -2.0)], quad: vec![(0, 0, 1.0), (1, 1, 1.0)] },
            eqs: vec![QuadPoly { constant: -1.0, linear: vec![(0, 1.0), (1, 1.0)], quad: vec![] }],
            ineqs: vec![QuadPoly { constant: 0.0, linear: vec![(0, 1.0)], quad: vec![] }],
            lo: vec![f64::NEG_INFINITY, 0.0],
            hi: vec![f64::INFINITY, 0.25],
            elim_key: vec![0, 1],
        };
        let s = solve_al(&p, &[0.0, 0.0], &[1.0, 1.0], &NlpOptions::default());
        assert_eq!(s.status, NlpStatus::FeasibleLocal);
        assert!((s.point[0] - 1.0).abs() < 1e-5 && s.point[1].abs() < 1e-5, "{:?}", s.point);
        for round in &s.merit_history {
            assert!(round.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn least_squares_recovers_noise_free_model() {
        let ds = example1(80, 0.0, 3);
        let th = least_squares_theta(&ds, &Orders::siso(2).unwrap(), &PriorSpec::default()).unwrap();
        let truth = [16.3, 2.2, -21.0, 10.5];
        for (a, b) in th.iter().zip(truth) {
            assert!((a - b).abs() < 0.05 * b.abs(), "{th:?}");
        }
    }

    #[test]
    fn truth_is_feasible_at_fixed_theta() {
        let ds = example1(40, 0.5, 5);
        let r = fixed_theta_program(&ds, &Orders::siso(2).unwrap(), &DeltaBoundSpec::uniform(0.0), &[16.3, 2.2, -21.0, 10.5], FixedThetaGoal::MinDelta, &SolverSettings::default()).unwrap();
        assert!(r.status.is_solved());
        assert!(r.value < 1.0, "{}", r.value);
    }

    #[test]
    fn noise_free_delta_is_zero() {
        let ds = example1(40, 2.0, 7).with_scaled_bounds(1.0);
        let mut clean = ds.clone();
        let t = ds.truth.as_ref().unwrap();
        clean.y_tilde = t.y.clone();
        clean.u_tilde = t.u.clone();
        let est = estimate_delta_bound(&clean, &Orders::siso(2).unwrap(), DeltaKind::Uniform, &PriorSpec::default(), &NlpOptions::default()).unwrap();
        assert!(est.d_star <= 1e-6, "{}", est.d_star);
    }
}
