//! The lifted polynomial optimization problem behind set-membership
//! identification, and its correlative/term sparsity structure.
//!
//! Decision variables are stacked as `x = [θ, ψ, z, u]`:
//! `θ` holds `[α, β]` per channel, `ψ` holds `[γ, ξ]` per channel (the
//! Tustin image), `z` holds the partial outputs `z_{m,l}(1..N)` per channel
//! and `u` the noise-free inputs `u_l(1..N)`. Channels are visited
//! row-major (output outer, input inner).

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{arg, Error, Result};
use crate::lti::{Orders, TustinForms};
use crate::poly::{monomial_basis, Monomial, Polynomial};
use crate::signals::{delta_bounds, Dataset, DeltaBoundSpec};

/// Half-width of the box imposed on every θ coordinate without a user box.
pub const DEFAULT_THETA_BOX: f64 = 1e3;

/// Margin in `a_n(α) >= LEADING_COEFF_MARGIN · 2^n`.
pub const LEADING_COEFF_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    Alpha { channel: usize, j: usize },
    Beta { channel: usize, j: usize },
    Gamma { channel: usize, j: usize },
    Xi { channel: usize, j: usize },
    Z { channel: usize, k: usize },
    U { input: usize, k: usize },
}

/// Dense index catalog of the decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct VarIndex {
    orders: Orders,
    n: usize,
    theta_off: Vec<usize>,
    psi_off: Vec<usize>,
}

impl VarIndex {
    pub fn new(orders: &Orders, n: usize) -> Self {
        let mut theta_off = Vec::new();
        let mut psi_off = Vec::new();
        let (mut t, mut p) = (0, orders.n_theta());
        for &nc in orders.as_slice() {
            theta_off.push(t);
            psi_off.push(p);
            t += 2 * nc;
            p += 2 * nc + 1;
        }
        Self { orders: orders.clone(), n, theta_off, psi_off }
    }

    pub fn orders(&self) -> &Orders {
        &self.orders
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_theta(&self) -> usize {
        self.orders.n_theta()
    }

    pub fn n_psi(&self) -> usize {
        self.orders.n_psi()
    }

    pub fn len(&self) -> usize {
        self.n_theta() + self.n_psi() + self.orders.n_u() * (self.orders.n_y() + 1) * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn order(&self, c: usize) -> usize {
        self.orders.as_slice()[c]
    }

    pub fn alpha(&self, c: usize, j: usize) -> usize {
        self.theta_off[c] + j
    }

    pub fn beta(&self, c: usize, j: usize) -> usize {
        self.theta_off[c] + self.order(c) + j
    }

    pub fn gamma(&self, c: usize, j: usize) -> usize {
        self.psi_off[c] + j
    }

    pub fn xi(&self, c: usize, j: usize) -> usize {
        self.psi_off[c] + self.order(c) + j
    }

    /// Partial output of channel `c` at 0-based sample `k`.
    pub fn z(&self, c: usize, k: usize) -> usize {
        self.n_theta() + self.n_psi() + c * self.n + k
    }

    /// Noise-free input `l` at 0-based sample `k`.
    pub fn u(&self, l: usize, k: usize) -> usize {
        self.n_theta() + self.n_psi() + self.orders.n_channels() * self.n + l * self.n + k
    }

    pub fn theta_range(&self) -> std::ops::Range<usize> {
        0..self.n_theta()
    }

    pub fn psi_range(&self) -> std::ops::Range<usize> {
        self.n_theta()..self.n_theta() + self.n_psi()
    }

    pub fn kind(&self, i: usize) -> VarKind {
        let (nt, np) = (self.n_theta(), self.n_psi());
        let nch = self.orders.n_channels();
        if i < nt {
            let c = self.theta_off.iter().rposition(|&o| o <= i).unwrap();
            let j = i - self.theta_off[c];
            let nc = self.order(c);
            if j < nc { VarKind::Alpha { channel: c, j } } else { VarKind::Beta { channel: c, j: j - nc } }
        } else if i < nt + np {
            let c = self.psi_off.iter().rposition(|&o| o <= i).unwrap();
            let j = i - self.psi_off[c];
            let nc = self.order(c);
            if j < nc { VarKind::Gamma { channel: c, j } } else { VarKind::Xi { channel: c, j: j - nc } }
        } else if i < nt + np + nch * self.n {
            let r = i - nt - np;
            VarKind::Z { channel: r / self.n, k: r % self.n }
        } else {
            let r = i - nt - np - nch * self.n;
            VarKind::U { input: r / self.n, k: r % self.n }
        }
    }

    fn channel_suffix(&self, c: usize) -> String {
        if self.orders.n_channels() == 1 {
            String::new()
        } else {
            let n_u = self.orders.n_u();
            format!("^({},{})", c / n_u + 1, c % n_u + 1)
        }
    }

    pub fn name(&self, i: usize) -> String {
        match self.kind(i) {
            VarKind::Alpha { channel, j } => format!("alpha_{j}{}", self.channel_suffix(channel)),
            VarKind::Beta { channel, j } => format!("beta_{j}{}", self.channel_suffix(channel)),
            VarKind::Gamma { channel, j } => format!("gamma_{j}{}", self.channel_suffix(channel)),
            VarKind::Xi { channel, j } => format!("xi_{j}{}", self.channel_suffix(channel)),
            VarKind::Z { channel, k } => format!("z{}({})", self.channel_suffix(channel), k + 1),
            VarKind::U { input, k } => format!("u_{}({})", input + 1, k + 1),
        }
    }

    /// Names of the θ coordinates in stacking order.
    pub fn theta_names(&self) -> Vec<String> {
        self.theta_range().map(|i| self.name(i)).collect()
    }
}

/// Relative degree `r` for channel `(output, input)`: `β_j = 0` for the
/// top `r - 1` numerator coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeDegree {
    pub output: usize,
    pub input: usize,
    pub r: usize,
}

/// `lo <= θ_param <= hi`; `lo == hi` fixes the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub param: usize,
    pub lo: f64,
    pub hi: f64,
}

/// `lo <= β_0 / α_0 <= hi`, imposed as affine constraints assuming `α_0 > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcGainBox {
    pub output: usize,
    pub input: usize,
    pub lo: f64,
    pub hi: f64,
}

fn default_box() -> f64 {
    DEFAULT_THETA_BOX
}

/// A-priori information on the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(default)]
    pub relative_degree: Vec<RelativeDegree>,
    #[serde(default)]
    pub boxes: Vec<ParamBox>,
    /// Symmetric box `[-b, b]` for every coordinate not covered by `boxes`.
    #[serde(default = "default_box")]
    pub default_box: f64,
    #[serde(default)]
    pub dc_gain: Vec<DcGainBox>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { relative_degree: Vec::new(), boxes: Vec::new(), default_box: DEFAULT_THETA_BOX, dc_gain: Vec::new() }
    }
}

impl PriorSpec {
    /// Effective `[lo, hi]` per θ coordinate.
    pub fn theta_box(&self, n_theta: usize) -> Result<Vec<(f64, f64)>> {
        if !(self.default_box.is_finite() && self.default_box > 0.0) {
            return arg("default parameter box must be positive and finite");
        }
        let mut out = vec![(-self.default_box, self.default_box); n_theta];
        for b in &self.boxes {
            if b.param >= n_theta {
                return arg(format!("box on parameter {} but only {n_theta} exist", b.param));
            }
            if !(b.lo.is_finite() && b.hi.is_finite() && b.lo <= b.hi) {
                return arg(format!("invalid box [{}, {}] on parameter {}", b.lo, b.hi, b.param));
            }
            out[b.param] = (b.lo, b.hi);
        }
        Ok(out)
    }
}

/// What the polynomial program optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// No objective (pure feasibility).
    Feasibility,
    Minimize { param: usize },
    Maximize { param: usize },
    /// `Σ_k Σ_m (ỹ_m(k) - Σ_l z_{m,l}(k))^2`
    SimulationError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `p(x) = 0`
    Equality,
    /// `p(x) >= 0`
    Inequality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConstraintTag {
    Recursion { channel: usize, k: usize },
    CouplingXi { channel: usize, j: usize },
    CouplingGamma { channel: usize, j: usize },
    OutputLower { output: usize, k: usize },
    OutputUpper { output: usize, k: usize },
    InputLower { input: usize, k: usize },
    InputUpper { input: usize, k: usize },
    /// Input noise interval of zero width.
    InputFixed { input: usize, k: usize },
    LeadingCoeff { channel: usize },
    RelativeDegree { channel: usize, j: usize },
    ParamLower { param: usize },
    ParamUpper { param: usize },
    ParamFixed { param: usize },
    DcGainLower { channel: usize },
    DcGainUpper { channel: usize },
}

impl ConstraintTag {
    /// True for the recursion, coupling and data-bound families.
    pub fn is_core(&self) -> bool {
        matches!(
            self,
            ConstraintTag::Recursion { .. }
                | ConstraintTag::CouplingXi { .. }
                | ConstraintTag::CouplingGamma { .. }
                | ConstraintTag::OutputLower { .. }
                | ConstraintTag::OutputUpper { .. }
                | ConstraintTag::InputLower { .. }
                | ConstraintTag::InputUpper { .. }
                | ConstraintTag::InputFixed { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub poly: Polynomial,
    pub kind: ConstraintKind,
    pub tag: ConstraintTag,
}

impl Constraint {
    /// Amount by which `x` violates the constraint (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v = self.poly.eval(x);
        match self.kind {
            ConstraintKind::Equality => v.abs(),
            ConstraintKind::Inequality => (-v).max(0.0),
        }
    }
}

/// Variable index set `I_r` and constraint index set `S_r` of one clique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clique {
    pub vars: Vec<usize>,
    pub constraints: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopProblem {
    pub vars: VarIndex,
    pub constraints: Vec<Constraint>,
    pub objective: Polynomial,
    pub cliques: Vec<Clique>,
}

impl PopProblem {
    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    /// Largest violation over all constraints at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints.iter().fold(0.0, |a, c| a.max(c.violation(x)))
    }

    pub fn count_where(&self, pred: impl Fn(&ConstraintTag) -> bool) -> usize {
        self.constraints.iter().filter(|c| pred(&c.tag)).count()
    }

    /// Diagnostic dump; the layout is not stable across versions.
    pub fn to_json(&self) -> serde_json::Value {
        let terms = |p: &Polynomial| -> Vec<serde_json::Value> {
            p.terms().iter().map(|(m, c)| json!([m.vars().collect::<Vec<_>>(), c])).collect()
        };
        json!({
            "variables": (0..self.n_vars()).map(|i| self.vars.name(i)).collect::<Vec<_>>(),
            "constraints": self.constraints.iter().map(|c| json!({
                "kind": c.kind,
                "tag": c.tag,
                "terms": terms(&c.poly),
            })).collect::<Vec<_>>(),
            "objective": terms(&self.objective),
            "cliques": self.cliques,
        })
    }
}

/// Objective polynomial in the original variables.
pub fn objective_polynomial(spec: &ObjectiveSpec, vars: &VarIndex, ds: &Dataset) -> Result<Polynomial> {
    let orders = vars.orders();
    Ok(match *spec {
        ObjectiveSpec::Feasibility => Polynomial::zero(),
        ObjectiveSpec::Minimize { param } | ObjectiveSpec::Maximize { param } => {
            if param >= vars.n_theta() {
                return arg(format!("objective on parameter {param}, only {} exist", vars.n_theta()));
            }
            let s = if matches!(spec, ObjectiveSpec::Minimize { .. }) { 1.0 } else { -1.0 };
            Polynomial::var(param).scale(s)
        }
        ObjectiveSpec::SimulationError => {
            let mut terms = Vec::new();
            for m in 0..orders.n_y() {
                for k in 0..vars.n_samples() {
                    // (ỹ - Σ_l z)^2
                    let mut r = Polynomial::constant(ds.y_tilde[(k, m)]);
                    for l in 0..orders.n_u() {
                        r = r.sub(&Polynomial::var(vars.z(m * orders.n_u() + l, k)));
                    }
                    terms.extend(r.mul(&r).terms().iter().cloned());
                }
            }
            Polynomial::from_terms(terms)
        }
    })
}

fn lin(terms: impl IntoIterator<Item = (usize, f64)>, constant: f64) -> Polynomial {
    Polynomial::from_terms(
        terms.into_iter().map(|(v, c)| (Monomial::var(v), c)).chain(std::iter::once((Monomial::one(), constant))),
    )
}

/// Builds constraints, objective and cliques for the identification POP.
pub fn build_pop(
    ds: &Dataset,
    orders: &Orders,
    delta: &DeltaBoundSpec,
    objective: &ObjectiveSpec,
    priors: &PriorSpec,
) -> Result<PopProblem> {
    ds.validate()?;
    if ds.n_u() != orders.n_u() || ds.n_y() != orders.n_y() {
        return arg(format!(
            "dataset is {}x{} (outputs x inputs) but orders are {}x{}",
            ds.n_y(),
            ds.n_u(),
            orders.n_y(),
            orders.n_u()
        ));
    }
    if !(delta.d.is_finite() && delta.d >= 0.0) {
        return arg(format!("discretization bound scale must be >= 0, got {}", delta.d));
    }
    let n = ds.n();
    if n < orders.max_order() {
        return arg(format!("{n} samples cannot identify a channel of order {}", orders.max_order()));
    }
    let vars = VarIndex::new(orders, n);
    let n_u = orders.n_u();
    let mut cons = Vec::new();
    let mut push = |poly: Polynomial, kind, tag| cons.push(Constraint { poly, kind, tag });

    // Recursion equalities per channel.
    for c in 0..orders.n_channels() {
        let nc = orders.as_slice()[c];
        let l = c % n_u;
        for k in nc..n {
            let mut terms = vec![(Monomial::var(vars.z(c, k)), 1.0)];
            for j in 0..nc {
                terms.push((Monomial::from_vars(&[vars.gamma(c, j), vars.z(c, k - nc + j)]), 1.0));
            }
            for j in 0..=nc {
                terms.push((Monomial::from_vars(&[vars.xi(c, j), vars.u(l, k - nc + j)]), -1.0));
            }
            push(Polynomial::from_terms(terms), ConstraintKind::Equality, ConstraintTag::Recursion { channel: c, k });
        }
    }

    // Coupling equalities ξ_j a_n(α) = b_j(β), γ_j a_n(α) = a_j(α).
    for c in 0..orders.n_channels() {
        let nc = orders.as_slice()[c];
        let forms = TustinForms::new(nc, ds.ts)?;
        let an = lin((0..nc).map(|i| (vars.alpha(c, i), forms.weights[nc][i])), forms.constant[nc]);
        for j in 0..=nc {
            let b = lin((0..nc).map(|i| (vars.beta(c, i), forms.weights[j][i])), 0.0);
            let poly = Polynomial::var(vars.xi(c, j)).mul(&an).sub(&b);
            push(poly, ConstraintKind::Equality, ConstraintTag::CouplingXi { channel: c, j });
        }
        for j in 0..nc {
            let a = lin((0..nc).map(|i| (vars.alpha(c, i), forms.weights[j][i])), forms.constant[j]);
            let poly = Polynomial::var(vars.gamma(c, j)).mul(&an).sub(&a);
            push(poly, ConstraintKind::Equality, ConstraintTag::CouplingGamma { channel: c, j });
        }
    }

    // Output bounds, inflated by the discretization-error bound.
    let dd = delta_bounds(delta, ds);
    for m in 0..orders.n_y() {
        for k in 0..n {
            let zsum: Vec<(usize, f64)> = (0..n_u).map(|l| (vars.z(m * n_u + l, k), -1.0)).collect();
            let resid = lin(zsum, ds.y_tilde[(k, m)]);
            let lo = ds.eta_lo[(k, m)] - dd[(k, m)];
            let hi = ds.eta_hi[(k, m)] + dd[(k, m)];
            push(resid.sub(&Polynomial::constant(lo)), ConstraintKind::Inequality, ConstraintTag::OutputLower { output: m, k });
            push(Polynomial::constant(hi).sub(&resid), ConstraintKind::Inequality, ConstraintTag::OutputUpper { output: m, k });
        }
    }

    // Input bounds; a zero-width interval becomes an equality.
    for l in 0..n_u {
        for k in 0..n {
            let resid = lin([(vars.u(l, k), -1.0)], ds.u_tilde[(k, l)]);
            let (lo, hi) = (ds.eps_lo[(k, l)], ds.eps_hi[(k, l)]);
            if lo == hi {
                push(resid.sub(&Polynomial::constant(lo)), ConstraintKind::Equality, ConstraintTag::InputFixed { input: l, k });
            } else {
                push(resid.sub(&Polynomial::constant(lo)), ConstraintKind::Inequality, ConstraintTag::InputLower { input: l, k });
                push(Polynomial::constant(hi).sub(&resid), ConstraintKind::Inequality, ConstraintTag::InputUpper { input: l, k });
            }
        }
    }

    // a_n(α) bounded away from zero.
    for c in 0..orders.n_channels() {
        let nc = orders.as_slice()[c];
        let forms = TustinForms::new(nc, ds.ts)?;
        let eps = LEADING_COEFF_MARGIN * 2f64.powi(nc as i32);
        let an = lin((0..nc).map(|i| (vars.alpha(c, i), forms.weights[nc][i])), forms.constant[nc] - eps);
        push(an, ConstraintKind::Inequality, ConstraintTag::LeadingCoeff { channel: c });
    }

    // Priors.
    for rd in &priors.relative_degree {
        if rd.output >= orders.n_y() || rd.input >= n_u {
            return arg(format!("relative degree prior on missing channel ({}, {})", rd.output, rd.input));
        }
        let c = rd.output * n_u + rd.input;
        let nc = orders.as_slice()[c];
        if rd.r == 0 || rd.r > nc {
            return arg(format!("relative degree {} invalid for a channel of order {nc}", rd.r));
        }
        for j in (nc + 1 - rd.r)..nc {
            push(Polynomial::var(vars.beta(c, j)), ConstraintKind::Equality, ConstraintTag::RelativeDegree { channel: c, j });
        }
    }
    for (i, (lo, hi)) in priors.theta_box(vars.n_theta())?.into_iter().enumerate() {
        if lo == hi {
            push(lin([(i, 1.0)], -lo), ConstraintKind::Equality, ConstraintTag::ParamFixed { param: i });
        } else {
            push(lin([(i, 1.0)], -lo), ConstraintKind::Inequality, ConstraintTag::ParamLower { param: i });
            push(lin([(i, -1.0)], hi), ConstraintKind::Inequality, ConstraintTag::ParamUpper { param: i });
        }
    }
    for g in &priors.dc_gain {
        if g.output >= orders.n_y() || g.input >= n_u || !(g.lo <= g.hi) {
            return arg("invalid DC-gain prior");
        }
        let c = g.output * n_u + g.input;
        let (a0, b0) = (vars.alpha(c, 0), vars.beta(c, 0));
        push(lin([(b0, 1.0), (a0, -g.lo)], 0.0), ConstraintKind::Inequality, ConstraintTag::DcGainLower { channel: c });
        push(lin([(b0, -1.0), (a0, g.hi)], 0.0), ConstraintKind::Inequality, ConstraintTag::DcGainUpper { channel: c });
    }

    let objective = objective_polynomial(objective, &vars, ds)?;
    let cliques = build_cliques(&vars, &cons, &objective)?;
    Ok(PopProblem { vars, constraints: cons, objective, cliques })
}

/// Clique `0` is `θ ∪ ψ`; clique `w >= 1` is `ψ` plus every z/u sample in
/// the window `[w-1, w-1+n̄]` (0-based samples), with `n̄` the largest order.
/// Each constraint goes to the lowest-index clique containing its support.
pub fn build_cliques(vars: &VarIndex, constraints: &[Constraint], objective: &Polynomial) -> Result<Vec<Clique>> {
    let orders = vars.orders();
    let n = vars.n_samples();
    let nbar = orders.max_order();
    let windows = n.saturating_sub(nbar).max(1);
    let psi: Vec<usize> = vars.psi_range().collect();

    let mut cliques = Vec::with_capacity(windows + 1);
    cliques.push(Clique { vars: (0..vars.n_theta() + vars.n_psi()).collect(), constraints: Vec::new() });
    for w in 0..windows {
        let mut v = psi.clone();
        let last = (w + nbar).min(n - 1);
        for c in 0..orders.n_channels() {
            v.extend((w..=last).map(|k| vars.z(c, k)));
        }
        for l in 0..orders.n_u() {
            v.extend((w..=last).map(|k| vars.u(l, k)));
        }
        v.sort_unstable();
        cliques.push(Clique { vars: v, constraints: Vec::new() });
    }

    // Lowest clique containing a support: θ/ψ-only supports go to clique 0;
    // otherwise the window is fixed by the earliest and latest sample used.
    for (s, con) in constraints.iter().enumerate() {
        let support = con.poly.variables();
        let r = assign_clique(vars, &support, nbar, windows)
            .ok_or_else(|| Error::Invariant(format!("constraint {s} ({:?}) fits no clique", con.tag)))?;
        cliques[r].constraints.push(s);
    }
    audit_cliques(vars.len(), &cliques, constraints, objective)?;
    Ok(cliques)
}

fn assign_clique(vars: &VarIndex, support: &[usize], nbar: usize, windows: usize) -> Option<usize> {
    let nt = vars.n_theta() + vars.n_psi();
    let samples: Vec<usize> = support
        .iter()
        .filter(|&&i| i >= nt)
        .map(|&i| match vars.kind(i) {
            VarKind::Z { k, .. } | VarKind::U { k, .. } => k,
            _ => unreachable!(),
        })
        .collect();
    if samples.is_empty() {
        return Some(0);
    }
    if support.iter().any(|&i| i < vars.n_theta()) {
        return None;
    }
    let lo = *samples.iter().min().unwrap();
    let hi = *samples.iter().max().unwrap();
    // Window w covers [w, w + nbar]; need w <= lo and hi <= w + nbar.
    let w = hi.saturating_sub(nbar);
    if w > lo || w >= windows {
        return None;
    }
    Some(w + 1)
}

/// Result of the correlative-sparsity audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CliqueAudit {
    pub cliques: usize,
    pub max_clique: usize,
}

/// Checks CS1–CS6 on a clique list; any failure is an invariant error.
///
/// For objectives that are not single-clique (e.g. simulation error) CS5 is
/// checked per objective term.
pub fn audit_cliques(
    n_vars: usize,
    cliques: &[Clique],
    constraints: &[Constraint],
    objective: &Polynomial,
) -> Result<CliqueAudit> {
    let fail = |code: &str, msg: String| Err(Error::Invariant(format!("{code}: {msg}")));
    let sets: Vec<HashSet<usize>> = cliques.iter().map(|c| c.vars.iter().copied().collect()).collect();

    // CS1
    let mut covered = vec![false; n_vars];
    for c in cliques {
        for &v in &c.vars {
            if v >= n_vars {
                return fail("CS1", format!("clique references variable {v} of {n_vars}"));
            }
            covered[v] = true;
        }
    }
    if let Some(v) = covered.iter().position(|c| !c) {
        return fail("CS1", format!("variable {v} is in no clique"));
    }
    // CS2, CS3
    let mut owner = vec![None; constraints.len()];
    for (r, c) in cliques.iter().enumerate() {
        for &s in &c.constraints {
            if s >= constraints.len() {
                return fail("CS2", format!("clique {r} lists missing constraint {s}"));
            }
            if let Some(prev) = owner[s] {
                return fail("CS3", format!("constraint {s} in cliques {prev} and {r}"));
            }
            owner[s] = Some(r);
        }
    }
    if let Some(s) = owner.iter().position(|o| o.is_none()) {
        return fail("CS2", format!("constraint {s} is in no clique"));
    }
    // CS4
    for (s, con) in constraints.iter().enumerate() {
        let r = owner[s].unwrap();
        if let Some(v) = con.poly.variables().into_iter().find(|v| !sets[r].contains(v)) {
            return fail("CS4", format!("constraint {s} uses variable {v} outside clique {r}"));
        }
    }
    // CS5
    for (m, _) in objective.terms() {
        if !sets.iter().any(|set| m.support().all(|v| set.contains(&v))) {
            return fail("CS5", format!("objective term {m:?} fits no clique"));
        }
    }
    // CS6
    let mut union = vec![false; n_vars];
    for r in 0..cliques.len() {
        if r > 0 {
            let prev = &sets[r - 1];
            if let Some(v) = cliques[r].vars.iter().find(|&&v| union[v] && !prev.contains(&v)) {
                return fail("CS6", format!("clique {r} shares variable {v} with an earlier clique but not clique {}", r - 1));
            }
        }
        for &v in &cliques[r].vars {
            union[v] = true;
        }
    }
    Ok(CliqueAudit { cliques: cliques.len(), max_clique: cliques.iter().map(|c| c.vars.len()).max().unwrap_or(0) })
}

/// Block structure of one localizing (or equality-multiplier) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizingSparsity {
    pub constraint: usize,
    pub basis: Vec<Monomial>,
    pub blocks: Vec<Vec<usize>>,
}

/// Monomial bases and block partitions of one clique.
#[derive(Debug, Clone, PartialEq)]
pub struct CliqueSparsity {
    pub basis: Vec<Monomial>,
    /// Partition of `basis` indices; each part is a principal submatrix.
    pub moment_blocks: Vec<Vec<usize>>,
    pub localizing: Vec<LocalizingSparsity>,
}

impl CliqueSparsity {
    /// Basis monomials in the block that contains the constant monomial.
    pub fn support(&self) -> Vec<Monomial> {
        let block = self.moment_blocks.iter().find(|b| b.contains(&0)).expect("constant monomial is in a block");
        let mut v: Vec<Monomial> = block.iter().map(|&i| self.basis[i].clone()).collect();
        v.sort();
        v
    }

    pub fn largest_block(&self) -> usize {
        self.moment_blocks.iter().map(|b| b.len()).max().unwrap_or(0)
    }
}

/// `⌈deg / 2⌉` for the relaxation order bookkeeping.
pub fn half_degree(p: &Polynomial) -> usize {
    p.degree().div_ceil(2)
}

fn localizing_basis(vars: &[usize], rho: usize, p: &Polynomial) -> Vec<Monomial> {
    match rho.checked_sub(half_degree(p)) {
        Some(d) => monomial_basis(vars, d),
        None => Vec::new(),
    }
}

fn whole(len: usize) -> Vec<Vec<usize>> {
    if len == 0 { Vec::new() } else { vec![(0..len).collect()] }
}

/// Dense (correlative-sparsity only) structure: one block per matrix.
pub fn dense_sparsity(problem: &PopProblem, rho: usize) -> Vec<CliqueSparsity> {
    problem
        .cliques
        .iter()
        .map(|c| {
            let basis = monomial_basis(&c.vars, rho);
            let localizing = c
                .constraints
                .iter()
                .map(|&s| {
                    let b = localizing_basis(&c.vars, rho, &problem.constraints[s].poly);
                    LocalizingSparsity { constraint: s, blocks: whole(b.len()), basis: b }
                })
                .collect();
            CliqueSparsity { moment_blocks: whole(basis.len()), basis, localizing }
        })
        .collect()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
    fn components(mut self) -> Vec<Vec<usize>> {
        let n = self.0.len();
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..n {
            let r = self.find(i);
            groups.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }
}

/// Connected components of the graph on `basis` with an edge `(a, b)`
/// whenever some `m · basis[a] · basis[b]` (`m` in `multiplier`) is in `support`.
fn closure_blocks(basis: &[Monomial], multiplier: &[Monomial], support: &HashSet<Monomial>) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(basis.len());
    for a in 0..basis.len() {
        for b in a + 1..basis.len() {
            let ab = basis[a].mul(&basis[b]);
            if multiplier.iter().any(|m| support.contains(&m.mul(&ab))) {
                uf.union(a, b);
            }
        }
    }
    uf.components()
}

/// Term-sparsity block structure after `iterations` rounds of support
/// extension and block closure.
///
/// The starting support is every monomial of the objective and the
/// constraints plus the squares `β²` of every clique basis monomial. Each
/// round connects basis monomials whose products (times the constraint's
/// monomials, for localizing matrices) lie in the support, closes the
/// connected components into full blocks, and adds every product inside a
/// block to the support. Blocks only ever merge, so the structure is
/// monotone in `iterations`.
pub fn term_sparsity_supports(problem: &PopProblem, rho: usize, iterations: usize) -> Result<Vec<CliqueSparsity>> {
    if rho == 0 || iterations == 0 {
        return arg("term sparsity needs rho >= 1 and at least one iteration");
    }
    let mut dense = dense_sparsity(problem, rho);
    let mut support: HashSet<Monomial> = HashSet::new();
    support.insert(Monomial::one());
    for (m, _) in problem.objective.terms() {
        support.insert(m.clone());
    }
    for c in &problem.constraints {
        for (m, _) in c.poly.terms() {
            support.insert(m.clone());
        }
    }
    for cs in &dense {
        for b in &cs.basis {
            support.insert(b.mul(b));
        }
    }
    let one = [Monomial::one()];
    let multipliers: Vec<Vec<Monomial>> =
        problem.constraints.iter().map(|c| c.poly.terms().iter().map(|(m, _)| m.clone()).collect()).collect();

    for _ in 0..iterations {
        for cs in dense.iter_mut() {
            cs.moment_blocks = closure_blocks(&cs.basis, &one, &support);
            for loc in cs.localizing.iter_mut() {
                loc.blocks = closure_blocks(&loc.basis, &multipliers[loc.constraint], &support);
            }
        }
        let mut grown = support.clone();
        for cs in &dense {
            for block in &cs.moment_blocks {
                for (i, &a) in block.iter().enumerate() {
                    for &b in &block[i..] {
                        grown.insert(cs.basis[a].mul(&cs.basis[b]));
                    }
                }
            }
            for loc in &cs.localizing {
                for block in &loc.blocks {
                    for (i, &a) in block.iter().enumerate() {
                        for &b in &block[i..] {
                            let ab = loc.basis[a].mul(&loc.basis[b]);
                            for m in &multipliers[loc.constraint] {
                                grown.insert(m.mul(&ab));
                            }
                        }
                    }
                }
            }
        }
        if grown.len() == support.len() {
            break;
        }
        support = grown;
    }
    Ok(dense)
}

/// Problem dimensions for dry runs and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopDimensions {
    pub variables: usize,
    pub constraints: usize,
    pub equalities: usize,
    pub inequalities: usize,
    pub cliques: usize,
    pub clique_sizes: Vec<usize>,
}

impl PopProblem {
    pub fn dimensions(&self) -> PopDimensions {
        let eq = self.constraints.iter().filter(|c| c.kind == ConstraintKind::Equality).count();
        PopDimensions {
            variables: self.n_vars(),
            constraints: self.constraints.len(),
            equalities: eq,
            inequalities: self.constraints.len() - eq,
            cliques: self.cliques.len(),
            clique_sizes: self.cliques.iter().map(|c| c.vars.len()).collect(),
        }
    }

    /// Stacks `θ, ψ, z, u` into a full variable vector.
    pub fn lift(&self, theta: &[f64], psi: &[f64], z: &DMatrix<f64>, u: &DMatrix<f64>) -> Vec<f64> {
        let v = &self.vars;
        let mut x = vec![0.0; v.len()];
        x[..theta.len()].copy_from_slice(theta);
        x[v.psi_range()].copy_from_slice(psi);
        for c in 0..v.orders().n_channels() {
            for k in 0..v.n_samples() {
                x[v.z(c, k)] = z[(k, c)];
            }
        }
        for l in 0..v.orders().n_u() {
            for k in 0..v.n_samples() {
                x[v.u(l, k)] = u[(k, l)];
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{ContinuousTf, MimoModel};
    use crate::signals::{generate_signal, make_dataset, NoiseSpec, SignalSpec};

    fn siso_dataset(n: usize, eps: f64, eta: f64) -> Dataset {
        let model = MimoModel::siso(ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap());
        let s = generate_signal(&SignalSpec::multisine(20, 0.1, 7)).unwrap();
        make_dataset(&model, &[s], 0.05, n, &NoiseSpec::absolute(1, eps, 1, eta), 1).unwrap()
    }

    #[test]
    fn siso_counts() {
        let ds = siso_dataset(5, 0.1, 0.5);
        let p = build_pop(&ds, &Orders::siso(2).unwrap(), &DeltaBoundSpec::uniform(0.0), &ObjectiveSpec::Minimize { param: 0 }, &PriorSpec::default()).unwrap();
        assert_eq!(p.n_vars(), 19);
        assert_eq!(p.count_where(|t| t.is_core()), 28);
        assert_eq!(p.count_where(|t| matches!(t, ConstraintTag::Recursion { .. })), 3);
        assert_eq!(p.count_where(|t| matches!(t, ConstraintTag::CouplingXi { .. } | ConstraintTag::CouplingGamma { .. })), 5);
    }

    #[test]
    fn var_index_roundtrip() {
        let orders = Orders::new(1, 2, vec![2, 1]).unwrap();
        let v = VarIndex::new(&orders, 4);
        assert_eq!(v.len(), 6 + 8 + 2 * 2 * 4);
        assert_eq!(v.kind(v.beta(1, 0)), VarKind::Beta { channel: 1, j: 0 });
        assert_eq!(v.kind(v.xi(0, 2)), VarKind::Xi { channel: 0, j: 2 });
        assert_eq!(v.kind(v.z(1, 3)), VarKind::Z { channel: 1, k: 3 });
        assert_eq!(v.kind(v.u(1, 0)), VarKind::U { input: 1, k: 0 });
        assert_eq!(v.name(v.alpha(1, 0)), "alpha_0^(1,2)");
        let all: HashSet<VarKind> = (0..v.len()).map(|i| v.kind(i)).collect();
        assert_eq!(all.len(), v.len());
    }

    #[test]
    fn clique_counts() {
        let ds = siso_dataset(10, 0.1, 0.5);
        let p = build_pop(&ds, &Orders::siso(2).unwrap(), &DeltaBoundSpec::uniform(0.0), &ObjectiveSpec::Minimize { param: 1 }, &PriorSpec::default()).unwrap();
        assert_eq!(p.cliques.len(), 9);
        assert_eq!(p.cliques[0].vars.len(), 9);
        assert!(p.cliques[1..].iter().all(|c| c.vars.len() == 11));
    }

    #[test]
    fn degenerate_single_window() {
        let ds = siso_dataset(2, 0.1, 0.5);
        let p = build_pop(&ds, &Orders::siso(2).unwrap(), &DeltaBoundSpec::uniform(0.0), &ObjectiveSpec::Feasibility, &PriorSpec::default()).unwrap();
        assert_eq!(p.cliques.len(), 2);
    }

    #[test]
    fn audit_catches_broken_cliques() {
        let ds = siso_dataset(6, 0.1, 0.5);
        let p = build_pop(&ds, &Orders::siso(1).unwrap(), &DeltaBoundSpec::uniform(0.0), &ObjectiveSpec::Feasibility, &PriorSpec::default()).unwrap();
        let mut broken = p.cliques.clone();
        broken[1].vars.pop();
        assert!(audit_cliques(p.n_vars(), &broken, &p.constraints, &p.objective).is_err());
        let mut dup = p.cliques.clone();
        let s = dup[1].constraints[0];
        dup[2].constraints.push(s);
        assert!(matches!(audit_cliques(p.n_vars(), &dup, &p.constraints, &p.objective), Err(Error::Invariant(m)) if m.starts_with("CS")));
        // Swapping two windows breaks the running intersection property.
        let mut swapped = p.cliques.clone();
        swapped.swap(1, 3);
        let e = audit_cliques(p.n_vars(), &swapped, &p.constraints, &p.objective).unwrap_err();
        assert!(format!("{e}").contains("CS"));
    }

    #[test]
    fn relative_degree_zeroes_top_numerator() {
        let ds = siso_dataset(12, 0.1, 0.5);
        let priors = PriorSpec { relative_degree: vec![RelativeDegree { output: 0, input: 0, r: 2 }], ..Default::default() };
        let p = build_pop(&ds, &Orders::siso(2).unwrap(), &DeltaBoundSpec::uniform(0.0), &ObjectiveSpec::Feasibility, &priors).unwrap();
        let rd: Vec<_> = p.constraints.iter().filter(|c| matches!(c.tag, ConstraintTag::RelativeDegree { .. })).collect();
        assert_eq!(rd.len(), 1);
        assert_eq!(rd[0].poly, Polynomial::var(p.vars.beta(0, 1)));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let ds = siso_dataset(8, 0.1, 0.5);
        let r = build_pop(&ds, &Orders::new(1, 2, vec![1, 1]).unwrap(), &DeltaBoundSpec::uniform(0.0), &ObjectiveSpec::Feasibility, &PriorSpec::default());
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn linear_rho_one_support() {
        // Two variables appear linearly, a third never does.
        let vars = VarIndex::new(&Orders::siso(1).unwrap(), 1);
        let cons = vec![
            Constraint { poly: lin([(0, 1.0)], 1.0), kind: ConstraintKind::Inequality, tag: ConstraintTag::ParamLower { param: 0 } },
            Constraint { poly: lin([(1, -1.0)], 2.0), kind: ConstraintKind::Inequality, tag: ConstraintTag::ParamUpper { param: 1 } },
        ];
        let cliques = vec![Clique { vars: (0..vars.len()).collect(), constraints: vec![0, 1] }];
        let p = PopProblem { vars, constraints: cons, objective: Polynomial::zero(), cliques };
        let ts = term_sparsity_supports(&p, 1, 1).unwrap();
        assert_eq!(ts[0].support(), vec![Monomial::one(), Monomial::var(0), Monomial::var(1)]);
    }
}
