//! Sparse moment relaxation of a [`PopProblem`].
//!
//! Variables fixed by single-variable affine equalities are substituted out
//! first, the rest are affinely rescaled, and each clique contributes a
//! moment matrix, one localizing matrix per inequality and moment equalities
//! `L(h·m) = 0` per equality. Moments are shared across cliques by monomial.
//! The constraint side is assembled once; objectives are swapped cheaply.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{arg, Error, Result};
use crate::poly::{Monomial, Polynomial};
use crate::pop::{dense_sparsity, half_degree, term_sparsity_supports, CliqueSparsity, ConstraintKind, PopProblem};
use crate::sdp::{self, AffineExpr, Objective, PreparedSdp, PsdBlock, SdpProblem};

/// Tolerance for constraints that become constant after substitution.
const PRESOLVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxOptions {
    pub rho: usize,
    /// Rounds of term-sparsity closure; `None` keeps dense clique blocks.
    pub ts_iterations: Option<usize>,
    /// Variable scaling `x = shift + scale · x̂`; identity when absent.
    pub scaling: Option<AffineScaling>,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        Self { rho: 2, ts_iterations: Some(1), scaling: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineScaling {
    pub fn identity(n: usize) -> Self {
        Self { shift: vec![0.0; n], scale: vec![1.0; n] }
    }

    /// Per-variable scale from a reference point. Each channel's `θ` and `ψ`
    /// groups get their own magnitudes with a floor at a hundredth of the group
    /// maximum; each `z`/`u` sequence is scaled by its largest magnitude.
    pub fn from_reference(problem: &PopProblem, reference: &[f64]) -> Self {
        let v = &problem.vars;
        let n = v.len();
        let mut scale = vec![1.0; n];
        let orders = v.orders();
        for c in 0..orders.n_channels() {
            let nc = orders.as_slice()[c];
            let groups = [
                (0..nc).map(|j| v.alpha(c, j)).chain((0..nc).map(|j| v.beta(c, j))).collect::<Vec<_>>(),
                (0..nc).map(|j| v.gamma(c, j)).chain((0..=nc).map(|j| v.xi(c, j))).collect(),
            ];
            for g in groups {
                let top = g.iter().fold(0.0f64, |a, &i| a.max(reference[i].abs()));
                for &i in &g {
                    scale[i] = reference[i].abs().max(0.01 * top).max(1e-2);
                }
            }
        }
        let head = v.n_theta() + v.n_psi();
        let seqs = orders.n_channels() + orders.n_u();
        let ns = v.n_samples();
        for s in 0..seqs {
            let r = head + s * ns..head + (s + 1) * ns;
            let m = reference[r.clone()].iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-6);
            scale[r].iter_mut().for_each(|x| *x = m);
        }
        Self { shift: vec![0.0; n], scale }
    }
}

/// A problem with fixed variables eliminated; `fixed[i]` is the value of
/// every eliminated variable.
#[derive(Debug, Clone)]
pub struct Presolved {
    pub problem: PopProblem,
    pub fixed: Vec<Option<f64>>,
}

fn single_var_affine(p: &Polynomial) -> Option<(usize, f64, f64)> {
    if p.degree() != 1 {
        return None;
    }
    let vars = p.variables();
    if vars.len() != 1 {
        return None;
    }
    let a = p.terms().iter().find(|(m, _)| !m.is_one()).map(|(_, c)| *c)?;
    Some((vars[0], a, p.constant_term()))
}

/// Eliminates variables pinned by equalities of the form `a·x_i + b = 0`,
/// repeating until no such equality remains.
pub fn presolve(problem: &PopProblem) -> Result<Presolved> {
    let n = problem.n_vars();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    let mut alive: Vec<Option<Polynomial>> = problem.constraints.iter().map(|c| Some(c.poly.clone())).collect();
    loop {
        let mut changed = false;
        for (s, c) in problem.constraints.iter().enumerate() {
            if c.kind != ConstraintKind::Equality {
                continue;
            }
            let Some(p) = &alive[s] else { continue };
            if let Some((i, a, b)) = single_var_affine(p) {
                let v = -b / a;
                if let Some(prev) = fixed[i] {
                    if (prev - v).abs() > PRESOLVE_TOL * (1.0 + prev.abs()) {
                        return Err(Error::Infeasible(format!("variable {} fixed to both {prev} and {v}", problem.vars.name(i))));
                    }
                }
                fixed[i] = Some(v);
                alive[s] = None;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let subst = |i: usize| match fixed[i] {
            Some(v) => Polynomial::constant(v),
            None => Polynomial::var(i),
        };
        for (s, slot) in alive.iter_mut().enumerate() {
            let Some(p) = slot else { continue };
            let q = p.substitute(&subst);
            if q.degree() == 0 {
                let v = q.constant_term();
                let kind = problem.constraints[s].kind;
                let ok = match kind {
                    ConstraintKind::Equality => v.abs() <= PRESOLVE_TOL * (1.0 + p.max_abs_coeff()),
                    ConstraintKind::Inequality => v >= -PRESOLVE_TOL * (1.0 + p.max_abs_coeff()),
                };
                if !ok {
                    return Err(Error::Infeasible(format!(
                        "constraint {:?} violated by {v:e} after fixing variables",
                        problem.constraints[s].tag
                    )));
                }
                *slot = None;
            } else {
                *slot = Some(q);
            }
        }
    }
    let mut remap = vec![None; alive.len()];
    let mut constraints = Vec::new();
    for (s, slot) in alive.into_iter().enumerate() {
        if let Some(poly) = slot {
            remap[s] = Some(constraints.len());
            let c = &problem.constraints[s];
            constraints.push(crate::pop::Constraint { poly, kind: c.kind, tag: c.tag });
        }
    }
    let subst = |i: usize| match fixed[i] {
        Some(v) => Polynomial::constant(v),
        None => Polynomial::var(i),
    };
    let objective = problem.objective.substitute(&subst);
    let cliques = problem
        .cliques
        .iter()
        .map(|c| crate::pop::Clique {
            vars: c.vars.iter().copied().filter(|&v| fixed[v].is_none()).collect(),
            constraints: c.constraints.iter().filter_map(|&s| remap[s]).collect(),
        })
        .collect();
    Ok(Presolved { problem: PopProblem { vars: problem.vars.clone(), constraints, objective, cliques }, fixed })
}

fn scaled(p: &Polynomial, sc: &AffineScaling) -> Polynomial {
    p.substitute(&|i| {
        Polynomial::from_terms([(Monomial::one(), sc.shift[i]), (Monomial::var(i), sc.scale[i])])
    })
}

/// Assembled constraint side of a moment relaxation.
#[derive(Debug, Clone)]
pub struct Relaxation {
    pub rho: usize,
    /// Presolved problem in scaled variables, rows normalized.
    pub problem: PopProblem,
    pub fixed: Vec<Option<f64>>,
    pub scaling: AffineScaling,
    pub sparsity: Vec<CliqueSparsity>,
    /// Moment catalog; `monomials[0]` is the constant monomial.
    pub monomials: Vec<Monomial>,
    index: HashMap<Monomial, usize>,
    pub sdp: SdpProblem,
    prepared: PreparedSdp,
}

impl Relaxation {
    pub fn assemble(problem: &PopProblem, opts: &RelaxOptions) -> Result<Self> {
        let maxdeg = problem.constraints.iter().map(|c| half_degree(&c.poly)).max().unwrap_or(0);
        if opts.rho == 0 || opts.rho < maxdeg || opts.rho < half_degree(&problem.objective) {
            return arg(format!("relaxation order {} is below half the problem degree", opts.rho));
        }
        let n = problem.n_vars();
        let scaling = opts.scaling.clone().unwrap_or_else(|| AffineScaling::identity(n));
        if scaling.scale.len() != n || scaling.shift.len() != n || scaling.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return arg("scaling must have one positive finite scale per variable");
        }
        let Presolved { problem: mut p, fixed } = presolve(problem)?;
        for c in p.constraints.iter_mut() {
            let q = scaled(&c.poly, &scaling);
            let m = q.max_abs_coeff();
            c.poly = if m > 0.0 { q.scale(1.0 / m) } else { q };
        }
        p.objective = scaled(&p.objective, &scaling);

        let sparsity = match opts.ts_iterations {
            Some(t) => term_sparsity_supports(&p, opts.rho, t)?,
            None => dense_sparsity(&p, opts.rho),
        };

        let mut monomials = vec![Monomial::one()];
        let mut index: HashMap<Monomial, usize> = HashMap::from([(Monomial::one(), 0)]);
        let mut id = |m: Monomial| -> usize {
            if let Some(&i) = index.get(&m) {
                return i;
            }
            let i = monomials.len();
            index.insert(m.clone(), i);
            monomials.push(m);
            i
        };
        let mut blocks = Vec::new();
        let mut equalities = vec![AffineExpr::new(vec![(0, 1.0)], -1.0)];
        for cs in &sparsity {
            for block in &cs.moment_blocks {
                let mut entries = Vec::new();
                for (r, &a) in block.iter().enumerate() {
                    for (c, &b) in block.iter().enumerate().skip(r) {
                        entries.push((r, c, AffineExpr::var(id(cs.basis[a].mul(&cs.basis[b])))));
                    }
                }
                blocks.push(PsdBlock { size: block.len(), entries });
            }
            for loc in &cs.localizing {
                let con = &p.constraints[loc.constraint];
                let loc_expr = |m: &Monomial, id: &mut dyn FnMut(Monomial) -> usize| {
                    AffineExpr::new(con.poly.terms().iter().map(|(t, c)| (id(t.mul(m)), *c)).collect(), 0.0)
                };
                match con.kind {
                    ConstraintKind::Inequality => {
                        for block in &loc.blocks {
                            let mut entries = Vec::new();
                            for (r, &a) in block.iter().enumerate() {
                                for (c, &b) in block.iter().enumerate().skip(r) {
                                    let m = loc.basis[a].mul(&loc.basis[b]);
                                    entries.push((r, c, loc_expr(&m, &mut id)));
                                }
                            }
                            blocks.push(PsdBlock { size: block.len(), entries });
                        }
                    }
                    ConstraintKind::Equality => {
                        let mut seen = std::collections::HashSet::new();
                        for block in &loc.blocks {
                            for (r, &a) in block.iter().enumerate() {
                                for &b in &block[r..] {
                                    let m = loc.basis[a].mul(&loc.basis[b]);
                                    if seen.insert(m.clone()) {
                                        equalities.push(loc_expr(&m, &mut id));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let sdp = SdpProblem { n_vars: monomials.len(), equalities, blocks, objective: Objective::default() };
        let prepared = sdp::prepare(&sdp)?;
        Ok(Self { rho: opts.rho, problem: p, fixed, scaling, sparsity, monomials, index, sdp, prepared })
    }

    pub fn prepared(&self) -> &PreparedSdp {
        &self.prepared
    }

    pub fn n_moments(&self) -> usize {
        self.monomials.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.sdp.block_sizes()
    }

    pub fn moment_index(&self, m: &Monomial) -> Option<usize> {
        self.index.get(m).copied()
    }

    /// Linear objective `L_y(J)` for a polynomial `J` in the original
    /// variables; every monomial must already be a moment of the relaxation.
    pub fn objective(&self, j: &Polynomial) -> Result<Objective> {
        let q = scaled(
            &j.substitute(&|i| match self.fixed[i] {
                Some(v) => Polynomial::constant(v),
                None => Polynomial::var(i),
            }),
            &self.scaling,
        );
        let mut linear = Vec::new();
        let mut constant = 0.0;
        for (m, c) in q.terms() {
            if m.is_one() {
                constant += c;
                continue;
            }
            match self.index.get(m) {
                Some(&i) => linear.push((i, *c)),
                None => {
                    return Err(Error::RelaxationFailure(format!(
                        "objective monomial {m:?} is not a moment of the relaxation"
                    )))
                }
            }
        }
        Ok(Objective::linear(linear, constant))
    }

    /// Clone of the constraint side with `J` as objective.
    pub fn with_objective(&self, j: &Polynomial) -> Result<SdpProblem> {
        let mut s = self.sdp.clone();
        s.objective = self.objective(j)?;
        Ok(s)
    }

    /// Moment vector of the Dirac measure at `x` (original variables).
    pub fn lift_point(&self, x: &[f64]) -> Vec<f64> {
        let xh: Vec<f64> = (0..x.len()).map(|i| (x[i] - self.scaling.shift[i]) / self.scaling.scale[i]).collect();
        self.monomials.iter().map(|m| m.eval(&xh)).collect()
    }

    /// First-order moments mapped back to the original variables.
    pub fn first_moments(&self, y: &[f64]) -> Vec<f64> {
        (0..self.problem.n_vars())
            .map(|i| match self.fixed[i] {
                Some(v) => v,
                None => {
                    let m = self.index.get(&Monomial::var(i)).map(|&k| y[k]).unwrap_or(f64::NAN);
                    self.scaling.shift[i] + self.scaling.scale[i] * m
                }
            })
            .collect()
    }

    pub fn write_sdpa(&self, j: &Polynomial, path: &Path) -> Result<()> {
        sdp::write_sdpa(&self.with_objective(j)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pop::{Clique, Constraint, ConstraintTag, VarIndex};
    use crate::lti::Orders;
    use crate::sdp::SolverSettings;
    use approx::assert_abs_diff_eq;

    fn toy(lo: f64, hi: f64, kind: ConstraintKind) -> PopProblem {
        // One variable x in [lo, hi] via (x - lo)(hi - x) >= 0.
        let vars = VarIndex::new(&Orders::siso(1).unwrap(), 1);
        let n = vars.len();
        let g = Polynomial::var(0).sub(&Polynomial::constant(lo)).mul(&Polynomial::constant(hi).sub(&Polynomial::var(0)));
        let mut constraints = vec![Constraint { poly: g, kind: ConstraintKind::Inequality, tag: ConstraintTag::ParamLower { param: 0 } }];
        if kind == ConstraintKind::Equality {
            constraints.push(Constraint { poly: Polynomial::var(1).sub(&Polynomial::constant(0.5)), kind, tag: ConstraintTag::ParamFixed { param: 1 } });
        }
        let cs: Vec<usize> = (0..constraints.len()).collect();
        PopProblem { vars, constraints, objective: Polynomial::zero(), cliques: vec![Clique { vars: (0..n).collect(), constraints: cs }] }
    }

    #[test]
    fn interval_bound() {
        let p = toy(-1.0, 1.0, ConstraintKind::Inequality);
        let r = Relaxation::assemble(&p, &RelaxOptions { rho: 1, ts_iterations: None, scaling: None }).unwrap();
        let obj = r.objective(&Polynomial::var(0)).unwrap();
        let s = r.prepared().solve(&obj, &SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(s.lower_bound(), -1.0, epsilon = 1e-6);
    }

    #[test]
    fn presolve_fixes_and_substitutes() {
        let p = toy(-1.0, 1.0, ConstraintKind::Equality);
        let pre = presolve(&p).unwrap();
        assert_eq!(pre.fixed[1], Some(0.5));
        assert_eq!(pre.problem.constraints.len(), 1);
        assert!(!pre.problem.cliques[0].vars.contains(&1));
        let r = Relaxation::assemble(&p, &RelaxOptions { rho: 1, ts_iterations: None, scaling: None }).unwrap();
        let obj = r.objective(&Polynomial::var(1).scale(2.0)).unwrap();
        assert!(obj.linear.is_empty());
        assert_abs_diff_eq!(obj.constant, 1.0);
    }

    #[test]
    fn dense_block_sizes() {
        let p = toy(-1.0, 1.0, ConstraintKind::Inequality);
        let r = Relaxation::assemble(&p, &RelaxOptions { rho: 2, ts_iterations: None, scaling: None }).unwrap();
        let nv = p.n_vars();
        let full = (nv + 1) * (nv + 2) / 2;
        assert_eq!(r.block_sizes()[0], full);
        // localizing block of a quadratic at order 2 has the degree-1 basis
        assert_eq!(r.block_sizes()[1], nv + 1);
    }

    #[test]
    fn scaling_preserves_bound() {
        let p = toy(2.0, 6.0, ConstraintKind::Inequality);
        let n = p.n_vars();
        let mut sc = AffineScaling::identity(n);
        sc.scale[0] = 4.0;
        sc.shift[0] = 3.0;
        for scaling in [None, Some(sc)] {
            let r = Relaxation::assemble(&p, &RelaxOptions { rho: 1, ts_iterations: None, scaling }).unwrap();
            let s = r.prepared().solve(&r.objective(&Polynomial::var(0).scale(-1.0)).unwrap(), &SolverSettings::default()).unwrap();
            assert_abs_diff_eq!(s.lower_bound(), -6.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn conflicting_fixings_are_infeasible() {
        let mut p = toy(-1.0, 1.0, ConstraintKind::Equality);
        p.constraints.push(Constraint { poly: Polynomial::var(1).sub(&Polynomial::constant(0.7)), kind: ConstraintKind::Equality, tag: ConstraintTag::ParamFixed { param: 1 } });
        p.cliques[0].constraints.push(2);
        assert!(matches!(presolve(&p), Err(Error::Infeasible(_))));
    }
}
