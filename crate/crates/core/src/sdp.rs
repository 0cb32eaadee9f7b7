//! Conic (SDP/LP/QP) problems in affine-matrix form, solved with Clarabel.
//!
//! A problem has real variables `y`, affine equalities `e(y) = 0`, and
//! symmetric blocks `M(y) ⪰ 0` whose entries are affine in `y`. Blocks of
//! size one are plain nonnegativity constraints.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * y[i]).sum::<f64>()
    }
}

/// Symmetric block given by its upper-triangular entries `(row, col, expr)`
/// with `row <= col`; missing entries are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PsdBlock {
    pub size: usize,
    pub entries: Vec<(usize, usize, AffineExpr)>,
}

impl PsdBlock {
    pub fn eval(&self, y: &[f64]) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.size, self.size);
        for (r, c, e) in &self.entries {
            let v = e.eval(y);
            m[(*r, *c)] += v;
            if r != c {
                m[(*c, *r)] += v;
            }
        }
        m
    }
}

/// `constant + linear·y + ½ yᵀ P y`, with `P` given by upper-triangular entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Objective {
    pub linear: Vec<(usize, f64)>,
    pub quadratic: Vec<(usize, usize, f64)>,
    pub constant: f64,
}

impl Objective {
    pub fn linear(linear: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { linear, quadratic: Vec::new(), constant }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        let mut v = self.constant + self.linear.iter().map(|&(i, c)| c * y[i]).sum::<f64>();
        for &(i, j, p) in &self.quadratic {
            v += if i == j { 0.5 * p * y[i] * y[i] } else { p * y[i] * y[j] };
        }
        v
    }
}

/// Minimize `objective` subject to the equalities and blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdpProblem {
    pub n_vars: usize,
    pub equalities: Vec<AffineExpr>,
    pub blocks: Vec<PsdBlock>,
    pub objective: Objective,
}

impl SdpProblem {
    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.size).collect()
    }

    /// Largest equality residual and most negative block eigenvalue at `y`.
    pub fn residuals(&self, y: &[f64]) -> (f64, f64) {
        let eq = self.equalities.iter().fold(0.0f64, |a, e| a.max(e.eval(y).abs()));
        let lam = self
            .blocks
            .iter()
            .map(|b| b.eval(y).symmetric_eigenvalues().min())
            .fold(f64::INFINITY, f64::min);
        (eq, lam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Converged to the reduced tolerances only.
    NearOptimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    TimeLimit,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_solved(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol: f64,
    /// Looser tolerance accepted when progress stalls (reported as near-optimal).
    pub reduced_tol: f64,
    pub max_iter: u32,
    /// Seconds; infinite means no limit.
    #[serde(default = "no_limit", skip_serializing_if = "is_unlimited")]
    pub time_limit: f64,
    pub verbose: bool,
}

fn no_limit() -> f64 {
    f64::INFINITY
}

fn is_unlimited(t: &f64) -> bool {
    t.is_infinite()
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-7, reduced_tol: 1e-3, max_iter: 200, time_limit: f64::INFINITY, verbose: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub y: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub status: SolveStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: u32,
    pub wall_time: f64,
}

impl ConicSolution {
    /// A conservative lower bound on the optimal value of the minimization.
    pub fn lower_bound(&self) -> f64 {
        let lb = self.primal_objective.min(self.dual_objective);
        match self.status {
            SolveStatus::NearOptimal => lb - (self.primal_objective - self.dual_objective).abs(),
            _ => lb,
        }
    }
}

/// Constraint data converted to Clarabel form once and reused across objectives.
#[derive(Debug, Clone)]
pub struct PreparedSdp {
    n: usize,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

/// Converts `problem`'s constraints to `s = b - A y` in a product cone:
/// zero cone, nonnegative orthant, then one PSD triangle cone per block.
pub fn prepare(problem: &SdpProblem) -> Result<PreparedSdp> {
    let n = problem.n_vars;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut row = 0;
    let check = |i: usize| if i < n { Ok(()) } else { arg(format!("variable {i} out of range {n}")) };
    let mut push_row = |e: &AffineExpr, s: f64, row: &mut usize, b: &mut Vec<f64>| -> Result<()> {
        for &(i, c) in &e.terms {
            check(i)?;
            if c != 0.0 {
                triplets.push((*row, i, -c * s));
            }
        }
        b.push(e.constant * s);
        *row += 1;
        Ok(())
    };
    let mut cones = Vec::new();
    for e in &problem.equalities {
        push_row(e, 1.0, &mut row, &mut b)?;
    }
    if !problem.equalities.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(problem.equalities.len()));
    }
    let mut nonneg = 0;
    for blk in problem.blocks.iter().filter(|b| b.size == 1) {
        let mut e = AffineExpr::default();
        for (_, _, x) in &blk.entries {
            e.terms.extend_from_slice(&x.terms);
            e.constant += x.constant;
        }
        push_row(&e, 1.0, &mut row, &mut b)?;
        nonneg += 1;
    }
    if nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(nonneg));
    }
    for blk in problem.blocks.iter().filter(|b| b.size > 1) {
        // Upper triangle, column-major, off-diagonals scaled by √2.
        let k = blk.size;
        let mut slot: Vec<AffineExpr> = vec![AffineExpr::default(); k * (k + 1) / 2];
        for (r, c, x) in &blk.entries {
            if r > c || *c >= k {
                return Err(Error::Invariant(format!("block entry ({r}, {c}) outside upper triangle of size {k}")));
            }
            let idx = c * (c + 1) / 2 + r;
            slot[idx].terms.extend_from_slice(&x.terms);
            slot[idx].constant += x.constant;
        }
        for c in 0..k {
            for r in 0..=c {
                let s = if r == c { 1.0 } else { std::f64::consts::SQRT_2 };
                push_row(&slot[c * (c + 1) / 2 + r], s, &mut row, &mut b)?;
            }
        }
        cones.push(SupportedConeT::PSDTriangleConeT(k));
    }
    let a = csc_from_triplets(row, n, triplets);
    Ok(PreparedSdp { n, a, b, cones })
}

fn csc_from_triplets(m: usize, n: usize, mut t: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    t.sort_unstable_by_key(|&(r, c, _)| (c, r));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(t.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(t.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in t {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        last = Some((r, c));
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

impl PreparedSdp {
    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    /// Minimizes `objective` over the prepared constraints.
    pub fn solve(&self, objective: &Objective, settings: &SolverSettings) -> Result<ConicSolution> {
        let n = self.n;
        let mut q = vec![0.0; n];
        for &(i, c) in &objective.linear {
            if i >= n {
                return arg(format!("objective variable {i} out of range {n}"));
            }
            q[i] += c;
        }
        let mut pt = Vec::new();
        for &(i, j, v) in &objective.quadratic {
            if i >= n || j >= n {
                return arg("quadratic objective index out of range");
            }
            pt.push((i.min(j), i.max(j), v));
        }
        let p = csc_from_triplets(n, n, pt);
        let s = DefaultSettingsBuilder::default()
            .verbose(settings.verbose)
            .max_iter(settings.max_iter)
            .time_limit(settings.time_limit)
            .tol_gap_abs(settings.tol)
            .tol_gap_rel(settings.tol)
            .tol_feas(settings.tol)
            .reduced_tol_gap_abs(settings.reduced_tol)
            .reduced_tol_gap_rel(settings.reduced_tol)
            .reduced_tol_feas(settings.reduced_tol.min(1e-5))
            .direct_solve_method("faer".into())
            .build()
            .map_err(|e| Error::Argument(format!("solver settings: {e}")))?;
        let start = Instant::now();
        let mut solver = DefaultSolver::new(&p, &q, &self.a, &self.b, &self.cones, s)
            .map_err(|e| Error::RelaxationFailure(format!("solver setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            SolverStatus::MaxIterations => SolveStatus::IterationLimit,
            SolverStatus::MaxTime => SolveStatus::TimeLimit,
            _ => SolveStatus::NumericalFailure,
        };
        Ok(ConicSolution {
            y: sol.x.clone(),
            primal_objective: sol.obj_val + objective.constant,
            dual_objective: sol.obj_val_dual + objective.constant,
            status,
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
            iterations: sol.iterations,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

pub fn solve(problem: &SdpProblem, settings: &SolverSettings) -> Result<ConicSolution> {
    prepare(problem)?.solve(&problem.objective, settings)
}

/// Writes the problem in SDPA sparse format.
///
/// Variables keep their indices (1-based in the file). Equalities become
/// pairs of diagonal entries in a trailing LP block; nonnegativity blocks
/// join that LP block too. The objective constant is written as a comment
/// and quadratic objectives are rejected.
pub fn write_sdpa(problem: &SdpProblem, path: &Path) -> Result<()> {
    if !problem.objective.quadratic.is_empty() {
        return arg("SDPA format has no quadratic objective");
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let psd: Vec<&PsdBlock> = problem.blocks.iter().filter(|b| b.size > 1).collect();
    let scalars: Vec<AffineExpr> = problem
        .blocks
        .iter()
        .filter(|b| b.size == 1)
        .map(|b| {
            let mut e = AffineExpr::default();
            for (_, _, x) in &b.entries {
                e.terms.extend_from_slice(&x.terms);
                e.constant += x.constant;
            }
            e
        })
        .chain(problem.equalities.iter().flat_map(|e| {
            let neg = AffineExpr::new(e.terms.iter().map(|&(i, c)| (i, -c)).collect(), -e.constant);
            [e.clone(), neg]
        }))
        .collect();
    writeln!(w, "\"objective constant {:e}", problem.objective.constant)?;
    writeln!(w, "{}", problem.n_vars)?;
    let n_blocks = psd.len() + usize::from(!scalars.is_empty());
    writeln!(w, "{n_blocks}")?;
    let mut sizes: Vec<String> = psd.iter().map(|b| b.size.to_string()).collect();
    if !scalars.is_empty() {
        sizes.push(format!("-{}", scalars.len()));
    }
    writeln!(w, "{}", sizes.join(" "))?;
    let mut c = vec![0.0; problem.n_vars];
    for &(i, v) in &problem.objective.linear {
        c[i] += v;
    }
    writeln!(w, "{}", c.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" "))?;
    // SDPA form: Σ F_i y_i - F_0 ⪰ 0.
    let mut emit = |blk: usize, r: usize, col: usize, e: &AffineExpr| -> std::io::Result<()> {
        if e.constant != 0.0 {
            writeln!(w, "0 {blk} {} {} {:e}", r + 1, col + 1, -e.constant)?;
        }
        for &(i, v) in &e.terms {
            if v != 0.0 {
                writeln!(w, "{} {blk} {} {} {:e}", i + 1, r + 1, col + 1, v)?;
            }
        }
        Ok(())
    };
    for (bi, b) in psd.iter().enumerate() {
        for (r, col, e) in &b.entries {
            emit(bi + 1, *r, *col, e)?;
        }
    }
    for (k, e) in scalars.iter().enumerate() {
        emit(psd.len() + 1, k, k, e)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an SDPA sparse file into an equality-free problem.
pub fn read_sdpa(path: &Path) -> Result<SdpProblem> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header: Vec<String> = Vec::new();
    let mut data: Vec<String> = Vec::new();
    let mut constant = 0.0;
    for line in file.lines() {
        let line = line?;
        let t = line.trim();
        if let Some(rest) = t.strip_prefix('"').or_else(|| t.strip_prefix('*')) {
            if let Some(v) = rest.trim().strip_prefix("objective constant") {
                constant = v.trim().parse().unwrap_or(0.0);
            }
            continue;
        }
        if t.is_empty() {
            continue;
        }
        let cleaned = t.replace([',', '{', '}', '(', ')'], " ");
        if header.len() < 4 {
            header.push(cleaned);
        } else {
            data.push(cleaned);
        }
    }
    let bad = |m: &str| Error::Argument(format!("malformed SDPA file: {m}"));
    if header.len() < 4 {
        return Err(bad("truncated header"));
    }
    let first = |s: &str| s.split_whitespace().next().map(str::to_owned).unwrap_or_default();
    let n: usize = first(&header[0]).parse().map_err(|_| bad("variable count"))?;
    let nb: usize = first(&header[1]).parse().map_err(|_| bad("block count"))?;
    let sizes: Vec<i64> = header[2].split_whitespace().take(nb).map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("block sizes"))?;
    let c: Vec<f64> = header[3].split_whitespace().take(n).map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("objective"))?;
    if sizes.len() != nb || c.len() != n {
        return Err(bad("header lengths"));
    }
    // Diagonal (negative-size) blocks expand into scalar blocks.
    let mut first_block = Vec::with_capacity(nb);
    let mut blocks: Vec<PsdBlock> = Vec::new();
    for &s in &sizes {
        first_block.push(blocks.len());
        if s < 0 {
            for _ in 0..(-s) {
                blocks.push(PsdBlock { size: 1, entries: Vec::new() });
            }
        } else {
            blocks.push(PsdBlock { size: s as usize, entries: Vec::new() });
        }
    }
    for line in &data {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 5 {
            return Err(bad("entry line"));
        }
        let mat: usize = f[0].parse().map_err(|_| bad("matrix index"))?;
        let blk: usize = f[1].parse().map_err(|_| bad("block index"))?;
        let (mut r, mut col): (usize, usize) = (f[2].parse().map_err(|_| bad("row"))?, f[3].parse().map_err(|_| bad("col"))?);
        let v: f64 = f[4].parse().map_err(|_| bad("value"))?;
        if blk == 0 || blk > nb || mat > n || r == 0 || col == 0 {
            return Err(bad("index out of range"));
        }
        if r > col {
            std::mem::swap(&mut r, &mut col);
        }
        let (target, r, col) = if sizes[blk - 1] < 0 {
            if r != col {
                return Err(bad("off-diagonal entry in diagonal block"));
            }
            (first_block[blk - 1] + r - 1, 0, 0)
        } else {
            (first_block[blk - 1], r - 1, col - 1)
        };
        let e = if mat == 0 { AffineExpr::new(Vec::new(), -v) } else { AffineExpr::new(vec![(mat - 1, v)], 0.0) };
        blocks[target].entries.push((r, col, e));
    }
    Ok(SdpProblem {
        n_vars: n,
        equalities: Vec::new(),
        blocks,
        objective: Objective::linear(c.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect(), constant),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_by_two() -> SdpProblem {
        // min y  s.t. [[1, y], [y, 1]] ⪰ 0
        SdpProblem {
            n_vars: 1,
            equalities: vec![],
            blocks: vec![PsdBlock {
                size: 2,
                entries: vec![
                    (0, 0, AffineExpr::new(vec![], 1.0)),
                    (0, 1, AffineExpr::var(0)),
                    (1, 1, AffineExpr::new(vec![], 1.0)),
                ],
            }],
            objective: Objective::linear(vec![(0, 1.0)], 0.0),
        }
    }

    #[test]
    fn small_psd() {
        let s = solve(&two_by_two(), &SolverSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(s.primal_objective, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn min_eigenvalue_matches_eigensolver() {
        // max t s.t. A - t I ⪰ 0 is λ_min(A).
        let a = nalgebra::DMatrix::from_row_slice(3, 3, &[4.0, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 5.0]);
        let mut entries = Vec::new();
        for c in 0..3 {
            for r in 0..=c {
                let terms = if r == c { vec![(0, -1.0)] } else { vec![] };
                entries.push((r, c, AffineExpr::new(terms, a[(r, c)])));
            }
        }
        let p = SdpProblem {
            n_vars: 1,
            equalities: vec![],
            blocks: vec![PsdBlock { size: 3, entries }],
            objective: Objective::linear(vec![(0, -1.0)], 0.0),
        };
        let s = solve(&p, &SolverSettings::default()).unwrap();
        let lam = a.symmetric_eigenvalues().min();
        assert_abs_diff_eq!(-s.primal_objective, lam, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_detected() {
        // y = 2 and 1 - y >= 0
        let p = SdpProblem {
            n_vars: 1,
            equalities: vec![AffineExpr::new(vec![(0, 1.0)], -2.0)],
            blocks: vec![PsdBlock { size: 1, entries: vec![(0, 0, AffineExpr::new(vec![(0, -1.0)], 1.0))] }],
            objective: Objective::linear(vec![(0, 1.0)], 0.0),
        };
        assert_eq!(solve(&p, &SolverSettings::default()).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn objective_scaling_invariance() {
        let mut p = two_by_two();
        let base = solve(&p, &SolverSettings::default()).unwrap().primal_objective;
        p.objective.linear[0].1 = 1e3;
        let scaled = solve(&p, &SolverSettings::default()).unwrap().primal_objective;
        assert_abs_diff_eq!(scaled / 1e3, base, epsilon = 1e-6);
    }

    #[test]
    fn deterministic() {
        let a = solve(&two_by_two(), &SolverSettings::default()).unwrap();
        let b = solve(&two_by_two(), &SolverSettings::default()).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.primal_objective, b.primal_objective);
    }

    #[test]
    fn quadratic_objective() {
        // min ½ 2 (y - 3)^2 with y <= 1  ->  y = 1, value (1-3)^2 = 4
        let p = SdpProblem {
            n_vars: 1,
            equalities: vec![],
            blocks: vec![PsdBlock { size: 1, entries: vec![(0, 0, AffineExpr::new(vec![(0, -1.0)], 1.0))] }],
            objective: Objective { linear: vec![(0, -6.0)], quadratic: vec![(0, 0, 2.0)], constant: 9.0 },
        };
        let s = solve(&p, &SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(s.y[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.primal_objective, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn sdpa_roundtrip() {
        let mut p = two_by_two();
        p.n_vars = 2;
        p.equalities.push(AffineExpr::new(vec![(1, 1.0), (0, 1.0)], -0.5));
        p.objective = Objective::linear(vec![(1, 1.0)], 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dat-s");
        write_sdpa(&p, &path).unwrap();
        let q = read_sdpa(&path).unwrap();
        let a = solve(&p, &SolverSettings::default()).unwrap();
        let b = solve(&q, &SolverSettings::default()).unwrap();
        // y1 = 0.5 - y0, y0 <= 1 -> min y1 = -0.5, plus constant
        assert_abs_diff_eq!(a.primal_objective, -0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(b.primal_objective, a.primal_objective, epsilon = 1e-6);
    }
}
