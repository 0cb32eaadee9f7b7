//! Sparse multivariate polynomials over indexed real variables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

/// A monomial stored as the sorted multiset of its variable indices,
/// so `x_0^2 x_3` is `[0, 0, 3]` and the constant monomial is `[]`.
///
/// Ordered graded-lexicographically: by total degree, then by the sorted
/// index sequence.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Monomial(SmallVec<[u32; 4]>);

impl Monomial {
    pub fn one() -> Self {
        Monomial(SmallVec::new())
    }

    pub fn var(i: usize) -> Self {
        Monomial(SmallVec::from_slice(&[i as u32]))
    }

    pub fn from_vars(vars: &[usize]) -> Self {
        let mut v: SmallVec<[u32; 4]> = vars.iter().map(|&i| i as u32).collect();
        v.sort_unstable();
        Monomial(v)
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    /// Variable indices with multiplicity, sorted.
    pub fn vars(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&i| i as usize)
    }

    /// Distinct variable indices, sorted.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        let mut prev = None;
        self.0.iter().filter_map(move |&i| {
            if prev == Some(i) {
                None
            } else {
                prev = Some(i);
                Some(i as usize)
            }
        })
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let (a, b) = (&self.0, &other.0);
        let mut out = SmallVec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                out.push(a[i]);
                i += 1;
            } else {
                out.push(b[j]);
                j += 1;
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        Monomial(out)
    }

    /// True when every exponent is even.
    pub fn is_square(&self) -> bool {
        self.0.len() % 2 == 0 && self.0.chunks(2).all(|c| c[0] == c[1])
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|&i| x[i as usize]).product()
    }

    pub fn map_vars(&self, f: impl Fn(usize) -> usize) -> Monomial {
        let mut v: SmallVec<[u32; 4]> = self.0.iter().map(|&i| f(i as usize) as u32).collect();
        v.sort_unstable();
        Monomial(v)
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self.0.iter().map(|i| format!("x{i}")).collect();
        write!(f, "{}", parts.join("*"))
    }
}

/// All monomials in `vars` of total degree `<= degree`, in graded order.
pub fn monomial_basis(vars: &[usize], degree: usize) -> Vec<Monomial> {
    let mut sorted = vars.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = vec![Monomial::one()];
    let mut layer: Vec<(Monomial, usize)> = vec![(Monomial::one(), 0)];
    for _ in 0..degree {
        let mut next = Vec::new();
        for (m, start) in &layer {
            for (pos, &v) in sorted.iter().enumerate().skip(*start) {
                let mut w = m.0.clone();
                w.push(v as u32);
                next.push((Monomial(w), pos));
            }
        }
        out.extend(next.iter().map(|(m, _)| m.clone()));
        layer = next;
    }
    out
}

/// Polynomial with sorted, duplicate-free, nonzero terms.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Polynomial {
    terms: Vec<(Monomial, f64)>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::from_terms([(Monomial::one(), c)])
    }

    pub fn var(i: usize) -> Self {
        Self::from_terms([(Monomial::var(i), 1.0)])
    }

    /// Sums coefficients of repeated monomials and drops exact zeros.
    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, c) in terms {
            *acc.entry(m).or_insert(0.0) += c;
        }
        Self { terms: acc.into_iter().filter(|(_, c)| *c != 0.0).collect() }
    }

    pub fn terms(&self) -> &[(Monomial, f64)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|(m, _)| m.degree()).max().unwrap_or(0)
    }

    /// Distinct variables appearing in any term, sorted.
    pub fn variables(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.terms.iter().flat_map(|(m, _)| m.support().collect::<Vec<_>>()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn constant_term(&self) -> f64 {
        self.terms.iter().find(|(m, _)| m.is_one()).map_or(0.0, |(_, c)| *c)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.eval(x)).sum()
    }

    /// Gradient entries `(variable, ∂p/∂x_i)` at `x`.
    pub fn gradient(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (m, c) in &self.terms {
            let vars: Vec<usize> = m.vars().collect();
            for (pos, &v) in vars.iter().enumerate() {
                let rest: f64 = vars.iter().enumerate().filter(|(p, _)| *p != pos).map(|(_, &w)| x[w]).product();
                *acc.entry(v).or_insert(0.0) += c * rest;
            }
        }
        acc.into_iter().collect()
    }

    /// Nonzero Hessian entries `(i, j, ∂²p/∂x_i∂x_j)` with `i <= j`.
    pub fn hessian(&self, x: &[f64]) -> Vec<(usize, usize, f64)> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (m, c) in &self.terms {
            let vars: Vec<usize> = m.vars().collect();
            for a in 0..vars.len() {
                for b in 0..vars.len() {
                    if a == b {
                        continue;
                    }
                    let (i, j) = (vars[a], vars[b]);
                    if i > j {
                        continue;
                    }
                    let rest: f64 = vars
                        .iter()
                        .enumerate()
                        .filter(|(p, _)| *p != a && *p != b)
                        .map(|(_, &w)| x[w])
                        .product();
                    // Ordered position pairs: a square picks up both (a, b) and (b, a).
                    *acc.entry((i, j)).or_insert(0.0) += c * rest;
                }
            }
        }
        acc.into_iter().filter(|(_, v)| *v != 0.0).map(|((i, j), v)| (i, j, v)).collect()
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero();
        }
        Polynomial { terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect() }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        Polynomial::from_terms(self.terms.iter().chain(&other.terms).cloned())
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        Polynomial::from_terms(
            self.terms
                .iter()
                .flat_map(|(a, ca)| other.terms.iter().map(move |(b, cb)| (a.mul(b), ca * cb))),
        )
    }

    pub fn mul_monomial(&self, m: &Monomial) -> Polynomial {
        Polynomial { terms: self.terms.iter().map(|(t, c)| (t.mul(m), *c)).collect() }
    }

    /// Replaces each variable `x_i` by the polynomial `subst(i)`.
    pub fn substitute(&self, subst: &impl Fn(usize) -> Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            let mut t = Polynomial::constant(*c);
            for v in m.vars() {
                t = t.mul(&subst(v));
            }
            out = out.add(&t);
        }
        out
    }

    /// Largest absolute coefficient.
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.iter().fold(0.0, |a, (_, c)| a.max(c.abs()))
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self.terms.iter().map(|(m, c)| format!("{c}*{m:?}")).collect();
        write!(f, "{}", parts.join(" + "))
    }
}
