//! Continuous- and discrete-time SISO/MIMO transfer functions, the exact
//! Tustin coefficient map between them, and reference simulators.
//!
//! A continuous-time channel of order `n` is
//!
//! ```text
//!            β_{n-1} s^{n-1} + … + β_0
//!   H(s) = ---------------------------
//!           s^n + α_{n-1} s^{n-1} + … + α_0
//! ```
//!
//! and its Tustin image (s = (2/T_s)(z-1)/(z+1), normalized by the leading
//! denominator coefficient) is
//!
//! ```text
//!           ξ_n z^n + … + ξ_0
//!   T(z) = --------------------------
//!           z^n + γ_{n-1} z^{n-1} + … + γ_0
//! ```
//!
//! Note the numerator of `T(z)` always has `n + 1` terms, including `ξ_0`.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::signals::ContinuousSignal;

/// Default RK4 substeps per sampling period used by [`ct_simulate`].
pub const DEFAULT_SUBSTEPS: usize = 100;

fn binomial(n: i64, k: i64) -> i128 {
    if k < 0 || k > n || n < 0 {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: i128 = 1;
    for t in 0..k {
        acc = acc * (n - t) as i128 / (t + 1) as i128;
    }
    acc
}

fn c_coeff_exact(n: usize, i: usize, j: usize) -> i128 {
    let (n, i, j) = (n as i64, i as i64, j as i64);
    (0..=j)
        .map(|k| {
            let sign = if (i - k) % 2 == 0 { 1 } else { -1 };
            sign * binomial(i, k) * binomial(n - i, j - k)
        })
        .sum()
}

/// Coefficient of `z^j` in `(z - 1)^i (z + 1)^(n - i)`.
///
/// Computed in exact integer arithmetic, so the result is exact whenever it
/// is representable in an `f64` (in particular for every `n <= 20`).
pub fn tustin_c_coeff(n: usize, i: usize, j: usize) -> Result<f64> {
    if i > n || j > n {
        return arg(format!("tustin_c_coeff: need 0 <= i, j <= n, got n={n}, i={i}, j={j}"));
    }
    if n > 60 {
        return arg(format!("tustin_c_coeff: order {n} too large"));
    }
    Ok(c_coeff_exact(n, i, j) as f64)
}

/// Affine forms `a_j(α)` and `b_j(β)` of the Tustin map for order `n`.
///
/// `a_j(α) = constant[j] + Σ_i weights[j][i] α_i` and
/// `b_j(β) = Σ_i weights[j][i] β_i`, for `j = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TustinForms {
    pub order: usize,
    pub ts: f64,
    /// `2^n c_j^{(n)}`, length `n + 1`.
    pub constant: Vec<f64>,
    /// `2^i T_s^{n-i} c_j^{(i)}`, shape `(n + 1) × n`.
    pub weights: Vec<Vec<f64>>,
}

impl TustinForms {
    pub fn new(n: usize, ts: f64) -> Result<Self> {
        if n == 0 {
            return arg("Tustin forms need order >= 1");
        }
        if !(ts.is_finite() && ts > 0.0) {
            return arg(format!("sampling period must be positive and finite, got {ts}"));
        }
        let two_n = 2f64.powi(n as i32);
        let constant = (0..=n).map(|j| two_n * c_coeff_exact(n, n, j) as f64).collect();
        let weights = (0..=n)
            .map(|j| {
                (0..n)
                    .map(|i| {
                        2f64.powi(i as i32) * ts.powi((n - i) as i32) * c_coeff_exact(n, i, j) as f64
                    })
                    .collect()
            })
            .collect();
        Ok(Self { order: n, ts, constant, weights })
    }

    pub fn a(&self, j: usize, alpha: &[f64]) -> f64 {
        self.constant[j] + dot(&self.weights[j], alpha)
    }

    pub fn b(&self, j: usize, beta: &[f64]) -> f64 {
        dot(&self.weights[j], beta)
    }

    /// Threshold on `|a_n(α)|` below which the map is treated as degenerate.
    pub fn degenerate_tol(&self) -> f64 {
        degenerate_tol(self.order)
    }
}

pub fn degenerate_tol(n: usize) -> f64 {
    1e-12 * 2f64.powi(n as i32).max(1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Roots of the monic polynomial `x^n + c_{n-1} x^{n-1} + … + c_0` via the
/// eigenvalues of its companion matrix.
pub fn monic_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let n = coeffs.len();
    if n == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    for (i, c) in coeffs.iter().enumerate() {
        companion[(i, n - 1)] = -c;
    }
    companion.complex_eigenvalues().iter().copied().collect()
}

/// Strictly proper continuous-time SISO transfer function with monic
/// denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTf {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl ContinuousTf {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return arg("transfer function order must be >= 1");
        }
        if alpha.len() != beta.len() {
            return arg(format!(
                "alpha has {} coefficients but beta has {}",
                alpha.len(),
                beta.len()
            ));
        }
        if alpha.iter().chain(&beta).any(|v| !v.is_finite()) {
            return arg("transfer function coefficients must be finite");
        }
        Ok(Self { alpha, beta })
    }

    /// Builds a channel from `[α_0..α_{n-1}, β_0..β_{n-1}]`.
    pub fn from_theta(theta: &[f64]) -> Result<Self> {
        if theta.len() % 2 != 0 || theta.is_empty() {
            return arg(format!("parameter vector of length {} is not [alpha, beta]", theta.len()));
        }
        let n = theta.len() / 2;
        Self::new(theta[..n].to_vec(), theta[n..].to_vec())
    }

    pub fn order(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn theta(&self) -> Vec<f64> {
        self.alpha.iter().chain(&self.beta).copied().collect()
    }

    pub fn poles(&self) -> Vec<Complex<f64>> {
        monic_roots(&self.alpha)
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.re < 0.0)
    }

    /// `H(0) = β_0 / α_0`; infinite when `α_0 = 0`.
    pub fn dc_gain(&self) -> f64 {
        self.beta[0] / self.alpha[0]
    }
}

/// `n_y × n_u` grid of continuous-time channels, stored row-major
/// (output index outer, input index inner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimoModel {
    n_y: usize,
    n_u: usize,
    channels: Vec<ContinuousTf>,
}

impl MimoModel {
    pub fn new(n_y: usize, n_u: usize, channels: Vec<ContinuousTf>) -> Result<Self> {
        if n_y == 0 || n_u == 0 {
            return arg("MIMO model needs at least one input and one output");
        }
        if channels.len() != n_y * n_u {
            return arg(format!(
                "expected {} channels for a {n_y}x{n_u} model, got {}",
                n_y * n_u,
                channels.len()
            ));
        }
        Ok(Self { n_y, n_u, channels })
    }

    pub fn siso(h: ContinuousTf) -> Self {
        Self { n_y: 1, n_u: 1, channels: vec![h] }
    }

    /// Rebuilds a model from a stacked parameter vector, channel by channel.
    pub fn from_theta(orders: &Orders, theta: &[f64]) -> Result<Self> {
        if theta.len() != orders.n_theta() {
            return arg(format!(
                "parameter vector has length {}, orders imply {}",
                theta.len(),
                orders.n_theta()
            ));
        }
        let mut channels = Vec::with_capacity(orders.n_channels());
        let mut offset = 0;
        for &n in orders.as_slice() {
            channels.push(ContinuousTf::from_theta(&theta[offset..offset + 2 * n])?);
            offset += 2 * n;
        }
        Self::new(orders.n_y(), orders.n_u(), channels)
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn channel(&self, m: usize, l: usize) -> &ContinuousTf {
        &self.channels[m * self.n_u + l]
    }

    pub fn channels(&self) -> &[ContinuousTf] {
        &self.channels
    }

    pub fn orders(&self) -> Orders {
        Orders::new(self.n_y, self.n_u, self.channels.iter().map(|c| c.order()).collect())
            .expect("model channels have positive orders")
    }

    pub fn theta(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.theta()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.channels.iter().all(|c| c.is_stable())
    }
}

/// Channel orders `n_{m,l}` as an `n_y × n_u` row-major grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orders {
    n_y: usize,
    n_u: usize,
    orders: Vec<usize>,
}

impl Orders {
    pub fn new(n_y: usize, n_u: usize, orders: Vec<usize>) -> Result<Self> {
        if n_y == 0 || n_u == 0 || orders.len() != n_y * n_u {
            return arg(format!(
                "order grid must be {n_y}x{n_u} with {} entries, got {}",
                n_y * n_u,
                orders.len()
            ));
        }
        if orders.iter().any(|&n| n == 0) {
            return arg("every channel order must be >= 1");
        }
        Ok(Self { n_y, n_u, orders })
    }

    pub fn siso(n: usize) -> Result<Self> {
        Self::new(1, 1, vec![n])
    }

    /// Parses a nested `[[n_11, n_12, …], …]` grid (one row per output).
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let n_y = rows.len();
        let n_u = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_u) {
            return arg("order rows have different lengths");
        }
        Self::new(n_y, n_u, rows.concat())
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_channels(&self) -> usize {
        self.orders.len()
    }

    pub fn get(&self, m: usize, l: usize) -> usize {
        self.orders[m * self.n_u + l]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.orders
    }

    pub fn max_order(&self) -> usize {
        self.orders.iter().copied().max().unwrap_or(0)
    }

    pub fn n_theta(&self) -> usize {
        self.orders.iter().map(|n| 2 * n).sum()
    }

    pub fn n_psi(&self) -> usize {
        self.orders.iter().map(|n| 2 * n + 1).sum()
    }

    /// Offset of channel `c` (row-major index) inside the stacked θ vector.
    pub fn theta_offset(&self, c: usize) -> usize {
        self.orders[..c].iter().map(|n| 2 * n).sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<usize>> {
        self.orders.chunks(self.n_u).map(|r| r.to_vec()).collect()
    }
}

/// Discrete-time transfer function produced by the Tustin map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTf {
    gamma: Vec<f64>,
    xi: Vec<f64>,
    ts: f64,
}

impl DiscreteTf {
    /// Direct construction from coefficients; prefer [`tustin_map`].
    pub fn from_coefficients(gamma: Vec<f64>, xi: Vec<f64>, ts: f64) -> Result<Self> {
        if gamma.is_empty() || xi.len() != gamma.len() + 1 {
            return arg(format!(
                "discrete model needs n >= 1 denominator and n + 1 numerator coefficients, got {} and {}",
                gamma.len(),
                xi.len()
            ));
        }
        if gamma.iter().chain(&xi).any(|v| !v.is_finite()) || !(ts > 0.0) {
            return arg("discrete model coefficients and period must be finite");
        }
        Ok(Self { gamma, xi, ts })
    }

    pub fn order(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn poles(&self) -> Vec<Complex<f64>> {
        monic_roots(&self.gamma)
    }

    /// `T(1) = Σ ξ_j / (1 + Σ γ_j)`.
    pub fn dc_gain(&self) -> f64 {
        self.xi.iter().sum::<f64>() / (1.0 + self.gamma.iter().sum::<f64>())
    }

    /// Stacked `[γ_0..γ_{n-1}, ξ_0..ξ_n]`.
    pub fn psi(&self) -> Vec<f64> {
        self.gamma.iter().chain(&self.xi).copied().collect()
    }
}

/// Tustin image of `h` at sampling period `ts`.
pub fn tustin_map(h: &ContinuousTf, ts: f64) -> Result<DiscreteTf> {
    let forms = TustinForms::new(h.order(), ts)?;
    tustin_map_with(&forms, h.alpha(), h.beta())
}

pub(crate) fn tustin_map_with(forms: &TustinForms, alpha: &[f64], beta: &[f64]) -> Result<DiscreteTf> {
    let n = forms.order;
    let an = forms.a(n, alpha);
    let tol = forms.degenerate_tol();
    if !(an.abs() > tol) {
        return Err(Error::DegenerateMap { an, tol });
    }
    let gamma = (0..n).map(|j| forms.a(j, alpha) / an).collect();
    let xi = (0..=n).map(|j| forms.b(j, beta) / an).collect();
    DiscreteTf::from_coefficients(gamma, xi, forms.ts)
}

/// Runs the difference equation
/// `τ(k) = Σ_{j=0}^{n} ξ_j u(k-n+j) - Σ_{j=0}^{n-1} γ_j τ(k-n+j)`
/// for `k = n+1..N`, with `τ(1..n)` taken from `z_init`.
pub fn dt_simulate(t: &DiscreteTf, u: &[f64], z_init: &[f64]) -> Result<Vec<f64>> {
    let n = t.order();
    if z_init.len() != n {
        return arg(format!("initial window must have {n} samples, got {}", z_init.len()));
    }
    if u.len() < n {
        return arg(format!("input has {} samples, fewer than the order {n}", u.len()));
    }
    let mut tau = Vec::with_capacity(u.len());
    tau.extend_from_slice(z_init);
    for k in n..u.len() {
        let forced: f64 = (0..=n).map(|j| t.xi[j] * u[k - n + j]).sum();
        let free: f64 = (0..n).map(|j| t.gamma[j] * tau[k - n + j]).sum();
        tau.push(forced - free);
    }
    Ok(tau)
}

/// Simulates `t` from rest: samples before the record are taken as zero.
pub fn dt_simulate_from_rest(t: &DiscreteTf, u: &[f64]) -> Vec<f64> {
    let n = t.order();
    let mut tau = vec![0.0; u.len()];
    for k in 0..u.len() {
        let mut acc = 0.0;
        for j in 0..=n {
            if k + j >= n {
                acc += t.xi[j] * u[k + j - n];
            }
        }
        for j in 0..n {
            if k + j >= n {
                acc -= t.gamma[j] * tau[k + j - n];
            }
        }
        tau[k] = acc;
    }
    tau
}

/// Samples `y(k T_s)`, `k = 1..N`, of the zero-state response of `h` to `u`.
///
/// Integrates the controllable canonical realization with classical RK4
/// at step `T_s / substeps` (local truncation error O(h^5), global O(h^4)).
pub fn ct_simulate(
    h: &ContinuousTf,
    u: &dyn ContinuousSignal,
    ts: f64,
    n_samples: usize,
    substeps: usize,
) -> Result<Vec<f64>> {
    if !(ts.is_finite() && ts > 0.0) {
        return arg(format!("sampling period must be positive, got {ts}"));
    }
    if substeps < 10 {
        return arg(format!("need at least 10 RK4 substeps per sample, got {substeps}"));
    }
    let n = h.order();
    let alpha = h.alpha();
    let step = ts / substeps as f64;
    let deriv = |x: &[f64], ut: f64, out: &mut [f64]| {
        for i in 0..n - 1 {
            out[i] = x[i + 1];
        }
        out[n - 1] = ut - dot(alpha, x);
    };

    let mut x = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let t0 = k as f64 * ts;
        for s in 0..substeps {
            let t = t0 + s as f64 * step;
            deriv(&x, u.value(t), &mut k1);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * step * k1[i];
            }
            deriv(&tmp, u.value(t + 0.5 * step), &mut k2);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * step * k2[i];
            }
            deriv(&tmp, u.value(t + 0.5 * step), &mut k3);
            for i in 0..n {
                tmp[i] = x[i] + step * k3[i];
            }
            deriv(&tmp, u.value(t + step), &mut k4);
            for i in 0..n {
                x[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y.push(dot(h.beta(), &x));
    }
    Ok(y)
}

/// `δ(k) = y(k) - τ(k)` where `τ` is the Tustin model driven by the sampled
/// input and started from the first `n` true output samples.
pub fn discretization_error(
    h: &ContinuousTf,
    u: &dyn ContinuousSignal,
    ts: f64,
    n_samples: usize,
) -> Result<Vec<f64>> {
    let n = h.order();
    if n_samples < n {
        return arg(format!("need at least {n} samples, got {n_samples}"));
    }
    let dt = tustin_map(h, ts)?;
    let y = ct_simulate(h, u, ts, n_samples, DEFAULT_SUBSTEPS)?;
    let samples: Vec<f64> = (1..=n_samples).map(|k| u.value(k as f64 * ts)).collect();
    let tau = dt_simulate(&dt, &samples, &y[..n])?;
    Ok(y.iter().zip(&tau).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Constant(f64);
    impl ContinuousSignal for Constant {
        fn value(&self, _t: f64) -> f64 {
            self.0
        }
    }

    fn conv(a: &[i128], b: &[i128]) -> Vec<i128> {
        let mut out = vec![0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    #[test]
    fn c_coeff_small_cases() {
        assert_eq!(tustin_c_coeff(2, 1, 0).unwrap(), -1.0);
        assert_eq!(tustin_c_coeff(2, 1, 1).unwrap(), 0.0);
        assert_eq!(tustin_c_coeff(1, 0, 1).unwrap(), 1.0);
        // (z-1)^2 (z+1)^2 = (z^2-1)^2 = z^4 - 2z^2 + 1
        let p = conv(&conv(&[-1, 1], &[-1, 1]), &conv(&[1, 1], &[1, 1]));
        assert_eq!(p[2], -2);
        assert_eq!(tustin_c_coeff(4, 2, 2).unwrap(), -2.0);
    }

    #[test]
    fn c_coeff_rejects_out_of_range() {
        assert!(matches!(tustin_c_coeff(2, 3, 0), Err(Error::Argument(_))));
        assert!(matches!(tustin_c_coeff(2, 0, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn first_order_unit_period_two() {
        let h = ContinuousTf::new(vec![1.0], vec![1.0]).unwrap();
        let t = tustin_map(&h, 2.0).unwrap();
        assert_relative_eq!(t.xi()[0], 0.5);
        assert_relative_eq!(t.xi()[1], 0.5);
        assert_relative_eq!(t.gamma()[0], 0.0);
    }

    #[test]
    fn unit_dc_gain_is_preserved() {
        let h = ContinuousTf::new(vec![3.7], vec![3.7]).unwrap();
        let t = tustin_map(&h, 0.13).unwrap();
        assert_relative_eq!(t.dc_gain(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_map_is_reported() {
        // a_1 = 2 + α_0 T_s vanishes for α_0 = -2 / T_s.
        let h = ContinuousTf::new(vec![-20.0], vec![1.0]).unwrap();
        assert!(matches!(tustin_map(&h, 0.1), Err(Error::DegenerateMap { .. })));
    }

    #[test]
    fn identity_recursion() {
        let t = DiscreteTf::from_coefficients(vec![0.0], vec![0.0, 1.0], 1.0).unwrap();
        let u = [0.3, -1.2, 4.0, 2.5, 0.0];
        let tau = dt_simulate(&t, &u, &[7.0]).unwrap();
        assert_eq!(tau[0], 7.0);
        assert_eq!(&tau[1..], &u[1..]);
    }

    #[test]
    fn dc_steady_state() {
        let h = ContinuousTf::new(vec![1.0], vec![1.0]).unwrap();
        let t = tustin_map(&h, 2.0).unwrap();
        let tau = dt_simulate(&t, &[1.0; 20], &[1.0]).unwrap();
        assert!(tau.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn dt_simulate_checks_lengths() {
        let t = DiscreteTf::from_coefficients(vec![0.1, 0.2], vec![1.0, 0.0, 0.0], 1.0).unwrap();
        assert!(dt_simulate(&t, &[1.0, 2.0, 3.0], &[0.0]).is_err());
        assert!(dt_simulate(&t, &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn step_response_first_order() {
        let h = ContinuousTf::new(vec![1.0], vec![1.0]).unwrap();
        let ts = 0.1;
        let y = ct_simulate(&h, &Constant(1.0), ts, 50, 100).unwrap();
        for (k, v) in y.iter().enumerate() {
            let t = (k + 1) as f64 * ts;
            assert!((v - (1.0 - (-t).exp())).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let h = ContinuousTf::new(vec![100.0, 20.0, 8.0], vec![103.0, 36.0, 11.0]).unwrap();
        let y = ct_simulate(&h, &Constant(0.0), 0.03, 40, 10).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let d = discretization_error(&h, &Constant(0.0), 0.03, 40).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_few_substeps_rejected() {
        let h = ContinuousTf::new(vec![1.0], vec![1.0]).unwrap();
        assert!(ct_simulate(&h, &Constant(1.0), 0.1, 5, 9).is_err());
    }

    #[test]
    fn stability_flag_uses_poles() {
        assert!(ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap().is_stable());
        assert!(!ContinuousTf::new(vec![-1.0, 0.0], vec![1.0, 0.0]).unwrap().is_stable());
    }

    #[test]
    fn rest_simulation_matches_windowed_after_zero_prefix() {
        let h = ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap();
        let t = tustin_map(&h, 0.05).unwrap();
        let mut u = vec![0.0, 0.0];
        u.extend((0..30).map(|k| (k as f64 * 0.3).sin()));
        let a = dt_simulate(&t, &u, &[0.0, 0.0]).unwrap();
        let b = dt_simulate_from_rest(&t, &u);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
