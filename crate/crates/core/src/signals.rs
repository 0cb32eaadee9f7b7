//! Excitation signals, synthetic EIV datasets, bound matrices and the
//! dataset file format.
//!
//! Dataset files come in pairs: a CSV table with one row per sample and a
//! JSON metadata record next to it (same stem, `.json` extension). When
//! noise-free series are known they are written to `<stem>.truth.csv`.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::lti::{ct_simulate, MimoModel, DEFAULT_SUBSTEPS};

/// A signal that can be evaluated at any time instant.
pub trait ContinuousSignal: Send + Sync {
    fn value(&self, t: f64) -> f64;
}

impl<F: Fn(f64) -> f64 + Send + Sync> ContinuousSignal for F {
    fn value(&self, t: f64) -> f64 {
        self(t)
    }
}

fn default_bump_width() -> f64 {
    7.0
}

/// Parametric description of an excitation signal.
///
/// Coefficients left out are drawn from `seed`: multisine amplitudes and
/// phases are standard normal; bump amplitudes are standard normal and
/// widths uniform on `[0, max_width]`; bump centers default to `t_k = k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSpec {
    /// `u(t) = Σ_{k=0}^{K} A_k cos(k Δω t + φ_k)`
    Multisine {
        harmonics: usize,
        delta_omega: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        amplitudes: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phases: Option<Vec<f64>>,
        #[serde(default)]
        seed: u64,
    },
    /// `u(t) = Σ_{k=0}^{K} A_k exp(-b_k (t - t_k)^2)`
    GaussianBumps {
        count: usize,
        #[serde(default = "default_bump_width")]
        max_width: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        amplitudes: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        widths: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        centers: Option<Vec<f64>>,
        #[serde(default)]
        seed: u64,
    },
}

impl SignalSpec {
    pub fn multisine(harmonics: usize, delta_omega: f64, seed: u64) -> Self {
        SignalSpec::Multisine { harmonics, delta_omega, amplitudes: None, phases: None, seed }
    }

    pub fn gaussian_bumps(count: usize, max_width: f64, seed: u64) -> Self {
        SignalSpec::GaussianBumps {
            count,
            max_width,
            amplitudes: None,
            widths: None,
            centers: None,
            seed,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            SignalSpec::Multisine { seed, .. } | SignalSpec::GaussianBumps { seed, .. } => *seed = new_seed,
        }
        s
    }
}

/// Closed-form signal produced by [`generate_signal`].
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Multisine { delta_omega: f64, amplitudes: Vec<f64>, phases: Vec<f64> },
    GaussianBumps { amplitudes: Vec<f64>, widths: Vec<f64>, centers: Vec<f64> },
}

impl ContinuousSignal for Signal {
    fn value(&self, t: f64) -> f64 {
        match self {
            Signal::Multisine { delta_omega, amplitudes, phases } => amplitudes
                .iter()
                .zip(phases)
                .enumerate()
                .map(|(k, (a, p))| a * (k as f64 * delta_omega * t + p).cos())
                .sum(),
            Signal::GaussianBumps { amplitudes, widths, centers } => amplitudes
                .iter()
                .zip(widths)
                .zip(centers)
                .map(|((a, b), c)| a * (-b * (t - c) * (t - c)).exp())
                .sum(),
        }
    }
}

impl Signal {
    pub fn sample(&self, ts: f64, n: usize) -> Vec<f64> {
        (1..=n).map(|k| self.value(k as f64 * ts)).collect()
    }
}

fn take_or_draw(
    given: &Option<Vec<f64>>,
    len: usize,
    what: &str,
    mut draw: impl FnMut() -> f64,
) -> Result<Vec<f64>> {
    // Draw unconditionally so one coefficient family does not shift the others.
    let drawn: Vec<f64> = (0..len).map(|_| draw()).collect();
    match given {
        Some(v) if v.len() != len => arg(format!("{what}: expected {len} values, got {}", v.len())),
        Some(v) if v.iter().any(|x| !x.is_finite()) => arg(format!("{what}: values must be finite")),
        Some(v) => Ok(v.clone()),
        None => Ok(drawn),
    }
}

/// Turns a spec into an evaluable signal; deterministic given the seed.
pub fn generate_signal(spec: &SignalSpec) -> Result<Signal> {
    match spec {
        SignalSpec::Multisine { harmonics, delta_omega, amplitudes, phases, seed } => {
            if !delta_omega.is_finite() {
                return arg("multisine frequency step must be finite");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let len = harmonics + 1;
            let amplitudes = take_or_draw(amplitudes, len, "multisine amplitudes", || {
                rng.sample(StandardNormal)
            })?;
            let phases = take_or_draw(phases, len, "multisine phases", || rng.sample(StandardNormal))?;
            Ok(Signal::Multisine { delta_omega: *delta_omega, amplitudes, phases })
        }
        SignalSpec::GaussianBumps { count, max_width, amplitudes, widths, centers, seed } => {
            if *count == 0 {
                return arg("gaussian bump signal needs at least one bump");
            }
            if !(max_width.is_finite() && *max_width >= 0.0) {
                return arg("bump width bound must be finite and nonnegative");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let len = count + 1;
            let amplitudes = take_or_draw(amplitudes, len, "bump amplitudes", || {
                rng.sample(StandardNormal)
            })?;
            let width_dist = Uniform::new_inclusive(0.0, *max_width);
            let widths = take_or_draw(widths, len, "bump widths", || width_dist.sample(&mut rng))?;
            if widths.iter().any(|b| *b < 0.0) {
                return arg("bump widths must be nonnegative");
            }
            let mut k = 0.0;
            let centers = take_or_draw(centers, len, "bump centers", || {
                k += 1.0;
                k - 1.0
            })?;
            Ok(Signal::GaussianBumps { amplitudes, widths, centers })
        }
    }
}

/// Symmetric per-channel noise amplitude cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseBound {
    /// `|noise(k)| <= cap`
    Absolute { cap: f64 },
    /// `|noise(k)| <= ratio · |clean(k)|`
    Relative { ratio: f64 },
}

impl NoiseBound {
    pub fn none() -> Self {
        NoiseBound::Absolute { cap: 0.0 }
    }

    fn cap(&self, clean: f64) -> f64 {
        match *self {
            NoiseBound::Absolute { cap } => cap,
            NoiseBound::Relative { ratio } => ratio * clean.abs(),
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            NoiseBound::Absolute { cap } => cap,
            NoiseBound::Relative { ratio } => ratio,
        };
        if !(v.is_finite() && v >= 0.0) {
            return arg(format!("noise bound must be finite and nonnegative, got {v}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub input: Vec<NoiseBound>,
    pub output: Vec<NoiseBound>,
}

impl NoiseSpec {
    pub fn absolute(n_u: usize, input_cap: f64, n_y: usize, output_cap: f64) -> Self {
        Self {
            input: vec![NoiseBound::Absolute { cap: input_cap }; n_u],
            output: vec![NoiseBound::Absolute { cap: output_cap }; n_y],
        }
    }
}

/// Noise-free series kept alongside synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub model: Option<MimoModel>,
}

/// How a synthetic dataset was produced; stored in the metadata record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signals: Option<Vec<SignalSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Sampled EIV records with per-sample noise bounds.
///
/// All matrices have one row per sample `k = 1..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ts: f64,
    pub u_tilde: DMatrix<f64>,
    pub y_tilde: DMatrix<f64>,
    pub eps_lo: DMatrix<f64>,
    pub eps_hi: DMatrix<f64>,
    pub eta_lo: DMatrix<f64>,
    pub eta_hi: DMatrix<f64>,
    pub truth: Option<GroundTruth>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Dataset without ground truth; bounds are checked.
    pub fn new(
        ts: f64,
        u_tilde: DMatrix<f64>,
        y_tilde: DMatrix<f64>,
        eps: (DMatrix<f64>, DMatrix<f64>),
        eta: (DMatrix<f64>, DMatrix<f64>),
    ) -> Result<Self> {
        let ds = Self {
            ts,
            u_tilde,
            y_tilde,
            eps_lo: eps.0,
            eps_hi: eps.1,
            eta_lo: eta.0,
            eta_hi: eta.1,
            truth: None,
            provenance: Provenance::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.u_tilde.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.u_tilde.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.y_tilde.ncols()
    }

    pub fn u_col(&self, l: usize) -> Vec<f64> {
        self.u_tilde.column(l).iter().copied().collect()
    }

    pub fn y_col(&self, m: usize) -> Vec<f64> {
        self.y_tilde.column(m).iter().copied().collect()
    }

    /// Checks shapes, finiteness and that every bound brackets zero.
    pub fn validate(&self) -> Result<()> {
        let (n, n_u, n_y) = (self.n(), self.n_u(), self.n_y());
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return arg(format!("sampling period must be positive, got {}", self.ts));
        }
        if n == 0 || n_u == 0 || n_y == 0 {
            return arg("dataset must have at least one sample, input and output");
        }
        if self.y_tilde.nrows() != n {
            return arg("input and output records have different lengths");
        }
        for (name, m, cols) in [
            ("eps_lo", &self.eps_lo, n_u),
            ("eps_hi", &self.eps_hi, n_u),
            ("eta_lo", &self.eta_lo, n_y),
            ("eta_hi", &self.eta_hi, n_y),
        ] {
            if m.shape() != (n, cols) {
                return arg(format!("{name} has shape {:?}, expected ({n}, {cols})", m.shape()));
            }
        }
        let all = [&self.u_tilde, &self.y_tilde, &self.eps_lo, &self.eps_hi, &self.eta_lo, &self.eta_hi];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return arg("dataset contains non-finite values");
        }
        if self.eps_lo.iter().any(|v| *v > 0.0) || self.eps_hi.iter().any(|v| *v < 0.0) {
            return arg("input noise bounds must satisfy eps_lo <= 0 <= eps_hi");
        }
        if self.eta_lo.iter().any(|v| *v > 0.0) || self.eta_hi.iter().any(|v| *v < 0.0) {
            return arg("output noise bounds must satisfy eta_lo <= 0 <= eta_hi");
        }
        if let Some(truth) = &self.truth {
            if truth.u.shape() != self.u_tilde.shape() || truth.y.shape() != self.y_tilde.shape() {
                return arg("ground-truth series shape mismatch");
            }
            let slack = 1e-9;
            for k in 0..n {
                for l in 0..n_u {
                    let e = self.u_tilde[(k, l)] - truth.u[(k, l)];
                    if e < self.eps_lo[(k, l)] - slack || e > self.eps_hi[(k, l)] + slack {
                        return Err(Error::Invariant(format!("input noise at k={} outside bounds", k + 1)));
                    }
                }
                for m in 0..n_y {
                    let e = self.y_tilde[(k, m)] - truth.y[(k, m)];
                    if e < self.eta_lo[(k, m)] - slack || e > self.eta_hi[(k, m)] + slack {
                        return Err(Error::Invariant(format!("output noise at k={} outside bounds", k + 1)));
                    }
                }
            }
        }
        Ok(())
    }

    /// First `n` samples of the record (nested datasets share a prefix).
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n() {
            return arg(format!("cannot take {n} samples from a record of {}", self.n()));
        }
        let rows = |m: &DMatrix<f64>| m.rows(0, n).into_owned();
        Ok(Self {
            ts: self.ts,
            u_tilde: rows(&self.u_tilde),
            y_tilde: rows(&self.y_tilde),
            eps_lo: rows(&self.eps_lo),
            eps_hi: rows(&self.eps_hi),
            eta_lo: rows(&self.eta_lo),
            eta_hi: rows(&self.eta_hi),
            truth: self.truth.as_ref().map(|t| GroundTruth {
                u: rows(&t.u),
                y: rows(&t.y),
                model: t.model.clone(),
            }),
            provenance: self.provenance.clone(),
        })
    }

    /// Copy with every noise bound multiplied by `factor`.
    pub fn with_scaled_bounds(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for m in [&mut out.eps_lo, &mut out.eps_hi, &mut out.eta_lo, &mut out.eta_hi] {
            *m *= factor;
        }
        out
    }

    /// Largest absolute output noise bound.
    pub fn max_output_bound(&self) -> f64 {
        self.eta_lo.iter().chain(self.eta_hi.iter()).fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Signal-to-noise ratio in dB of `clean` against `noisy - clean`.
pub fn snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let ps: f64 = clean.iter().map(|v| v * v).sum();
    let pn: f64 = clean.iter().zip(noisy).map(|(c, n)| (n - c) * (n - c)).sum();
    10.0 * (ps / pn).log10()
}

/// Simulates `model` under one signal per input, samples at `k T_s` for
/// `k = 1..N` and adds uniform noise within the caps of `noise`.
pub fn make_dataset(
    model: &MimoModel,
    signals: &[Signal],
    ts: f64,
    n: usize,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset> {
    let (n_u, n_y) = (model.n_u(), model.n_y());
    if signals.len() != n_u {
        return arg(format!("model has {n_u} inputs but {} signals were given", signals.len()));
    }
    if noise.input.len() != n_u || noise.output.len() != n_y {
        return arg("noise spec does not match the model's input/output counts");
    }
    for b in noise.input.iter().chain(&noise.output) {
        b.validate()?;
    }
    if n == 0 {
        return arg("need at least one sample");
    }

    let mut u = DMatrix::zeros(n, n_u);
    for (l, s) in signals.iter().enumerate() {
        for (k, v) in s.sample(ts, n).into_iter().enumerate() {
            u[(k, l)] = v;
        }
    }
    let mut y = DMatrix::zeros(n, n_y);
    for m in 0..n_y {
        for (l, s) in signals.iter().enumerate() {
            let part = ct_simulate(model.channel(m, l), s, ts, n, DEFAULT_SUBSTEPS)?;
            for (k, v) in part.into_iter().enumerate() {
                y[(k, m)] += v;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |cap: f64| if cap > 0.0 { rng.gen_range(-cap..=cap) } else { 0.0 };
    let mut eps_hi = DMatrix::zeros(n, n_u);
    let mut u_tilde = u.clone();
    for k in 0..n {
        for l in 0..n_u {
            let cap = noise.input[l].cap(u[(k, l)]);
            eps_hi[(k, l)] = cap;
            u_tilde[(k, l)] += draw(cap);
        }
    }
    let mut eta_hi = DMatrix::zeros(n, n_y);
    let mut y_tilde = y.clone();
    for k in 0..n {
        for m in 0..n_y {
            let cap = noise.output[m].cap(y[(k, m)]);
            eta_hi[(k, m)] = cap;
            y_tilde[(k, m)] += draw(cap);
        }
    }

    let ds = Dataset {
        ts,
        u_tilde,
        y_tilde,
        eps_lo: -eps_hi.clone(),
        eps_hi,
        eta_lo: -eta_hi.clone(),
        eta_hi,
        truth: Some(GroundTruth { u, y, model: Some(model.clone()) }),
        provenance: Provenance { signals: None, noise: Some(noise.clone()), seed: Some(seed) },
    };
    ds.validate()?;
    Ok(ds)
}

/// Shape of the discretization-error bound `Δ_δ(k) = d φ_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    Uniform,
    RelativeOutput,
    RelativeInput,
    RelativeDiffOutput,
    RelativeDiffInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBoundSpec {
    pub kind: DeltaKind,
    pub d: f64,
}

impl DeltaBoundSpec {
    pub fn uniform(d: f64) -> Self {
        Self { kind: DeltaKind::Uniform, d }
    }
}

/// `φ_k` per output for the given kind (the bound with `d = 1`).
///
/// Input-based kinds aggregate over input channels by summing.
pub fn delta_shape(kind: DeltaKind, ds: &Dataset) -> DMatrix<f64> {
    let (n, n_y) = (ds.n(), ds.n_y());
    let input_sum = |k: usize, prev: bool| -> f64 {
        (0..ds.n_u())
            .map(|l| {
                let v = ds.u_tilde[(k, l)];
                if prev && k > 0 { (v - ds.u_tilde[(k - 1, l)]).abs() } else { v.abs() }
            })
            .sum()
    };
    DMatrix::from_fn(n, n_y, |k, m| match kind {
        DeltaKind::Uniform => 1.0,
        DeltaKind::RelativeOutput => ds.y_tilde[(k, m)].abs(),
        DeltaKind::RelativeDiffOutput if k == 0 => ds.y_tilde[(k, m)].abs(),
        DeltaKind::RelativeDiffOutput => (ds.y_tilde[(k, m)] - ds.y_tilde[(k - 1, m)]).abs(),
        DeltaKind::RelativeInput => input_sum(k, false),
        DeltaKind::RelativeDiffInput => input_sum(k, true),
    })
}

/// `Δ_δ(k) = d φ_k` as an `N × n_y` matrix.
pub fn delta_bounds(spec: &DeltaBoundSpec, ds: &Dataset) -> DMatrix<f64> {
    delta_shape(spec.kind, ds) * spec.d.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub fit: f64,
}

/// Mean squared simulation error and normalized-RMS FIT.
pub fn metrics(y_hat: &[f64], y_tilde: &[f64]) -> Result<Metrics> {
    if y_hat.len() != y_tilde.len() || y_hat.len() < 2 {
        return arg(format!(
            "metrics need equal lengths >= 2, got {} and {}",
            y_hat.len(),
            y_tilde.len()
        ));
    }
    let n = y_hat.len() as f64;
    let sse: f64 = y_hat.iter().zip(y_tilde).map(|(a, b)| (a - b) * (a - b)).sum();
    let mean = y_tilde.iter().sum::<f64>() / n;
    let spread: f64 = y_tilde.iter().map(|v| (v - mean) * (v - mean)).sum();
    if spread == 0.0 {
        return Err(Error::UndefinedFit);
    }
    Ok(Metrics { mse: sse / n, fit: 1.0 - (sse / spread).sqrt() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    ts: f64,
    n: usize,
    n_u: usize,
    n_y: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<MimoModel>,
    #[serde(default)]
    truth_series: bool,
    #[serde(default, flatten)]
    provenance: Provenance,
}

/// Path of the metadata record that accompanies a dataset CSV.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn truth_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("truth.csv")
}

fn header(prefixes: &[(&str, usize)]) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    for (p, count) in prefixes {
        h.extend((1..=*count).map(|i| format!("{p}_{i}")));
    }
    h
}

fn write_table(path: &Path, cols: &[(&str, &DMatrix<f64>)]) -> Result<()> {
    let n = cols[0].1.nrows();
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header(&cols.iter().map(|(p, m)| (*p, m.ncols())).collect::<Vec<_>>()))?;
    for k in 0..n {
        let mut rec = vec![(k + 1).to_string()];
        for (_, m) in cols {
            rec.extend(m.row(k).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_table(path: &Path, layout: &[(&str, usize)], n: usize) -> Result<Vec<DMatrix<f64>>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let expected = header(layout);
    let got: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if got != expected {
        return arg(format!("{}: unexpected header {:?}, expected {:?}", path.display(), got, expected));
    }
    let mut mats: Vec<DMatrix<f64>> = layout.iter().map(|(_, c)| DMatrix::zeros(n, *c)).collect();
    let mut rows = 0;
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        if idx >= n {
            return arg(format!("{}: more rows than the declared N = {n}", path.display()));
        }
        let k: usize = rec[0].trim().parse().map_err(|_| Error::Argument(format!("bad sample index {:?}", &rec[0])))?;
        if k != idx + 1 {
            return arg(format!("{}: row {} has sample index {k}", path.display(), idx + 1));
        }
        let mut col = 1;
        for (mat, (_, c)) in mats.iter_mut().zip(layout) {
            for j in 0..*c {
                let field = rec.get(col).ok_or_else(|| Error::Argument("short CSV row".into()))?;
                mat[(idx, j)] = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad number {field:?} in row {}", idx + 1)))?;
                col += 1;
            }
        }
        rows += 1;
    }
    if rows != n {
        return arg(format!("{}: {rows} rows, metadata declares N = {n}", path.display()));
    }
    Ok(mats)
}

impl Dataset {
    /// Writes the CSV table, its metadata record and (if present) the
    /// noise-free series.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        write_table(
            csv_path,
            &[
                ("u", &self.u_tilde),
                ("y", &self.y_tilde),
                ("eps_lo", &self.eps_lo),
                ("eps_hi", &self.eps_hi),
                ("eta_lo", &self.eta_lo),
                ("eta_hi", &self.eta_hi),
            ],
        )?;
        if let Some(t) = &self.truth {
            write_table(&truth_path(csv_path), &[("u", &t.u), ("y", &t.y)])?;
        }
        let meta = Metadata {
            ts: self.ts,
            n: self.n(),
            n_u: self.n_u(),
            n_y: self.n_y(),
            model: self.truth.as_ref().and_then(|t| t.model.clone()),
            truth_series: self.truth.is_some(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer_pretty(File::create(metadata_path(csv_path))?, &meta)?;
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta: Metadata = serde_json::from_reader(File::open(metadata_path(csv_path))?)?;
        let (n, n_u, n_y) = (meta.n, meta.n_u, meta.n_y);
        let mut mats = read_table(
            csv_path,
            &[("u", n_u), ("y", n_y), ("eps_lo", n_u), ("eps_hi", n_u), ("eta_lo", n_y), ("eta_hi", n_y)],
            n,
        )?
        .into_iter();
        let mut next = || mats.next().expect("layout has six tables");
        let (u_tilde, y_tilde, eps_lo, eps_hi, eta_lo, eta_hi) = (next(), next(), next(), next(), next(), next());
        let truth = if meta.truth_series {
            let mut t = read_table(&truth_path(csv_path), &[("u", n_u), ("y", n_y)], n)?.into_iter();
            Some(GroundTruth { u: t.next().unwrap(), y: t.next().unwrap(), model: meta.model })
        } else {
            None
        };
        let ds = Dataset {
            ts: meta.ts,
            u_tilde,
            y_tilde,
            eps_lo,
            eps_hi,
            eta_lo,
            eta_hi,
            truth,
            provenance: meta.provenance,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::ContinuousTf;

    fn example1_model() -> MimoModel {
        MimoModel::siso(ContinuousTf::new(vec![16.3, 2.2], vec![-21.0, 10.5]).unwrap())
    }

    #[test]
    fn constant_multisine() {
        let spec = SignalSpec::Multisine {
            harmonics: 0,
            delta_omega: 0.1,
            amplitudes: Some(vec![1.0]),
            phases: Some(vec![0.0]),
            seed: 0,
        };
        let s = generate_signal(&spec).unwrap();
        for t in [0.0, 1.5, 100.0] {
            assert_eq!(s.value(t), 1.0);
        }
    }

    #[test]
    fn seeded_signal_is_deterministic() {
        let spec = SignalSpec::multisine(50, 0.1, 42);
        let a = generate_signal(&spec).unwrap().sample(0.05, 80);
        let b = generate_signal(&spec).unwrap().sample(0.05, 80);
        assert_eq!(a, b);
        let c = generate_signal(&spec.with_seed(43)).unwrap().sample(0.05, 80);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_amplitude_bumps() {
        let spec = SignalSpec::GaussianBumps {
            count: 5,
            max_width: 7.0,
            amplitudes: Some(vec![0.0; 6]),
            widths: None,
            centers: None,
            seed: 3,
        };
        let s = generate_signal(&spec).unwrap();
        assert!(s.sample(0.15, 40).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bad_signal_specs() {
        let wrong_len = SignalSpec::Multisine {
            harmonics: 3,
            delta_omega: 0.1,
            amplitudes: Some(vec![1.0]),
            phases: None,
            seed: 0,
        };
        assert!(generate_signal(&wrong_len).is_err());
        let negative_width = SignalSpec::GaussianBumps {
            count: 1,
            max_width: 7.0,
            amplitudes: None,
            widths: Some(vec![1.0, -1.0]),
            centers: None,
            seed: 0,
        };
        assert!(generate_signal(&negative_width).is_err());
        assert!(generate_signal(&SignalSpec::gaussian_bumps(0, 7.0, 0)).is_err());
    }

    #[test]
    fn noiseless_dataset_is_exact() {
        let s = generate_signal(&SignalSpec::multisine(10, 0.1, 1)).unwrap();
        let ds = make_dataset(&example1_model(), &[s], 0.05, 30, &NoiseSpec::absolute(1, 0.0, 1, 0.0), 9).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        assert_eq!(ds.u_tilde, truth.u);
        assert_eq!(ds.y_tilde, truth.y);
    }

    #[test]
    fn example1_bounds() {
        let s = generate_signal(&SignalSpec::multisine(50, 0.1, 1)).unwrap();
        let ds = make_dataset(&example1_model(), &[s], 0.05, 80, &NoiseSpec::absolute(1, 0.0, 1, 2.0), 9).unwrap();
        assert_eq!(ds.n(), 80);
        assert!(ds.eta_hi.iter().all(|v| *v == 2.0));
        assert!(ds.eta_lo.iter().all(|v| *v == -2.0));
        assert!(ds.eps_hi.iter().all(|v| *v == 0.0));
        ds.validate().unwrap();
    }

    #[test]
    fn relative_output_noise() {
        let s = generate_signal(&SignalSpec::gaussian_bumps(20, 7.0, 4)).unwrap();
        let noise = NoiseSpec { input: vec![NoiseBound::none()], output: vec![NoiseBound::Relative { ratio: 0.05 }] };
        let ds = make_dataset(&example1_model(), &[s], 0.15, 60, &noise, 2).unwrap();
        let y = &ds.truth.as_ref().unwrap().y;
        for k in 0..60 {
            assert_eq!(ds.eta_hi[(k, 0)], 0.05 * y[(k, 0)].abs());
        }
    }

    #[test]
    fn delta_bound_kinds() {
        let y = DMatrix::from_column_slice(4, 1, &[2.0, 2.0, -3.0, -3.0]);
        let u = DMatrix::from_column_slice(4, 2, &[1.0, -1.0, 0.5, 0.5, 2.0, 2.0, 2.0, 0.0]);
        let z = |r, c| DMatrix::zeros(r, c);
        let ds = Dataset::new(0.1, u, y, (z(4, 2), z(4, 2)), (z(4, 1), z(4, 1))).unwrap();
        let uni = delta_bounds(&DeltaBoundSpec::uniform(0.0), &ds);
        assert!(uni.iter().all(|v| *v == 0.0));
        let rel = delta_bounds(&DeltaBoundSpec { kind: DeltaKind::RelativeOutput, d: 0.0012 }, &ds);
        assert_eq!(rel[(2, 0)], 0.0012 * 3.0);
        let diff = delta_shape(DeltaKind::RelativeDiffOutput, &ds);
        assert_eq!(diff.as_slice(), &[2.0, 0.0, 5.0, 0.0]);
        let din = delta_shape(DeltaKind::RelativeDiffInput, &ds);
        assert_eq!(din.as_slice(), &[3.0, 2.0, 1.5, 2.0]);
        let rin = delta_shape(DeltaKind::RelativeInput, &ds);
        assert_eq!(rin.as_slice(), &[3.0, 3.0, 2.5, 0.5]);
    }

    #[test]
    fn metrics_cases() {
        let y = [0.0, 1.0, 2.0, 3.0];
        let m = metrics(&y, &y).unwrap();
        assert_eq!((m.mse, m.fit), (0.0, 1.0));
        let m = metrics(&[1.5; 4], &y).unwrap();
        assert!(m.fit.abs() < 1e-15);
        let shifted: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        let m = metrics(&shifted, &y).unwrap();
        assert_eq!(m.mse, 1.0);
        assert!((m.fit - (1.0 - (4.0f64 / 5.0).sqrt())).abs() < 1e-15);
        assert!(matches!(metrics(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::UndefinedFit)));
        assert!(metrics(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn bounds_must_bracket_zero() {
        let z = |r, c| DMatrix::<f64>::zeros(r, c);
        let bad = DMatrix::from_element(3, 1, 0.5);
        let r = Dataset::new(0.1, z(3, 1), z(3, 1), (bad, z(3, 1)), (z(3, 1), z(3, 1)));
        assert!(r.is_err());
    }
}
