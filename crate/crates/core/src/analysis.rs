//! Time-tag analysis, least-squares fits of characterization data and
//! single-shot readout thresholding.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Detector, TagStream};

/// Tags at local time `≥ from_local_ns` (within their shot) are moved by
/// `shift_ns`. With the distinguishable HOM sequence this brings module B's
/// delayed gate back onto module A's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Realign {
    pub from_local_ns: f64,
    pub shift_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total_singles: [u64; 2],
    /// Set when the stream held no clicks.
    pub empty: bool,
}

impl CoincidenceHistogram {
    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// All D2−D1 time differences within a shot, after realignment.
pub fn coincidence_deltas(stream: &TagStream, realign: Option<Realign>) -> Vec<f64> {
    let mut out = Vec::new();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for shot in stream.by_shot() {
        d1.clear();
        d2.clear();
        let start = stream.shot_start_ns(shot[0].shot);
        for r in shot {
            let mut t = r.timestamp_ns() - start;
            if let Some(ra) = realign {
                if t >= ra.from_local_ns {
                    t += ra.shift_ns;
                }
            }
            match r.detector {
                Detector::D1 => d1.push(t),
                Detector::D2 => d2.push(t),
            }
        }
        for &a in &d1 {
            for &b in &d2 {
                out.push(b - a);
            }
        }
    }
    out
}

/// Histogram of D2−D1 delays in bins of `bin_width_ns` centred on zero,
/// covering at least [−window, window].
pub fn coincidences(
    stream: &TagStream,
    realign: Option<Realign>,
    window_ns: f64,
    bin_width_ns: f64,
) -> Result<CoincidenceHistogram> {
    if !(bin_width_ns > 0.0) {
        return Err(Error::param("bin_width_ns", "must be positive"));
    }
    if !(window_ns > 0.0) {
        return Err(Error::param("window_ns", "must be positive"));
    }
    let k = (window_ns / bin_width_ns + 0.5).floor() as i64;
    let bin_edges: Vec<f64> = (0..=2 * k + 1)
        .map(|i| (i as f64 - k as f64 - 0.5) * bin_width_ns)
        .collect();
    let mut counts = vec![0u64; (2 * k + 1) as usize];
    let lo = bin_edges[0];
    for d in coincidence_deltas(stream, realign) {
        let idx = ((d - lo) / bin_width_ns).floor();
        if idx >= 0.0 && (idx as usize) < counts.len() {
            counts[idx as usize] += 1;
        }
    }
    Ok(CoincidenceHistogram {
        bin_edges,
        counts,
        total_singles: [stream.count(Detector::D1) as u64, stream.count(Detector::D2) as u64],
        empty: stream.records.is_empty(),
    })
}

/// Number of coincidences with |τ| ≤ T.
pub fn windowed_count(stream: &TagStream, realign: Option<Realign>, window_ns: f64) -> u64 {
    coincidence_deltas(stream, realign)
        .into_iter()
        .filter(|d| d.abs() <= window_ns)
        .count() as u64
}

/// `V = 1 − (N_I/shots_I)/(N_D/shots_D)` with its Poisson standard error.
pub fn visibility_from_counts(n_i: u64, shots_i: u32, n_d: u64, shots_d: u32) -> Result<(f64, f64)> {
    if n_d == 0 || shots_i == 0 || shots_d == 0 {
        return Err(Error::Undefined("no distinguishable coincidences".into()));
    }
    let ratio = (n_i as f64 / shots_i as f64) / (n_d as f64 / shots_d as f64);
    let rel = (1.0 / n_d as f64 + if n_i > 0 { 1.0 / n_i as f64 } else { 0.0 }).sqrt();
    Ok((1.0 - ratio, ratio * rel))
}

/// Visibility from an indistinguishable and a distinguishable stream.
pub fn hom_visibility(
    indist: &TagStream,
    dist: &TagStream,
    realign: Option<Realign>,
    window_ns: f64,
) -> Result<(f64, f64)> {
    visibility_from_counts(
        windowed_count(indist, None, window_ns),
        indist.shots,
        windowed_count(dist, realign, window_ns),
        dist.shots,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    /// `A e^{−t/τ} + c`
    ExpDecay,
    /// `A cos(Ω t + φ) e^{−t/T_R} + c`
    Rabi,
    /// `A cos(2π δ t + φ) e^{−(t/T₂*)ⁿ} + c`
    Ramsey,
    /// `A e^{−(t/T₂)ⁿ} + c`
    Hahn,
    /// `A rᵏ + c`
    PumpDecay,
}

const N_MIN: f64 = 0.5;
const N_MAX: f64 = 3.0;

impl FitModel {
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            FitModel::ExpDecay => &["amplitude", "tau", "offset"],
            FitModel::Rabi => &["amplitude", "omega", "phase", "decay_time", "offset"],
            FitModel::Ramsey => &["amplitude", "detuning", "phase", "t2_star", "stretch", "offset"],
            FitModel::Hahn => &["amplitude", "t2", "stretch", "offset"],
            FitModel::PumpDecay => &["amplitude", "ratio", "offset"],
        }
    }

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }

    pub fn eval(self, p: &[f64], x: f64) -> f64 {
        match self {
            FitModel::ExpDecay => p[0] * (-x / p[1]).exp() + p[2],
            FitModel::Rabi => p[0] * (p[1] * x + p[2]).cos() * (-x / p[3]).exp() + p[4],
            FitModel::Ramsey => {
                p[0] * (2.0 * std::f64::consts::PI * p[1] * x + p[2]).cos() * (-(x / p[3]).abs().powf(p[4])).exp() + p[5]
            }
            FitModel::Hahn => p[0] * (-(x / p[1]).abs().powf(p[2])).exp() + p[3],
            FitModel::PumpDecay => p[0] * p[1].powf(x) + p[2],
        }
    }

    /// Decay factor at `x`, where the model has one.
    pub fn envelope(self, p: &[f64], x: f64) -> f64 {
        match self {
            FitModel::ExpDecay => (-x / p[1]).exp(),
            FitModel::Rabi => (-x / p[3]).exp(),
            FitModel::Ramsey => (-(x / p[3]).abs().powf(p[4])).exp(),
            FitModel::Hahn => (-(x / p[1]).abs().powf(p[2])).exp(),
            FitModel::PumpDecay => p[1].powf(x),
        }
    }

    fn clamp(self, p: &mut [f64]) {
        let pos = |v: &mut f64| *v = v.abs().max(1e-300);
        match self {
            FitModel::ExpDecay => pos(&mut p[1]),
            FitModel::Rabi => pos(&mut p[3]),
            FitModel::Ramsey => {
                pos(&mut p[3]);
                p[4] = p[4].clamp(N_MIN, N_MAX);
            }
            FitModel::Hahn => {
                pos(&mut p[1]);
                p[2] = p[2].clamp(N_MIN, N_MAX);
            }
            FitModel::PumpDecay => p[1] = p[1].clamp(1e-12, 1.0),
        }
    }
}

/// `(x, y, σ_y)` series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FitData {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() != sigma.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len().min(sigma.len()) });
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::param("sigma", "uncertainties must be positive"));
        }
        Ok(FitData { x, y, sigma })
    }

    /// Count data with Poisson weights `σ = √max(y, 1)`.
    pub fn counts(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let sigma = y.iter().map(|v| v.max(1.0).sqrt()).collect();
        FitData::new(x, y, sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub names: Vec<String>,
    pub params: Vec<f64>,
    /// Infinite for parameters the data do not constrain.
    pub std_errors: Vec<f64>,
    /// `sqrt(χ²)` of the weighted residuals.
    pub residual_norm: f64,
    pub degenerate: Vec<String>,
    pub iterations: usize,
    pub x_range: (f64, f64),
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.params[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.std_errors[i])
    }

    pub fn envelope(&self, x: f64) -> f64 {
        self.model.envelope(&self.params, x)
    }
}

const MAX_ITER: usize = 400;

struct LmOutcome {
    params: Vec<f64>,
    chi2: f64,
    iterations: usize,
}

fn chi2(model: FitModel, d: &FitData, p: &[f64]) -> f64 {
    d.x.iter()
        .zip(&d.y)
        .zip(&d.sigma)
        .map(|((x, y), s)| ((y - model.eval(p, *x)) / s).powi(2))
        .sum()
}

// Jacobian of the model values divided by σ, by central differences.
fn jacobian(model: FitModel, d: &FitData, p: &[f64]) -> DMatrix<f64> {
    let n = d.x.len();
    let k = p.len();
    let mut j = DMatrix::zeros(n, k);
    for c in 0..k {
        let h = 1e-6 * p[c].abs().max(1e-8);
        let mut hi = p.to_vec();
        let mut lo = p.to_vec();
        hi[c] += h;
        lo[c] -= h;
        for i in 0..n {
            j[(i, c)] = (model.eval(&hi, d.x[i]) - model.eval(&lo, d.x[i])) / (2.0 * h) / d.sigma[i];
        }
    }
    j
}

fn levenberg_marquardt(model: FitModel, d: &FitData, start: &[f64]) -> Option<LmOutcome> {
    let mut p = start.to_vec();
    model.clamp(&mut p);
    let mut cost = chi2(model, d, &p);
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    for it in 0..MAX_ITER {
        let j = jacobian(model, d, &p);
        let r = DVector::from_iterator(
            d.x.len(),
            (0..d.x.len()).map(|i| (d.y[i] - model.eval(&p, d.x[i])) / d.sigma[i]),
        );
        let jtj = j.transpose() * &j;
        let g = j.transpose() * r;
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for c in 0..a.ncols() {
                a[(c, c)] += lambda * jtj[(c, c)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&g) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            model.clamp(&mut trial);
            let c = chi2(model, d, &trial);
            if c.is_finite() && c <= cost {
                let rel = (cost - c) / cost.max(1e-300);
                let moved = trial
                    .iter()
                    .zip(&p)
                    .all(|(a, b)| (a - b).abs() <= 1e-10 * b.abs().max(1e-12));
                p = trial;
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-12 || moved {
                    return Some(LmOutcome { params: p, chi2: cost, iterations: it + 1 });
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // no downhill step at any damping: a minimum
            return Some(LmOutcome { params: p, chi2: cost, iterations: it + 1 });
        }
    }
    None
}

fn log_linear(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(_, y)| **y > 0.0).map(|(x, y)| (*x, y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    Some((slope, my - slope * mx))
}

// Frequency (cycles per x unit) of the largest DFT component of the
// mean-subtracted data, allowing non-uniform sampling.
fn dft_peak(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let span = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
    if !(span > 0.0) {
        return 0.0;
    }
    let df = 1.0 / span / 8.0;
    let fmax = 0.5 * (n as f64 - 1.0) / span;
    let mut best = (0.0, 0.0);
    let mut f = df;
    while f <= fmax {
        let (mut re, mut im) = (0.0, 0.0);
        for (xi, yi) in x.iter().zip(y) {
            let ph = 2.0 * std::f64::consts::PI * f * xi;
            re += (yi - mean) * ph.cos();
            im += (yi - mean) * ph.sin();
        }
        let pw = re * re + im * im;
        if pw > best.1 {
            best = (f, pw);
        }
        f += df;
    }
    best.0
}

// Amplitude and phase of `cos(2π f x + φ)` by linear least squares.
fn phase_fit(x: &[f64], y: &[f64], f: f64) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let w = 2.0 * std::f64::consts::PI * f;
    let (mut cc, mut ss, mut cs, mut yc, mut ys) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let (c, s) = ((w * xi).cos(), (w * xi).sin());
        cc += c * c;
        ss += s * s;
        cs += c * s;
        yc += (yi - mean) * c;
        ys += (yi - mean) * s;
    }
    let det = cc * ss - cs * cs;
    if det.abs() < 1e-300 {
        return (0.0, 0.0);
    }
    let a = (yc * ss - ys * cs) / det;
    let b = (ys * cc - yc * cs) / det;
    // a cos − (−b) sin = R cos(wx + φ)
    ((a * a + b * b).sqrt(), (-b).atan2(a))
}

fn starts(model: FitModel, d: &FitData) -> Vec<Vec<f64>> {
    let x = &d.x;
    let y = &d.y;
    let n = y.len();
    let xmin = x.iter().cloned().fold(f64::MAX, f64::min);
    let xmax = x.iter().cloned().fold(f64::MIN, f64::max);
    let span = (xmax - xmin).max(1e-300);
    let tail = (n / 10).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let c0 = order[n - tail..].iter().map(|&i| y[i]).sum::<f64>() / tail as f64;
    let head = y[order[0]] - c0;
    let decay_guess = || -> (f64, f64) {
        let shifted: Vec<f64> = y.iter().map(|v| (v - c0) * head.signum()).collect();
        match log_linear(x, &shifted) {
            Some((s, b)) if s < 0.0 => (-1.0 / s, head.signum() * b.exp()),
            _ => (span / 3.0, head),
        }
    };
    let scales = [0.1, 0.3, 1.0, 3.0];
    match model {
        FitModel::ExpDecay => {
            let (tau, a) = decay_guess();
            let mut v = vec![vec![a, tau, c0]];
            v.extend(scales.iter().map(|s| vec![head, s * span, c0]));
            v
        }
        FitModel::PumpDecay => {
            let (tau, a) = decay_guess();
            let r = (-1.0 / tau).exp();
            let mut v = vec![vec![a, r, c0]];
            v.extend([0.3, 0.7, 0.9].iter().map(|r| vec![head, *r, c0]));
            v
        }
        FitModel::Hahn => {
            let mut v = Vec::new();
            for s in scales {
                for nexp in [1.0, 2.0, 3.0] {
                    v.push(vec![head, s * span, nexp, c0]);
                }
            }
            let (tau, a) = decay_guess();
            v.push(vec![a, tau, 1.0, c0]);
            v
        }
        FitModel::Rabi | FitModel::Ramsey => {
            let mean = y.iter().sum::<f64>() / n as f64;
            let f = dft_peak(x, y);
            let (amp, phi) = phase_fit(x, y, f);
            let mut v = Vec::new();
            for s in scales {
                let t = s * span;
                // compensate the average envelope damping in the amplitude
                let a = amp * (1.0 + span / t).min(10.0);
                if model == FitModel::Rabi {
                    v.push(vec![a, 2.0 * std::f64::consts::PI * f, phi, t, mean]);
                } else {
                    for nexp in [1.0, 2.0] {
                        v.push(vec![a, f, phi, t, nexp, mean]);
                    }
                }
            }
            v
        }
    }
}

/// Weighted nonlinear least squares (Levenberg-Marquardt). Without
/// `initial`, deterministic starts are derived from the data: decay times
/// from log-linear regression and frequencies from the DFT peak.
pub fn fit(model: FitModel, data: &FitData, initial: Option<&[f64]>) -> Result<FitResult> {
    let k = model.n_params();
    if data.x.len() < 3 * k {
        return Err(Error::Fit(format!(
            "{} points is fewer than three per parameter ({})",
            data.x.len(),
            3 * k
        )));
    }
    let starts = match initial {
        Some(p) if p.len() != k => return Err(Error::DimensionMismatch { expected: k, got: p.len() }),
        Some(p) => vec![p.to_vec()],
        None => starts(model, data),
    };
    let best = starts
        .iter()
        .filter_map(|s| levenberg_marquardt(model, data, s))
        .min_by(|a, b| a.chi2.total_cmp(&b.chi2))
        .ok_or_else(|| Error::Fit("no start converged within the iteration limit".into()))?;
    let mut best = best;
    canonicalize(model, &mut best.params);

    let j = jacobian(model, data, &best.params);
    let (std_errors, degenerate) = covariance(&j, model, &best.params)?;
    let xmin = data.x.iter().cloned().fold(f64::MAX, f64::min);
    let xmax = data.x.iter().cloned().fold(f64::MIN, f64::max);
    Ok(FitResult {
        model,
        names: model.param_names().iter().map(|s| s.to_string()).collect(),
        params: best.params,
        std_errors,
        residual_norm: best.chi2.sqrt(),
        degenerate,
        iterations: best.iterations,
        x_range: (xmin, xmax),
    })
}

// Oscillation sign conventions: non-negative frequency and amplitude, phase
// in [−π/2, 3π/2).
fn canonicalize(model: FitModel, p: &mut [f64]) {
    use std::f64::consts::{PI, TAU};
    let (amp, freq, phase) = match model {
        FitModel::Rabi | FitModel::Ramsey => (0, 1, 2),
        _ => return,
    };
    if p[freq] < 0.0 {
        p[freq] = -p[freq];
        p[phase] = -p[phase];
    }
    if p[amp] < 0.0 {
        p[amp] = -p[amp];
        p[phase] += PI;
    }
    p[phase] = (p[phase] + 0.5 * PI).rem_euclid(TAU) - 0.5 * PI;
}

/// Count data fitted with weights from the fitted model rather than the
/// observed counts, which biases low-count tails.
pub fn fit_counts(model: FitModel, data: &FitData, initial: Option<&[f64]>) -> Result<FitResult> {
    let mut f = fit(model, data, initial)?;
    for _ in 0..2 {
        let sigma = data.x.iter().map(|&x| model.eval(&f.params, x).max(1.0).sqrt()).collect();
        let d = FitData::new(data.x.clone(), data.y.clone(), sigma)?;
        f = fit(model, &d, Some(&f.params))?;
    }
    Ok(f)
}

// Standard errors from (JᵀJ)⁻¹ with J already divided by σ. Parameters
// whose Jacobian column vanishes get infinite errors and are reported.
fn covariance(j: &DMatrix<f64>, model: FitModel, p: &[f64]) -> Result<(Vec<f64>, Vec<String>)> {
    let k = j.ncols();
    let names = model.param_names();
    let norms: Vec<f64> = (0..k).map(|c| j.column(c).norm() * p[c].abs().max(1e-12)).collect();
    let top = norms.iter().cloned().fold(0.0, f64::max);
    let live: Vec<usize> = (0..k).filter(|&c| norms[c] > 1e-9 * top.max(1e-300)).collect();
    let mut errs = vec![f64::INFINITY; k];
    let degenerate: Vec<String> = (0..k).filter(|c| !live.contains(c)).map(|c| names[c].to_string()).collect();
    if live.is_empty() {
        return Ok((errs, degenerate));
    }
    let sub = DMatrix::from_fn(j.nrows(), live.len(), |r, c| j[(r, live[c])]);
    let cov = (sub.transpose() * &sub)
        .try_inverse()
        .ok_or_else(|| Error::Fit("singular covariance".into()))?;
    for (i, &c) in live.iter().enumerate() {
        let v = cov[(i, i)];
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Fit("singular covariance".into()));
        }
        errs[c] = v.sqrt();
    }
    Ok((errs, degenerate))
}

/// `F = (1 + env)/2` for an envelope value in [0, 1].
pub fn fidelity_from_envelope(env: f64) -> Result<f64> {
    if !(0.0..=1.0 + 1e-12).contains(&env) {
        return Err(Error::param("envelope", format!("{env} outside [0, 1]")));
    }
    Ok((1.0 + env.min(1.0)) / 2.0)
}

/// Gate fidelity from the fitted decay envelope at the gate time.
pub fn gate_fidelity_from_envelope(fit: &FitResult, t_gate: f64) -> Result<f64> {
    if t_gate < 0.0 || t_gate > 2.0 * fit.x_range.1.max(0.0) {
        return Err(Error::param(
            "t_gate",
            format!("{t_gate} extrapolates beyond twice the fitted range"),
        ));
    }
    fidelity_from_envelope(fit.envelope(t_gate).clamp(0.0, 1.0))
}

/// Noise added to synthetic characterization data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Noise {
    Gaussian { sigma: f64 },
    /// The model value is a mean count.
    Poisson,
}

/// A characterization curve with known parameters, sampled on an even grid
/// over `(0, x_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinCurve {
    pub label: String,
    pub model: FitModel,
    pub truth: Vec<f64>,
    pub x_max: f64,
    pub points: usize,
    pub noise: Noise,
}

impl SpinCurve {
    pub fn validate(&self) -> Result<()> {
        if self.truth.len() != self.model.n_params() {
            return Err(Error::param(
                "truth",
                format!("'{}' needs {} values ({})", self.label, self.model.n_params(), self.model.param_names().join(", ")),
            ));
        }
        if !(self.x_max > 0.0) || self.points < 2 * self.model.n_params() {
            return Err(Error::param("points", format!("'{}' needs x_max > 0 and enough points", self.label)));
        }
        if let Noise::Gaussian { sigma } = self.noise {
            if !(sigma > 0.0) {
                return Err(Error::param("sigma", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn x(&self) -> Vec<f64> {
        (1..=self.points).map(|i| self.x_max * i as f64 / self.points as f64).collect()
    }

    /// One noisy realization.
    pub fn sample(&self, seed: u64) -> Result<FitData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self.x();
        let mean: Vec<f64> = x.iter().map(|&t| self.model.eval(&self.truth, t)).collect();
        match self.noise {
            Noise::Gaussian { sigma } => {
                let n = Normal::new(0.0, sigma).map_err(|e| Error::param("sigma", e.to_string()))?;
                let y = mean.iter().map(|m| m + n.sample(&mut rng)).collect();
                FitData::new(x, y, vec![sigma; self.points])
            }
            Noise::Poisson => {
                if mean.iter().any(|m| !(*m > 0.0)) {
                    return Err(Error::param("truth", "Poisson means must be positive"));
                }
                let y = mean
                    .iter()
                    .map(|&m| Poisson::new(m).map(|d| d.sample(&mut rng)).unwrap_or(0.0))
                    .collect();
                FitData::counts(x, y)
            }
        }
    }

    /// Curves of the spin characterization figure. Electron times in ns or
    /// µs, nuclear times in ms.
    pub fn defaults() -> Vec<SpinCurve> {
        let c = |label: &str, model, truth: &[f64], x_max, points, noise| SpinCurve {
            label: label.into(),
            model,
            truth: truth.to_vec(),
            x_max,
            points,
            noise,
        };
        let g = Noise::Gaussian { sigma: 0.02 };
        vec![
            c("optical_lifetime_ns", FitModel::ExpDecay, &[2000.0, 69.9, 5.0], 500.0, 250, Noise::Poisson),
            c("electron_rabi_ns", FitModel::Rabi, &[0.45, std::f64::consts::PI / 50.0, std::f64::consts::PI, 3000.0, 0.5], 400.0, 100, g),
            c("electron_ramsey_us", FitModel::Ramsey, &[0.45, 0.2, 0.0, 22.8, 2.0, 0.5], 50.0, 200, g),
            c("electron_hahn_us", FitModel::Hahn, &[0.45, 270.0, 2.0, 0.5], 600.0, 60, g),
            c("nuclear_ramsey_ms", FitModel::Ramsey, &[0.4, 0.5, 0.0, 8.6, 2.0, 0.5], 20.0, 200, g),
            c("nuclear_hahn_ms", FitModel::Hahn, &[0.4, 220.0, 2.0, 0.5], 500.0, 60, g),
        ]
    }
}

/// Repeated nuclear-to-electron mapping and optical readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsroModel {
    /// Mean photons per round for a bright electron.
    pub bright_mean: f64,
    pub dark_mean: f64,
    pub flip_per_round: f64,
    pub rounds: u32,
    pub map_gate_fidelity: f64,
    /// Optical pulses per round; informational, folded into the means.
    pub pulses_per_round: u32,
}

impl SsroModel {
    /// Calibrated to the first module's readout histograms.
    pub fn tc1() -> Self {
        SsroModel {
            bright_mean: 0.55,
            dark_mean: 0.06,
            flip_per_round: 0.01,
            rounds: 30,
            map_gate_fidelity: 0.97,
            pulses_per_round: 200,
        }
    }

    /// Calibrated to the second module's readout histograms.
    pub fn tc2() -> Self {
        SsroModel {
            bright_mean: 2.0,
            dark_mean: 0.27,
            flip_per_round: 0.008,
            rounds: 30,
            map_gate_fidelity: 0.97,
            pulses_per_round: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bright_mean > self.dark_mean) || !(self.dark_mean >= 0.0) {
            return Err(Error::param("bright_mean", "need bright_mean > dark_mean ≥ 0"));
        }
        for (n, v) in [("flip_per_round", self.flip_per_round), ("map_gate_fidelity", self.map_gate_fidelity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(n, "must be a probability"));
            }
        }
        if self.rounds == 0 {
            return Err(Error::param("rounds", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuclearState {
    /// Maps to a bright electron.
    Bright,
    Dark,
}

/// Per-shot photon totals. Each round the nucleus may flip, the mapping
/// gate succeeds with `map_gate_fidelity`, and the electron emits a
/// Poisson number of photons.
pub fn ssro_simulate(m: &SsroModel, prepared: NuclearState, shots: u32, seed: u64) -> Result<Vec<u64>> {
    m.validate()?;
    if shots == 0 {
        return Err(Error::param("shots", "must be at least 1"));
    }
    let pb = (m.bright_mean > 0.0).then(|| Poisson::new(m.bright_mean).unwrap());
    let pd = (m.dark_mean > 0.0).then(|| Poisson::new(m.dark_mean).unwrap());
    let salt = match prepared {
        NuclearState::Bright => 0,
        NuclearState::Dark => 1,
    };
    Ok((0..shots)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((s as u64) << 1) | salt);
            let mut bright = prepared == NuclearState::Bright;
            let mut total = 0u64;
            for _ in 0..m.rounds {
                if rng.random::<f64>() < m.flip_per_round {
                    bright = !bright;
                }
                let mapped = if rng.random::<f64>() < m.map_gate_fidelity { bright } else { !bright };
                let dist = if mapped { &pb } else { &pd };
                total += dist.as_ref().map_or(0, |d| d.sample(&mut rng) as u64);
            }
            total
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub thresholds: Vec<u64>,
    pub spam: Vec<f64>,
    pub best_threshold: u64,
    pub best_spam: f64,
}

impl ThresholdSweep {
    pub fn at(&self, threshold: u64) -> Option<f64> {
        self.thresholds.iter().position(|t| *t == threshold).map(|i| self.spam[i])
    }
}

/// `SPAM(θ) = ½[P(n ≥ θ | bright) + P(n < θ | dark)]` for θ from 0 to one
/// past the largest total; ties resolve to the smaller θ.
pub fn ssro_threshold(bright: &[u64], dark: &[u64]) -> Result<ThresholdSweep> {
    if bright.is_empty() || dark.is_empty() {
        return Err(Error::param("totals", "both series must be nonempty"));
    }
    let top = bright.iter().chain(dark).copied().max().unwrap_or(0) + 1;
    let hist = |v: &[u64]| {
        let mut h = vec![0u64; top as usize + 1];
        v.iter().for_each(|&x| h[x as usize] += 1);
        h
    };
    let (hb, hd) = (hist(bright), hist(dark));
    let (nb, nd) = (bright.len() as f64, dark.len() as f64);
    let mut below_b = 0u64;
    let mut below_d = 0u64;
    let mut thresholds = Vec::with_capacity(top as usize + 1);
    let mut spam = Vec::with_capacity(top as usize + 1);
    for th in 0..=top {
        thresholds.push(th);
        spam.push(0.5 * ((nb - below_b as f64) / nb + below_d as f64 / nd));
        below_b += hb[th as usize];
        below_d += hd[th as usize];
    }
    let (mut bi, mut bv) = (0, f64::MIN);
    for (i, &v) in spam.iter().enumerate() {
        if v > bv {
            bi = i;
            bv = v;
        }
    }
    Ok(ThresholdSweep { best_threshold: thresholds[bi], best_spam: bv, thresholds, spam })
}
