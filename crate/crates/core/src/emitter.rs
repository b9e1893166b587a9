//! Photon statistics of single emitters and two-emitter interference.
//!
//! Times are in ns and frequencies in MHz, so a phase `2π f t` picks up a
//! factor 1e-3. Correlation functions are indexed by `τ = t(D2) − t(D1)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

pub const DEFAULT_TAU_LIM_NS: f64 = 130.0;
pub const DEFAULT_GRID_STEP_NS: f64 = 0.1;
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

const MHZ_NS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitterParams {
    pub lifetime_ns: f64,
    /// Fast spectral diffusion, as a homogeneous broadening.
    pub pure_dephasing_mhz: f64,
    /// Standard deviation of the slow per-shot frequency offset.
    pub diffusion_sigma_mhz: f64,
    pub mean_detuning_mhz: f64,
    /// Polarisation angle relative to the common interferometer axis. The
    /// pair mismatch is the difference between the two emitters.
    pub polarization_mismatch_deg: f64,
    pub g2_0: f64,
    pub p_double: f64,
    pub br_radiative: f64,
    pub br_nonradiative: f64,
    pub desync_ns: f64,
    /// Slow-diffusion offsets outside ±bandwidth/2 are not excited. `None`
    /// leaves the Gaussian untruncated.
    pub excitation_bandwidth_mhz: Option<f64>,
}

impl EmitterParams {
    /// An ideal emitter with the given lifetime.
    pub fn ideal(lifetime_ns: f64) -> Self {
        EmitterParams {
            lifetime_ns,
            pure_dephasing_mhz: 0.0,
            diffusion_sigma_mhz: 0.0,
            mean_detuning_mhz: 0.0,
            polarization_mismatch_deg: 0.0,
            g2_0: 0.0,
            p_double: 0.0,
            br_radiative: 0.0,
            br_nonradiative: 0.0,
            desync_ns: 0.0,
            excitation_bandwidth_mhz: None,
        }
    }

    fn measured(lifetime_ns: f64, g2_0: f64, p_double: f64, pol: f64) -> Self {
        EmitterParams {
            lifetime_ns,
            pure_dephasing_mhz: 5.0,
            diffusion_sigma_mhz: 22.5 / FWHM_PER_SIGMA,
            polarization_mismatch_deg: pol,
            g2_0,
            p_double,
            br_radiative: 0.025,
            br_nonradiative: 0.025,
            ..EmitterParams::ideal(lifetime_ns)
        }
    }

    /// First module of the two-node experiment.
    pub fn tc1() -> Self {
        EmitterParams::measured(69.9, 0.0076, 0.028, 0.0)
    }

    /// Second module; carries the full polarisation mismatch.
    pub fn tc2() -> Self {
        EmitterParams::measured(64.5, 0.0117, 0.03, 12.8)
    }

    pub fn gamma(&self) -> f64 {
        1.0 / self.lifetime_ns
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("lifetime_ns", self.lifetime_ns),
            ("pure_dephasing_mhz", self.pure_dephasing_mhz),
            ("diffusion_sigma_mhz", self.diffusion_sigma_mhz),
            ("mean_detuning_mhz", self.mean_detuning_mhz),
            ("polarization_mismatch_deg", self.polarization_mismatch_deg),
            ("desync_ns", self.desync_ns),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::param(name, "must be finite"));
            }
        }
        if self.lifetime_ns <= 0.0 {
            return Err(Error::param("lifetime_ns", "must be positive"));
        }
        if self.pure_dephasing_mhz < 0.0 {
            return Err(Error::param("pure_dephasing_mhz", "must be non-negative"));
        }
        if self.diffusion_sigma_mhz < 0.0 {
            return Err(Error::param("diffusion_sigma_mhz", "must be non-negative"));
        }
        for (name, v) in [
            ("g2_0", self.g2_0),
            ("p_double", self.p_double),
            ("br_radiative", self.br_radiative),
            ("br_nonradiative", self.br_nonradiative),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::param(name, format!("{v} outside [0, 1)")));
            }
        }
        if self.br_radiative + self.br_nonradiative >= 1.0 {
            return Err(Error::param("br_radiative", "branching ratios sum to 1 or more"));
        }
        if let Some(bw) = self.excitation_bandwidth_mhz {
            if !(bw > 0.0) {
                return Err(Error::param("excitation_bandwidth_mhz", "must be positive"));
            }
        }
        self.hbt_model()?;
        Ok(())
    }

    /// Probability of one extra in-pulse photon per excitation, `q`, fixed
    /// by `g2_0 = 2q/(1+q)²`. Zero when `p_double` is zero.
    pub fn extra_photon_probability(&self) -> f64 {
        if self.p_double == 0.0 || self.g2_0 == 0.0 {
            return 0.0;
        }
        q_from_g2(self.g2_0)
    }

    pub fn hbt_model(&self) -> Result<HbtModel> {
        if self.p_double == 0.0 {
            return Ok(HbtModel { p_double: 0.0, escape: 0.0 });
        }
        if self.g2_0 > 0.5 {
            return Err(Error::param("g2_0", "one extra photon per pulse gives at most 0.5"));
        }
        let escape = self.extra_photon_probability() / self.p_double;
        if escape > 1.0 {
            return Err(Error::param(
                "g2_0",
                format!("needs more extra photons than p_double = {} allows", self.p_double),
            ));
        }
        Ok(HbtModel { p_double: self.p_double, escape })
    }

    /// Photon density of the main emission at absolute time `t` after the
    /// excitation pulse.
    pub fn envelope(&self, t: f64) -> f64 {
        if t < self.desync_ns {
            0.0
        } else {
            self.gamma() * (-(t - self.desync_ns) / self.lifetime_ns).exp()
        }
    }
}

/// Inverse of `g = 2q/(1+q)²` on the branch q ∈ [0, 1].
pub fn q_from_g2(g: f64) -> f64 {
    if g <= 0.0 {
        return 0.0;
    }
    let a = 1.0 / g - 1.0;
    1.0 / (a + (a * a - 1.0).max(0.0).sqrt())
}

/// Two-photon emission per pulse: a re-excitation occurs with `p_double`
/// and its first photon leaves the emitter in a detectable mode with
/// probability `escape`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HbtModel {
    pub p_double: f64,
    pub escape: f64,
}

impl HbtModel {
    pub fn extra_photon_probability(&self) -> f64 {
        self.p_double * self.escape
    }

    /// Center-peak area relative to an outer peak.
    pub fn center_area(&self) -> f64 {
        let q = self.extra_photon_probability();
        2.0 * q / ((1.0 + q) * (1.0 + q))
    }

    /// Pulsed autocorrelation comb, normalized so every outer peak has unit
    /// area.
    pub fn trace(&self, lifetime_ns: f64, rep_period_ns: f64, grid: &TimeGrid) -> Result<CorrelationTrace> {
        if !(lifetime_ns > 0.0) {
            return Err(Error::param("lifetime_ns", "must be positive"));
        }
        if rep_period_ns < 3.0 * lifetime_ns {
            return Err(Error::param(
                "rep_period_ns",
                "peaks overlap; need at least three lifetimes between pulses",
            ));
        }
        if grid.step() > lifetime_ns / 10.0 {
            return Err(Error::InvalidGrid(format!(
                "step {} ns is coarser than lifetime/10",
                grid.step()
            )));
        }
        let half = grid.half_width();
        let kmax = (half / rep_period_ns).ceil() as i64 + 1;
        let center = self.center_area();
        let values = grid
            .points()
            .map(|t| {
                (-kmax..=kmax)
                    .map(|k| {
                        let area = if k == 0 { center } else { 1.0 };
                        let d = (t - k as f64 * rep_period_ns).abs();
                        area * (-d / lifetime_ns).exp() / (2.0 * lifetime_ns)
                    })
                    .sum()
            })
            .collect();
        CorrelationTrace::new(grid.clone(), values, Normalization::Density, half)
    }
}

/// HBT comb for one emitter; the center area is its configured `g2_0`
/// (zero without double excitation).
pub fn hbt_g2_trace(p: &EmitterParams, rep_period_ns: f64, grid: &TimeGrid) -> Result<CorrelationTrace> {
    p.validate()?;
    p.hbt_model()?.trace(p.lifetime_ns, rep_period_ns, grid)
}

/// Uniform grid `t_i = (i − n) · step`, i = 0..=2n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    step: f64,
    n_half: usize,
}

impl TimeGrid {
    pub fn symmetric(step_ns: f64, half_width_ns: f64) -> Result<Self> {
        if !(step_ns > 0.0) || !(half_width_ns > 0.0) {
            return Err(Error::InvalidGrid("step and half width must be positive".into()));
        }
        let n = half_width_ns / step_ns;
        let n_half = n.round() as usize;
        if (n - n_half as f64).abs() > 1e-6 || n_half == 0 {
            return Err(Error::InvalidGrid(format!(
                "half width {half_width_ns} is not a multiple of step {step_ns}"
            )));
        }
        Ok(TimeGrid { step: step_ns, n_half })
    }

    /// The default 0.1 ns grid spanning the acquisition window.
    pub fn default_for(tau_lim_ns: f64) -> Result<Self> {
        TimeGrid::symmetric(DEFAULT_GRID_STEP_NS, tau_lim_ns)
    }

    /// Accepts explicit sample points; they must be uniform and symmetric
    /// about zero.
    pub fn from_points(points: &[f64]) -> Result<Self> {
        if points.len() < 3 || points.len() % 2 == 0 {
            return Err(Error::InvalidGrid("need an odd number of at least three points".into()));
        }
        let n_half = points.len() / 2;
        let step = points[1] - points[0];
        if !(step > 0.0) {
            return Err(Error::InvalidGrid("points must increase".into()));
        }
        for (i, &t) in points.iter().enumerate() {
            let expect = (i as f64 - n_half as f64) * step;
            if (t - expect).abs() > 1e-9 * step.max(1.0) {
                return Err(Error::InvalidGrid(format!(
                    "point {i} at {t} breaks the uniform grid symmetric about zero"
                )));
            }
        }
        Ok(TimeGrid { step, n_half })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn half_width(&self) -> f64 {
        self.step * self.n_half as f64
    }

    pub fn len(&self) -> usize {
        2 * self.n_half + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> f64 {
        (i as f64 - self.n_half as f64) * self.step
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Density,
    Counts,
}

/// A second-order correlation function sampled on a symmetric grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTrace {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub normalization: Normalization,
    pub tau_lim_ns: f64,
}

impl CorrelationTrace {
    pub fn new(grid: TimeGrid, values: Vec<f64>, normalization: Normalization, tau_lim_ns: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidParameter {
                name: "values".into(),
                reason: format!("{v} is negative or not a number"),
            });
        }
        if !(tau_lim_ns > 0.0) {
            return Err(Error::param("tau_lim_ns", "must be positive"));
        }
        Ok(CorrelationTrace { grid, values, normalization, tau_lim_ns })
    }

    pub fn from_fn(grid: TimeGrid, tau_lim_ns: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().map(f).collect();
        CorrelationTrace::new(grid, values, Normalization::Density, tau_lim_ns)
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        if !(k > 0.0) {
            return Err(Error::param("k", "scale must be positive"));
        }
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= k);
        Ok(out)
    }

    /// Linear interpolation; zero outside the grid.
    pub fn value_at(&self, t: f64) -> f64 {
        let x = t / self.grid.step + self.grid.n_half as f64;
        if x < 0.0 || x > (self.grid.len() - 1) as f64 {
            return 0.0;
        }
        let i = (x.floor() as usize).min(self.grid.len() - 2);
        let f = x - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    /// Trapezoid integral over [lo, hi] of the piecewise-linear interpolant,
    /// including partial intervals at either end.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let h = self.grid.half_width();
        let (lo, hi) = (lo.max(-h), hi.min(h));
        if hi <= lo {
            return 0.0;
        }
        let step = self.grid.step;
        let n = self.grid.n_half as f64;
        let first = ((lo / step + n).floor() as usize).min(self.grid.len() - 2);
        let last = ((hi / step + n).ceil() as usize).clamp(1, self.grid.len() - 1);
        let mut acc = 0.0;
        for i in first..last {
            let (t0, t1) = (self.grid.point(i), self.grid.point(i + 1));
            let (a, b) = (t0.max(lo), t1.min(hi));
            if b <= a {
                continue;
            }
            acc += 0.5 * (b - a) * (self.value_at(a) + self.value_at(b));
        }
        acc
    }

    /// Integral over [−T, T].
    pub fn window(&self, t: f64) -> f64 {
        self.integral(-t, t)
    }

    /// Integrals over consecutive bins with the given edges.
    pub fn bin_integrals(&self, edges: &[f64]) -> Vec<f64> {
        edges.windows(2).map(|w| self.integral(w[0], w[1])).collect()
    }
}

fn check_window(t: f64, tau_lim: f64) -> Result<()> {
    if !(t >= 0.0) || t > tau_lim + 1e-9 {
        return Err(Error::param("window", format!("T = {t} ns must lie in [0, {tau_lim}]")));
    }
    Ok(())
}

fn check_shared(a: &CorrelationTrace, b: &CorrelationTrace) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::InvalidGrid("traces do not share a grid".into()));
    }
    Ok(())
}

/// `V = 1 − ∫G_I / ∫G_D` over [−T, T].
pub fn visibility(g_i: &CorrelationTrace, g_d: &CorrelationTrace, window_ns: f64) -> Result<f64> {
    check_shared(g_i, g_d)?;
    check_window(window_ns, g_d.tau_lim_ns)?;
    let d = g_d.window(window_ns);
    if !(d > 0.0) {
        return Err(Error::Undefined("no distinguishable coincidences in the window".into()));
    }
    Ok(1.0 - g_i.window(window_ns) / d)
}

/// Fraction of distinguishable coincidences inside [−T, T].
pub fn timebin_capture(g_d: &CorrelationTrace, window_ns: f64) -> Result<f64> {
    check_window(window_ns, g_d.tau_lim_ns)?;
    let total = g_d.window(g_d.tau_lim_ns);
    if !(total > 0.0) {
        return Err(Error::Undefined("trace has no weight".into()));
    }
    Ok((g_d.window(window_ns) / total).clamp(0.0, 1.0))
}

/// `E[cos(2π (f1 − f2) τ)]` over the slow frequency offsets of both
/// emitters.
#[derive(Debug, Clone)]
pub struct DetuningFactor {
    mean_diff: f64,
    var_sum: f64,
    truncated: Option<[Vec<(f64, f64)>; 2]>,
}

impl DetuningFactor {
    pub fn new(p1: &EmitterParams, p2: &EmitterParams) -> Self {
        let mean_diff = p1.mean_detuning_mhz - p2.mean_detuning_mhz;
        let var_sum = p1.diffusion_sigma_mhz.powi(2) + p2.diffusion_sigma_mhz.powi(2);
        let truncated = if p1.excitation_bandwidth_mhz.is_some() || p2.excitation_bandwidth_mhz.is_some() {
            Some([offset_rule(p1), offset_rule(p2)])
        } else {
            None
        };
        DetuningFactor { mean_diff, var_sum, truncated }
    }

    pub fn eval(&self, tau: f64) -> f64 {
        match &self.truncated {
            None => {
                (2.0 * PI * self.mean_diff * MHZ_NS * tau).cos()
                    * (-2.0 * PI * PI * self.var_sum * MHZ_NS * MHZ_NS * tau * tau).exp()
            }
            Some([r1, r2]) => {
                let cf = |rule: &[(f64, f64)]| {
                    rule.iter().fold((0.0, 0.0), |(re, im), (f, w)| {
                        let ph = 2.0 * PI * f * MHZ_NS * tau;
                        (re + w * ph.cos(), im + w * ph.sin())
                    })
                };
                let (a, b) = (cf(r1), cf(r2));
                a.0 * b.0 + a.1 * b.1
            }
        }
    }
}

// Normalized quadrature over one emitter's (possibly truncated) offset
// distribution, as (frequency, weight) pairs.
fn offset_rule(p: &EmitterParams) -> Vec<(f64, f64)> {
    let m = p.mean_detuning_mhz;
    let s = p.diffusion_sigma_mhz;
    if s == 0.0 {
        return vec![(m, 1.0)];
    }
    let half = p.excitation_bandwidth_mhz.map_or(8.0 * s, |bw| (bw / 2.0).min(8.0 * s));
    let (x, w) = quad::gauss_legendre(96);
    let mut pts: Vec<(f64, f64)> = x
        .iter()
        .zip(&w)
        .map(|(x, w)| {
            let f = m + half * x;
            (f, w * (-0.5 * ((f - m) / s).powi(2)).exp())
        })
        .collect();
    let norm: f64 = pts.iter().map(|p| p.1).sum();
    pts.iter_mut().for_each(|p| p.1 /= norm);
    pts
}

/// Pair interference amplitude factor `M · D(τ)`: polarisation overlap,
/// dephasing and detuning, without the emission envelopes.
#[derive(Debug, Clone)]
pub struct InterferenceFactor {
    overlap: f64,
    dephasing_rate: f64,
    detuning: DetuningFactor,
}

impl InterferenceFactor {
    pub fn new(p1: &EmitterParams, p2: &EmitterParams) -> Self {
        let theta = (p1.polarization_mismatch_deg - p2.polarization_mismatch_deg).to_radians();
        InterferenceFactor {
            overlap: theta.cos().powi(2),
            dephasing_rate: 2.0 * PI * (p1.pure_dephasing_mhz + p2.pure_dephasing_mhz) * MHZ_NS,
            detuning: DetuningFactor::new(p1, p2),
        }
    }

    pub fn overlap(&self) -> f64 {
        self.overlap
    }

    /// Factor averaged over the slow offsets.
    pub fn eval(&self, tau: f64) -> f64 {
        self.overlap * (-self.dephasing_rate * tau.abs()).exp() * self.detuning.eval(tau)
    }

    /// Factor for one shot with known emitter frequencies.
    pub fn eval_fixed(&self, tau: f64, f1_mhz: f64, f2_mhz: f64) -> f64 {
        self.overlap
            * (-self.dephasing_rate * tau.abs()).exp()
            * (2.0 * PI * (f1_mhz - f2_mhz) * MHZ_NS * tau).cos()
    }
}

// ∫_lo^hi C e^{-k a} da, evaluated without overflow.
fn exp_integral(log_c: f64, k: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let head = (log_c - k * lo).exp();
    if k == 0.0 {
        head * (hi - lo)
    } else {
        head * -(-k * (hi - lo)).exp_m1() / k
    }
}

// ∫ P1(a) P2(a+τ) da with both times in [0, L].
fn envelope_overlap(p1: &EmitterParams, p2: &EmitterParams, tau: f64, l: f64) -> f64 {
    let (g1, g2) = (p1.gamma(), p2.gamma());
    let lo = 0.0f64.max(-tau).max(p1.desync_ns).max(p2.desync_ns - tau);
    let hi = l.min(l - tau);
    let log_c = (g1 * g2).ln() + g1 * p1.desync_ns + g2 * (p2.desync_ns - tau);
    exp_integral(log_c, g1 + g2, lo, hi)
}

// ∫ sqrt(P1 P2)(a) sqrt(P1 P2)(a+τ) da with both times in [0, L].
fn coherent_overlap(p1: &EmitterParams, p2: &EmitterParams, tau: f64, l: f64) -> f64 {
    let (g1, g2) = (p1.gamma(), p2.gamma());
    let k = g1 + g2;
    let dm = p1.desync_ns.max(p2.desync_ns);
    let lo = 0.0f64.max(-tau).max(dm).max(dm - tau);
    let hi = l.min(l - tau);
    let log_c = (g1 * g2).ln() + g1 * p1.desync_ns + g2 * p2.desync_ns - 0.5 * k * tau;
    exp_integral(log_c, k, lo, hi)
}

// Coincidences between an in-pulse extra photon of `from` and the main
// photon of `other`, symmetrized over detector assignment.
fn extra_cross(from: &EmitterParams, other: &EmitterParams, tau: f64, l: f64) -> f64 {
    let t0 = from.desync_ns;
    if !(0.0..=l).contains(&t0) {
        return 0.0;
    }
    0.5 * (sampled_envelope(other, t0 + tau, l) + sampled_envelope(other, t0 - tau, l))
}

// Emission density restricted to [0, L]; at a jump the sample is the mean
// of the one-sided limits so the trapezoid rule integrates it correctly.
fn sampled_envelope(p: &EmitterParams, t: f64, l: f64) -> f64 {
    const EDGE: f64 = 1e-9;
    let start = p.desync_ns.max(0.0);
    if t < start - EDGE || t > l + EDGE {
        return 0.0;
    }
    let v = p.gamma() * (-(t.max(p.desync_ns) - p.desync_ns) / p.lifetime_ns).exp();
    if (t - start).abs() <= EDGE || (t - l).abs() <= EDGE {
        0.5 * v
    } else {
        v
    }
}

fn hbt_shape(p: &EmitterParams, tau: f64, l: f64) -> f64 {
    let t0 = p.desync_ns;
    if !(0.0..=l).contains(&t0) || tau.abs() > l - t0 + 1e-9 {
        return 0.0;
    }
    let v = 0.5 * p.gamma() * (-tau.abs() * p.gamma()).exp();
    if (tau.abs() - (l - t0)).abs() <= 1e-9 {
        0.5 * v
    } else {
        v
    }
}

/// The separate pieces of the HOM correlation model on one grid.
#[derive(Debug, Clone)]
pub struct HomKernels {
    pub grid: TimeGrid,
    pub tau_lim_ns: f64,
    /// Distinguishable two-photon kernel.
    pub g0: Vec<f64>,
    /// Interference kernel (non-positive).
    pub gint: Vec<f64>,
    /// Multiphoton cross pairs, already weighted by the extra-photon
    /// probabilities; part of the distinguishable kernel.
    pub cross: Vec<f64>,
    /// `g2_0,1 · HBT1 + g2_0,2 · HBT2`.
    pub hbt: Vec<f64>,
}

pub fn hom_kernels(p1: &EmitterParams, p2: &EmitterParams, grid: &TimeGrid, tau_lim_ns: f64) -> Result<HomKernels> {
    p1.validate()?;
    p2.validate()?;
    if !(tau_lim_ns > 0.0) {
        return Err(Error::param("tau_lim_ns", "must be positive"));
    }
    let l = tau_lim_ns;
    let inter = InterferenceFactor::new(p1, p2);
    let (q1, q2) = (p1.extra_photon_probability(), p2.extra_photon_probability());
    let n = grid.len();
    let mut k = HomKernels {
        grid: grid.clone(),
        tau_lim_ns,
        g0: Vec::with_capacity(n),
        gint: Vec::with_capacity(n),
        cross: Vec::with_capacity(n),
        hbt: Vec::with_capacity(n),
    };
    for tau in grid.points() {
        k.g0.push(0.5 * (envelope_overlap(p1, p2, tau, l) + envelope_overlap(p2, p1, tau, l)));
        k.gint.push(-inter.eval(tau) * coherent_overlap(p1, p2, tau, l));
        k.cross.push(q1 * extra_cross(p1, p2, tau, l) + q2 * extra_cross(p2, p1, tau, l));
        k.hbt.push(p1.g2_0 * hbt_shape(p1, tau, l) + p2.g2_0 * hbt_shape(p2, tau, l));
    }
    Ok(k)
}

impl HomKernels {
    /// `(G_I, G_D)` with `G_X = ½ 𝒢_X + ¼ (HBT1 + HBT2)`.
    pub fn traces(&self) -> Result<(CorrelationTrace, CorrelationTrace)> {
        let d: Vec<f64> = (0..self.grid.len())
            .map(|i| 0.5 * (self.g0[i] + self.cross[i]) + 0.25 * self.hbt[i])
            .collect();
        let ind: Vec<f64> = (0..self.grid.len())
            .map(|i| (d[i] + 0.5 * self.gint[i]).max(0.0))
            .collect();
        Ok((
            CorrelationTrace::new(self.grid.clone(), ind, Normalization::Density, self.tau_lim_ns)?,
            CorrelationTrace::new(self.grid.clone(), d, Normalization::Density, self.tau_lim_ns)?,
        ))
    }

    /// Single-photon interference visibility in [−T, T], ignoring
    /// multiphoton terms.
    pub fn mean_visibility(&self, window_ns: f64) -> Result<f64> {
        check_window(window_ns, self.tau_lim_ns)?;
        let trace = |v: &[f64]| {
            CorrelationTrace::new(self.grid.clone(), v.to_vec(), Normalization::Density, self.tau_lim_ns)
        };
        let g0 = trace(&self.g0)?;
        let neg: Vec<f64> = self.gint.iter().map(|v| -v).collect();
        let gi = trace(&neg)?;
        let d = g0.window(window_ns);
        if !(d > 0.0) {
            return Err(Error::Undefined("no coincidences in the window".into()));
        }
        Ok(gi.window(window_ns) / d)
    }
}

/// HOM cross-correlations `(G_I, G_D)` for two emitters.
pub fn hom_correlations(
    p1: &EmitterParams,
    p2: &EmitterParams,
    grid: &TimeGrid,
    tau_lim_ns: f64,
) -> Result<(CorrelationTrace, CorrelationTrace)> {
    hom_kernels(p1, p2, grid, tau_lim_ns)?.traces()
}

/// Window-filtered interference visibility v̄(T) on the default grid.
pub fn mean_interference_visibility(p1: &EmitterParams, p2: &EmitterParams, window_ns: f64, tau_lim_ns: f64) -> Result<f64> {
    let grid = TimeGrid::default_for(tau_lim_ns)?;
    hom_kernels(p1, p2, &grid, tau_lim_ns)?.mean_visibility(window_ns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::default_for(DEFAULT_TAU_LIM_NS).unwrap()
    }

    #[test]
    fn q_inverts_g2() {
        for g in [0.0076, 0.0117, 0.2, 0.5] {
            let q = q_from_g2(g);
            assert!((2.0 * q / (1.0 + q).powi(2) - g).abs() < 1e-12);
        }
        assert_eq!(q_from_g2(0.0), 0.0);
    }

    #[test]
    fn ideal_pair_has_full_dip() {
        let p = EmitterParams::ideal(65.0);
        let (gi, gd) = hom_correlations(&p, &p, &grid(), 130.0).unwrap();
        assert!(gi.values.iter().all(|v| v.abs() < 1e-15));
        for t in [1.0, 5.0, 50.0, 130.0] {
            assert!((visibility(&gi, &gd, t).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_polarisation_removes_interference() {
        let p1 = EmitterParams::tc1();
        let p2 = EmitterParams { polarization_mismatch_deg: 90.0, ..EmitterParams::tc2() };
        let p1 = EmitterParams { polarization_mismatch_deg: 0.0, ..p1 };
        let (gi, gd) = hom_correlations(&p1, &p2, &grid(), 130.0).unwrap();
        for (a, b) in gi.values.iter().zip(&gd.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn distinguishable_kernel_is_normalized_untruncated() {
        let p1 = EmitterParams::ideal(10.0);
        let p2 = EmitterParams::ideal(12.0);
        let g = TimeGrid::symmetric(0.05, 400.0).unwrap();
        let k = hom_kernels(&p1, &p2, &g, 400.0).unwrap();
        let tr = CorrelationTrace::new(g, k.g0, Normalization::Density, 400.0).unwrap();
        assert!((tr.window(400.0) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn capture_of_laplace_trace() {
        let life = 10.0;
        let g = TimeGrid::symmetric(0.01, 400.0).unwrap();
        let tr = CorrelationTrace::from_fn(g, 400.0, |t| (-t.abs() / life).exp()).unwrap();
        for t in [1.0, 6.931, 20.0] {
            let exact = 1.0 - (-t / life).exp();
            assert!((timebin_capture(&tr, t).unwrap() - exact).abs() < 1e-6);
        }
        assert_eq!(timebin_capture(&tr, 0.0).unwrap(), 0.0);
        assert!((timebin_capture(&tr, 400.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn partial_interval_integral_is_exact_for_linear() {
        let g = TimeGrid::symmetric(0.1, 2.0).unwrap();
        let tr = CorrelationTrace::from_fn(g, 2.0, |t| 1.0 + 0.25 * t).unwrap();
        let v = tr.integral(-0.37, 1.234);
        let exact = |t: f64| t + 0.125 * t * t;
        assert!((v - (exact(1.234) - exact(-0.37))).abs() < 1e-13);
    }

    #[test]
    fn grid_checks() {
        assert!(TimeGrid::from_points(&[-1.0, 0.0, 1.0]).is_ok());
        assert!(matches!(TimeGrid::from_points(&[-1.0, 0.0, 2.0]), Err(Error::InvalidGrid(_))));
        assert!(matches!(TimeGrid::from_points(&[0.0, 1.0, 2.0]), Err(Error::InvalidGrid(_))));
        assert!(TimeGrid::symmetric(0.3, 1.0).is_err());
    }

    #[test]
    fn visibility_errors() {
        let (gi, gd) = hom_correlations(&EmitterParams::tc1(), &EmitterParams::tc2(), &grid(), 130.0).unwrap();
        assert!(matches!(visibility(&gi, &gd, 0.0), Err(Error::Undefined(_))));
        assert!(visibility(&gi, &gd, 131.0).is_err());
        let other = TimeGrid::symmetric(0.2, 130.0).unwrap();
        let (gi2, _) = hom_correlations(&EmitterParams::tc1(), &EmitterParams::tc2(), &other, 130.0).unwrap();
        assert!(matches!(visibility(&gi2, &gd, 5.0), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn hbt_center_area() {
        let g = TimeGrid::symmetric(0.5, 5000.0).unwrap();
        let tr = hbt_g2_trace(&EmitterParams::tc1(), 2000.0, &g).unwrap();
        let center = tr.integral(-1000.0, 1000.0);
        let outer = tr.integral(1000.0, 3000.0);
        assert!((center / outer - 0.0076).abs() < 2e-4);
        let none = EmitterParams { p_double: 0.0, ..EmitterParams::tc1() };
        let tr = hbt_g2_trace(&none, 2000.0, &g).unwrap();
        assert!(tr.integral(-1000.0, 1000.0) < 1e-5);
        let coarse = TimeGrid::symmetric(10.0, 1000.0).unwrap();
        assert!(matches!(
            hbt_g2_trace(&EmitterParams::tc1(), 500.0, &coarse),
            Err(Error::InvalidGrid(_))
        ));
    }

    #[test]
    fn truncated_detuning_matches_gaussian_for_wide_band() {
        let p1 = EmitterParams { excitation_bandwidth_mhz: Some(1000.0), ..EmitterParams::tc1() };
        let p2 = EmitterParams { excitation_bandwidth_mhz: Some(1000.0), ..EmitterParams::tc2() };
        let a = DetuningFactor::new(&p1, &p2);
        let b = DetuningFactor::new(&EmitterParams::tc1(), &EmitterParams::tc2());
        for t in [0.0, 3.0, 10.0, 40.0] {
            assert!((a.eval(t) - b.eval(t)).abs() < 1e-9);
        }
    }
}
