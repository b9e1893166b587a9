//! Projected rate and fidelity of an optimized two-node link.

use serde::{Deserialize, Serialize};

use crate::emitter::{self, CorrelationTrace, EmitterParams, TimeGrid, FWHM_PER_SIGMA};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub label: String,
    pub time_ns: f64,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepBudget {
    pub steps: Vec<Step>,
}

impl StepBudget {
    /// Minimum step times of one protocol attempt.
    pub fn projected() -> Self {
        let s = |label: &str, time_ns, count| Step { label: label.into(), time_ns, count };
        StepBudget {
            steps: vec![
                s("Initialization", 100.0, 1),
                s("Excitation", 1.0, 2),
                s("Detection", 30.0, 2),
                s("Pi pulse", 10.0, 1),
                s("Signal latency", 10.0, 2),
                s("Feedback", 100.0, 1),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::param("steps", "budget is empty"));
        }
        for s in &self.steps {
            if !(s.time_ns > 0.0) || !s.time_ns.is_finite() {
                return Err(Error::param("time_ns", format!("step '{}' needs a positive time", s.label)));
            }
            if s.count == 0 {
                return Err(Error::param("count", format!("step '{}' needs count ≥ 1", s.label)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Efficiency {
    pub label: String,
    pub efficiency: f64,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EfficiencyBudget {
    pub elements: Vec<Efficiency>,
}

impl EfficiencyBudget {
    pub fn projected() -> Self {
        let e = |label: &str, efficiency, count| Efficiency { label: label.into(), efficiency, count };
        EfficiencyBudget {
            elements: vec![
                e("BK intrinsic", 0.5, 1),
                e("Excitation", 0.99, 2),
                e("Emission", 0.99, 2),
                e("Detector", 0.99, 2),
                e("Chip-fibre", 0.97, 2),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::param("elements", "budget is empty"));
        }
        for e in &self.elements {
            if !(e.efficiency > 0.0 && e.efficiency <= 1.0) {
                return Err(Error::param("efficiency", format!("'{}' outside (0, 1]", e.label)));
            }
            if e.count == 0 {
                return Err(Error::param("count", format!("'{}' needs count ≥ 1", e.label)));
            }
        }
        Ok(())
    }
}

/// Total attempt time in ns and the attempt rate in Hz.
pub fn repetition_rate(b: &StepBudget) -> Result<(f64, f64)> {
    b.validate()?;
    let total: f64 = b.steps.iter().map(|s| s.time_ns * s.count as f64).sum();
    Ok((total, 1e9 / total))
}

pub fn success_probability(b: &EfficiencyBudget) -> Result<f64> {
    b.validate()?;
    Ok(b.elements.iter().map(|e| e.efficiency.powi(e.count as i32)).product())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionParams {
    pub lifetime_ns: f64,
    pub intrinsic_dephasing_khz: f64,
    /// Full width at half maximum of the slow diffusion.
    pub slow_diffusion_mhz: f64,
    pub pulse_width_ps: f64,
    /// Overrides the pulse-width estimate when set.
    pub p_double: Option<f64>,
    /// Metadata only.
    pub field_mt: f64,
    pub tau_lim_ns: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            lifetime_ns: 10.0,
            intrinsic_dephasing_khz: 230.0,
            slow_diffusion_mhz: 20.0,
            pulse_width_ps: 83.0,
            p_double: None,
            field_mt: 500.0,
            tau_lim_ns: 130.0,
        }
    }
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("lifetime_ns", self.lifetime_ns),
            ("pulse_width_ps", self.pulse_width_ps),
            ("tau_lim_ns", self.tau_lim_ns),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(n, "must be positive"));
            }
        }
        for (n, v) in [
            ("intrinsic_dephasing_khz", self.intrinsic_dephasing_khz),
            ("slow_diffusion_mhz", self.slow_diffusion_mhz),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(n, "must be non-negative"));
            }
        }
        if let Some(p) = self.p_double {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::param("p_double", "outside [0, 1)"));
            }
        }
        if self.tau_lim_ns < 3.0 * self.lifetime_ns {
            return Err(Error::param("tau_lim_ns", "shorter than three lifetimes"));
        }
        Ok(())
    }

    /// Re-excitation probability during the pulse: the pulse lasts
    /// `w/τ` lifetimes and re-excitation needs an emission in roughly the
    /// first half of it, which in turn is half the time bright.
    pub fn p_double(&self) -> f64 {
        self.p_double
            .unwrap_or(self.pulse_width_ps * 1e-3 / (4.0 * self.lifetime_ns))
    }

    pub fn emitter(&self) -> EmitterParams {
        EmitterParams {
            pure_dephasing_mhz: self.intrinsic_dephasing_khz * 1e-3,
            diffusion_sigma_mhz: self.slow_diffusion_mhz / FWHM_PER_SIGMA,
            ..EmitterParams::ideal(self.lifetime_ns)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub timebin_ns: f64,
    pub visibility: f64,
    pub fidelity: f64,
    pub rate_hz: f64,
}

/// Time bin capturing `fraction` of the distinguishable coincidences,
/// resolved by bisection to 1 ps.
pub fn invert_capture(g_d: &CorrelationTrace, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param("fraction", format!("{fraction} outside (0, 1]")));
    }
    let lim = g_d.tau_lim_ns;
    if fraction == 1.0 {
        return Ok(lim);
    }
    let (mut lo, mut hi) = (0.0, lim);
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if emitter::timebin_capture(g_d, mid)? < fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

pub fn fidelity_rate_curve(
    p: &ProjectionParams,
    sb: &StepBudget,
    eb: &EfficiencyBudget,
    fractions: &[f64],
) -> Result<Vec<CurvePoint>> {
    p.validate()?;
    let (_, rep) = repetition_rate(sb)?;
    let success = success_probability(eb)?;
    let e = p.emitter();
    let grid = TimeGrid::symmetric((p.lifetime_ns / 100.0).min(0.1), p.tau_lim_ns)?;
    let kernels = emitter::hom_kernels(&e, &e, &grid, p.tau_lim_ns)?;
    let (_, g_d) = kernels.traces()?;
    let pd = p.p_double();
    fractions
        .iter()
        .map(|&f| {
            let t = invert_capture(&g_d, f)?;
            let v = kernels.mean_visibility(t)?;
            Ok(CurvePoint {
                fraction: f,
                timebin_ns: t,
                visibility: v,
                fidelity: ((1.0 + v) / 2.0).min(1.0) - pd / 2.0,
                rate_hz: rep * success * f,
            })
        })
        .collect()
}
