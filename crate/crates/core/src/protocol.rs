//! Barrett-Kok heralded entanglement as a composition of channels on the
//! two electron spins, the Bell-pair fidelity estimator and the teleported
//! CNOT.
//!
//! Spin A is qubit 0 and spin B qubit 1; the bright (optically cycling)
//! state is `|1⟩`. At the beamsplitter A's port maps to `(D1 + D2)/√2` and
//! B's to `(D1 − D2)/√2`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emitter::{self, EmitterParams, TimeGrid, DEFAULT_TAU_LIM_NS};
use crate::error::{Error, Result};
use crate::harness::{Detector, OpticalPath};
use crate::qmath::{
    self, apply_channel, apply_gate, bell, fidelity_to_pure, herald, measure, Basis, CMatrix, DensityMatrix, GateSpec,
    KrausChannel, C64,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeraldPattern {
    pub early: Detector,
    pub late: Detector,
}

impl HeraldPattern {
    pub fn all() -> [HeraldPattern; 4] {
        use Detector::*;
        [(D1, D1), (D1, D2), (D2, D1), (D2, D2)].map(|(early, late)| HeraldPattern { early, late })
    }

    pub fn same_detector(&self) -> bool {
        self.early == self.late
    }
}

/// Same detector in both rounds heralds `Ψ⁺`, different detectors `Ψ⁻`.
pub fn herald_target(pattern: HeraldPattern) -> Vec<C64> {
    if pattern.same_detector() {
        bell::psi_plus()
    } else {
        bell::psi_minus()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateErrorModel {
    /// Depolarizing channel after each rotation with the matching average
    /// gate fidelity.
    Depolarizing,
    /// Systematic over-rotation with the matching average gate fidelity.
    Coherent,
}

/// How the two-photon interference enters the heralded coherence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityProfile {
    /// v̄(T) computed from the emitter models.
    FromEmitters,
    /// A fixed window-filtered visibility, valid only for `timebin_ns`.
    Fixed { value: f64, timebin_ns: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BkModelParams {
    pub emitters: [EmitterParams; 2],
    pub paths: [OpticalPath; 2],
    pub gate_fidelity: f64,
    pub init_fidelity: f64,
    pub dark_rate_hz: f64,
    /// Detection gate per round.
    pub gate_ns: f64,
    pub visibility: VisibilityProfile,
    pub timebin_ns: f64,
    pub tau_lim_ns: f64,
    pub pi_pulse_ns: f64,
    pub repetition_rate_hz: f64,
    pub gate_error: GateErrorModel,
}

impl BkModelParams {
    pub fn measured() -> Self {
        BkModelParams {
            emitters: [EmitterParams::tc1(), EmitterParams::tc2()],
            paths: [OpticalPath::measured(), OpticalPath::measured()],
            gate_fidelity: 0.98575,
            init_fidelity: 0.983,
            dark_rate_hz: 10.0,
            gate_ns: DEFAULT_TAU_LIM_NS,
            visibility: VisibilityProfile::FromEmitters,
            timebin_ns: 40.0,
            tau_lim_ns: DEFAULT_TAU_LIM_NS,
            pi_pulse_ns: 50.0,
            repetition_rate_hz: 11_800.0,
            gate_error: GateErrorModel::Depolarizing,
        }
    }

    /// Perfect spins, emitters and optics.
    pub fn ideal() -> Self {
        BkModelParams {
            emitters: [EmitterParams::ideal(65.0), EmitterParams::ideal(65.0)],
            paths: [OpticalPath::lossless(), OpticalPath::lossless()],
            gate_fidelity: 1.0,
            init_fidelity: 1.0,
            dark_rate_hz: 0.0,
            ..BkModelParams::measured()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.emitters {
            e.validate()?;
        }
        for p in &self.paths {
            p.validate()?;
        }
        for (n, v) in [("gate_fidelity", self.gate_fidelity), ("init_fidelity", self.init_fidelity)] {
            if !(0.5..=1.0).contains(&v) {
                return Err(Error::param(n, format!("{v} outside [0.5, 1]")));
            }
        }
        if !(self.dark_rate_hz >= 0.0) || !(self.gate_ns > 0.0) || !(self.repetition_rate_hz > 0.0) {
            return Err(Error::param("bk", "rates and gate must be positive"));
        }
        if !(self.tau_lim_ns > 0.0) || !(self.timebin_ns > 0.0) || self.timebin_ns > self.tau_lim_ns {
            return Err(Error::param(
                "timebin_ns",
                format!("T = {} must lie in (0, {}]", self.timebin_ns, self.tau_lim_ns),
            ));
        }
        if let VisibilityProfile::Fixed { value, timebin_ns } = self.visibility {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::param("visibility", "must lie in [0, 1]"));
            }
            if (timebin_ns - self.timebin_ns).abs() > 1e-9 {
                return Err(Error::param(
                    "visibility",
                    format!("profile is for T = {timebin_ns} ns, model uses {} ns", self.timebin_ns),
                ));
            }
        }
        Ok(())
    }

    pub fn mean_visibility(&self) -> Result<f64> {
        match self.visibility {
            VisibilityProfile::Fixed { value, .. } => Ok(value),
            VisibilityProfile::FromEmitters => {
                let strip = |e: &EmitterParams| EmitterParams { g2_0: 0.0, p_double: 0.0, ..e.clone() };
                emitter::mean_interference_visibility(
                    &strip(&self.emitters[0]),
                    &strip(&self.emitters[1]),
                    self.timebin_ns,
                    self.tau_lim_ns,
                )
                .map(|v| v.clamp(0.0, 1.0))
            }
        }
    }

    /// Dark-click probability of one detector in one gate.
    pub fn dark_probability(&self) -> f64 {
        -(-self.dark_rate_hz * self.gate_ns * 1e-9).exp_m1()
    }

    /// Click probability of one excitation of a bright spin of module k.
    pub fn arm_detection_probability(&self, k: usize) -> f64 {
        let e = &self.emitters[k];
        self.paths[k].excitation_probability() * (1.0 - e.br_radiative - e.br_nonradiative) * self.paths[k].transmission()
    }

    /// Fraction of distinguishable coincidences inside the time bin.
    pub fn timebin_capture(&self) -> Result<f64> {
        let grid = TimeGrid::default_for(self.tau_lim_ns)?;
        let (_, gd) = emitter::hom_correlations(&self.emitters[0], &self.emitters[1], &grid, self.tau_lim_ns)?;
        emitter::timebin_capture(&gd, self.timebin_ns)
    }

    /// Heralded pairs per second.
    pub fn rate_hz(&self) -> Result<f64> {
        Ok(self.arm_detection_probability(0)
            * self.arm_detection_probability(1)
            * self.timebin_capture()?
            * 0.5
            * self.repetition_rate_hz)
    }

    fn over_rotation(&self) -> f64 {
        // F_avg = 1 − (2/3) sin²(ε/2) for a rotation error ε
        2.0 * ((1.5 * (1.0 - self.gate_fidelity)).sqrt()).asin()
    }
}

// Output modes after loss and the beamsplitter. Each photonic mode m has a
// D1 copy at 2m and a D2 copy at 2m+1; traced modes follow.
const M_COMMON: usize = 0;
const M_PRIVATE_A: usize = 1;
const M_PRIVATE_B: usize = 2;
const M_EXTRA_A: usize = 3;
const M_EXTRA_B: usize = 4;
const DETECTED: usize = 5;
const LOSS_W: usize = 2 * DETECTED;
const LOSS_E: usize = LOSS_W + 2;
const ENV: usize = LOSS_E + 2;
const N_MODES: usize = ENV + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Created {
    Main,
    Extra,
    Flip,
}

struct Arm {
    excite: f64,
    branching: f64,
    double: f64,
    eta: f64,
    escape: f64,
}

impl Arm {
    fn new(p: &BkModelParams, k: usize) -> Result<Self> {
        let e = &p.emitters[k];
        Ok(Arm {
            excite: p.paths[k].excitation_probability(),
            branching: e.br_radiative + e.br_nonradiative,
            double: e.p_double,
            eta: p.paths[k].transmission(),
            escape: e.hbt_model()?.escape,
        })
    }

    /// Fates of a bright spin in one round: (spin after, amplitude, created
    /// excitations).
    fn fates(&self) -> Vec<(u8, f64, Vec<Created>)> {
        let (px, pd, b) = (self.excite, self.double, self.branching);
        let mut v = vec![(1, (1.0 - px).sqrt(), vec![])];
        v.push((1, (px * (1.0 - pd) * (1.0 - b)).sqrt(), vec![Created::Main]));
        v.push((0, (px * (1.0 - pd) * b).sqrt(), vec![Created::Flip]));
        v.push((1, (px * pd * (1.0 - b)).sqrt(), vec![Created::Extra, Created::Main]));
        v.push((0, (px * pd * b).sqrt(), vec![Created::Extra, Created::Flip]));
        v.retain(|f| f.1 > 0.0);
        v
    }

    // Creation operator of an excitation from arm k as a sum over modes.
    fn expand(&self, k: usize, what: Created, mu: f64) -> Vec<(usize, f64)> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let sign = if k == 0 { 1.0 } else { -1.0 };
        let port = |mode: usize, amp: f64| [(2 * mode, amp * s), (2 * mode + 1, sign * amp * s)];
        match what {
            Created::Main => {
                let private = if k == 0 { M_PRIVATE_A } else { M_PRIVATE_B };
                let mut v = Vec::with_capacity(5);
                v.extend(port(M_COMMON, (self.eta * mu).sqrt()));
                v.extend(port(private, (self.eta * (1.0 - mu)).sqrt()));
                v.push((LOSS_W + k, (1.0 - self.eta).sqrt()));
                v
            }
            Created::Extra => {
                let mode = if k == 0 { M_EXTRA_A } else { M_EXTRA_B };
                let t = self.eta * self.escape;
                let mut v = port(mode, t.sqrt()).to_vec();
                v.push((LOSS_E + k, (1.0 - t).sqrt()));
                v
            }
            Created::Flip => vec![(ENV + k, 1.0)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum PhotonOutcome {
    None,
    D1,
    D2,
    Both,
}

fn classify(occ: &[u8; N_MODES]) -> PhotonOutcome {
    let d1 = (0..DETECTED).any(|m| occ[2 * m] > 0);
    let d2 = (0..DETECTED).any(|m| occ[2 * m + 1] > 0);
    match (d1, d2) {
        (false, false) => PhotonOutcome::None,
        (true, false) => PhotonOutcome::D1,
        (false, true) => PhotonOutcome::D2,
        (true, true) => PhotonOutcome::Both,
    }
}

/// Emission-and-detection instrument of one round: Kraus operators on the
/// two spins for a click on `D1` only or `D2` only, including dark counts.
fn round_instrument(p: &BkModelParams, mu: f64) -> Result<[KrausChannel; 2]> {
    let arms = [Arm::new(p, 0)?, Arm::new(p, 1)?];
    let fates = [arms[0].fates(), arms[1].fates()];
    let dark_fate = vec![(0u8, 1.0, vec![])];
    // photonic state → 4×4 amplitude matrix (output spin, input spin)
    let mut kraus: HashMap<[u8; N_MODES], CMatrix> = HashMap::new();
    for input in 0..4usize {
        let spins = [(input & 1) as u8, ((input >> 1) & 1) as u8];
        let fa = if spins[0] == 1 { &fates[0] } else { &dark_fate };
        let fb = if spins[1] == 1 { &fates[1] } else { &dark_fate };
        for (sa, amp_a, ca) in fa {
            for (sb, amp_b, cb) in fb {
                let out_spin = (*sa as usize) | ((*sb as usize) << 1);
                let mut terms: HashMap<[u8; N_MODES], f64> = HashMap::new();
                terms.insert([0; N_MODES], amp_a * amp_b);
                let created = ca.iter().map(|c| (0, *c)).chain(cb.iter().map(|c| (1, *c)));
                for (k, what) in created {
                    let lin = arms[k].expand(k, what, mu);
                    let mut next = HashMap::with_capacity(terms.len() * lin.len());
                    for (occ, coef) in &terms {
                        for &(m, a) in &lin {
                            let mut o = *occ;
                            o[m] += 1;
                            *next.entry(o).or_insert(0.0) += coef * a;
                        }
                    }
                    terms = next;
                }
                for (occ, coef) in terms {
                    let norm: f64 = occ.iter().map(|&n| (1..=n as u32).product::<u32>() as f64).product();
                    let amp = coef * norm.sqrt();
                    if amp == 0.0 {
                        continue;
                    }
                    let k = kraus.entry(occ).or_insert_with(|| CMatrix::zeros(4, 4));
                    k[(out_spin, input)] += C64::new(amp, 0.0);
                }
            }
        }
    }
    let d = p.dark_probability();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    let mut keys: Vec<&[u8; N_MODES]> = kraus.keys().collect();
    keys.sort();
    for occ in keys {
        let k = &kraus[occ];
        match classify(occ) {
            PhotonOutcome::D1 => d1.push(k * C64::new((1.0 - d).sqrt(), 0.0)),
            PhotonOutcome::D2 => d2.push(k * C64::new((1.0 - d).sqrt(), 0.0)),
            PhotonOutcome::None if d > 0.0 => {
                let w = C64::new(((1.0 - d) * d).sqrt(), 0.0);
                d1.push(k * w);
                d2.push(k * w);
            }
            _ => {}
        }
    }
    let zero = || vec![CMatrix::zeros(4, 4)];
    Ok([
        KrausChannel::new(if d1.is_empty() { zero() } else { d1 })?,
        KrausChannel::new(if d2.is_empty() { zero() } else { d2 })?,
    ])
}

fn rotate(rho: &DensityMatrix, p: &BkModelParams, angle: f64, about_x: bool) -> Result<DensityMatrix> {
    let eps = match p.gate_error {
        GateErrorModel::Coherent => p.over_rotation(),
        GateErrorModel::Depolarizing => 0.0,
    };
    let mut out = rho.clone();
    for q in 0..2 {
        let g = if about_x { GateSpec::Rx(q, angle + eps) } else { GateSpec::Ry(q, angle + eps) };
        out = apply_gate(&out, &g)?;
        if p.gate_error == GateErrorModel::Depolarizing && p.gate_fidelity < 1.0 {
            let ch = KrausChannel::depolarizing(2.0 * (1.0 - p.gate_fidelity))?;
            out = apply_channel(&out, &ch, &[q])?;
        }
    }
    Ok(out)
}

/// Spin state after initialization and the π/2 preparation.
fn prepared_state(p: &BkModelParams) -> Result<DensityMatrix> {
    let mut rho = DensityMatrix::basis(2, 0)?;
    let flip = KrausChannel::bit_flip(1.0 - p.init_fidelity)?;
    for q in 0..2 {
        rho = apply_channel(&rho, &flip, &[q])?;
    }
    rotate(&rho, p, std::f64::consts::FRAC_PI_2, false)
}

fn pi_pulse(rho: &DensityMatrix, p: &BkModelParams) -> Result<DensityMatrix> {
    match p.gate_error {
        // the ideal π pulse is X, which differs from Rx(π) by a global phase
        GateErrorModel::Depolarizing => {
            let mut out = apply_gate(rho, &GateSpec::X(0))?;
            out = apply_gate(&out, &GateSpec::X(1))?;
            if p.gate_fidelity < 1.0 {
                let ch = KrausChannel::depolarizing(2.0 * (1.0 - p.gate_fidelity))?;
                out = apply_channel(&out, &ch, &[0])?;
                out = apply_channel(&out, &ch, &[1])?;
            }
            Ok(out)
        }
        GateErrorModel::Coherent => rotate(rho, p, std::f64::consts::PI, true),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BellPairResult {
    pub state: DensityMatrix,
    pub success_probability: f64,
    pub herald: HeraldPattern,
    pub fidelity: f64,
}

/// Heralded two-spin states, one per click pattern. Success probabilities
/// are per attempt and sum to the total herald probability.
pub fn bk_conditional_state(p: &BkModelParams) -> Result<Vec<BellPairResult>> {
    p.validate()?;
    let v = p.mean_visibility()?;
    let mu = v.sqrt();
    let inst = round_instrument(p, mu)?;
    let rho0 = prepared_state(p)?;
    let mut out = Vec::with_capacity(4);
    for (i1, early) in [Detector::D1, Detector::D2].into_iter().enumerate() {
        let (rho1, p1) = match herald(&rho0, &inst[i1], &[0, 1]) {
            Ok(r) => r,
            Err(Error::ZeroProbability) => continue,
            Err(e) => return Err(e),
        };
        let rho1 = pi_pulse(&rho1, p)?;
        for (i2, late) in [Detector::D1, Detector::D2].into_iter().enumerate() {
            let (rho2, p2) = match herald(&rho1, &inst[i2], &[0, 1]) {
                Ok(r) => r,
                Err(Error::ZeroProbability) => continue,
                Err(e) => return Err(e),
            };
            let pattern = HeraldPattern { early, late };
            let fidelity = fidelity_to_pure(&rho2, &herald_target(pattern))?;
            out.push(BellPairResult { state: rho2, success_probability: p1 * p2, herald: pattern, fidelity });
        }
    }
    Ok(out)
}

/// Local frame change taking the herald target of `pattern` to `Ψ⁺`.
pub fn to_psi_plus_frame(rho: &DensityMatrix, pattern: HeraldPattern) -> Result<DensityMatrix> {
    if pattern.same_detector() {
        Ok(rho.clone())
    } else {
        apply_gate(rho, &GateSpec::Z(1))
    }
}

/// Probability-weighted mixture of all patterns, in the `Ψ⁺` frame.
pub fn averaged_state(results: &[BellPairResult]) -> Result<(DensityMatrix, f64)> {
    let total: f64 = results.iter().map(|r| r.success_probability).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroProbability);
    }
    let framed: Vec<DensityMatrix> = results
        .iter()
        .map(|r| to_psi_plus_frame(&r.state, r.herald))
        .collect::<Result<_>>()?;
    let parts: Vec<(f64, &DensityMatrix)> = results
        .iter()
        .zip(&framed)
        .map(|(r, s)| (r.success_probability / total, s))
        .collect();
    Ok((DensityMatrix::mixture(&parts)?, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityEstimate {
    pub population: f64,
    pub coherence: f64,
    pub fidelity: f64,
    pub population_err: f64,
    pub coherence_err: f64,
    pub fidelity_err: f64,
}

/// `P = N01/(N00+N01)`, `C = (N++ − N+−)/(N++ + N+−)`, `F = (P + C)/2` with
/// binomial standard errors.
pub fn bp_fidelity_estimator(n00: u64, n01: u64, npp: u64, npm: u64) -> Result<FidelityEstimate> {
    let np = n00 + n01;
    let nc = npp + npm;
    if np == 0 || nc == 0 {
        return Err(Error::Undefined("a measurement basis has no counts".into()));
    }
    let pop = n01 as f64 / np as f64;
    let q = npp as f64 / nc as f64;
    let coh = 2.0 * q - 1.0;
    let pop_err = (pop * (1.0 - pop) / np as f64).sqrt();
    let coh_err = 2.0 * (q * (1.0 - q) / nc as f64).sqrt();
    Ok(FidelityEstimate {
        population: pop,
        coherence: coh,
        fidelity: 0.5 * (pop + coh),
        population_err: pop_err,
        coherence_err: coh_err,
        fidelity_err: 0.5 * (pop_err * pop_err + coh_err * coh_err).sqrt(),
    })
}

/// Expected `(P, C)` for a state in the `Ψ⁺` frame: odd Z parity and the XX
/// correlator.
pub fn population_and_coherence(rho: &DensityMatrix) -> Result<(f64, f64)> {
    if rho.n_qubits() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: rho.n_qubits() });
    }
    let pop = rho.population(1) + rho.population(2);
    let xx = qmath::kron_le(&qmath::pauli_x(), &qmath::pauli_x());
    Ok((pop, rho.expectation(&xx)?.re))
}

/// Draws `shots` outcomes per basis from `rho` (in the `Ψ⁺` frame) using
/// sequential single-qubit measurements: `(N00, N01, N++, N+−)` with
/// even/odd parity in each basis.
pub fn sample_basis_counts(rho: &DensityMatrix, shots: u64, seed: u64) -> Result<(u64, u64, u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = |basis: Basis| -> Result<(u64, u64)> {
        // P(parity odd) from the two-step measurement tree
        let mut p_odd = 0.0;
        for a in measure(rho, 0, basis)? {
            for b in measure(&a.state, 1, basis)? {
                if a.outcome != b.outcome {
                    p_odd += a.probability * b.probability;
                }
            }
        }
        let odd = (0..shots).filter(|_| rng.random::<f64>() < p_odd).count() as u64;
        Ok((shots - odd, odd))
    };
    let (n00, n01) = tally(Basis::Z)?;
    let (npp, npm) = tally(Basis::X)?;
    Ok((n00, n01, npp, npm))
}

/// `F ≤ (1 + V)/2`.
pub fn hom_bound(v: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(Error::param("V", format!("{v} outside [-1, 1]")));
    }
    Ok((1.0 + v) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcnotMode {
    FeedForward,
    Postselect00,
}

/// Register layout for the teleported CNOT.
pub const Q_CONTROL: usize = 0;
pub const Q_ELECTRON_A: usize = 1;
pub const Q_ELECTRON_B: usize = 2;
pub const Q_TARGET: usize = 3;

/// Teleported CNOT between the control nucleus (module A) and the target
/// nucleus (module B) consuming one heralded pair. Returns the two-nucleus
/// output (control = qubit 0) and the acceptance probability.
pub fn tcnot_execute(
    control_in: &DensityMatrix,
    target_in: &DensityMatrix,
    bp: &BellPairResult,
    mode: TcnotMode,
) -> Result<(DensityMatrix, f64)> {
    if control_in.n_qubits() != 1 || target_in.n_qubits() != 1 {
        return Err(Error::InvalidState("nuclear inputs must be single qubits".into()));
    }
    if bp.state.n_qubits() != 2 {
        return Err(Error::InvalidState("Bell pair must be a two-qubit state".into()));
    }
    control_in.validate()?;
    target_in.validate()?;
    // bring the pair to Φ⁺ with operations on e_B only
    let mut pair = apply_gate(&bp.state, &GateSpec::X(1))?;
    if !bp.herald.same_detector() {
        pair = apply_gate(&pair, &GateSpec::Z(1))?;
    }
    let rho = control_in.tensor(&pair)?.tensor(target_in)?;
    let rho = apply_gate(&rho, &GateSpec::Cnot { control: Q_CONTROL, target: Q_ELECTRON_A })?;
    let mut branches: Vec<(f64, DensityMatrix)> = Vec::new();
    for m1 in measure(&rho, Q_ELECTRON_A, Basis::Z)? {
        if mode == TcnotMode::Postselect00 && m1.outcome != 0 {
            continue;
        }
        let mut s = m1.state;
        if m1.outcome == 1 {
            s = apply_gate(&s, &GateSpec::X(Q_ELECTRON_B))?;
        }
        s = apply_gate(&s, &GateSpec::Cnot { control: Q_ELECTRON_B, target: Q_TARGET })?;
        for m2 in measure(&s, Q_ELECTRON_B, Basis::X)? {
            if mode == TcnotMode::Postselect00 && m2.outcome != 0 {
                continue;
            }
            let mut t = m2.state;
            if m2.outcome == 1 {
                t = apply_gate(&t, &GateSpec::Z(Q_CONTROL))?;
            }
            branches.push((m1.probability * m2.probability, t));
        }
    }
    let accept: f64 = branches.iter().map(|b| b.0).sum();
    if !(accept > 0.0) {
        return Err(Error::ZeroProbability);
    }
    let parts: Vec<(f64, &DensityMatrix)> = branches.iter().map(|(w, s)| (w / accept, s)).collect();
    let full = DensityMatrix::mixture(&parts)?;
    Ok((qmath::partial_trace(&full, &[Q_CONTROL, Q_TARGET])?, accept))
}

/// Output populations for the four computational inputs: `table[i][o]` is
/// the probability of output `o` (control = bit 0) given input `i`.
pub fn tcnot_truth_table(bp: &BellPairResult, mode: TcnotMode) -> Result<[[f64; 4]; 4]> {
    let mut table = [[0.0; 4]; 4];
    for (i, row) in table.iter_mut().enumerate() {
        let c = DensityMatrix::basis(1, i & 1)?;
        let t = DensityMatrix::basis(1, (i >> 1) & 1)?;
        let (out, _) = tcnot_execute(&c, &t, bp, mode)?;
        for (o, v) in row.iter_mut().enumerate() {
            *v = out.population(o);
        }
    }
    Ok(table)
}

/// A pair with the given herald and state, for feeding [`tcnot_execute`].
pub fn bell_pair(state: DensityMatrix, herald: HeraldPattern) -> Result<BellPairResult> {
    let fidelity = fidelity_to_pure(&state, &herald_target(herald))?;
    Ok(BellPairResult { state, success_probability: 1.0, herald, fidelity })
}

/// Werner state `w |target⟩⟨target| + (1 − w) I/4` for a pattern.
pub fn werner_pair(w: f64, herald: HeraldPattern) -> Result<BellPairResult> {
    let pure = DensityMatrix::from_pure(&herald_target(herald))?;
    let mixed = DensityMatrix::maximally_mixed(2)?;
    bell_pair(DensityMatrix::mixture(&[(w, &pure), (1.0 - w, &mixed)])?, herald)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BkMode {
    Analytic,
    /// Estimator applied to `shots` sampled outcomes per basis.
    Sampled { shots: u64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BkRow {
    pub timebin_ns: f64,
    pub visibility: f64,
    pub fidelity: f64,
    pub fidelity_err: f64,
    pub success_probability: f64,
    pub rate_hz: f64,
}

/// Fidelity and rate over a sweep of time-bin widths.
pub fn simulate_bk_experiment(params: &BkModelParams, mode: BkMode, sweep: &[f64]) -> Result<Vec<BkRow>> {
    if sweep.is_empty() {
        return Err(Error::param("sweep", "no time bins given"));
    }
    sweep
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut p = params.clone();
            p.timebin_ns = t;
            if let VisibilityProfile::Fixed { value, .. } = p.visibility {
                p.visibility = VisibilityProfile::Fixed { value, timebin_ns: t };
            }
            let results = bk_conditional_state(&p)?;
            let (avg, success) = averaged_state(&results)?;
            let (fidelity, fidelity_err) = match mode {
                BkMode::Analytic => (fidelity_to_pure(&avg, &bell::psi_plus())?, 0.0),
                BkMode::Sampled { shots, seed } => {
                    let (a, b, c, d) = sample_basis_counts(&avg, shots, seed.wrapping_add(i as u64))?;
                    let e = bp_fidelity_estimator(a, b, c, d)?;
                    (e.fidelity, e.fidelity_err)
                }
            };
            Ok(BkRow {
                timebin_ns: t,
                visibility: p.mean_visibility()?,
                fidelity,
                fidelity_err,
                success_probability: success,
                rate_hz: p.rate_hz()?,
            })
        })
        .collect()
}
