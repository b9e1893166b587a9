//! Independent reference implementations used by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcsim::emitter::EmitterParams;
use tcsim::harness::{Detector, OpticalPath};
use tcsim::protocol::{BkModelParams, GateErrorModel, HeraldPattern, TcnotMode, VisibilityProfile};
use tcsim::qmath::{CMatrix, C64};
use tcsim::quad::gauss_legendre;

// ---------------------------------------------------------------- HOM

/// Extra in-pulse photon probability from g2(0) = 2q/(1+q)², via the
/// quadratic formula.
pub fn q_of_g2(g: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        ((1.0 - g) - (1.0 - 2.0 * g).sqrt()) / g
    }
}

fn density(p: &EmitterParams, t: f64, l: f64) -> f64 {
    if t < p.desync_ns || t > l || t < 0.0 {
        0.0
    } else {
        (-(t - p.desync_ns) / p.lifetime_ns).exp() / p.lifetime_ns
    }
}

/// `(G_I(τ), G_D(τ))` by direct numerical integration over emission time
/// and over the difference of the two slow frequency offsets.
pub struct HomOracle {
    p: [EmitterParams; 2],
    l: f64,
    time_rule: (Vec<f64>, Vec<f64>),
    freq_rule: (Vec<f64>, Vec<f64>),
}

impl HomOracle {
    pub fn new(p1: &EmitterParams, p2: &EmitterParams, l: f64) -> Self {
        assert!(p1.excitation_bandwidth_mhz.is_none() && p2.excitation_bandwidth_mhz.is_none());
        HomOracle { p: [p1.clone(), p2.clone()], l, time_rule: gauss_legendre(64), freq_rule: gauss_legendre(64) }
    }

    // Integral over t of f on [lo, hi], split at the desync kinks.
    fn time_integral(&self, f: impl Fn(f64) -> f64, lo: f64, hi: f64, tau: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let mut cuts = vec![lo, hi];
        for p in &self.p {
            for c in [p.desync_ns, p.desync_ns + 5.0 * p.lifetime_ns, p.desync_ns + 20.0 * p.lifetime_ns] {
                for c in [c, c - tau] {
                    if c > lo && c < hi {
                        cuts.push(c);
                    }
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        let (x, w) = &self.time_rule;
        cuts.windows(2)
            .map(|s| {
                let (a, b) = (s[0], s[1]);
                let h = 0.5 * (b - a);
                x.iter().zip(w).map(|(x, w)| w * f(a + h * (x + 1.0))).sum::<f64>() * h
            })
            .sum()
    }

    fn detuning_average(&self, tau: f64) -> f64 {
        let [a, b] = &self.p;
        let mean = a.mean_detuning_mhz - b.mean_detuning_mhz;
        let s = (a.diffusion_sigma_mhz.powi(2) + b.diffusion_sigma_mhz.powi(2)).sqrt();
        let phase = |df: f64| (2.0 * PI * df * 1e-3 * tau).cos();
        if s == 0.0 {
            return phase(mean);
        }
        // Gaussian density of the difference integrated on ±10σ
        let (x, w) = &self.freq_rule;
        let half = 10.0 * s;
        let mut acc = 0.0;
        for seg in 0..8 {
            let a0 = -half + seg as f64 * 2.0 * half / 8.0;
            let hh = half / 8.0;
            for (x, w) in x.iter().zip(w) {
                let u = a0 + hh * (x + 1.0);
                let g = (-0.5 * (u / s).powi(2)).exp() / (s * (2.0 * PI).sqrt());
                acc += w * hh * g * phase(mean + u);
            }
        }
        acc
    }

    pub fn eval(&self, tau: f64) -> (f64, f64) {
        let [a, b] = &self.p;
        let l = self.l;
        let lo = 0.0f64.max(-tau);
        let hi = l.min(l - tau);
        let g0 = 0.5
            * self.time_integral(
                |t| density(a, t, l) * density(b, t + tau, l) + density(b, t, l) * density(a, t + tau, l),
                lo,
                hi,
                tau,
            );
        let coherent = self.time_integral(
            |t| (density(a, t, l) * density(b, t, l) * density(a, t + tau, l) * density(b, t + tau, l)).sqrt(),
            lo,
            hi,
            tau,
        );
        let theta = (a.polarization_mismatch_deg - b.polarization_mismatch_deg).to_radians();
        let deph = (-2.0 * PI * (a.pure_dephasing_mhz + b.pure_dephasing_mhz) * 1e-3 * tau.abs()).exp();
        let gint = -theta.cos().powi(2) * deph * self.detuning_average(tau) * coherent;
        let q = |p: &EmitterParams| if p.p_double == 0.0 { 0.0 } else { q_of_g2(p.g2_0) };
        let cross = |from: &EmitterParams, other: &EmitterParams| {
            let t0 = from.desync_ns;
            if !(0.0..=l).contains(&t0) {
                return 0.0;
            }
            0.5 * (density(other, t0 + tau, l) + density(other, t0 - tau, l))
        };
        let hbt = |p: &EmitterParams| {
            if tau.abs() > l - p.desync_ns {
                0.0
            } else {
                p.g2_0 * 0.5 / p.lifetime_ns * (-tau.abs() / p.lifetime_ns).exp()
            }
        };
        let gd = 0.5 * (g0 + q(a) * cross(a, b) + q(b) * cross(b, a)) + 0.25 * (hbt(a) + hbt(b));
        ((gd + 0.5 * gint).max(0.0), gd)
    }

    /// Integral of both correlations over [lo, hi].
    pub fn bin(&self, lo: f64, hi: f64) -> (f64, f64) {
        let (x, w) = gauss_legendre(24);
        let [a, b] = &self.p;
        let mut cuts = vec![lo, hi];
        let kinks = [
            0.0,
            a.desync_ns - b.desync_ns,
            self.l - a.desync_ns,
            self.l - b.desync_ns,
            self.l - a.desync_ns + b.desync_ns,
            self.l - b.desync_ns + a.desync_ns,
        ];
        for k in kinks {
            for k in [k, -k] {
                if k > lo && k < hi {
                    cuts.push(k);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut out = (0.0, 0.0);
        for s in cuts.windows(2) {
            let h = 0.5 * (s[1] - s[0]);
            for (x, w) in x.iter().zip(&w) {
                let (i, d) = self.eval(s[0] + h * (x + 1.0));
                out.0 += w * h * i;
                out.1 += w * h * d;
            }
        }
        out
    }
}

// ----------------------------------------------------------------- BK

const MODES_PER_ROUND: usize = 8;
// per round: common@portA, common@portB, privateA, privateB, extraA,
// extraB, envA, envB
const N_MODES: usize = 2 * MODES_PER_ROUND;

type Occ = [u8; N_MODES];
type Traj = HashMap<(usize, Occ), C64>;

fn apply_1q(state: &Traj, q: usize, u: [[C64; 2]; 2]) -> Traj {
    let mut out = Traj::new();
    for (&(s, occ), &a) in state {
        let bit = (s >> q) & 1;
        for nb in 0..2 {
            let m = u[nb][bit];
            if m == C64::new(0.0, 0.0) {
                continue;
            }
            let ns = (s & !(1 << q)) | (nb << q);
            *out.entry((ns, occ)).or_default() += m * a;
        }
    }
    out.retain(|_, v| v.norm_sqr() > 0.0);
    out
}

fn create(occ: &Occ, mode: usize) -> (Occ, f64) {
    let mut o = *occ;
    o[mode] += 1;
    (o, (o[mode] as f64).sqrt())
}

fn ry(t: f64) -> [[C64; 2]; 2] {
    let (c, s) = ((t / 2.0).cos(), (t / 2.0).sin());
    [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
}

fn rx(t: f64) -> [[C64; 2]; 2] {
    let (c, s) = ((t / 2.0).cos(), (t / 2.0).sin());
    [[C64::new(c, 0.0), C64::new(0.0, -s)], [C64::new(0.0, -s), C64::new(c, 0.0)]]
}

fn paulis() -> [[[C64; 2]; 2]; 4] {
    let o = C64::new(0.0, 0.0);
    let l = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    [[[l, o], [o, l]], [[o, l], [l, o]], [[o, -i], [i, o]], [[l, o], [o, -l]]]
}

struct ArmOracle {
    px: f64,
    pd: f64,
    b: f64,
}

// One emission round on a trajectory.
fn emit(state: &Traj, round: usize, arms: &[ArmOracle; 2], mu: f64) -> Traj {
    let base = round * MODES_PER_ROUND;
    let mut cur = state.clone();
    for k in 0..2 {
        let a = &arms[k];
        let mut next = Traj::new();
        for (&(s, occ), &amp) in &cur {
            if (s >> k) & 1 == 0 {
                *next.entry((s, occ)).or_default() += amp;
                continue;
            }
            let dark = s & !(1 << k);
            // not excited
            *next.entry((s, occ)).or_default() += amp * (1.0 - a.px).sqrt();
            // photon kinds: w photon is √μ common + √(1−μ) private
            let with_w = |occ: &Occ, w: f64, spin: usize, next: &mut Traj| {
                let (o1, f1) = create(occ, base + k);
                *next.entry((spin, o1)).or_default() += amp * w * mu.sqrt() * f1;
                let (o2, f2) = create(occ, base + 2 + k);
                *next.entry((spin, o2)).or_default() += amp * w * (1.0 - mu).sqrt() * f2;
            };
            with_w(&occ, (a.px * (1.0 - a.pd) * (1.0 - a.b)).sqrt(), s, &mut next);
            let (oe, fe) = create(&occ, base + 6 + k);
            *next.entry((dark, oe)).or_default() += amp * (a.px * (1.0 - a.pd) * a.b).sqrt() * fe;
            let (ox, fx) = create(&occ, base + 4 + k);
            with_w(&ox, (a.px * a.pd * (1.0 - a.b)).sqrt() * fx, s, &mut next);
            let (oxe, fxe) = create(&ox, base + 6 + k);
            *next.entry((dark, oxe)).or_default() += amp * (a.px * a.pd * a.b).sqrt() * fx * fxe;
        }
        next.retain(|_, v| v.norm_sqr() > 0.0);
        cur = next;
    }
    cur
}

// Output modes per round after loss and the beamsplitter: for each of the
// five photonic kinds (common, privateA, privateB, extraA, extraB) a D1 and
// a D2 copy, then one loss mode per input mode and the two env modes.
const OUT_PER_ROUND: usize = 10 + 6 + 2;
type OutOcc = Vec<u8>;

fn to_output(occ: &Occ, eta: [f64; 2], escape: [f64; 2]) -> Vec<(OutOcc, f64)> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut terms: Vec<(OutOcc, f64)> = vec![(vec![0; 2 * OUT_PER_ROUND], 1.0)];
    let mut norm = 1.0;
    for r in 0..2 {
        let ob = r * OUT_PER_ROUND;
        for m in 0..MODES_PER_ROUND {
            let n = occ[r * MODES_PER_ROUND + m];
            if n == 0 {
                continue;
            }
            norm /= (1..=n as u32).product::<u32>() as f64;
            // (kind, port, transmission)
            let lin: Vec<(usize, f64)> = match m {
                6 | 7 => vec![(ob + 16 + (m - 6), 1.0)],
                _ => {
                    let (kind, port) = match m {
                        0 => (0, 0),
                        1 => (0, 1),
                        2 => (1, 0),
                        3 => (2, 1),
                        4 => (3, 0),
                        _ => (4, 1),
                    };
                    let t = if m >= 4 { eta[port] * escape[port] } else { eta[port] };
                    let sign = if port == 0 { 1.0 } else { -1.0 };
                    // loss first, then the beamsplitter
                    vec![
                        (ob + 2 * kind, t.sqrt() * s),
                        (ob + 2 * kind + 1, t.sqrt() * s * sign),
                        (ob + 10 + m.min(5), (1.0 - t).sqrt()),
                    ]
                }
            };
            for _ in 0..n {
                let mut nt = Vec::with_capacity(terms.len() * lin.len());
                for (o, c) in &terms {
                    for &(om, a) in &lin {
                        let mut o2 = o.clone();
                        o2[om] += 1;
                        nt.push((o2, c * a));
                    }
                }
                terms = nt;
            }
        }
    }
    let mut merged: HashMap<OutOcc, f64> = HashMap::new();
    for (o, c) in terms {
        *merged.entry(o).or_default() += c;
    }
    merged
        .into_iter()
        .map(|(o, c)| {
            let f: f64 = o.iter().map(|&n| (1..=n as u32).product::<u32>() as f64).product();
            (o, c * (f * norm).sqrt())
        })
        .filter(|(_, c)| *c != 0.0)
        .collect()
}

fn photon_clicks(o: &OutOcc, round: usize) -> (bool, bool) {
    let ob = round * OUT_PER_ROUND;
    let d1 = (0..5).any(|k| o[ob + 2 * k] > 0);
    let d2 = (0..5).any(|k| o[ob + 2 * k + 1] > 0);
    (d1, d2)
}

// Lift a one-qubit operator onto the two spins.
fn lift(u: [[C64; 2]; 2], q: usize) -> CMatrix {
    CMatrix::from_fn(4, 4, |r, c| {
        if (r ^ c) & !(1 << q) != 0 {
            C64::new(0.0, 0.0)
        } else {
            u[(r >> q) & 1][(c >> q) & 1]
        }
    })
}

fn conj(rho: &CMatrix, u: &CMatrix) -> CMatrix {
    u * rho * u.adjoint()
}

fn depolarize(rho: &CMatrix, q: usize, dep: f64) -> CMatrix {
    let w = [1.0 - 0.75 * dep, 0.25 * dep, 0.25 * dep, 0.25 * dep];
    let mut out = CMatrix::zeros(4, 4);
    for (k, u) in paulis().into_iter().enumerate() {
        out += conj(rho, &lift(u, q)) * C64::new(w[k], 0.0);
    }
    out
}

// Photon emission of one round on a mixed spin state; the round's modes
// are expanded to the detectors and measured straight away. Returns the
// unnormalized spin states after a single D1 or a single D2 click.
fn measured_round(rho: &CMatrix, arms: &[ArmOracle; 2], mu: f64, eta: [f64; 2], escape: [f64; 2], d: f64) -> [CMatrix; 2] {
    let eig = rho.clone().symmetric_eigen();
    let mut acc = [CMatrix::zeros(4, 4), CMatrix::zeros(4, 4)];
    let mut expansions: HashMap<Occ, Vec<(OutOcc, f64)>> = HashMap::new();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 1e-300 {
            continue;
        }
        let mut st = Traj::new();
        for s in 0..4 {
            let a = eig.eigenvectors[(s, k)] * lam.sqrt();
            if a.norm_sqr() > 0.0 {
                st.insert((s, [0; N_MODES]), a);
            }
        }
        let st = emit(&st, 0, arms, mu);
        let mut by_out: HashMap<OutOcc, [C64; 4]> = HashMap::new();
        for (&(s, occ), &a) in &st {
            let terms = expansions.entry(occ).or_insert_with(|| to_output(&occ, eta, escape));
            for (o, c) in terms.iter() {
                by_out.entry(o.clone()).or_insert([C64::new(0.0, 0.0); 4])[s] += a * c;
            }
        }
        for (o, amp) in by_out {
            let (c1, c2) = photon_clicks(&o, 0);
            // dark counts on D1 and D2 of this round
            for dark in 0..4usize {
                let (b1, b2) = (dark & 1 == 1, dark & 2 == 2);
                let wd = (if b1 { d } else { 1.0 - d }) * (if b2 { d } else { 1.0 - d });
                let click = match (c1 || b1, c2 || b2) {
                    (true, false) => 0,
                    (false, true) => 1,
                    _ => continue,
                };
                if wd == 0.0 {
                    continue;
                }
                let m = &mut acc[click];
                for i in 0..4 {
                    for j in 0..4 {
                        m[(i, j)] += amp[i] * amp[j].conj() * wd;
                    }
                }
            }
        }
    }
    acc
}

/// Heralded 2-spin states from a whole-process simulation: classical
/// init errors and Pauli gate errors as explicit mixtures, photons kept in
/// Fock space through loss and the beamsplitter, darks mixed in per
/// detector. Each round's detectors are read out before the next round,
/// which the deferred measurement principle allows since those modes are
/// not touched again.
pub fn bk_oracle(p: &BkModelParams) -> Vec<(HeraldPattern, f64, CMatrix)> {
    let mu = p.mean_visibility().unwrap().sqrt();
    let arms: [ArmOracle; 2] = [0, 1].map(|k| {
        let e = &p.emitters[k];
        ArmOracle { px: p.paths[k].excitation_probability(), pd: e.p_double, b: e.br_radiative + e.br_nonradiative }
    });
    let eta = [p.paths[0].transmission(), p.paths[1].transmission()];
    let escape = [0, 1].map(|k| {
        let e = &p.emitters[k];
        if e.p_double == 0.0 { 0.0 } else { q_of_g2(e.g2_0) / e.p_double }
    });
    let d = -(-p.dark_rate_hz * p.gate_ns * 1e-9).exp_m1();
    let dep = 2.0 * (1.0 - p.gate_fidelity);
    let coherent = p.gate_error == GateErrorModel::Coherent;
    let eps = if coherent { 2.0 * (1.5 * (1.0 - p.gate_fidelity)).sqrt().asin() } else { 0.0 };
    let pf = 1.0 - p.init_fidelity;
    let mut rho = CMatrix::from_fn(4, 4, |r, c| {
        if r != c {
            return C64::new(0.0, 0.0);
        }
        let f = |bit: bool| if bit { pf } else { 1.0 - pf };
        C64::new(f(r & 1 == 1) * f(r & 2 == 2), 0.0)
    });
    let gate = |rho: &CMatrix, u: [[C64; 2]; 2]| {
        let mut r = rho.clone();
        for q in 0..2 {
            r = conj(&r, &lift(u, q));
            if !coherent {
                r = depolarize(&r, q, dep);
            }
        }
        r
    };
    rho = gate(&rho, ry(PI / 2.0 + eps));
    let first = measured_round(&rho, &arms, mu, eta, escape, d);
    let flip = if coherent { rx(PI + eps) } else { paulis()[1] };
    let det = [Detector::D1, Detector::D2];
    let mut out = Vec::new();
    for (a1, r1) in first.iter().enumerate() {
        let second = measured_round(&gate(r1, flip), &arms, mu, eta, escape, d);
        for (a2, m) in second.into_iter().enumerate() {
            let pr = m.trace().re;
            if pr > 0.0 {
                out.push((HeraldPattern { early: det[a1], late: det[a2] }, pr, m / C64::new(pr, 0.0)));
            }
        }
    }
    out
}

pub fn fidelity(rho: &CMatrix, psi: &[C64]) -> f64 {
    let mut f = C64::new(0.0, 0.0);
    for i in 0..psi.len() {
        for j in 0..psi.len() {
            f += psi[i].conj() * rho[(i, j)] * psi[j];
        }
    }
    f.re
}

/// Random but physical BK parameters around the measured point.
pub fn random_bk_params(rng: &mut ChaCha8Rng) -> BkModelParams {
    let mut p = BkModelParams::measured();
    for e in p.emitters.iter_mut() {
        e.lifetime_ns = rng.random_range(20.0..100.0);
        e.pure_dephasing_mhz = rng.random_range(0.0..10.0);
        e.diffusion_sigma_mhz = rng.random_range(0.0..15.0);
        e.polarization_mismatch_deg = rng.random_range(0.0..20.0);
        e.br_radiative = rng.random_range(0.0..0.1);
        e.br_nonradiative = rng.random_range(0.0..0.1);
        e.p_double = rng.random_range(0.0..0.2);
        e.g2_0 = rng.random::<f64>() * max_g2(e.p_double).min(0.02);
    }
    for path in p.paths.iter_mut() {
        *path = OpticalPath {
            elements: vec![tcsim::harness::LossElement { label: "chain".into(), loss_db: rng.random_range(-6.0..0.0) }],
            excitation_db: rng.random_range(-6.0..0.0),
            detector_efficiency: rng.random_range(0.3..1.0),
            stack_detector_efficiency: true,
        };
    }
    p.gate_fidelity = rng.random_range(0.9..1.0);
    p.init_fidelity = rng.random_range(0.9..1.0);
    p.dark_rate_hz = rng.random_range(0.0..2e5);
    p.timebin_ns = rng.random_range(2.0..130.0);
    if rng.random::<f64>() < 0.3 {
        p.visibility = VisibilityProfile::Fixed { value: rng.random_range(0.0..1.0), timebin_ns: p.timebin_ns };
    }
    if rng.random::<f64>() < 0.3 {
        p.gate_error = GateErrorModel::Coherent;
    }
    p
}

/// Largest g2(0) whose extra-photon probability fits inside `p_double`.
pub fn max_g2(p_double: f64) -> f64 {
    2.0 * p_double / (1.0 + p_double).powi(2)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// -------------------------------------------------------------- tCNOT

fn bit(i: usize, q: usize) -> usize {
    (i >> q) & 1
}

fn dm_apply(u: &CMatrix, rho: &CMatrix) -> CMatrix {
    u * rho * u.adjoint()
}

fn perm_matrix(f: impl Fn(usize) -> usize) -> CMatrix {
    let mut m = CMatrix::zeros(16, 16);
    for i in 0..16 {
        m[(f(i), i)] = C64::new(1.0, 0.0);
    }
    m
}

fn cnot4(c: usize, t: usize) -> CMatrix {
    perm_matrix(|i| if bit(i, c) == 1 { i ^ (1 << t) } else { i })
}

fn x4(q: usize) -> CMatrix {
    perm_matrix(|i| i ^ (1 << q))
}

fn z4(q: usize) -> CMatrix {
    CMatrix::from_fn(16, 16, |i, j| {
        if i == j {
            C64::new(if bit(i, q) == 1 { -1.0 } else { 1.0 }, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

fn proj_z(q: usize, m: usize) -> CMatrix {
    CMatrix::from_fn(16, 16, |i, j| C64::new(if i == j && bit(i, q) == m { 1.0 } else { 0.0 }, 0.0))
}

fn proj_x(q: usize, m: usize) -> CMatrix {
    // |±⟩⟨±| on qubit q, identity elsewhere
    let sign = if m == 0 { 1.0 } else { -1.0 };
    CMatrix::from_fn(16, 16, |i, j| {
        if (i & !(1 << q)) != (j & !(1 << q)) {
            return C64::new(0.0, 0.0);
        }
        let v = if bit(i, q) == bit(j, q) { 0.5 } else { 0.5 * sign };
        C64::new(v, 0.0)
    })
}

/// Kronecker product with `a` on the low qubits.
pub fn kron_low(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (da, db) = (a.nrows(), b.nrows());
    CMatrix::from_fn(da * db, da * db, |i, j| a[(i % da, j % da)] * b[(i / da, j / da)])
}

/// Direct 16×16 evaluation of the teleported CNOT. Qubits: 0 control
/// nucleus, 1 and 2 electrons, 3 target nucleus. Returns the
/// (control, target) state and the acceptance.
pub fn tcnot_oracle(
    control: &CMatrix,
    target: &CMatrix,
    pair: &CMatrix,
    pattern: HeraldPattern,
    mode: TcnotMode,
) -> (CMatrix, f64) {
    let full = kron_low(&kron_low(control, pair), target);
    // local frame change on electron B to Φ⁺
    let mut rho = dm_apply(&x4(2), &full);
    if pattern.early != pattern.late {
        rho = dm_apply(&z4(2), &rho);
    }
    rho = dm_apply(&cnot4(0, 1), &rho);
    let mut out = CMatrix::zeros(16, 16);
    for m1 in 0..2 {
        for m2 in 0..2 {
            if mode == TcnotMode::Postselect00 && (m1 | m2) != 0 {
                continue;
            }
            let mut r = dm_apply(&proj_z(1, m1), &rho);
            if m1 == 1 {
                r = dm_apply(&x4(2), &r);
            }
            r = dm_apply(&cnot4(2, 3), &r);
            r = dm_apply(&proj_x(2, m2), &r);
            if m2 == 1 {
                r = dm_apply(&z4(0), &r);
            }
            out += r;
        }
    }
    let acc = out.trace().re;
    // trace out qubits 1 and 2
    let mut red = CMatrix::zeros(4, 4);
    for i in 0..16 {
        for j in 0..16 {
            if (i & 0b0110) != (j & 0b0110) {
                continue;
            }
            let ri = bit(i, 0) | (bit(i, 3) << 1);
            let rj = bit(j, 0) | (bit(j, 3) << 1);
            red[(ri, rj)] += out[(i, j)];
        }
    }
    (red / C64::new(acc, 0.0), acc)
}

pub fn random_qubit(rng: &mut ChaCha8Rng) -> Vec<C64> {
    let th: f64 = rng.random_range(0.0..PI);
    let ph: f64 = rng.random_range(0.0..2.0 * PI);
    vec![C64::new((th / 2.0).cos(), 0.0), C64::from_polar((th / 2.0).sin(), ph)]
}

pub fn outer(psi: &[C64]) -> CMatrix {
    CMatrix::from_fn(psi.len(), psi.len(), |i, j| psi[i] * psi[j].conj())
}
