mod common;

use common::{max_g2, random_bk_params, rng};
use proptest::prelude::*;
use tcsim::analysis::{fidelity_from_envelope, ssro_threshold};
use tcsim::config::{default_config, Experiment, RunConfig};
use tcsim::emitter::{hom_correlations, timebin_capture, visibility, EmitterParams, TimeGrid};
use tcsim::forecast::{
    fidelity_rate_curve, repetition_rate, success_probability, Efficiency, EfficiencyBudget, ProjectionParams, Step,
    StepBudget,
};
use tcsim::protocol::{bk_conditional_state, BkModelParams};
use tcsim::qmath::{self, apply_channel, c, measure, Basis, CMatrix, DensityMatrix, GateSpec, KrausChannel, C64};

// ---------------------------------------------------------------- qmath

fn vec_c(parts: &[f64]) -> Vec<C64> {
    parts.chunks(2).map(|p| c(p[0], p[1])).collect()
}

fn normalized(v: Vec<C64>) -> Vec<C64> {
    let n = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

// Mixture of two random pure 2-qubit states.
fn state2() -> impl Strategy<Value = DensityMatrix> {
    (prop::collection::vec(-1.0..1.0f64, 16), 0.0..1.0f64).prop_filter_map("zero vector", |(raw, w)| {
        let a = vec_c(&raw[..8]);
        let b = vec_c(&raw[8..]);
        if a.iter().chain(&b).any(|x| x.norm() < 1e-3) {
            return None;
        }
        let pa = DensityMatrix::from_pure(&normalized(a)).ok()?;
        let pb = DensityMatrix::from_pure(&normalized(b)).ok()?;
        DensityMatrix::mixture(&[(w, &pa), (1.0 - w, &pb)]).ok()
    })
}

fn one_qubit_channel() -> impl Strategy<Value = KrausChannel> {
    (0usize..5, 0.0..1.0f64, -3.0..3.0f64).prop_map(|(k, p, t)| match k {
        0 => KrausChannel::depolarizing(p).unwrap(),
        1 => KrausChannel::bit_flip(p).unwrap(),
        2 => KrausChannel::phase_flip(p).unwrap(),
        3 => KrausChannel::amplitude_damping(p).unwrap(),
        _ => GateSpec::Ry(0, t).channel(),
    })
}

fn random_unitary2(raw: &[f64]) -> CMatrix {
    // Gram-Schmidt on a random complex matrix
    let m = CMatrix::from_fn(4, 4, |r, col| c(raw[2 * (4 * r + col)], raw[2 * (4 * r + col) + 1]));
    m.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channels_keep_states_physical(rho in state2(), ch in one_qubit_channel(), q in 0usize..2) {
        let out = apply_channel(&rho, &ch, &[q]).unwrap();
        out.validate().unwrap();
        prop_assert!((out.trace() - 1.0).abs() < 1e-12);
        prop_assert!(qmath::max_abs(&(out.matrix() - out.matrix().adjoint())) < 1e-12);
        prop_assert!(out.eigenvalues().iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn unitary_channel_is_conjugation(rho in state2(), raw in prop::collection::vec(-1.0..1.0f64, 32)) {
        let u = random_unitary2(&raw);
        let ch = KrausChannel::unitary(u.clone()).unwrap();
        let out = apply_channel(&rho, &ch, &[0, 1]).unwrap();
        let direct = &u * rho.matrix() * u.adjoint();
        prop_assert!(qmath::max_abs(&(out.matrix() - direct)) < 1e-12);
    }

    #[test]
    fn channel_composition(rho in state2(), a in one_qubit_channel(), b in one_qubit_channel(), q in 0usize..2) {
        let seq = apply_channel(&apply_channel(&rho, &a, &[q]).unwrap(), &b, &[q]).unwrap();
        let composed = apply_channel(&rho, &a.then(&b).unwrap(), &[q]).unwrap();
        prop_assert!(qmath::max_abs(&(seq.matrix() - composed.matrix())) < 1e-10);
    }

    #[test]
    fn measurement_probabilities_sum_to_one(rho in state2(), q in 0usize..2, x in any::<bool>()) {
        let basis = if x { Basis::X } else { Basis::Z };
        let total: f64 = measure(&rho, q, basis).unwrap().iter().map(|o| o.probability).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

// -------------------------------------------------------------- emitter

fn emitter_params() -> impl Strategy<Value = EmitterParams> {
    (20.0..100.0f64, 0.0..10.0f64, 0.0..15.0f64, 0.0..20.0f64, 0.0..1.0f64, 0.0..0.1f64).prop_map(
        |(lifetime_ns, deph, sigma, pol, g2, pd)| EmitterParams {
            lifetime_ns,
            pure_dephasing_mhz: deph,
            diffusion_sigma_mhz: sigma,
            polarization_mismatch_deg: pol,
            g2_0: g2 * max_g2(pd).min(0.05),
            p_double: pd,
            ..EmitterParams::ideal(lifetime_ns)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn visibility_and_capture_are_monotone(a in emitter_params(), b in emitter_params()) {
        let grid = TimeGrid::default_for(130.0).unwrap();
        let (gi, gd) = hom_correlations(&a, &b, &grid, 130.0).unwrap();
        let mut last_v = f64::INFINITY;
        let mut last_c = 0.0;
        for k in 1..=130 {
            let t = k as f64;
            let v = visibility(&gi, &gd, t).unwrap();
            let cap = timebin_capture(&gd, t).unwrap();
            prop_assert!(v <= last_v + 1e-12, "V({t}) = {v} after {last_v}");
            prop_assert!(cap >= last_c - 1e-12);
            last_v = v;
            last_c = cap;
        }
    }

    #[test]
    fn scaling_leaves_ratios_unchanged(a in emitter_params(), b in emitter_params(), k in 0.01..100.0f64, t in 1.0..130.0f64) {
        let grid = TimeGrid::default_for(130.0).unwrap();
        let (gi, gd) = hom_correlations(&a, &b, &grid, 130.0).unwrap();
        let (si, sd) = (gi.scaled(k).unwrap(), gd.scaled(k).unwrap());
        prop_assert!((visibility(&gi, &gd, t).unwrap() - visibility(&si, &sd, t).unwrap()).abs() < 1e-12);
        prop_assert!((timebin_capture(&gd, t).unwrap() - timebin_capture(&sd, t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn multiphoton_floor_caps_short_window_visibility(mut a in emitter_params(), g2 in 0.001..0.05f64) {
        a.g2_0 = g2;
        a.p_double = a.p_double.max(0.03);
        let b = EmitterParams { g2_0: 0.0, p_double: 0.0, ..a.clone() };
        let grid = TimeGrid::default_for(130.0).unwrap();
        let (gi, gd) = hom_correlations(&a, &b, &grid, 130.0).unwrap();
        prop_assert!(visibility(&gi, &gd, 0.2).unwrap() < 1.0);
    }
}

#[test]
fn perfect_emitters_have_unit_visibility() {
    for lifetime in [10.0, 40.0, 69.9] {
        let p = EmitterParams::ideal(lifetime);
        let grid = TimeGrid::default_for(130.0).unwrap();
        let (gi, gd) = hom_correlations(&p, &p, &grid, 130.0).unwrap();
        for t in [0.5, 5.0, 40.0, 130.0] {
            assert!((visibility(&gi, &gd, t).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

// ------------------------------------------------------------- protocol

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn heralded_fidelity_respects_hom_bound(seed in any::<u64>()) {
        let p = random_bk_params(&mut rng(seed));
        let v = p.mean_visibility().unwrap();
        let res = bk_conditional_state(&p).unwrap();
        let mut total = 0.0;
        for r in &res {
            prop_assert!(r.fidelity <= (1.0 + v) / 2.0 + 1e-9, "{:?}: {} > bound at V = {}", r.herald, r.fidelity, v);
            total += r.success_probability;
        }
        prop_assert!(total <= 0.5 + 1e-12);
    }
}

#[test]
fn success_reaches_half_only_without_losses() {
    let ideal = BkModelParams::ideal();
    let total: f64 = bk_conditional_state(&ideal).unwrap().iter().map(|r| r.success_probability).sum();
    assert!((total - 0.5).abs() < 1e-12);
    let mut lossy = ideal.clone();
    lossy.paths[1].detector_efficiency = 0.999;
    let total: f64 = bk_conditional_state(&lossy).unwrap().iter().map(|r| r.success_probability).sum();
    assert!(total < 0.5);
}

// ------------------------------------------------------------- analysis

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spam_is_bounded_and_shift_invariant(
        bright in prop::collection::vec(0u64..60, 1..200),
        dark in prop::collection::vec(0u64..20, 1..200),
        shift in 0u64..50,
    ) {
        let s = ssro_threshold(&bright, &dark).unwrap();
        prop_assert!(s.spam.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let b2: Vec<u64> = bright.iter().map(|x| x + shift).collect();
        let d2: Vec<u64> = dark.iter().map(|x| x + shift).collect();
        let s2 = ssro_threshold(&b2, &d2).unwrap();
        for (i, th) in s.thresholds.iter().enumerate() {
            prop_assert!((s2.at(th + shift).unwrap() - s.spam[i]).abs() < 1e-12);
        }
        prop_assert!((s2.best_spam - s.best_spam).abs() < 1e-12);
    }

    #[test]
    fn envelope_fidelity_is_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(fidelity_from_envelope(lo).unwrap() <= fidelity_from_envelope(hi).unwrap());
    }
}

// ------------------------------------------------------------- forecast

fn step_budget() -> impl Strategy<Value = StepBudget> {
    prop::collection::vec((0.1..500.0f64, 1u32..4), 1..8).prop_map(|v| StepBudget {
        steps: v
            .into_iter()
            .enumerate()
            .map(|(i, (time_ns, count))| Step { label: format!("step{i}"), time_ns, count })
            .collect(),
    })
}

fn efficiency_budget() -> impl Strategy<Value = EfficiencyBudget> {
    prop::collection::vec((0.05..1.0f64, 1u32..4), 1..8).prop_map(|v| EfficiencyBudget {
        elements: v
            .into_iter()
            .enumerate()
            .map(|(i, (efficiency, count))| Efficiency { label: format!("e{i}"), efficiency, count })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forecast_curve_invariants(
        sb in step_budget(),
        eb in efficiency_budget(),
        deph in 0.0..1000.0f64,
        diff in 0.0..50.0f64,
        pd in 0.0..0.05f64,
    ) {
        let p = ProjectionParams {
            intrinsic_dephasing_khz: deph,
            slow_diffusion_mhz: diff,
            p_double: Some(pd),
            ..Default::default()
        };
        let fractions = [0.01, 0.05, 0.125, 0.25, 0.5, 0.75, 1.0];
        let curve = fidelity_rate_curve(&p, &sb, &eb, &fractions).unwrap();
        let (_, rep) = repetition_rate(&sb).unwrap();
        let succ = success_probability(&eb).unwrap();
        let mut last = f64::INFINITY;
        for pt in &curve {
            prop_assert_eq!(pt.rate_hz, rep * succ * pt.fraction);
            prop_assert!(pt.fidelity <= last + 1e-12);
            prop_assert!(pt.fidelity <= 1.0 - pd / 2.0 + 1e-12);
            last = pt.fidelity;
        }
    }

    #[test]
    fn budgets_round_trip_through_config(sb in step_budget(), eb in efficiency_budget()) {
        let mut cfg = default_config(Experiment::Forecast);
        cfg.forecast.steps = sb;
        cfg.forecast.efficiencies = eb;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.forecast, cfg.forecast);
    }
}

#[test]
fn noiseless_projection_is_perfect_everywhere() {
    let p = ProjectionParams {
        intrinsic_dephasing_khz: 0.0,
        slow_diffusion_mhz: 0.0,
        p_double: Some(0.0),
        ..Default::default()
    };
    let fr: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    for pt in fidelity_rate_curve(&p, &StepBudget::projected(), &EfficiencyBudget::projected(), &fr).unwrap() {
        assert!((pt.fidelity - 1.0).abs() < 1e-12);
    }
}
