mod common;

use common::*;
use tcsim::emitter::{hom_correlations, EmitterParams, TimeGrid};
use tcsim::harness::Detector;
use tcsim::protocol::{self, bk_conditional_state, herald_target, BkModelParams, HeraldPattern, TcnotMode};
use tcsim::qmath::{self, DensityMatrix};

fn max_bin_error(p1: &EmitterParams, p2: &EmitterParams, l: f64, step: f64) -> f64 {
    let grid = TimeGrid::symmetric(step, l).unwrap();
    let (gi, gd) = hom_correlations(p1, p2, &grid, l).unwrap();
    let oracle = HomOracle::new(p1, p2, l);
    let edges: Vec<f64> = (-(l as i64)..=(l as i64)).map(|k| k as f64).collect();
    let bi = gi.bin_integrals(&edges);
    let bd = gd.bin_integrals(&edges);
    let mut worst = 0.0f64;
    for (k, w) in edges.windows(2).enumerate() {
        let (oi, od) = oracle.bin(w[0], w[1]);
        let e = (bi[k] - oi).abs().max((bd[k] - od).abs());
        worst = worst.max(e);
    }
    worst
}

#[test]
fn hom_matches_quadrature_at_measured_parameters() {
    let e = max_bin_error(&EmitterParams::tc1(), &EmitterParams::tc2(), 130.0, 0.1);
    assert!(e <= 1e-6, "max bin error {e}");
}

#[test]
fn hom_matches_quadrature_with_desync_and_detuning() {
    let mut a = EmitterParams::tc1();
    let mut b = EmitterParams::tc2();
    a.desync_ns = 3.0;
    b.mean_detuning_mhz = 4.0;
    b.lifetime_ns = 30.0;
    b.g2_0 = 0.05;
    b.p_double = 0.1;
    // a jump on a grid node shifts h·jump/4 between neighbouring bins, so
    // the large multiphoton jumps here need a finer grid
    let e = max_bin_error(&a, &b, 100.0, 0.02);
    assert!(e <= 1e-6, "max bin error {e}");
}

#[test]
fn bk_matches_whole_process_enumeration() {
    let mut r = rng(11);
    let mut sets = vec![BkModelParams::measured()];
    sets.extend((0..10).map(|_| random_bk_params(&mut r)));
    for p in sets {
        let model = bk_conditional_state(&p).unwrap();
        let oracle = bk_oracle(&p);
        assert_eq!(model.len(), oracle.len());
        for (m, (pat, prob, rho)) in model.iter().zip(&oracle) {
            assert_eq!(m.herald, *pat);
            let of = fidelity(rho, &herald_target(*pat));
            assert!((m.fidelity - of).abs() < 1e-8, "{:?}: {} vs {}", pat, m.fidelity, of);
            assert!((m.success_probability / prob - 1.0).abs() < 1e-8, "{} vs {}", m.success_probability, prob);
            assert!(qmath::max_abs(&(m.state.matrix() - rho)) < 1e-8);
        }
    }
}

#[test]
fn ideal_bk_oracle_agrees_with_closed_form() {
    let mut p = BkModelParams::ideal();
    p.paths[0].detector_efficiency = 0.4;
    p.paths[1].detector_efficiency = 0.7;
    let o = bk_oracle(&p);
    let total: f64 = o.iter().map(|x| x.1).sum();
    assert!((total - 0.5 * 0.4 * 0.7).abs() < 1e-12);
    for (pat, _, rho) in &o {
        assert!((fidelity(rho, &herald_target(*pat)) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tcnot_matches_direct_circuit() {
    let mut r = rng(5);
    let pats = HeraldPattern::all();
    for i in 0..20 {
        let pat = pats[i % 4];
        let bp = if i % 2 == 0 {
            protocol::werner_pair(0.3 + 0.035 * i as f64, pat).unwrap()
        } else {
            let mut p = random_bk_params(&mut r);
            p.timebin_ns = 20.0;
            if let tcsim::protocol::VisibilityProfile::Fixed { value, .. } = p.visibility {
                p.visibility = tcsim::protocol::VisibilityProfile::Fixed { value, timebin_ns: 20.0 };
            }
            let res = bk_conditional_state(&p).unwrap();
            res.into_iter().find(|x| x.herald == pat).unwrap()
        };
        let c = random_qubit(&mut r);
        let t = random_qubit(&mut r);
        for mode in [TcnotMode::FeedForward, TcnotMode::Postselect00] {
            let (out, acc) = protocol::tcnot_execute(
                &DensityMatrix::from_pure(&c).unwrap(),
                &DensityMatrix::from_pure(&t).unwrap(),
                &bp,
                mode,
            )
            .unwrap();
            let (o, oacc) = tcnot_oracle(&outer(&c), &outer(&t), bp.state.matrix(), pat, mode);
            assert!((acc - oacc).abs() < 1e-10);
            assert!(qmath::max_abs(&(out.matrix() - &o)) < 1e-10, "{mode:?} trial {i}");
        }
    }
}

#[test]
fn ideal_tcnot_is_a_cnot() {
    let mut r = rng(8);
    let bp = protocol::werner_pair(1.0, HeraldPattern { early: Detector::D2, late: Detector::D1 }).unwrap();
    let cnot = qmath::GateSpec::Cnot { control: 0, target: 1 };
    for _ in 0..20 {
        let c = DensityMatrix::from_pure(&random_qubit(&mut r)).unwrap();
        let t = DensityMatrix::from_pure(&random_qubit(&mut r)).unwrap();
        let direct = qmath::apply_gate(&c.tensor(&t).unwrap(), &cnot).unwrap();
        for mode in [TcnotMode::FeedForward, TcnotMode::Postselect00] {
            let (out, acc) = protocol::tcnot_execute(&c, &t, &bp, mode).unwrap();
            assert!(qmath::max_abs(&(out.matrix() - direct.matrix())) < 1e-10);
            if mode == TcnotMode::Postselect00 {
                assert!((acc - 0.25).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn werner_truth_table_element() {
    let pat = HeraldPattern { early: Detector::D1, late: Detector::D1 };
    let bp = protocol::werner_pair(0.8, pat).unwrap();
    let (out, _) = protocol::tcnot_execute(
        &DensityMatrix::basis(1, 1).unwrap(),
        &DensityMatrix::basis(1, 0).unwrap(),
        &bp,
        TcnotMode::Postselect00,
    )
    .unwrap();
    let (o, _) = tcnot_oracle(&outer(&[c0(), c1()]), &outer(&[c1(), c0()]), bp.state.matrix(), pat, TcnotMode::Postselect00);
    // output |1⟩|1⟩ is index 3
    assert!((out.population(3) - o[(3, 3)].re).abs() < 1e-10);
    assert!((bp.fidelity - 0.85).abs() < 1e-12);
    // only X and Y errors on the pair flip the target
    assert!((out.population(3) - 0.9).abs() < 1e-10);
}

fn c0() -> tcsim::qmath::C64 {
    tcsim::qmath::C64::new(0.0, 0.0)
}

fn c1() -> tcsim::qmath::C64 {
    tcsim::qmath::C64::new(1.0, 0.0)
}

