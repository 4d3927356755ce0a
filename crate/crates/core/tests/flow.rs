use std::f64::consts::PI;

use proptest::prelude::*;
use ricci_lab::flow::{
    estimate_t_with_error, evolution_residuals, integrate, refine, regrid, scalar_lower_bound_check, RegridPolicy,
    StepController, Termination,
};
use ricci_lab::geometry::{curvature_of, rescale, MetricKind, MetricState, Profile};

fn round(nodes: usize) -> MetricState {
    MetricState::warped(3, Profile::round(nodes, 1.0).unwrap(), 0.0).unwrap()
}

/// `psi_j - a sin(pi u_j)` on a round profile of radius `a`, with `u_j` the length fraction.
fn round_error(m: &MetricState, a: f64) -> f64 {
    let p = m.profile().unwrap();
    let len = p.length();
    p.s.iter()
        .zip(&p.psi)
        .map(|(s, psi)| (psi - a * (PI * (s - p.s[0]) / len).sin()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn round_sphere_singular_time_and_scale() {
    let m = MetricState::sphere(3, 1.0, 0.0).unwrap();
    let controller = StepController { checkpoints: vec![0.2], ..StepController::default() };
    let start = std::time::Instant::now();
    let trace = integrate(&m, &controller, None).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(trace.termination, Termination::CurvatureCeiling);
    let t = trace.t_estimate.unwrap();
    assert!((t - 0.25).abs() < 1e-4, "T = {t}");
    let at = trace.states.iter().find(|s| s.t == 0.2).expect("checkpoint stored");
    let MetricKind::Sphere { scale } = at.kind else { panic!("sphere expected") };
    assert!((scale - 0.2).abs() < 1e-10);
}

#[test]
fn warped_round_sphere_shrinks_homothetically() {
    let trace = integrate(&round(101), &StepController::default(), Some(0.15)).unwrap();
    assert_eq!(trace.termination, Termination::ReachedTEnd);
    let last = trace.states.last().unwrap();
    let a = (1.0 - 4.0 * last.t).sqrt();
    let err = round_error(last, a);
    assert!(err < 2e-4 * a, "profile error {err:e}");
}

#[test]
fn warped_round_sphere_singular_time() {
    let trace = integrate(&round(101), &StepController { rm_ceiling: 1e4, ..StepController::default() }, None).unwrap();
    let (t, err) = estimate_t_with_error(&trace).unwrap();
    assert!((t - 0.25).abs() < 1e-3, "T = {t}");
    assert!((0.0..1e-3).contains(&err));
}

#[test]
fn dumbbell_respects_evolution_identities_and_scalar_bound() {
    let m = MetricState::warped(3, Profile::dumbbell(101, 0.5, 0.3, PI / 2.0).unwrap(), 0.0).unwrap();
    let controller = StepController { store_interval: Some(0.002), ..StepController::default() };
    let trace = integrate(&m, &controller, Some(0.05)).unwrap();
    let rows = evolution_residuals(&trace).unwrap();
    assert!(rows.len() > 10);
    let worst_r = rows.iter().map(|r| r.r_rel).fold(0.0, f64::max);
    let worst_vol = rows.iter().map(|r| r.vol_rel).fold(0.0, f64::max);
    assert!(worst_r < 5e-2, "R identity {worst_r:e}");
    assert!(worst_vol < 1e-3, "volume identity {worst_vol:e}");
    assert!(scalar_lower_bound_check(&trace) >= -5e-3);
}

#[test]
fn regrid_keeps_round_profile() {
    let m = round(81);
    let next = regrid(&m, &RegridPolicy::default()).unwrap();
    assert!(round_error(&next, 1.0) < 1e-4);
    assert_eq!(next.profile().unwrap().len(), 81);
}

#[test]
fn refine_resolves_requested_spacing() {
    let m = round(41);
    let fine = refine(&m, 0.01, 100_000).unwrap();
    let p = fine.profile().unwrap();
    assert!(p.segment_lengths().iter().all(|&h| h <= 0.01 + 1e-12));
    assert!(round_error(&fine, 1.0) < 1e-4);
    let r = curvature_of(&fine).unwrap().r;
    assert!(r.iter().all(|v| (v - 6.0).abs() < 1e-2));
    let capped = refine(&m, 1e-6, 401).unwrap();
    assert!(capped.profile().unwrap().len() <= 401);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

    /// `g(t)` solves the flow iff `lambda g(t / lambda)` does.
    #[test]
    fn flow_commutes_with_parabolic_rescaling(lambda in 0.25f64..4.0, depth in 0.1f64..0.5) {
        let m = MetricState::warped(3, Profile::dumbbell(41, depth, 0.3, PI / 2.0).unwrap(), 0.0).unwrap();
        let controller = StepController { regrid: RegridPolicy { enabled: false, ..RegridPolicy::default() }, ..StepController::default() };
        let a = integrate(&m, &controller, Some(0.01)).unwrap();
        let b = integrate(&rescale(&m, lambda).unwrap(), &controller, Some(0.01 * lambda)).unwrap();
        let (pa, pb) = (a.states.last().unwrap().profile().unwrap(), b.states.last().unwrap().profile().unwrap());
        let ta = a.states.last().unwrap().t;
        let tb = b.states.last().unwrap().t;
        prop_assert!((tb / ta / lambda - 1.0).abs() < 1e-9);
        let scale = lambda.sqrt();
        for j in 0..pa.len() {
            prop_assert!((pb.psi[j] / scale - pa.psi[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_scale_is_linear_in_time(c0 in 0.5f64..4.0, frac in 0.05f64..0.9, n in 3usize..7) {
        let m = MetricState::sphere(n, c0, 0.0).unwrap();
        let t_end = frac * c0 / (2.0 * (n as f64 - 1.0));
        let trace = integrate(&m, &StepController::default(), Some(t_end)).unwrap();
        let last = trace.states.last().unwrap();
        let MetricKind::Sphere { scale } = last.kind else { panic!("sphere expected") };
        prop_assert!((scale - (c0 - 2.0 * (n as f64 - 1.0) * last.t)).abs() < 1e-12 * c0);
    }
}
