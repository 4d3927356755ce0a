use std::f64::consts::PI;

use proptest::prelude::*;
use ricci_lab::entropy::EntropyOptions;
use ricci_lab::error::Error;
use ricci_lab::flow::{integrate, Diagnostics, FlowTrace, StepController, Termination};
use ricci_lab::geometry::{MetricState, Profile};
use ricci_lab::oracle::{cylinder_rm_plateau, sphere_rm_plateau, sphere_solution};
use ricci_lab::singularity::{
    build_blowup, classify, curvature_gap_check, shrinker_diagnostics, type2_bisection, BisectionOptions,
    BlowupSchedule, Classification, ClassifyOptions, Locus, GROWTH_SLOPE, PLATEAU_SLOPE,
};

fn sphere_trace() -> FlowTrace {
    integrate(&sphere_solution(3, 0.0).unwrap(), &StepController::default(), None).unwrap()
}

fn dumbbell_trace(nodes: usize) -> FlowTrace {
    let m = MetricState::warped(3, Profile::dumbbell(nodes, 0.9, 0.3, PI / 2.0).unwrap(), 0.0).unwrap();
    integrate(&m, &StepController::default(), None).unwrap()
}

#[test]
fn shrinking_sphere_is_type_one() {
    let trace = sphere_trace();
    let report = classify(&trace, &ClassifyOptions::default());
    assert_eq!(report.classification, Classification::TypeI);
    assert_eq!(report.locus, Locus::Global);
    let plateau = report.plateau.unwrap();
    assert!((plateau - 3f64.sqrt() / 2.0).abs() < 1e-3, "plateau {plateau}");
    assert!((plateau - sphere_rm_plateau(3)).abs() < 1e-3);
    let margin = report.gap_margin.unwrap();
    assert!((margin - (8.0 * 3f64.sqrt() / 2.0 - 1.0)).abs() < 1e-2, "margin {margin}");
    assert_eq!(report.plateau_threshold, PLATEAU_SLOPE);
    assert_eq!(report.growth_threshold, GROWTH_SLOPE);
}

#[test]
fn flat_run_has_no_singularity() {
    let m = MetricState::warped(3, Profile::euclidean_ball(41, 1.0).unwrap(), 0.0).unwrap();
    let trace = integrate(&m, &StepController::default(), Some(0.1)).unwrap();
    let report = classify(&trace, &ClassifyOptions::default());
    assert_eq!(report.classification, Classification::NoSingularity);
    assert!(report.gap_margin.is_none());
}

#[test]
fn symmetric_dumbbell_pinches_with_type_one_rate() {
    let trace = dumbbell_trace(101);
    let report = classify(&trace, &ClassifyOptions::default());
    assert_eq!(report.classification, Classification::TypeI);
    assert_eq!(report.locus, Locus::Local);
    let plateau = report.plateau.unwrap();
    // Cylinder value 1 for n = 3; the finite-time neck sits slightly above it.
    assert!((plateau / cylinder_rm_plateau(3) - 1.0).abs() < 0.15, "plateau {plateau}");
    assert!(report.gap_margin.unwrap() >= -0.05);
    assert!(curvature_gap_check(&trace).unwrap() >= -0.05);
}

#[test]
fn sphere_blowup_is_exactly_normalized() {
    let trace = sphere_trace();
    let seq = build_blowup(&trace, &BlowupSchedule::default()).unwrap();
    assert!(seq.entries.len() >= 3);
    let alpha0 = seq.entries[0].alpha;
    for pair in seq.entries.windows(2) {
        assert!(pair[1].q >= pair[0].q);
    }
    for e in &seq.entries {
        assert!((e.alpha - alpha0).abs() < 1e-6, "alpha {} vs {alpha0}", e.alpha);
        assert!((e.marked_rm - 1.0).abs() <= 0.01);
        assert!(e.window_max_rm <= 1.01);
    }
    assert!(seq.a_estimate.is_some());
    assert!(!seq.diverging);
    let report = shrinker_diagnostics(&seq, &EntropyOptions::localized());
    for row in &report.rows {
        assert!(row.soliton_residual.unwrap().abs() < 1e-9, "{row:?}");
    }
    assert!(report.mu_nondecreasing && report.mu_cauchy && report.residual_nonincreasing);
}

#[test]
fn dumbbell_blowup_is_normalized() {
    let trace = dumbbell_trace(101);
    let seq = build_blowup(&trace, &BlowupSchedule::default()).unwrap();
    for e in &seq.entries {
        assert!((e.marked_rm - 1.0).abs() <= 0.01);
        assert!(e.window_max_rm <= 1.01);
    }
}

#[test]
fn window_before_start_is_rejected() {
    let trace = sphere_trace();
    let schedule = BlowupSchedule { indices: Some(vec![1]), r_min: -1e9, ..BlowupSchedule::default() };
    assert!(matches!(build_blowup(&trace, &schedule), Err(Error::WindowUnavailable { .. })));
}

#[test]
fn bisection_needs_differing_endpoints() {
    let family = |_: f64| MetricState::sphere(3, 1.0, 0.0);
    let result = type2_bisection(family, 0.0, 1.0, &BisectionOptions::default());
    assert!(matches!(result, Err(Error::InvalidArgument(_))));
}

fn synthetic(power: f64, points: usize) -> FlowTrace {
    let t_max = 1.0;
    let state = MetricState::sphere(3, 1.0, 0.0).unwrap();
    let diagnostics: Vec<Diagnostics> = (0..points)
        .map(|k| {
            let rest = 10f64.powf(-(k as f64) * 4.0 / (points - 1) as f64);
            Diagnostics {
                t: t_max - rest,
                max_rm: rest.powf(-power),
                argmax_rm: 0,
                min_r: 1.0,
                max_r: 1.0,
                volume: 1.0,
                lp_norms: Vec::new(),
            }
        })
        .collect();
    FlowTrace {
        states: vec![state; points],
        diagnostics,
        lp_exponents: Vec::new(),
        t_estimate: Some(t_max),
        termination: Termination::CurvatureCeiling,
        steps: points,
        regrids: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    /// `max|Rm| = (T - t)^{-p}` gives the trend slope `1 - p`.
    #[test]
    fn classification_follows_declared_thresholds(power in 0.5f64..2.5, points in 20usize..80) {
        let report = classify(&synthetic(power, points), &ClassifyOptions::default());
        let slope = report.trend_slope.unwrap();
        prop_assert!((slope - (1.0 - power)).abs() < 1e-9);
        let expected = if slope.abs() <= PLATEAU_SLOPE {
            Classification::TypeI
        } else if slope <= GROWTH_SLOPE {
            Classification::TypeII
        } else {
            Classification::Inconclusive
        };
        prop_assert_eq!(report.classification, expected);
        prop_assert!(report.sup_scaled_rm.unwrap() >= report.plateau.unwrap());
    }
}
