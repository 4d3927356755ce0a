use std::path::Path;

use proptest::prelude::*;
use ricci_lab_cli::scenario::{defaults, Geometry, Scenario};

fn shipped() -> Vec<(String, Scenario)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut out: Vec<(String, Scenario)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| (p.display().to_string(), Scenario::load(&p).unwrap_or_else(|e| panic!("{e}"))))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn error_at(text: &str) -> (usize, usize, String) {
    let e = Scenario::from_toml_str(text, "test.toml").unwrap_err();
    assert_eq!(e.origin, "test.toml");
    (e.line, e.column, e.message)
}

#[test]
fn shipped_scenarios_load_and_round_trip() {
    let all = shipped();
    assert!(all.len() >= 5);
    for (path, s) in all {
        let again = Scenario::from_toml_str(&s.to_toml(), &path).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(again, s, "{path}");
    }
}

#[test]
fn minimal_scenario_gets_documented_defaults() {
    let s = Scenario::from_toml_str("name = \"m\"\n[geometry]\nfamily = \"dumbbell\"\n", "m.toml").unwrap();
    assert_eq!(
        s.geometry,
        Geometry::Dumbbell {
            n: defaults::DIMENSION,
            nodes: defaults::GRID_NODES,
            depth: defaults::DUMBBELL_DEPTH,
            width: defaults::DUMBBELL_WIDTH,
            center: defaults::DUMBBELL_CENTER,
        }
    );
    assert_eq!(s.flow.safety, defaults::SAFETY);
    assert_eq!(s.flow.rm_ceiling, defaults::RM_CEILING);
    assert_eq!(s.entropy.samples, defaults::ENTROPY_SAMPLES);
    assert!(s.analysis.classify);
    assert!(!s.analysis.blowup);
    assert!(s.sweep.is_none());
    // Written out, every default is explicit.
    let text = s.to_toml();
    for key in ["safety", "rm_ceiling", "store_growth", "samples", "scalar_bound", "depth"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn empty_file_is_an_error_at_the_start() {
    let (line, column, message) = error_at("  \n\n");
    assert_eq!((line, column), (1, 1));
    assert!(message.contains("empty"));
}

#[test]
fn unknown_key_points_at_its_line() {
    let (line, column, message) = error_at("name = \"x\"\n[geometry]\nfamily = \"sphere\"\nnn = 3\n");
    assert_eq!((line, column), (4, 1));
    assert!(message.contains("nn"), "{message}");

    let (line, _, message) = error_at("name = \"x\"\n[geometry]\nfamily = \"sphere\"\n[flow]\nsafty = 0.1\n");
    assert_eq!(line, 5);
    assert!(message.contains("safty"), "{message}");
}

#[test]
fn invalid_values_point_at_their_key() {
    let (line, _, message) =
        error_at("name = \"x\"\n[geometry]\nfamily = \"dumbbell\"\nnodes = 51\ndepth = 1.5\n");
    assert_eq!(line, 5);
    assert!(message.starts_with("geometry.depth"), "{message}");

    let (line, _, message) = error_at("name = \"x\"\n[geometry]\nfamily = \"sphere\"\n\n[flow]\nsafety = 0.0\n");
    assert_eq!(line, 6);
    assert!(message.starts_with("flow.safety"), "{message}");
}

#[test]
fn syntax_and_type_errors_are_anchored() {
    let (line, _, _) = error_at("name = \"x\"\n[geometry\n");
    assert_eq!(line, 2);
    let (line, _, message) = error_at("name = \"x\"\n[geometry]\nfamily = \"torus\"\n");
    assert_eq!(line, 3, "{message}");
    let (line, _, _) = error_at("name = \"x\"\n[geometry]\nfamily = \"sphere\"\nn = \"three\"\n");
    assert_eq!(line, 4);
}

#[test]
fn shrinker_requires_blowup() {
    let (_, _, message) = error_at("name = \"x\"\n[geometry]\nfamily = \"sphere\"\n[analysis]\nshrinker = true\n");
    assert!(message.contains("blowup"), "{message}");
}

#[test]
fn sweep_needs_values_or_bracket_but_not_both() {
    let head = "name = \"x\"\n[geometry]\nfamily = \"dumbbell\"\n[sweep]\nparameter = \"geometry.depth\"\n";
    assert!(Scenario::from_toml_str(head, "t").is_err());
    assert!(Scenario::from_toml_str(&format!("{head}values = [0.5]\nbisect = [0.5, 0.6]\n"), "t").is_err());
    assert!(Scenario::from_toml_str(&format!("{head}values = [0.5, 0.6]\n"), "t").is_ok());
    let (_, _, message) = error_at(&format!("{head}values = [1.2]\n"));
    assert!(message.contains("sweep.values"), "{message}");
}

#[test]
fn with_parameter_sets_scalars_integers_and_arrays() {
    let s = Scenario::from_toml_str("name = \"x\"\n[geometry]\nfamily = \"dumbbell\"\n", "t").unwrap();
    let v = s.with_parameter("geometry.depth", 0.5).unwrap();
    assert!(matches!(v.geometry, Geometry::Dumbbell { depth, .. } if depth == 0.5));
    let v = s.with_parameter("geometry.nodes", 51.0).unwrap();
    assert_eq!(v.geometry.nodes(), Some(51));
    assert!(s.with_parameter("geometry.nodes", 51.5).is_err());
    let v = s.with_parameter("flow.lp_exponents", 2.5).unwrap();
    assert_eq!(v.flow.lp_exponents, vec![2.5]);
    assert!(s.with_parameter("geometry.nope", 1.0).unwrap_err().contains("unknown parameter"));
    assert!(s.with_parameter("geometry.depth", 2.0).is_err());
    assert!(s.with_parameter("geometry.depth", f64::NAN).is_err());
}

#[test]
fn refinement_keeps_existing_nodes() {
    let g = Geometry::PerturbedSphere { n: 3, nodes: 101, eps: 0.05 };
    assert_eq!(g.refined(2).nodes(), Some(201));
    assert_eq!(g.refined(1), g);
    assert_eq!(Geometry::Sphere { n: 3, scale: 1.0 }.refined(4).nodes(), None);
}

proptest! {
    #[test]
    fn generated_scenarios_round_trip(
        n in 3usize..8,
        nodes in 11usize..500,
        depth in 0.0f64..0.99,
        width in 0.05f64..0.4,
        safety in 0.01f64..1.0,
        seed in 0..=i64::MAX as u64,
        blowup in any::<bool>(),
    ) {
        let text = format!(
            "name = \"p\"\nseed = {seed}\n[geometry]\nfamily = \"dumbbell\"\nn = {n}\nnodes = {nodes}\n\
             depth = {depth:?}\nwidth = {width:?}\n[flow]\nsafety = {safety:?}\n[analysis]\nblowup = {blowup}\n"
        );
        let s = Scenario::from_toml_str(&text, "p").unwrap();
        let again = Scenario::from_toml_str(&s.to_toml(), "p").unwrap();
        prop_assert_eq!(&again, &s);
        prop_assert_eq!(again.to_toml(), s.to_toml());
    }

    #[test]
    fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
        let _ = Scenario::from_toml_str(&text, "fuzz");
    }
}

#[test]
fn geometry_type_errors_name_their_key() {
    let (line, _, message) = error_at("name = \"x\"\n[geometry]\nfamily = \"sphere\"\nn = \"three\"\n");
    assert_eq!(line, 4);
    assert!(message.starts_with("geometry.n:"), "{message}");
    let (line, _, message) = error_at("name = \"x\"\n[geometry]\nfamily = \"torus\"\nn = 3\n");
    assert_eq!(line, 3, "{message}");
    assert!(message.contains("torus"), "{message}");
}
