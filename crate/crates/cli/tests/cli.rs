//! End-to-end behaviour of the `ricci-lab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ricci_lab_cli::tables::Table;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ricci-lab")).args(args).output().unwrap()
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn shipped(name: &str) -> String {
    scenarios().join(format!("{name}.toml")).display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The directory printed on the `run:` or `sweep:` line.
fn printed_dir(o: &Output, label: &str) -> PathBuf {
    let prefix = format!("{label}: ");
    stdout(o).lines().find_map(|l| l.strip_prefix(&prefix).map(PathBuf::from)).unwrap_or_else(|| panic!("{}", stdout(o)))
}

const SPHERE: &str = "name = \"s\"\n[geometry]\nfamily = \"sphere\"\n";

#[test]
fn sphere_simulation_writes_documented_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let o = bin(&["simulate", &shipped("sphere"), "--assert", "--out", &out]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let dir = printed_dir(&o, "run");
    assert!(dir.starts_with(tmp.path().join("sphere")));
    let run_id = dir.file_name().unwrap().to_str().unwrap().to_string();
    assert_eq!(run_id.len(), 16);

    let trace = Table::parse(&std::fs::read_to_string(dir.join("trace.tsv")).unwrap()).unwrap();
    assert_eq!(trace.kind, "trace");
    for name in ["t", "max_rm", "min_R", "lp_R_1.5", "bound_margin", "gap_margin"] {
        assert!(trace.column(name).is_some(), "{name}");
    }
    let t = trace.column("t").unwrap();
    assert!(t.windows(2).all(|w| w[1] > w[0]));
    assert!(t.contains(&0.2));

    let entropy = Table::parse(&std::fs::read_to_string(dir.join("entropy.tsv")).unwrap()).unwrap();
    assert_eq!(entropy.rows.len(), 3);
    assert!(entropy.column("mu").unwrap().iter().all(|&mu| mu <= 1e-6));

    let manifest: toml::Table = std::fs::read_to_string(dir.join("manifest.txt")).unwrap().parse().unwrap();
    assert_eq!(manifest["run_id"].as_str(), Some(run_id.as_str()));
    assert_eq!(manifest["command"].as_str(), Some("simulate"));
    assert!(manifest["files"].as_table().unwrap().contains_key("trace.tsv"));
    assert!(manifest["scenario"]["flow"]["safety"].as_float().is_some());

    let report = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    let estimate = report.lines().find_map(|l| l.strip_prefix("t_estimate = ")).unwrap();
    let estimate: f64 = estimate.parse().unwrap();
    assert!((estimate - 0.25).abs() <= 1e-4, "{estimate}");
}

#[test]
fn run_ids_follow_the_effective_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let a = write(tmp.path(), "a.toml", SPHERE);
    // Explicit defaults and comments do not change the run.
    let b = write(tmp.path(), "b.toml", &format!("# comment\n{SPHERE}scale = 1.0\n[flow]\nsafety = 0.2\n"));
    let c = write(tmp.path(), "c.toml", &format!("{SPHERE}scale = 2.0\n"));
    let dir = |path: &str, command: &str| printed_dir(&bin(&[command, path, "--out", &out]), "run");
    assert_eq!(dir(&a, "simulate"), dir(&b, "simulate"));
    assert_ne!(dir(&a, "simulate"), dir(&c, "simulate"));
    assert_ne!(dir(&a, "simulate"), dir(&a, "classify"));
}

#[test]
fn refinement_is_part_of_the_run_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let s = write(tmp.path(), "r.toml", "name = \"r\"\n[geometry]\nfamily = \"round\"\nnodes = 21\n[flow]\nt_end = 0.01\n");
    let run = |k: &str| {
        let o = bin(&["classify", &s, "--out", &out, "--refine", k]);
        assert!(o.status.success(), "{}", stderr(&o));
        printed_dir(&o, "run")
    };
    let (one, two) = (run("1"), run("2"));
    assert_ne!(one, two);
    let manifest: toml::Table = std::fs::read_to_string(two.join("manifest.txt")).unwrap().parse().unwrap();
    assert_eq!(manifest["scenario"]["geometry"]["nodes"].as_integer(), Some(41));
}

#[test]
fn config_errors_exit_2_with_a_location() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let cases = [
        ("empty.toml", "", ":1:1:"),
        ("typo.toml", "name = \"x\"\n[geometry]\nfamily = \"sphere\"\nsacle = 1.0\n", ":4:1:"),
        ("depth.toml", "name = \"x\"\n[geometry]\nfamily = \"dumbbell\"\ndepth = 1.0\n", ":4:1:"),
        ("syntax.toml", "name = \"x\"\n[geometry\n", ":2:"),
    ];
    for (file, text, location) in cases {
        let path = write(tmp.path(), file, text);
        let o = bin(&["simulate", &path, "--out", &out]);
        assert_eq!(o.status.code(), Some(2), "{file}: {}", stderr(&o));
        let message = stderr(&o);
        assert!(message.contains(&format!("{path}{location}")), "{file}: {message}");
    }
    let o = bin(&["simulate", &tmp.path().join("missing.toml").display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
    let no_sweep = write(tmp.path(), "plain.toml", SPHERE);
    assert_eq!(bin(&["sweep", &no_sweep, "--out", &out]).status.code(), Some(2));
    assert_eq!(bin(&["simulate"]).status.code(), Some(2));
    assert_eq!(bin(&["simulate", &no_sweep, "--refine", "0"]).status.code(), Some(2));
    assert!(std::fs::read_dir(tmp.path()).unwrap().all(|e| e.unwrap().path().is_file()), "nothing was run");
}

#[test]
fn failed_assertions_exit_1_only_under_assert() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let s = write(tmp.path(), "wrong.toml", &format!("{SPHERE}[assert]\nt_estimate = [0.3, 0.4]\n"));
    let o = bin(&["simulate", &s, "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("FAIL") || stdout(&o).contains("fail"), "{}", stdout(&o));
    assert_eq!(bin(&["simulate", &s, "--out", &out, "--assert"]).status.code(), Some(1));
}

#[test]
fn one_point_sweep_matches_a_plain_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let plain = write(tmp.path(), "plain.toml", &format!("{SPHERE}scale = 1.5\n"));
    let swept = write(
        tmp.path(),
        "swept.toml",
        &format!("{SPHERE}scale = 0.7\n[sweep]\nparameter = \"geometry.scale\"\nvalues = [1.5]\n"),
    );
    let run = printed_dir(&bin(&["simulate", &plain, "--out", &out]), "run");
    let o = bin(&["sweep", &swept, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep_dir = printed_dir(&o, "sweep");
    let report = std::fs::read_to_string(sweep_dir.join("report.txt")).unwrap();
    let member = report.lines().find_map(|l| l.strip_prefix("run_0 = ")).unwrap();
    assert_eq!(tmp.path().join(member), run);
    let summary = Table::parse(&std::fs::read_to_string(sweep_dir.join("summary.tsv")).unwrap()).unwrap();
    assert_eq!(summary.column("value"), Some(vec![1.5]));
    let t = summary.column("t_estimate").unwrap()[0];
    assert!((t - 1.5 / 4.0).abs() <= 1e-4, "{t}");
}

#[test]
fn alpha_sweep_splits_at_half_the_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let o = bin(&["sweep", &shipped("alpha_sweep"), "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = printed_dir(&o, "sweep");
    let summary = Table::parse(&std::fs::read_to_string(dir.join("summary.tsv")).unwrap()).unwrap();
    let alpha = summary.column("lp_alpha").unwrap();
    let divergent = summary.column("lp_divergent").unwrap();
    assert_eq!(alpha, summary.column("value").unwrap());
    for (a, d) in alpha.iter().zip(&divergent) {
        assert_eq!(*d == 1.0, *a > 1.5, "alpha {a}");
    }
}

#[test]
fn verify_oracle_passes() {
    let o = bin(&["verify-oracle"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows.len() >= 10);
    assert!(rows.iter().all(|r| r.ends_with("\tpass")), "{text}");
}
