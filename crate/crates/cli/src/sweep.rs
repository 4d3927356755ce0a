//! One-parameter families: a grid of values run in parallel, or a bisection
//! on the collapse locus. Each member writes its own run directory; the sweep
//! writes `<out>/<scenario>/sweep-<id>/{summary.tsv, report.txt, manifest.txt}`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use ricci_lab::singularity::{type2_bisection, BisectionReport};

use crate::conventions;
use crate::run::{self, classification_code, divergent, locus_code, Command, Document, RunOutcome};
use crate::scenario::{Scenario, SweepSettings};
use crate::tables::Table;

/// One member of a grid sweep.
#[derive(Debug, Clone)]
pub struct Member {
    pub value: f64,
    pub outcome: Result<RunOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub summary: Table,
    pub members: Vec<Member>,
    pub bisection: Option<Result<BisectionReport, String>>,
}

impl SweepOutcome {
    /// True if any member run or the bisection errored.
    pub fn failed(&self) -> bool {
        self.members.iter().any(|m| m.outcome.as_ref().map_or(true, RunOutcome::failed))
            || matches!(self.bisection, Some(Err(_)))
    }

    pub fn checks_passed(&self) -> bool {
        self.members.iter().all(|m| m.outcome.as_ref().map_or(true, RunOutcome::checks_passed))
    }
}

fn member_scenario(scenario: &Scenario, parameter: &str, value: f64, refine: usize) -> Result<Scenario, String> {
    let variant = scenario.with_parameter(parameter, value)?;
    Ok(run::effective(&variant, Command::Simulate, refine))
}

fn outcome_row(value: f64, o: &RunOutcome) -> Vec<f64> {
    let report = o.singularity.as_ref();
    let nan = f64::NAN;
    let (lp_alpha, lp_growth) = o.lp_growth.first().copied().unwrap_or((nan, nan));
    vec![
        value,
        if o.failed() { 1.0 } else { 0.0 },
        report.map_or(nan, |r| classification_code(r.classification)),
        report.map_or(nan, |r| locus_code(r.locus)),
        report.and_then(|r| r.plateau).unwrap_or(nan),
        o.t_estimate.map_or(nan, |(t, _)| t),
        o.t_estimate.map_or(nan, |(_, e)| e),
        o.final_mu().unwrap_or(nan),
        report.and_then(|r| r.trend_slope).unwrap_or(nan),
        lp_alpha,
        lp_growth,
        divergent(lp_growth),
    ]
}

fn failed_row(value: f64) -> Vec<f64> {
    let mut row = vec![f64::NAN; conventions::SUMMARY_COLUMNS.len()];
    row[0] = value;
    row[1] = 1.0;
    row
}

/// Runs the sweep declared in `scenario` and writes its artifacts under `out`.
pub fn sweep(scenario: &Scenario, out: &Path, refine: usize) -> std::io::Result<SweepOutcome> {
    let settings = scenario.sweep.clone().expect("sweep needs a [sweep] table");
    let id = run::run_id("sweep", &run::effective(scenario, Command::Simulate, refine));
    let dir = out.join(&scenario.name).join(format!("sweep-{id}"));
    let mut summary = Table::from_columns("summary", conventions::SUMMARY_SCHEMA, &conventions::SUMMARY_COLUMNS);
    let mut doc = Document::new("sweep", conventions::REPORT_SCHEMA);
    doc.section("sweep");
    doc.text("scenario", &scenario.name);
    doc.text("sweep_id", &id);
    doc.text("parameter", &settings.parameter);

    let (members, bisection) = match settings.bisect {
        Some([lo, hi]) => (Vec::new(), Some(bisect(scenario, &settings, lo, hi, refine, &mut summary, &mut doc))),
        None => (grid(scenario, &settings, out, refine, &mut summary, &mut doc), None),
    };
    let outcome = SweepOutcome { dir: dir.clone(), summary, members, bisection };
    doc.text("status", if outcome.failed() { "failed" } else { "ok" });

    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("summary.tsv"), outcome.summary.render())?;
    std::fs::write(dir.join("report.txt"), doc.finish())?;
    let files = [
        ("summary.tsv", format!("summary v{}", conventions::SUMMARY_SCHEMA)),
        ("report.txt", format!("sweep v{}", conventions::REPORT_SCHEMA)),
    ];
    let manifest = run::manifest_text(&run::effective(scenario, Command::Simulate, refine), "sweep", &id, &files);
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(outcome)
}

fn grid(
    scenario: &Scenario,
    settings: &SweepSettings,
    out: &Path,
    refine: usize,
    summary: &mut Table,
    doc: &mut Document,
) -> Vec<Member> {
    let members: Vec<Member> = settings
        .values
        .par_iter()
        .map(|&value| {
            let outcome = member_scenario(scenario, &settings.parameter, value, refine)
                .and_then(|s| run::run(&s, Command::Simulate, out).map_err(|e| e.to_string()));
            Member { value, outcome }
        })
        .collect();
    doc.text("runs", members.len());
    for (k, m) in members.iter().enumerate() {
        match &m.outcome {
            Ok(o) => {
                summary.push(outcome_row(m.value, o));
                let rel = o.dir.strip_prefix(out).unwrap_or(&o.dir);
                doc.text(&format!("run_{k}"), rel.display());
                if o.failed() {
                    let mut reasons: Vec<String> = o.flow_error.iter().cloned().collect();
                    reasons.extend(o.errors.iter().cloned());
                    doc.text(&format!("run_{k}_error"), reasons.join("; "));
                }
            }
            Err(e) => {
                summary.push(failed_row(m.value));
                doc.text(&format!("run_{k}_error"), e);
            }
        }
    }
    members
}

fn bisect(
    scenario: &Scenario,
    settings: &SweepSettings,
    lo: f64,
    hi: f64,
    refine: usize,
    summary: &mut Table,
    doc: &mut Document,
) -> Result<BisectionReport, String> {
    let base = run::effective(scenario, Command::Simulate, refine);
    let opts = settings.bisection_options(&base);
    let family = |lambda: f64| {
        member_scenario(scenario, &settings.parameter, lambda, refine)
            .map_err(ricci_lab::Error::InvalidArgument)?
            .geometry
            .initial_state()
    };
    let result = type2_bisection(family, lo, hi, &opts).map_err(|e| e.to_string());
    doc.section("bisection");
    doc.num("initial_lo", lo);
    doc.num("initial_hi", hi);
    doc.text("budget", settings.budget);
    doc.num("target_fraction", settings.target_fraction);
    match &result {
        Ok(report) => {
            let nan = f64::NAN;
            for r in &report.runs {
                let s = &r.report;
                summary.push(vec![
                    r.lambda,
                    if r.error.is_some() { 1.0 } else { 0.0 },
                    classification_code(s.classification),
                    locus_code(r.locus),
                    s.plateau.unwrap_or(nan),
                    s.t_estimate.unwrap_or(nan),
                    nan,
                    nan,
                    s.trend_slope.unwrap_or(nan),
                    nan,
                    nan,
                    nan,
                ]);
            }
            doc.num("lo", report.lo);
            doc.num("hi", report.hi);
            doc.text("lo_locus", format!("{:?}", report.lo_locus));
            doc.text("hi_locus", format!("{:?}", report.hi_locus));
            doc.num("width_fraction", (report.hi - report.lo) / report.initial_width);
            doc.text("runs", report.runs.len());
            doc.num("max_signature", report.max_signature);
            doc.num("signature_lambda", report.signature_lambda);
            doc.num("sphere_plateau", ricci_lab::oracle::sphere_rm_plateau(scenario.geometry.dimension()));
            doc.text(
                "signature_note",
                "largest tail (T-t) max|Rm| of any run; a Type II signature, not a certificate",
            );
        }
        Err(e) => doc.text("error", e),
    }
    result
}
