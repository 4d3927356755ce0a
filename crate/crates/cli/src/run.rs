//! One scenario run: integrate, analyse, check, and write
//! `<out>/<scenario>/<run-id>/{trace.tsv, entropy.tsv, report.txt, manifest.txt}`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use ricci_lab::entropy::{
    couple_backward, entropy_grid, minimize_w, minimize_w_with_band, monotonicity_check, EntropyOptions,
    MonotonicityReport,
};
use ricci_lab::flow::{estimate_t_with_error, integrate, scalar_lower_bound, scalar_lower_bound_check, FlowTrace};
use ricci_lab::geometry::MetricState;
use ricci_lab::singularity::{
    build_blowup, classify, curvature_gap_check, BlowupSequence, Classification, Locus, ShrinkerReport,
    SingularityReport, GLOBAL_LOCUS_SPAN, GROWTH_SLOPE, MIN_TREND_POINTS, NORMALIZATION_TOLERANCE, PLATEAU_SLOPE,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::conventions::{self, Column};
use crate::scenario::{Scenario, TauPolicy};
use crate::tables::{fmt_f64, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Every analysis the scenario enables.
    Simulate,
    /// Entropy samples (and the monotonicity check if enabled).
    Entropy,
    /// Flow and classification only.
    Classify,
    /// Blow-up sequence and shrinker diagnostics.
    Blowup,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Entropy => "entropy",
            Command::Classify => "classify",
            Command::Blowup => "blowup",
        }
    }

    /// The scenario with the analyses this command implies switched on.
    pub fn apply(self, scenario: &Scenario) -> Scenario {
        let mut s = scenario.clone();
        let a = &mut s.analysis;
        match self {
            Command::Simulate => {}
            Command::Entropy => {
                a.entropy = true;
                a.blowup = false;
                a.shrinker = false;
            }
            Command::Classify => {
                a.classify = true;
                a.entropy = false;
                a.monotonicity = false;
                a.blowup = false;
                a.shrinker = false;
            }
            Command::Blowup => {
                a.blowup = true;
                a.shrinker = true;
                a.entropy = false;
                a.monotonicity = false;
            }
        }
        s
    }
}

/// Outcome of one `--assert` check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// One row of the entropy table.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropySample {
    pub t: f64,
    pub tau: f64,
    pub mu: f64,
    pub w: f64,
    pub mu_band: f64,
    pub constraint_residual: f64,
    pub euler_lagrange_residual: f64,
    pub soliton_residual: f64,
    pub min_f: f64,
    pub max_f: f64,
    pub phi_l2: f64,
    pub grad_phi_l2: f64,
    pub beta: f64,
    pub converged: bool,
    pub resolved: bool,
}

/// Everything a run produced, kept in memory for sweeps and tests.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub scenario: Scenario,
    pub trace: FlowTrace,
    /// Integration error that cut the trace short.
    pub flow_error: Option<String>,
    pub t_estimate: Option<(f64, f64)>,
    pub singularity: Option<SingularityReport>,
    pub entropy: Vec<EntropySample>,
    pub monotonicity: Option<MonotonicityReport>,
    pub blowup: Option<BlowupSequence>,
    pub shrinker: Option<ShrinkerReport>,
    /// `(alpha, growth over the final decade)` per recorded exponent.
    pub lp_growth: Vec<(f64, f64)>,
    /// Analysis failures other than the flow error.
    pub errors: Vec<String>,
    pub checks: Vec<Check>,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.flow_error.is_some() || !self.errors.is_empty()
    }

    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn final_mu(&self) -> Option<f64> {
        self.entropy.last().map(|s| s.mu)
    }
}

/// Stable identifier of `(command, scenario)`: the first 16 hex digits of the
/// SHA-256 of the command name and the canonical scenario text.
pub fn run_id(command: &str, scenario: &Scenario) -> String {
    hex::encode(scenario_digest(command, scenario))[..16].to_string()
}

fn scenario_digest(command: &str, scenario: &Scenario) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update(b"\n");
    hasher.update(scenario.to_toml().as_bytes());
    hasher.finalize().to_vec()
}

/// The scenario as run: command overrides applied, grid refined `refine` times.
pub fn effective(scenario: &Scenario, command: Command, refine: usize) -> Scenario {
    let mut s = command.apply(scenario);
    s.geometry = s.geometry.refined(refine.max(1));
    s
}

/// Runs `scenario` (already passed through [`effective`]) and writes its artifacts under `out`.
pub fn run(scenario: &Scenario, command: Command, out: &Path) -> std::io::Result<RunOutcome> {
    let outcome = execute(scenario, command.name(), out);
    write_artifacts(&outcome, command.name())?;
    Ok(outcome)
}

/// Runs the analyses without touching the file system.
pub fn execute(scenario: &Scenario, command: &str, out: &Path) -> RunOutcome {
    let run_id = run_id(command, scenario);
    let dir = out.join(&scenario.name).join(&run_id);
    let m0 = scenario.geometry.initial_state().expect("validated scenarios build their initial state");
    let controller = scenario.flow.controller();
    let (trace, flow_error) = match integrate(&m0, &controller, scenario.flow.t_end) {
        Ok(trace) => (trace, None),
        Err(failure) => {
            let failure = *failure;
            (failure.trace, Some(failure.error.to_string()))
        }
    };
    let t_estimate = trace.t_estimate.and_then(|_| estimate_t_with_error(&trace).ok());
    let mut outcome = RunOutcome {
        run_id,
        dir,
        scenario: scenario.clone(),
        trace,
        flow_error,
        t_estimate,
        singularity: None,
        entropy: Vec::new(),
        monotonicity: None,
        blowup: None,
        shrinker: None,
        lp_growth: Vec::new(),
        errors: Vec::new(),
        checks: Vec::new(),
    };
    let a = &scenario.analysis;
    if a.classify {
        outcome.singularity = Some(classify(&outcome.trace, &a.classify_options()));
    }
    outcome.lp_growth = lp_growth(&outcome.trace);
    if outcome.flow_error.is_none() {
        if a.entropy {
            entropy_samples(&mut outcome);
        }
        if a.monotonicity {
            match monotonicity(&outcome) {
                Ok(report) => outcome.monotonicity = Some(report),
                Err(e) => outcome.errors.push(format!("monotonicity: {e}")),
            }
        }
        if a.blowup {
            blowup(&mut outcome);
        }
    }
    outcome.checks = checks(&outcome);
    outcome
}

/// `tau` at time `t` under the scenario's policy; `None` when it is not positive or unknown.
fn tau_at(scenario: &Scenario, t_est: Option<f64>, t: f64) -> Result<f64, String> {
    match scenario.entropy.tau_policy {
        TauPolicy::Fixed => Ok(scenario.entropy.tau),
        TauPolicy::Remaining => {
            let t_est = t_est.ok_or("tau policy `remaining` needs a singular-time estimate")?;
            let tau = t_est - t;
            if tau > 0.0 {
                Ok(tau)
            } else {
                Err(format!("tau = T_estimate - t = {tau:e} is not positive at t = {t}"))
            }
        }
    }
}

/// Evenly spaced (by index) picks of `count` items from `0..len`.
fn even_picks(len: usize, count: usize) -> Vec<usize> {
    if len == 0 || count == 0 {
        return Vec::new();
    }
    if count == 1 || len == 1 {
        return vec![0];
    }
    let mut picks: Vec<usize> =
        (0..count).map(|k| ((k * (len - 1)) as f64 / (count - 1) as f64).round() as usize).collect();
    picks.dedup();
    picks
}

fn entropy_samples(outcome: &mut RunOutcome) {
    let scenario = &outcome.scenario;
    let settings = &scenario.entropy;
    let t_est = outcome.t_estimate.map(|(t, _)| t);
    let t_err = outcome.t_estimate.map_or(0.0, |(_, e)| e);
    let states = &outcome.trace.states;
    let candidates: Vec<usize> = match (settings.tau_policy, t_est) {
        (TauPolicy::Remaining, Some(t_est)) => (0..states.len()).filter(|&i| states[i].t <= settings.until * t_est).collect(),
        (TauPolicy::Remaining, None) => {
            outcome.errors.push("entropy: tau policy `remaining` needs a singular-time estimate".into());
            return;
        }
        (TauPolicy::Fixed, _) => (0..states.len()).collect(),
    };
    let picks: Vec<usize> = even_picks(candidates.len(), settings.samples).into_iter().map(|k| candidates[k]).collect();
    let results: Vec<Result<EntropySample, String>> = picks
        .par_iter()
        .map(|&i| {
            let m = &states[i];
            let tau = tau_at(scenario, t_est, m.t)?;
            let band_width = if settings.bands && settings.tau_policy == TauPolicy::Remaining { t_err } else { 0.0 };
            let (min, band) =
                minimize_w_with_band(m, tau, band_width, &settings.solver).map_err(|e| format!("t = {}: {e}", m.t))?;
            let r = &min.record;
            Ok(EntropySample {
                t: m.t,
                tau,
                mu: r.mu,
                w: r.w,
                mu_band: band,
                constraint_residual: r.constraint_residual,
                euler_lagrange_residual: r.euler_lagrange_residual,
                soliton_residual: r.soliton_residual,
                min_f: r.min_f,
                max_f: r.max_f,
                phi_l2: r.phi_l2,
                grad_phi_l2: r.grad_phi_l2,
                beta: r.beta,
                converged: r.converged,
                resolved: r.resolved,
            })
        })
        .collect();
    for r in results {
        match r {
            Ok(sample) => outcome.entropy.push(sample),
            Err(e) => outcome.errors.push(format!("entropy: {e}")),
        }
    }
}

fn monotonicity(outcome: &RunOutcome) -> Result<MonotonicityReport, String> {
    let scenario = &outcome.scenario;
    let trace = &outcome.trace;
    let last_t = trace.states.last().ok_or("empty trace")?.t;
    let span = outcome.t_estimate.map_or(last_t, |(t, _)| t);
    let [a, b] = scenario.analysis.monotonicity_window;
    let window: Vec<&MetricState> = trace.states.iter().filter(|m| m.t >= a * span && m.t <= b * span).collect();
    if window.len() < 3 {
        return Err(format!(
            "only {} stored states in [{}, {}]; set flow.store_interval to sample the window",
            window.len(),
            a * span,
            b * span
        ));
    }
    let solver = &scenario.entropy.solver;
    let states: Vec<MetricState> = window
        .iter()
        .map(|m| entropy_grid(m, solver.sphere_nodes))
        .collect::<ricci_lab::Result<_>>()
        .map_err(|e| e.to_string())?;
    let last = states.last().expect("at least three states");
    let t_est = outcome.t_estimate.map(|(t, _)| t);
    let tau_last = tau_at(scenario, t_est, last.t)?;
    let min = minimize_w(last, tau_last, solver).map_err(|e| e.to_string())?;
    let fields = couple_backward(&states, &min.field).map_err(|e| e.to_string())?;
    let t_err = match scenario.entropy.tau_policy {
        TauPolicy::Remaining => outcome.t_estimate.map_or(0.0, |(_, e)| e),
        TauPolicy::Fixed => 0.0,
    };
    monotonicity_check(&states, &fields, t_err).map_err(|e| e.to_string())
}

fn blowup(outcome: &mut RunOutcome) {
    let a = &outcome.scenario.analysis;
    if outcome.trace.t_estimate.is_none() {
        outcome.errors.push("blowup: no singular-time estimate (the run did not reach the curvature ceiling)".into());
        return;
    }
    match build_blowup(&outcome.trace, &a.schedule) {
        Ok(seq) => {
            if a.shrinker {
                let opts = EntropyOptions { starts: a.shrinker_starts.clone(), ..outcome.scenario.entropy.solver.clone() };
                outcome.shrinker = Some(ricci_lab::singularity::shrinker_diagnostics(&seq, &opts));
            }
            outcome.blowup = Some(seq);
        }
        Err(e) => outcome.errors.push(format!("blowup: {e}")),
    }
}

/// `int |R|^alpha` at the last stored time over its value where `T - t` is
/// closest (in log) to ten times the final `T - t`.
fn lp_growth(trace: &FlowTrace) -> Vec<(f64, f64)> {
    let d = &trace.diagnostics;
    let (Some(t_est), Some(last)) = (trace.t_estimate, d.last()) else {
        return trace.lp_exponents.iter().map(|&a| (a, f64::NAN)).collect();
    };
    let rest = t_est - last.t;
    let reference = d
        .iter()
        .enumerate()
        .filter(|(_, x)| t_est - x.t > 0.0)
        .min_by(|(_, x), (_, y)| {
            let dx = ((t_est - x.t) / rest).log10() - 1.0;
            let dy = ((t_est - y.t) / rest).log10() - 1.0;
            dx.abs().total_cmp(&dy.abs())
        })
        .map(|(i, _)| i);
    trace
        .lp_exponents
        .iter()
        .enumerate()
        .map(|(k, &alpha)| match reference {
            Some(i) if rest > 0.0 => (alpha, last.lp_norms[k] / d[i].lp_norms[k]),
            _ => (alpha, f64::NAN),
        })
        .collect()
}

fn bound_margins(trace: &FlowTrace) -> Vec<f64> {
    let Some(first) = trace.diagnostics.first() else {
        return Vec::new();
    };
    let n = trace.states[0].n as f64;
    trace
        .diagnostics
        .iter()
        .map(|d| {
            let b = scalar_lower_bound(first.min_r, n, d.t - first.t);
            (d.min_r - b) / b.abs().max(1.0)
        })
        .collect()
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name, passed, detail: detail.into() }
}

fn within(v: Option<f64>, [lo, hi]: [f64; 2]) -> bool {
    v.is_some_and(|v| v >= lo && v <= hi)
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), fmt_f64)
}

fn checks(o: &RunOutcome) -> Vec<Check> {
    let want = &o.scenario.assert;
    let mut out = Vec::new();
    let report = o.singularity.as_ref();
    if let Some(c) = want.classification {
        let got = report.map(|r| r.classification);
        out.push(check("classification", got == Some(c), format!("expected {c:?}, got {got:?}")));
    }
    if let Some(l) = want.locus {
        let got = report.map(|r| r.locus);
        out.push(check("locus", got == Some(l), format!("expected {l:?}, got {got:?}")));
    }
    if let Some(range) = want.t_estimate {
        let got = o.t_estimate.map(|(t, _)| t);
        out.push(check("t_estimate", within(got, range), format!("{} in {range:?}", show(got))));
    }
    if let Some(range) = want.plateau {
        let got = report.and_then(|r| r.plateau);
        out.push(check("plateau", within(got, range), format!("{} in {range:?}", show(got))));
    }
    if let Some(min) = want.min_bound_margin {
        let got = scalar_lower_bound_check(&o.trace);
        out.push(check("min_bound_margin", got >= min, format!("{} >= {}", fmt_f64(got), fmt_f64(min))));
    }
    if let Some(min) = want.min_gap_margin {
        let got = curvature_gap_check(&o.trace);
        out.push(check("min_gap_margin", got.is_some_and(|g| g >= min), format!("{} >= {}", show(got), fmt_f64(min))));
    }
    if let Some(max) = want.max_mu {
        let worst = o.entropy.iter().map(|s| s.mu).reduce(f64::max);
        let ok = !o.entropy.is_empty() && worst.is_some_and(|w| w <= max);
        out.push(check("max_mu", ok, format!("max mu {} <= {}", show(worst), fmt_f64(max))));
    }
    if let Some(tol) = want.mu_nondecreasing {
        let drop = o.entropy.windows(2).map(|w| w[0].mu - w[1].mu).fold(f64::NEG_INFINITY, f64::max);
        let ok = o.entropy.len() >= 2 && drop <= tol;
        out.push(check("mu_nondecreasing", ok, format!("largest decrease {} <= {}", fmt_f64(drop), fmt_f64(tol))));
    }
    if let Some(max) = want.max_soliton_residual {
        let worst = o.entropy.iter().map(|s| s.soliton_residual.abs()).reduce(f64::max);
        let ok = !o.entropy.is_empty() && worst.is_some_and(|w| w <= max);
        out.push(check("max_soliton_residual", ok, format!("{} <= {}", show(worst), fmt_f64(max))));
    }
    if let Some(expected) = want.blowup_normalized {
        let normalized = o.blowup.as_ref().is_some_and(|seq| {
            seq.entries.iter().all(|e| {
                (e.marked_rm - 1.0).abs() <= NORMALIZATION_TOLERANCE && e.window_max_rm <= 1.0 + NORMALIZATION_TOLERANCE
            })
        });
        out.push(check("blowup_normalized", normalized == expected, format!("normalized = {normalized}")));
    }
    if let Some(max) = want.max_shrinker_residual_ratio {
        let got = o.shrinker.as_ref().and_then(|s| s.residual_ratio);
        out.push(check("max_shrinker_residual_ratio", got.is_some_and(|r| r <= max), format!("{} <= {}", show(got), fmt_f64(max))));
    }
    if let Some(min) = want.min_dw_dt {
        let got = o.monotonicity.as_ref().map(|m| m.min_dw_dt);
        out.push(check("min_dw_dt", got.is_some_and(|g| g >= min), format!("{} >= {}", show(got), fmt_f64(min))));
    }
    if let Some(max) = want.max_monotonicity_difference {
        let got = o.monotonicity.as_ref().map(|m| m.max_relative_difference);
        out.push(check(
            "max_monotonicity_difference",
            got.is_some_and(|g| g <= max),
            format!("{} <= {}", show(got), fmt_f64(max)),
        ));
    }
    out
}

pub fn classification_code(c: Classification) -> f64 {
    match c {
        Classification::NoSingularity => 0.0,
        Classification::TypeI => 1.0,
        Classification::TypeII => 2.0,
        Classification::Inconclusive => 3.0,
    }
}

pub fn locus_code(l: Locus) -> f64 {
    match l {
        Locus::Global => 0.0,
        Locus::Local => 1.0,
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn trace_table(o: &RunOutcome) -> Table {
    let trace = &o.trace;
    let lp: Vec<(String, String)> = trace
        .lp_exponents
        .iter()
        .map(|&a| (conventions::lp_column_name(a), format!("{} with alpha = {a}", conventions::LP_NORM)))
        .collect();
    let columns = labelled(&conventions::TRACE_HEAD)
        .chain(lp)
        .chain(labelled(&conventions::TRACE_TAIL))
        .collect::<Vec<_>>();
    let mut table = Table::new("trace", conventions::TRACE_SCHEMA, columns);
    let margins = bound_margins(trace);
    let t_est = trace.t_estimate;
    for (d, margin) in trace.diagnostics.iter().zip(margins) {
        let scaled = t_est.filter(|&t| t > d.t).map_or(f64::NAN, |t| (t - d.t) * d.max_rm);
        let mut row = vec![d.t, d.max_rm, d.min_r, d.max_r, d.volume];
        row.extend(&d.lp_norms);
        row.extend([margin, 8.0 * scaled - 1.0, scaled]);
        table.push(row);
    }
    table
}

fn labelled(columns: &[Column]) -> impl Iterator<Item = (String, String)> + '_ {
    columns.iter().map(|c| (c.name.to_string(), c.convention.to_string()))
}

pub fn entropy_table(o: &RunOutcome) -> Table {
    let mut table = Table::from_columns("entropy", conventions::ENTROPY_SCHEMA, &conventions::ENTROPY_COLUMNS);
    for s in &o.entropy {
        table.push(vec![
            s.t,
            s.tau,
            s.mu,
            s.w,
            s.mu_band,
            s.constraint_residual,
            s.euler_lagrange_residual,
            s.soliton_residual,
            s.min_f,
            s.max_f,
            s.phi_l2,
            s.grad_phi_l2,
            s.beta,
            flag(s.converged),
            flag(s.resolved),
        ]);
    }
    table
}

/// Plain `[section]` / `key = value` text with embedded tables.
#[derive(Default)]
pub struct Document(String);

impl Document {
    pub fn new(kind: &str, version: u32) -> Self {
        Document(format!("# ricci-lab {kind} v{version}\n"))
    }

    pub fn section(&mut self, name: &str) {
        self.0.push_str(&format!("\n[{name}]\n"));
    }

    pub fn text(&mut self, key: &str, value: impl Display) {
        self.0.push_str(&format!("{key} = {value}\n"));
    }

    pub fn num(&mut self, key: &str, value: f64) {
        self.text(key, fmt_f64(value));
    }

    pub fn opt(&mut self, key: &str, value: Option<f64>) {
        self.text(key, show(value));
    }

    pub fn table(&mut self, table: &Table) {
        self.0.push_str(&table.render());
    }

    pub fn finish(self) -> String {
        self.0
    }
}

pub fn report_text(o: &RunOutcome, command: &str) -> String {
    let mut doc = Document::new("report", conventions::REPORT_SCHEMA);
    let trace = &o.trace;
    doc.section("run");
    doc.text("scenario", &o.scenario.name);
    doc.text("command", command);
    doc.text("run_id", &o.run_id);
    doc.text("termination", format!("{:?}", trace.termination));
    doc.text("steps", trace.steps);
    doc.text("regrids", trace.regrids);
    doc.text("stored_states", trace.states.len());
    doc.opt("t_last", trace.states.last().map(|m| m.t));
    doc.text("flow_error", o.flow_error.as_deref().unwrap_or("none"));
    doc.text("status", if o.failed() { "failed" } else { "ok" });
    for e in &o.errors {
        doc.text("error", e);
    }

    doc.section("singular_time");
    doc.opt("t_estimate", o.t_estimate.map(|(t, _)| t));
    doc.opt("t_error", o.t_estimate.map(|(_, e)| e));
    doc.num("bound_margin", scalar_lower_bound_check(trace));
    doc.opt("gap_margin", curvature_gap_check(trace));

    if let Some(r) = &o.singularity {
        doc.section("classification");
        doc.text("classification", format!("{:?}", r.classification));
        doc.text("locus", format!("{:?}", r.locus));
        doc.opt("plateau", r.plateau);
        doc.opt("trend_slope", r.trend_slope);
        doc.text("tail_states", r.tail_states);
        doc.opt("sup_scaled_rm", r.sup_scaled_rm);
        doc.opt("tail_sup_scaled_rm", r.tail_sup_scaled_rm);
        doc.opt("gap_margin", r.gap_margin);
        doc.text("scalar_bounded", r.scalar_bounded);
        doc.num("max_abs_r", r.max_abs_r);
        doc.num("plateau_threshold", r.plateau_threshold);
        doc.num("growth_threshold", r.growth_threshold);
    }

    if !o.lp_growth.is_empty() {
        doc.section("lp_growth");
        let mut t = Table::new(
            "lp_growth",
            1,
            [
                ("alpha".to_string(), "exponent".to_string()),
                ("growth".to_string(), conventions::LP_GROWTH.to_string()),
                ("divergent".to_string(), conventions::FLAG.to_string()),
            ],
        );
        for &(alpha, g) in &o.lp_growth {
            t.push(vec![alpha, g, divergent(g)]);
        }
        doc.table(&t);
    }

    if o.scenario.analysis.entropy {
        doc.section("entropy");
        doc.text("tau_policy", format!("{:?}", o.scenario.entropy.tau_policy));
        doc.text("samples", o.entropy.len());
        doc.opt("final_mu", o.final_mu());
        let drop = o.entropy.windows(2).map(|w| w[0].mu - w[1].mu).reduce(f64::max);
        doc.opt("largest_mu_decrease", drop);
    }

    if let Some(m) = &o.monotonicity {
        doc.section("monotonicity");
        doc.num("min_dw_dt", m.min_dw_dt);
        doc.num("min_rhs", m.min_rhs);
        doc.num("max_relative_difference", m.max_relative_difference);
        let mut t = Table::new(
            "monotonicity",
            1,
            [
                ("t", "flow time"),
                ("tau", conventions::TAU),
                ("w", conventions::W_FUNCTIONAL),
                ("dw_dt", "three-point time derivative of w along the coupled potential"),
                ("rhs", "2 x soliton residual, the monotonicity integrand"),
                ("constraint_residual", conventions::CONSTRAINT),
                ("w_band", "half spread of w over tau +- T_estimate uncertainty"),
            ]
            .map(|(a, b)| (a.to_string(), b.to_string())),
        );
        for r in &m.rows {
            t.push(vec![r.t, r.tau, r.w, r.dw_dt, r.rhs, r.constraint_residual, r.w_band]);
        }
        doc.table(&t);
    }

    if let Some(seq) = &o.blowup {
        doc.section("blowup");
        doc.text("convention", conventions::BLOWUP);
        doc.num("t_estimate", seq.t_estimate);
        doc.num("r_min", seq.r_min);
        doc.num("r_max", 0.0);
        doc.opt("a_estimate", seq.a_estimate);
        doc.text("diverging", seq.diverging);
        let mut t = Table::new(
            "blowup",
            1,
            [
                ("i", "sequence index"),
                ("state", "stored-state index"),
                ("t", "t_i"),
                ("q", "Q_i"),
                ("alpha", "alpha_i"),
                ("marked", "grid node of the curvature mark p_i"),
                ("marked_rm", "|Rm(g_i)| at p_i"),
                ("window_max_rm", "max |Rm(g_i)| over the window"),
                ("window_states", "stored states in the window"),
                ("max_abs_r", "max |R(g_i)| over the window"),
            ]
            .map(|(a, b)| (a.to_string(), b.to_string())),
        );
        for (i, e) in seq.entries.iter().enumerate() {
            t.push(vec![
                i as f64,
                e.index as f64,
                e.t,
                e.q,
                e.alpha,
                e.marked as f64,
                e.marked_rm,
                e.window_max_rm,
                e.window_states as f64,
                e.max_abs_r,
            ]);
        }
        doc.table(&t);
    }

    if let Some(s) = &o.shrinker {
        doc.section("shrinker");
        doc.text("residual_nonincreasing", s.residual_nonincreasing);
        doc.opt("residual_ratio", s.residual_ratio);
        doc.text("mu_nondecreasing", s.mu_nondecreasing);
        doc.text("mu_cauchy", s.mu_cauchy);
        let mut t = Table::new(
            "shrinker",
            1,
            [
                ("i", "sequence index"),
                ("t", "t_i"),
                ("alpha", "alpha_i, also the tau of g_i(0)"),
                ("mu", conventions::MU),
                ("soliton_residual", conventions::SOLITON_RESIDUAL),
                ("converged", conventions::FLAG),
                ("beta", conventions::BETA),
                ("log_beta_ratio", "log beta_i / log alpha_i"),
                ("phi_mark_offset", "arclength from p_i to argmax phi"),
                ("beta_mark_offset", "arclength from p_i to argmax (phi + |grad phi|)"),
            ]
            .map(|(a, b)| (a.to_string(), b.to_string())),
        );
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        for (i, r) in s.rows.iter().enumerate() {
            t.push(vec![
                i as f64,
                r.t,
                r.alpha,
                nan(r.mu),
                nan(r.soliton_residual),
                flag(r.converged),
                nan(r.beta),
                nan(r.log_beta_ratio),
                nan(r.phi_mark_offset),
                nan(r.beta_mark_offset),
            ]);
        }
        doc.table(&t);
        for (i, r) in s.rows.iter().enumerate() {
            if let Some(e) = &r.error {
                doc.text(&format!("row_{i}_error"), e);
            }
        }
    }

    if !o.checks.is_empty() {
        doc.section("checks");
        for c in &o.checks {
            doc.text(c.name, format!("{} ({})", if c.passed { "pass" } else { "FAIL" }, c.detail));
        }
    }
    doc.finish()
}

pub fn divergent(growth: f64) -> f64 {
    if growth.is_nan() {
        f64::NAN
    } else {
        flag(growth > 1.0 + conventions::LP_GROWTH_TOLERANCE)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    program: &'a str,
    version: &'a str,
    command: &'a str,
    run_id: &'a str,
    scenario_sha256: String,
    files: BTreeMap<&'a str, String>,
    thresholds: BTreeMap<&'a str, f64>,
    conventions: BTreeMap<&'a str, &'a str>,
    scenario: &'a Scenario,
}

pub fn manifest_text(scenario: &Scenario, command: &str, run_id: &str, files: &[(&'static str, String)]) -> String {
    let thresholds = BTreeMap::from([
        ("plateau_slope", PLATEAU_SLOPE),
        ("growth_slope", GROWTH_SLOPE),
        ("min_trend_points", MIN_TREND_POINTS as f64),
        ("global_locus_span", GLOBAL_LOCUS_SPAN),
        ("normalization_tolerance", NORMALIZATION_TOLERANCE),
        ("shrinker_residual_floor", ricci_lab::singularity::RESIDUAL_FLOOR),
        ("lp_growth_tolerance", conventions::LP_GROWTH_TOLERANCE),
    ]);
    let manifest = Manifest {
        program: "ricci-lab",
        version: env!("CARGO_PKG_VERSION"),
        command,
        run_id,
        scenario_sha256: hex::encode(scenario_digest(command, scenario)),
        files: files.iter().map(|(k, v)| (*k, v.clone())).collect(),
        thresholds,
        conventions: conventions::all().into_iter().collect(),
        scenario,
    };
    let body = toml::to_string(&manifest).expect("manifest is representable in TOML");
    format!("# ricci-lab manifest v1\n{body}")
}

fn write_artifacts(o: &RunOutcome, command: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(&o.dir)?;
    let trace = trace_table(o).render();
    let entropy = entropy_table(o).render();
    let report = report_text(o, command);
    let files = [
        ("trace.tsv", format!("trace v{}", conventions::TRACE_SCHEMA)),
        ("entropy.tsv", format!("entropy v{}", conventions::ENTROPY_SCHEMA)),
        ("report.txt", format!("report v{}", conventions::REPORT_SCHEMA)),
    ];
    std::fs::write(o.dir.join("trace.tsv"), trace)?;
    std::fs::write(o.dir.join("entropy.tsv"), entropy)?;
    std::fs::write(o.dir.join("report.txt"), report)?;
    std::fs::write(o.dir.join("manifest.txt"), manifest_text(&o.scenario, command, &o.run_id, &files))?;
    Ok(())
}
