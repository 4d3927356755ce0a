//! Singularity classification, blow-up sequences and the Type I/II search.
//!
//! The classifier looks at `(T - t) max|Rm|` over the last decade of `T - t`
//! before the curvature ceiling. A flat trend in log-log coordinates is read
//! as Type I, a clearly rising one as a Type II signature. Finite data can
//! only ever show a signature, never prove a Type II blow-up.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{minimize_w, EntropyOptions, Start};
use crate::error::{Error, Result};
use crate::flow::{integrate, refine, FlowTrace, StepController, Termination};
use crate::geometry::{MetricKind, MetricState, rescale};
use crate::numerics::linear_fit;

/// Largest `|slope|` of `log((T-t) max|Rm|)` against `log(T-t)` read as a plateau.
pub const PLATEAU_SLOPE: f64 = 0.1;

/// Slope at or below which the trend is read as growth.
pub const GROWTH_SLOPE: f64 = -0.25;

/// Fewest tail states the trend fit accepts.
pub const MIN_TREND_POINTS: usize = 5;

/// A collapse counts as global when `length * sqrt(max|Rm|)` of the last
/// state stays below this; a round point gives about 3.5.
pub const GLOBAL_LOCUS_SPAN: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    TypeI,
    TypeII,
    NoSingularity,
    Inconclusive,
}

/// Where the curvature concentrates at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Locus {
    /// The whole manifold shrinks to a point.
    Global,
    /// A neck or cap pinches while the rest stays at finite size.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyOptions {
    /// Bound `C` for the scalar-bounded flag `max|R| <= C`.
    pub scalar_bound: f64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions { scalar_bound: 1e3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub classification: Classification,
    pub locus: Locus,
    pub t_estimate: Option<f64>,
    /// `sup (T - t) max|Rm|` over every stored time.
    pub sup_scaled_rm: Option<f64>,
    /// The same supremum over the last decade of `T - t`.
    pub tail_sup_scaled_rm: Option<f64>,
    /// Median of `(T - t) max|Rm|` over the last decade.
    pub plateau: Option<f64>,
    /// Slope of `log((T - t) max|Rm|)` against `log(T - t)` over the last decade.
    pub trend_slope: Option<f64>,
    pub tail_states: usize,
    /// `min 8 (T - t) max|Rm| - 1` over the last 20% of stored times; absent when skipped.
    pub gap_margin: Option<f64>,
    pub scalar_bounded: bool,
    pub max_abs_r: f64,
    pub plateau_threshold: f64,
    pub growth_threshold: f64,
}

/// Where the curvature of the last stored state concentrates.
pub fn locus_of(trace: &FlowTrace) -> Locus {
    let (Some(state), Some(diag)) = (trace.states.last(), trace.diagnostics.last()) else {
        return Locus::Global;
    };
    match &state.kind {
        MetricKind::Sphere { .. } => Locus::Global,
        MetricKind::Warped(p) => {
            if p.length() * diag.max_rm.sqrt() <= GLOBAL_LOCUS_SPAN {
                Locus::Global
            } else {
                Locus::Local
            }
        }
    }
}

/// Indices of stored states with `0 < T - t <= 10 (T - t_last)`.
fn trend_tail(trace: &FlowTrace, t_est: f64) -> Vec<usize> {
    let gaps: Vec<f64> = trace.diagnostics.iter().map(|d| t_est - d.t).collect();
    let Some(closest) = gaps.iter().copied().filter(|g| *g > 0.0).reduce(f64::min) else {
        return Vec::new();
    };
    (0..gaps.len()).filter(|&i| gaps[i] > 0.0 && gaps[i] <= 10.0 * closest).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Type I / Type II classification of a trace per the declared slope thresholds.
pub fn classify(trace: &FlowTrace, opts: &ClassifyOptions) -> SingularityReport {
    let max_abs_r = trace.diagnostics.iter().map(|d| d.min_r.abs().max(d.max_r.abs())).fold(0.0, f64::max);
    let mut report = SingularityReport {
        classification: Classification::Inconclusive,
        locus: locus_of(trace),
        t_estimate: trace.t_estimate,
        sup_scaled_rm: None,
        tail_sup_scaled_rm: None,
        plateau: None,
        trend_slope: None,
        tail_states: 0,
        gap_margin: None,
        scalar_bounded: max_abs_r <= opts.scalar_bound,
        max_abs_r,
        plateau_threshold: PLATEAU_SLOPE,
        growth_threshold: GROWTH_SLOPE,
    };
    match trace.termination {
        Termination::ReachedTEnd => {
            report.classification = Classification::NoSingularity;
            return report;
        }
        Termination::StepUnderflow => return report,
        Termination::CurvatureCeiling => {}
    }
    let Some(t_est) = trace.t_estimate else {
        return report;
    };
    let scaled: Vec<f64> = trace.diagnostics.iter().map(|d| (t_est - d.t) * d.max_rm).collect();
    report.sup_scaled_rm = Some(scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let tail = trend_tail(trace, t_est);
    report.tail_states = tail.len();
    if tail.len() < MIN_TREND_POINTS {
        return report;
    }
    let x: Vec<f64> = tail.iter().map(|&i| (t_est - trace.diagnostics[i].t).ln()).collect();
    let y: Vec<f64> = tail.iter().map(|&i| scaled[i].ln()).collect();
    report.tail_sup_scaled_rm = Some(tail.iter().map(|&i| scaled[i]).fold(f64::NEG_INFINITY, f64::max));
    report.plateau = Some(median(tail.iter().map(|&i| scaled[i]).collect()));
    let Some((_, slope)) = linear_fit(&x, &y) else {
        return report;
    };
    report.trend_slope = Some(slope);
    report.classification = if slope.abs() <= PLATEAU_SLOPE {
        Classification::TypeI
    } else if slope <= GROWTH_SLOPE {
        Classification::TypeII
    } else {
        Classification::Inconclusive
    };
    if report.classification != Classification::Inconclusive {
        report.gap_margin = curvature_gap_check(trace);
    }
    report
}

/// `min 8 (T - t) max|Rm| - 1` over the last 20% of stored times, or `None`
/// when the trace has no singular-time estimate.
pub fn curvature_gap_check(trace: &FlowTrace) -> Option<f64> {
    let t_est = trace.t_estimate?;
    let count = trace.diagnostics.len();
    let start = count - count.div_ceil(5);
    trace.diagnostics[start..].iter().map(|d| 8.0 * (t_est - d.t) * d.max_rm - 1.0).reduce(f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlowupSchedule {
    /// Number of indices picked geometrically in `Q`.
    pub count: usize,
    /// The picks span this many decades of `Q` below the top pick.
    pub decades: f64,
    /// Decades of `Q` left out at the end of the trace, where the error in
    /// `T_estimate` dominates `T - t_i`.
    pub margin: f64,
    /// Lower end of the rescaled time window `[r_min, 0]`.
    pub r_min: f64,
    /// Explicit stored-state indices; overrides `count`.
    pub indices: Option<Vec<usize>>,
}

impl Default for BlowupSchedule {
    fn default() -> Self {
        BlowupSchedule { count: 6, decades: 2.5, margin: 0.5, r_min: -1.0, indices: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupEntry {
    /// Stored-state index of `t_i`.
    pub index: usize,
    pub t: f64,
    /// Running maximum of `max|Rm|` over stored times up to `t_i`.
    pub q: f64,
    /// Grid node of the curvature maximum at `t_i`.
    pub marked: usize,
    /// `Q_i (T - t_i)`.
    pub alpha: f64,
    /// `|Rm(g_i)|` at the marked point and `r = 0`.
    pub marked_rm: f64,
    /// `max |Rm(g_i)|` over stored states in the window.
    pub window_max_rm: f64,
    pub window_states: usize,
    /// `max |R(g_i)|` at `r = 0`.
    pub max_abs_r: f64,
}

/// Rescaled flows `g_i(r) = Q_i g(t_i + r / Q_i)` around the singular time.
#[derive(Debug, Clone)]
pub struct BlowupSequence {
    pub t_estimate: f64,
    pub r_min: f64,
    pub entries: Vec<BlowupEntry>,
    /// `g_i(0)`, with the flow time reset to zero.
    pub states: Vec<MetricState>,
    /// Limit of `alpha_i` when successive values agree to 1%.
    pub a_estimate: Option<f64>,
    /// `alpha_i` keeps increasing without settling.
    pub diverging: bool,
}

/// Tolerance on the normalization `|Rm(g_i)| <= 1`, `= 1` at the marked point.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-2;

pub fn build_blowup(trace: &FlowTrace, schedule: &BlowupSchedule) -> Result<BlowupSequence> {
    let t_est = trace
        .t_estimate
        .ok_or_else(|| Error::InvalidArgument("blow-up needs a singular-time estimate".into()))?;
    if !(schedule.r_min < 0.0) {
        return Err(Error::InvalidArgument(format!("window start {} must be negative", schedule.r_min)));
    }
    let q = trace.running_max_rm();
    let indices = match &schedule.indices {
        Some(list) => list.clone(),
        None => default_indices(&q, schedule.decades, schedule.margin, schedule.count),
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument("blow-up schedule selects no states".into()));
    }
    let mut entries = Vec::with_capacity(indices.len());
    let mut states = Vec::with_capacity(indices.len());
    for &i in &indices {
        let d = trace
            .diagnostics
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("stored index {i} out of range")))?;
        let qi = q[i];
        let start = d.t + schedule.r_min / qi;
        if start < 0.0 {
            return Err(Error::WindowUnavailable { index: i, start });
        }
        let window: Vec<f64> =
            trace.diagnostics[..=i].iter().filter(|w| w.t >= start).map(|w| w.max_rm / qi).collect();
        let mut g = rescale(&trace.states[i], qi)?;
        g.t = 0.0;
        states.push(g);
        entries.push(BlowupEntry {
            index: i,
            t: d.t,
            q: qi,
            marked: d.argmax_rm,
            alpha: qi * (t_est - d.t),
            marked_rm: d.max_rm / qi,
            window_max_rm: window.iter().copied().fold(0.0, f64::max),
            window_states: window.len(),
            max_abs_r: d.min_r.abs().max(d.max_r.abs()) / qi,
        });
    }
    let alphas: Vec<f64> = entries.iter().map(|e| e.alpha).collect();
    let cauchy = alphas.windows(2).all(|w| (w[1] - w[0]).abs() < 0.01 * w[1].abs());
    let increasing = alphas.windows(2).all(|w| w[1] >= w[0]);
    let diverging = !cauchy && increasing && alphas.len() > 1;
    Ok(BlowupSequence {
        t_estimate: t_est,
        r_min: schedule.r_min,
        a_estimate: cauchy.then(|| alphas[alphas.len() - 1]),
        diverging,
        entries,
        states,
    })
}

/// `count` indices spaced geometrically in the running maximum over its last `decades` decades.
fn default_indices(q: &[f64], decades: f64, margin: f64, count: usize) -> Vec<usize> {
    let Some(&last) = q.last() else {
        return Vec::new();
    };
    if count == 0 {
        return Vec::new();
    }
    let hi = (last * 10f64.powf(-margin.max(0.0))).max(q[0]);
    let lo = (hi * 10f64.powf(-decades)).max(q[0]);
    let mut out: Vec<usize> = Vec::with_capacity(count);
    for k in 0..count {
        let frac = if count == 1 { 1.0 } else { k as f64 / (count - 1) as f64 };
        let target = lo * (hi / lo).powf(frac);
        let i = q.iter().position(|&x| x >= target * (1.0 - 1e-12)).unwrap_or(q.len() - 1);
        if out.last() != Some(&i) {
            out.push(i);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkerRow {
    pub index: usize,
    pub t: f64,
    pub alpha: f64,
    pub mu: Option<f64>,
    pub soliton_residual: Option<f64>,
    pub converged: bool,
    /// `max (phi + |grad phi|)` of the minimizer on `g_i(0)`.
    pub beta: Option<f64>,
    /// `log beta_i / log alpha_i`.
    pub log_beta_ratio: Option<f64>,
    /// Arclength in `g_i(0)` from the curvature mark to `max phi`.
    pub phi_mark_offset: Option<f64>,
    /// Arclength in `g_i(0)` from the curvature mark to where `beta` is attained.
    pub beta_mark_offset: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkerReport {
    pub rows: Vec<ShrinkerRow>,
    pub residual_nonincreasing: bool,
    /// Last residual over the first.
    pub residual_ratio: Option<f64>,
    /// `mu_i` nondecreasing in `t_i` within twice the solver tolerance.
    pub mu_nondecreasing: bool,
    /// Successive `mu_i` agree within 1% of the largest `|mu_i|`, or to solver tolerance.
    pub mu_cauchy: bool,
}

/// Residuals below this are at the discretization floor and are not ordered.
pub const RESIDUAL_FLOOR: f64 = 1e-9;

/// Grid spacing used for entropy on blow-up states, as a fraction of `sqrt(tau)`.
pub const ENTROPY_SPACING: f64 = 0.125;
/// Node cap for the refined blow-up states.
pub const ENTROPY_MAX_NODES: usize = 20_001;

/// Minimizes `W` on every `g_i(0)` at `tau = alpha_i`, after refining it to
/// [`ENTROPY_SPACING`], adding a start at the
/// marked point to the configured ones.
pub fn shrinker_diagnostics(seq: &BlowupSequence, opts: &EntropyOptions) -> ShrinkerReport {
    let rows: Vec<ShrinkerRow> = seq
        .entries
        .par_iter()
        .zip(seq.states.par_iter())
        .map(|(e, g)| {
            let mut row = ShrinkerRow {
                index: e.index,
                t: e.t,
                alpha: e.alpha,
                mu: None,
                soliton_residual: None,
                converged: false,
                beta: None,
                log_beta_ratio: None,
                phi_mark_offset: None,
                beta_mark_offset: None,
                error: None,
            };
            if !(e.alpha > 0.0) {
                row.error = Some(format!("alpha = {} is not positive", e.alpha));
                return row;
            }
            let marked = match &g.kind {
                MetricKind::Warped(p) => Some(p.s[e.marked]),
                MetricKind::Sphere { .. } => None,
            };
            let g = match refine(g, ENTROPY_SPACING * e.alpha.sqrt(), ENTROPY_MAX_NODES) {
                Ok(g) => g,
                Err(err) => {
                    row.error = Some(err.to_string());
                    return row;
                }
            };
            let g = &g;
            let mut opts = opts.clone();
            if let (Some(s), MetricKind::Warped(p)) = (marked, &g.kind) {
                opts.starts.push(Start::Bump((s - p.s[0]) / p.length()));
            }
            match minimize_w(g, e.alpha, &opts) {
                Ok(min) => {
                    let r = &min.record;
                    row.mu = Some(r.mu);
                    row.soliton_residual = Some(r.soliton_residual);
                    row.converged = r.converged;
                    row.beta = Some(r.beta);
                    row.log_beta_ratio = Some(r.beta.ln() / e.alpha.ln());
                    if let (Some(s), MetricKind::Warped(p)) = (marked, &min.metric.kind) {
                        row.phi_mark_offset = Some(p.s[r.argmax_phi] - s);
                        row.beta_mark_offset = Some(p.s[r.argmax_beta] - s);
                    }
                    if !r.converged {
                        row.error = Some(format!("not converged (residual {:e})", r.euler_lagrange_residual));
                    } else if !r.resolved {
                        row.error = Some("minimizer not resolved by the grid".into());
                    }
                }
                Err(err) => row.error = Some(err.to_string()),
            }
            row
        })
        .collect();
    let residuals: Vec<f64> = rows.iter().filter_map(|r| r.soliton_residual).collect();
    let mus: Vec<f64> = rows.iter().filter_map(|r| r.mu).collect();
    let slack = 2.0 * opts.tolerance;
    let mu_scale = mus.iter().map(|m| m.abs()).fold(0.0, f64::max);
    ShrinkerReport {
        residual_nonincreasing: residuals.windows(2).all(|w| w[1] <= w[0] + RESIDUAL_FLOOR),
        residual_ratio: (residuals.len() >= 2 && residuals[0] > 0.0).then(|| residuals[residuals.len() - 1] / residuals[0]),
        mu_nondecreasing: mus.windows(2).all(|w| w[1] >= w[0] - slack),
        mu_cauchy: mus.windows(2).all(|w| (w[1] - w[0]).abs() <= (0.01 * mu_scale).max(slack)),
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BisectionOptions {
    /// Total runs allowed, endpoints included.
    pub budget: usize,
    /// Stop once the bracket is this fraction of the initial width.
    pub target_fraction: f64,
    pub controller: StepController,
    pub classify: ClassifyOptions,
}

impl Default for BisectionOptions {
    fn default() -> Self {
        BisectionOptions {
            budget: 12,
            target_fraction: 2f64.powi(-10),
            controller: StepController { rm_ceiling: 1e4, ..StepController::default() },
            classify: ClassifyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionRun {
    pub lambda: f64,
    pub locus: Locus,
    pub report: SingularityReport,
    /// Error that stopped the integration early, if any.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionReport {
    pub lo: f64,
    pub hi: f64,
    pub lo_locus: Locus,
    pub hi_locus: Locus,
    pub initial_width: f64,
    pub runs: Vec<BisectionRun>,
    /// Largest tail `sup (T - t) max|Rm|` over all runs: a signature of
    /// Type II behaviour near the threshold, not a proof of it.
    pub max_signature: f64,
    pub signature_lambda: f64,
}

/// Runs one member of the family and classifies it.
pub fn run_member(m0: &MetricState, lambda: f64, opts: &BisectionOptions) -> BisectionRun {
    let (trace, error) = match integrate(m0, &opts.controller, None) {
        Ok(trace) => (trace, None),
        Err(failure) => {
            let failure = *failure;
            (failure.trace, Some(failure.error.to_string()))
        }
    };
    let report = classify(&trace, &opts.classify);
    BisectionRun { lambda, locus: report.locus, report, error }
}

/// Brackets the parameter where the family switches between a global
/// collapse and a local pinch.
pub fn type2_bisection<F>(family: F, lo: f64, hi: f64, opts: &BisectionOptions) -> Result<BisectionReport>
where
    F: Fn(f64) -> Result<MetricState> + Sync,
{
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("empty bracket [{lo}, {hi}]")));
    }
    if opts.budget < 2 {
        return Err(Error::InvalidArgument("bisection budget must cover both endpoints".into()));
    }
    let member = |lambda: f64| -> Result<BisectionRun> { Ok(run_member(&family(lambda)?, lambda, opts)) };
    let (first, second) = rayon::join(|| member(lo), || member(hi));
    let (first, second) = (first?, second?);
    let (lo_locus, hi_locus) = (first.locus, second.locus);
    if lo_locus == hi_locus {
        return Err(Error::InvalidArgument(format!("both bracket endpoints show a {lo_locus:?} collapse")));
    }
    let mut runs = vec![first, second];
    let initial_width = hi - lo;
    let (mut a, mut b) = (lo, hi);
    while b - a > opts.target_fraction * initial_width * (1.0 + 1e-9) {
        if runs.len() >= opts.budget {
            return Err(Error::BudgetExhausted { lo: a, hi: b });
        }
        let mid = 0.5 * (a + b);
        let run = member(mid)?;
        if run.locus == lo_locus {
            a = mid;
        } else {
            b = mid;
        }
        runs.push(run);
    }
    let (max_signature, signature_lambda) = runs
        .iter()
        .filter_map(|r| r.report.tail_sup_scaled_rm.map(|s| (s, r.lambda)))
        .fold((f64::NEG_INFINITY, f64::NAN), |acc, x| if x.0 > acc.0 { x } else { acc });
    Ok(BisectionReport { lo: a, hi: b, lo_locus, hi_locus, initial_width, runs, max_signature, signature_lambda })
}
