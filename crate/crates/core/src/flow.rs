//! Time integration of the Ricci flow and analyses of the resulting trace.
//!
//! Warped products are evolved with the grid fractions `u_j = (s_j - s_0)/len`
//! frozen. Material points obey `psi_t = psi'' - (n-2)(1 - psi'^2)/psi` and
//! drift along the axis with velocity `v(s) = -(n-1) int L ds`, so each node
//! picks up an advection term `psi' w_j` (see [`grid_velocity`]) and the total
//! length follows `len_t = v(s_end)`. When the grid stops resolving the
//! curvature it is rebuilt by equidistributing a curvature monitor (a
//! regrid), which bumps the profile epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    curvature_of, lp_norm_with, sectional_with, volume_of, CurvatureFields, MetricKind, MetricState, Parity,
    Profile, Stencils, Topology,
};
use crate::numerics::{fd_weights_array, linear_fit};

/// Grid adaptation settings for warped products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegridPolicy {
    pub enabled: bool,
    /// Weight `beta` of curvature in the monitor `rho = sqrt((pi/len)^2 + beta^2 |Rm|)`.
    pub curvature_weight: f64,
    /// Bound on `|dh/ds|` of the rebuilt grid.
    pub gradation: f64,
    /// Regrid once some segment carries this multiple of its equidistributed share of the monitor.
    pub trigger: f64,
}

impl Default for RegridPolicy {
    fn default() -> Self {
        RegridPolicy { enabled: true, curvature_weight: 0.3, gradation: 0.2, trigger: 2.0 }
    }
}

/// Adaptive time-step and storage policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepController {
    /// Safety factor `eps` in `dt = eps * min(1/max|Rm|, h_min^2/4)`.
    pub safety: f64,
    /// Stop once `max|Rm|` reaches this value.
    pub rm_ceiling: f64,
    /// Stop once the admissible step falls below this value.
    pub dt_floor: f64,
    /// Store a state whenever `max|Rm|` has changed by this factor since the last stored one.
    pub store_growth: f64,
    /// Also store a state whenever this much time has passed.
    pub store_interval: Option<f64>,
    /// Times that are hit exactly and always stored.
    pub checkpoints: Vec<f64>,
    /// Exponents `alpha` of the recorded `int |R|^alpha dvol`.
    pub lp_exponents: Vec<f64>,
    pub regrid: RegridPolicy,
    pub max_steps: usize,
}

impl Default for StepController {
    fn default() -> Self {
        StepController {
            safety: 0.2,
            rm_ceiling: 1e6,
            dt_floor: 1e-12,
            store_growth: 1.05,
            store_interval: None,
            checkpoints: Vec::new(),
            lp_exponents: Vec::new(),
            regrid: RegridPolicy::default(),
            max_steps: 20_000_000,
        }
    }
}

impl StepController {
    /// Largest step allowed by both caps.
    pub fn admissible_dt(&self, m: &MetricState, curv: &CurvatureFields) -> f64 {
        let curvature_cap = if curv.max_rm > 0.0 { 1.0 / curv.max_rm } else { f64::INFINITY };
        let parabolic_cap = match &m.kind {
            MetricKind::Sphere { .. } => f64::INFINITY,
            MetricKind::Warped(p) => {
                let h = p.segment_lengths().into_iter().fold(f64::INFINITY, f64::min);
                h * h / 4.0
            }
        };
        self.safety * curvature_cap.min(parabolic_cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    ReachedTEnd,
    CurvatureCeiling,
    StepUnderflow,
}

/// Quantities recorded with every stored state.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub t: f64,
    pub max_rm: f64,
    pub argmax_rm: usize,
    pub min_r: f64,
    pub max_r: f64,
    pub volume: f64,
    /// `int |R|^alpha dvol` for each exponent of the controller.
    pub lp_norms: Vec<f64>,
}

impl Diagnostics {
    pub fn of(m: &MetricState, exponents: &[f64]) -> Result<Self> {
        let curv = curvature_of(m)?;
        Ok(Self::with_curvature(m, &curv, exponents))
    }

    fn with_curvature(m: &MetricState, curv: &CurvatureFields, exponents: &[f64]) -> Self {
        Diagnostics {
            t: m.t,
            max_rm: curv.max_rm,
            argmax_rm: curv.argmax_rm,
            min_r: curv.min_r,
            max_r: curv.max_r,
            volume: volume_of(m),
            lp_norms: exponents.iter().map(|&a| lp_norm_with(m, curv, a)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub states: Vec<MetricState>,
    pub diagnostics: Vec<Diagnostics>,
    pub lp_exponents: Vec<f64>,
    pub t_estimate: Option<f64>,
    pub termination: Termination,
    pub steps: usize,
    pub regrids: usize,
}

impl FlowTrace {
    pub fn times(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.t).collect()
    }

    pub fn max_rm(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.max_rm).collect()
    }

    /// Running maximum of `max|Rm|` over stored times up to each index.
    pub fn running_max_rm(&self) -> Vec<f64> {
        let mut best = 0.0f64;
        self.diagnostics
            .iter()
            .map(|d| {
                best = best.max(d.max_rm);
                best
            })
            .collect()
    }
}

/// An integration that stopped on an error, with everything computed before it.
#[derive(Debug, Clone)]
pub struct FlowFailure {
    pub error: Error,
    pub trace: FlowTrace,
}

impl std::fmt::Display for FlowFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} stored states, t = {})", self.error, self.trace.states.len(), self.trace.times().last().copied().unwrap_or(0.0))
    }
}

impl std::error::Error for FlowFailure {}

/// One step of length `dt` without any regridding.
pub fn step(m: &MetricState, dt: f64) -> Result<MetricState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size {dt} must be positive")));
    }
    advance_to(m, m.t + dt)
}

/// Steps to exactly `t_new`.
pub fn advance_to(m: &MetricState, t_new: f64) -> Result<MetricState> {
    advance_with(m, t_new, None)
}

fn advance_with(m: &MetricState, t_new: f64, ops: Option<&GridOps>) -> Result<MetricState> {
    let dt = t_new - m.t;
    match &m.kind {
        MetricKind::Sphere { scale } => {
            let scale = scale - 2.0 * (m.n as f64 - 1.0) * dt;
            if !(scale > 0.0) {
                return Err(Error::ProfileCollapse { index: 0, value: scale });
            }
            Ok(MetricState { n: m.n, t: t_new, kind: MetricKind::Sphere { scale } })
        }
        MetricKind::Warped(p) => {
            let profile = rk4(m.n, p, dt, ops)?;
            Ok(MetricState { n: m.n, t: t_new, kind: MetricKind::Warped(profile) })
        }
    }
}

/// Rebuilds a profile on the same grid fractions with new `psi` and total length.
fn profile_from(base: &Profile, psi: Vec<f64>, length: f64) -> Result<Profile> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::ProfileCollapse { index: 0, value: length });
    }
    let scale = length / base.length();
    let s = base.s.iter().map(|x| base.s[0] + (x - base.s[0]) * scale).collect();
    let topology = match base.topology {
        Topology::Periodic { .. } => Topology::Periodic { period: length },
        other => other,
    };
    let mut p = Profile { s, psi, topology, epoch: base.epoch };
    project_poles(&mut p);
    for (j, &v) in p.psi.iter().enumerate() {
        if !v.is_finite() || (!p.is_pole(j) && v <= 0.0) {
            return Err(Error::ProfileCollapse { index: j, value: v });
        }
    }
    Ok(p)
}

/// Puts the node next to each pole on the regular expansion `psi = x + b x^3`
/// through the second node. Evolving that node freely excites a spurious grid
/// mode at the pole.
fn project_poles(p: &mut Profile) {
    let count = p.len();
    if p.is_pole(0) {
        let (x1, x2) = (p.s[1] - p.s[0], p.s[2] - p.s[0]);
        p.psi[1] = x1 + (p.psi[2] - x2) * (x1 / x2).powi(3);
    }
    if p.is_pole(count - 1) {
        let end = p.s[count - 1];
        let (y1, y2) = (end - p.s[count - 2], end - p.s[count - 3]);
        p.psi[count - 2] = y1 + (p.psi[count - 3] - y2) * (y1 / y2).powi(3);
    }
}

/// Velocity of each grid node relative to the material point under it.
///
/// Grid fractions `u_j = (s_j - s_0) / len` are frozen while the material
/// moves with `v(s) = -(n-1) int_{s_0}^s L`, so node `j` drifts by
/// `w_j = len' u_j - v(s_j)` with `len' = v(s_end)`.
pub fn grid_velocity(m: &MetricState) -> Result<Vec<f64>> {
    match &m.kind {
        MetricKind::Sphere { .. } => Ok(vec![0.0]),
        MetricKind::Warped(p) => {
            let sec = crate::geometry::sectional_curvatures(m.n, p)?;
            Ok(grid_velocity_with(m.n, p, &sec.l).0)
        }
    }
}

fn grid_velocity_with(n: usize, p: &Profile, l: &[f64]) -> (Vec<f64>, f64) {
    let nf = n as f64;
    let mut v = vec![0.0; p.len()];
    let mut acc = 0.0;
    for k in 0..p.segment_count() {
        let (a, b, h) = p.segment(k);
        acc += -(nf - 1.0) * 0.5 * (l[a] + l[b]) * h;
        if b != 0 {
            v[b] = acc;
        }
    }
    let rate = acc;
    let len = p.length();
    let w = (0..p.len()).map(|j| rate * (p.s[j] - p.s[0]) / len - v[j]).collect();
    (w, rate)
}

/// `(psi_t, len_t)` at fixed grid fractions.
fn rhs(n: usize, q: &Profile, stencils: &Stencils) -> Result<(Vec<f64>, f64)> {
    let nf = n as f64;
    let sec = match sectional_with(q, stencils) {
        Ok(sec) => sec,
        Err(Error::NonPositiveProfile { index, value }) => return Err(Error::ProfileCollapse { index, value }),
        Err(e) => return Err(e),
    };
    let (w, rate) = grid_velocity_with(n, q, &sec.l);
    let count = q.len();
    let mut dpsi = vec![0.0; count];
    for j in 0..count {
        if !q.is_pole(j) {
            dpsi[j] = -q.psi[j] * (sec.l[j] + (nf - 2.0) * sec.k[j]) + sec.dpsi[j] * w[j];
        }
    }
    // Rate of the pole projection, so the stages stay consistent with it.
    let len = q.length();
    let frac = |j: usize| (q.s[j] - q.s[0]) / len;
    if q.is_pole(0) {
        let (x1, x2) = (frac(1), frac(2));
        dpsi[1] = rate * x1 + (dpsi[2] - rate * x2) * (x1 / x2).powi(3);
    }
    if q.is_pole(count - 1) {
        let (y1, y2) = (1.0 - frac(count - 2), 1.0 - frac(count - 3));
        dpsi[count - 2] = rate * y1 + (dpsi[count - 3] - rate * y2) * (y1 / y2).powi(3);
    }
    Ok((dpsi, rate))
}

fn rk4(n: usize, p: &Profile, dt: f64, ops: Option<&GridOps>) -> Result<Profile> {
    let len0 = p.length();
    let owned;
    let ops = match ops {
        Some(ops) if ops.epoch == p.epoch && ops.nodes == p.len() => ops,
        _ => {
            owned = GridOps::new(p);
            &owned
        }
    };
    let eval = |q: &Profile| rhs(n, q, &ops.for_length(q.length()));
    let stage = |k: &(Vec<f64>, f64), c: f64| -> Result<Profile> {
        let psi = p.psi.iter().zip(&k.0).map(|(y, d)| y + c * d).collect();
        profile_from(p, psi, len0 + c * k.1)
    };
    let k1 = eval(p)?;
    let k2 = eval(&stage(&k1, 0.5 * dt)?)?;
    let k3 = eval(&stage(&k2, 0.5 * dt)?)?;
    let k4 = eval(&stage(&k3, dt)?)?;
    let psi = (0..p.len())
        .map(|j| p.psi[j] + dt / 6.0 * (k1.0[j] + 2.0 * k2.0[j] + 2.0 * k3.0[j] + k4.0[j]))
        .collect();
    let len = len0 + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    profile_from(p, psi, len)
}

/// Difference operators of one grid epoch, reused while the grid only stretches.
struct GridOps {
    stencils: Stencils,
    length: f64,
    epoch: u64,
    nodes: usize,
}

impl GridOps {
    fn new(p: &Profile) -> Self {
        GridOps { stencils: Stencils::new(&p.s, p.topology), length: p.length(), epoch: p.epoch, nodes: p.len() }
    }

    fn for_length(&self, length: f64) -> Stencils {
        self.stencils.stretched(length / self.length)
    }
}

fn monitor(p: &Profile, curv: &CurvatureFields, policy: &RegridPolicy) -> Vec<f64> {
    let base = std::f64::consts::PI / p.length();
    let beta2 = policy.curvature_weight * policy.curvature_weight;
    curv.rm_norm.iter().map(|rm| (base * base + beta2 * rm).sqrt()).collect()
}

/// Whether the grid has drifted far enough from equidistribution to rebuild it.
pub fn needs_regrid(p: &Profile, curv: &CurvatureFields, policy: &RegridPolicy) -> bool {
    if !policy.enabled {
        return false;
    }
    let rho = monitor(p, curv, policy);
    let shares: Vec<f64> = (0..p.segment_count())
        .map(|k| {
            let (a, b, h) = p.segment(k);
            0.5 * (rho[a] + rho[b]) * h
        })
        .collect();
    let ideal = shares.iter().sum::<f64>() / shares.len() as f64;
    let worst = shares.iter().copied().fold(0.0, f64::max);
    worst > policy.trigger * ideal || p.max_spacing_ratio() > 0.9 * crate::geometry::MAX_SPACING_RATIO
}

/// Rebuilds the grid of a warped state by equidistributing the curvature
/// monitor and re-interpolating `psi` with cubic Hermite splines.
pub fn regrid(m: &MetricState, policy: &RegridPolicy) -> Result<MetricState> {
    let MetricKind::Warped(p) = &m.kind else {
        return Ok(m.clone());
    };
    let curv = curvature_of(m)?;
    let rho = monitor(p, &curv, policy);
    let segs = p.segment_count();
    let h = p.segment_lengths();
    let periodic = matches!(p.topology, Topology::Periodic { .. });

    // Limit the gradation of the target spacing, which is proportional to 1/rho.
    let mut total: f64 = (0..segs).map(|k| 0.5 * (rho[p.segment(k).0] + rho[p.segment(k).1]) * h[k]).sum();
    let mut smooth = rho.clone();
    for _ in 0..4 {
        let slope = policy.gradation * segs as f64 / total;
        let mut g: Vec<f64> = rho.iter().map(|r| 1.0 / r).collect();
        let passes = if periodic { 2 } else { 1 };
        for _ in 0..passes {
            for k in 0..segs {
                let (a, b, len) = p.segment(k);
                g[b] = g[b].min(g[a] + slope * len);
            }
            for k in (0..segs).rev() {
                let (a, b, len) = p.segment(k);
                g[a] = g[a].min(g[b] + slope * len);
            }
        }
        smooth = g.iter().map(|x| 1.0 / x).collect();
        total = (0..segs).map(|k| 0.5 * (smooth[p.segment(k).0] + smooth[p.segment(k).1]) * h[k]).sum();
    }

    // Invert the cumulative monitor.
    let mut cumulative = Vec::with_capacity(segs + 1);
    cumulative.push(0.0);
    for k in 0..segs {
        let (a, b, len) = p.segment(k);
        cumulative.push(cumulative[k] + 0.5 * (smooth[a] + smooth[b]) * len);
    }
    let count = p.len();
    let mut s_new = Vec::with_capacity(count);
    let mut seg = 0;
    for i in 0..count {
        if !periodic && i + 1 == count {
            s_new.push(p.s[count - 1]);
            break;
        }
        let target = total * i as f64 / segs as f64;
        while seg + 1 < segs && cumulative[seg + 1] < target {
            seg += 1;
        }
        let (a, _, len) = p.segment(seg);
        let frac = ((target - cumulative[seg]) / (cumulative[seg + 1] - cumulative[seg])).clamp(0.0, 1.0);
        s_new.push(if i == 0 { p.s[0] } else { p.s[a] + frac * len });
    }
    let psi_new = hermite_resample(p, &s_new);
    let mut profile = Profile { s: s_new, psi: psi_new, topology: p.topology, epoch: p.epoch + 1 };
    for j in 0..count {
        if profile.is_pole(j) {
            profile.psi[j] = 0.0;
        }
    }
    let ratio = profile.max_spacing_ratio();
    if !(ratio <= crate::geometry::MAX_SPACING_RATIO) {
        return Err(Error::GaugeDriftExceeded(format!("rebuilt grid has spacing ratio {ratio:.3}")));
    }
    if profile.segment_lengths().iter().any(|&x| !(x > 0.0)) {
        return Err(Error::GaugeDriftExceeded("rebuilt grid is not monotone".into()));
    }
    if let Some(j) = (0..count).find(|&j| !profile.is_pole(j) && !(profile.psi[j] > 0.0)) {
        return Err(Error::GaugeDriftExceeded(format!("interpolated psi is non-positive at node {j}")));
    }
    Ok(MetricState { n: m.n, t: m.t, kind: MetricKind::Warped(profile) })
}

/// Splits every segment of a warped state into the same number of equal
/// pieces so that no segment exceeds `max_spacing`, with at most `max_nodes`
/// nodes. `psi` is re-interpolated as in [`regrid`]; spacing ratios are kept.
pub fn refine(m: &MetricState, max_spacing: f64, max_nodes: usize) -> Result<MetricState> {
    let MetricKind::Warped(p) = &m.kind else {
        return Ok(m.clone());
    };
    if !(max_spacing > 0.0) {
        return Err(Error::InvalidArgument(format!("refinement spacing {max_spacing} must be positive")));
    }
    let segs = p.segment_count();
    let widest = p.segment_lengths().into_iter().fold(0.0, f64::max);
    let room = (max_nodes.saturating_sub(1) / segs).max(1);
    let pieces = ((widest / max_spacing).ceil() as usize).clamp(1, room);
    if pieces == 1 {
        return Ok(m.clone());
    }
    let mut s_new = Vec::with_capacity(segs * pieces + 1);
    for k in 0..segs {
        let (a, _, h) = p.segment(k);
        s_new.extend((0..pieces).map(|i| p.s[a] + h * i as f64 / pieces as f64));
    }
    if !matches!(p.topology, Topology::Periodic { .. }) {
        s_new.push(p.s[p.len() - 1]);
    }
    let mut psi_new = hermite_resample(p, &s_new);
    odd_pole_segments(p, &s_new, &mut psi_new);
    let mut profile = Profile { s: s_new, psi: psi_new, topology: p.topology, epoch: p.epoch };
    for j in 0..profile.len() {
        if profile.is_pole(j) {
            profile.psi[j] = 0.0;
        }
    }
    MetricState::warped(m.n, profile, m.t)
}

/// Replaces the interpolant on a segment touching a pole by the odd form
/// `x + c x^3 + d x^5` (`x` the distance to the pole) matching `psi` and its
/// slope at the far node. A cubic there has `psi'(pole) != 1` and an `x^2`
/// term, which make `(1 - psi'^2)/psi^2` blow up on a fine grid.
fn odd_pole_segments(p: &Profile, s_new: &[f64], psi_new: &mut [f64]) {
    let slope = Stencils::new(&p.s, p.topology).d1(&p.psi, Parity::Odd);
    let last = p.len() - 1;
    for (pole, far) in [(0, 1), (last, last - 1)] {
        if !p.is_pole(pole) {
            continue;
        }
        let h = (p.s[far] - p.s[pole]).abs();
        let (v, m) = (p.psi[far], slope[far] * (p.s[far] - p.s[pole]).signum());
        let d = (m - 1.0 - 3.0 * (v - h) / h) / (2.0 * h.powi(4));
        let c = (v - h - d * h.powi(5)) / h.powi(3);
        for (x, y) in s_new.iter().zip(psi_new.iter_mut()) {
            let x = (x - p.s[pole]).abs();
            if x < h {
                *y = x + c * x.powi(3) + d * x.powi(5);
            }
        }
    }
}

/// Cubic Hermite interpolation of `psi` at new abscissae, with five-point
/// slopes scaled back where they would break monotonicity of a monotone
/// segment.
fn hermite_resample(p: &Profile, s_new: &[f64]) -> Vec<f64> {
    let stencils = Stencils::new(&p.s, p.topology);
    let slope = stencils.d1(&p.psi, Parity::Odd);
    let segs = p.segment_count();
    let mut out = Vec::with_capacity(s_new.len());
    let mut seg = 0;
    for &x in s_new {
        while seg + 1 < segs && p.s[seg] + p.segment(seg).2 < x {
            seg += 1;
        }
        let (a, b, h) = p.segment(seg);
        let (ya, yb) = (p.psi[a], p.psi[b]);
        let (mut ma, mut mb) = (slope[a], slope[b]);
        let delta = (yb - ya) / h;
        if delta != 0.0 {
            let (al, be) = (ma / delta, mb / delta);
            if al >= 0.0 && be >= 0.0 && al * al + be * be > 9.0 {
                let tau = 3.0 / (al * al + be * be).sqrt();
                ma = tau * al * delta;
                mb = tau * be * delta;
            }
        }
        let t = ((x - p.s[a]) / h).clamp(0.0, 1.0);
        let t2 = t * t;
        let t3 = t2 * t;
        out.push(
            (2.0 * t3 - 3.0 * t2 + 1.0) * ya
                + (t3 - 2.0 * t2 + t) * h * ma
                + (-2.0 * t3 + 3.0 * t2) * yb
                + (t3 - t2) * h * mb,
        );
    }
    out
}

/// Integrates from `m0` until `t_end`, the curvature ceiling or step underflow.
pub fn integrate(
    m0: &MetricState,
    controller: &StepController,
    t_end: Option<f64>,
) -> std::result::Result<FlowTrace, Box<FlowFailure>> {
    let mut trace = FlowTrace {
        states: Vec::new(),
        diagnostics: Vec::new(),
        lp_exponents: controller.lp_exponents.clone(),
        t_estimate: None,
        termination: Termination::StepUnderflow,
        steps: 0,
        regrids: 0,
    };
    let fail = |error: Error, trace: FlowTrace| Box::new(FlowFailure { error, trace });
    if let Err(e) = m0.validate() {
        return Err(fail(e, trace));
    }
    let mut state = m0.clone();
    let mut curv = match curvature_of(&state) {
        Ok(c) => c,
        Err(e) => return Err(fail(e, trace)),
    };
    let exps = &controller.lp_exponents;
    trace.diagnostics.push(Diagnostics::with_curvature(&state, &curv, exps));
    trace.states.push(state.clone());
    let mut last_rm = curv.max_rm;
    let mut last_t = state.t;
    let mut checkpoints: Vec<f64> = controller.checkpoints.iter().copied().filter(|&c| c > state.t).collect();
    checkpoints.sort_by(f64::total_cmp);
    let mut next_checkpoint = 0;
    let mut ops: Option<GridOps> = None;

    loop {
        if t_end.is_some_and(|te| state.t >= te) {
            trace.termination = Termination::ReachedTEnd;
            break;
        }
        if trace.steps >= controller.max_steps {
            return Err(fail(Error::InvalidArgument(format!("step budget {} exhausted", controller.max_steps)), trace));
        }
        if let MetricKind::Warped(p) = &state.kind {
            if needs_regrid(p, &curv, &controller.regrid) {
                match regrid(&state, &controller.regrid).and_then(|s| curvature_of(&s).map(|c| (s, c))) {
                    Ok((s, c)) => {
                        state = s;
                        curv = c;
                        trace.regrids += 1;
                    }
                    Err(e) => return Err(fail(e, trace)),
                }
            }
        }
        let mut dt = controller.admissible_dt(&state, &curv);
        let mut target = state.t + dt;
        let mut forced = false;
        while next_checkpoint < checkpoints.len() && checkpoints[next_checkpoint] <= state.t {
            next_checkpoint += 1;
        }
        // Snap onto forced times that rounding would otherwise leave a sliver short of.
        let reaches = |target: f64, c: f64| target >= c - 1e-12 * c.abs().max(1.0);
        if let Some(&c) = checkpoints.get(next_checkpoint) {
            if reaches(target, c) {
                target = c;
                forced = true;
            }
        }
        if let Some(te) = t_end {
            if reaches(target, te) {
                target = te;
                forced = true;
            }
        }
        dt = target - state.t;
        let next = loop {
            if dt < controller.dt_floor {
                break None;
            }
            if let MetricKind::Warped(p) = &state.kind {
                if ops.as_ref().is_none_or(|o| o.epoch != p.epoch || o.nodes != p.len()) {
                    ops = Some(GridOps::new(p));
                }
            }
            match advance_with(&state, target, ops.as_ref()) {
                Ok(s) => break Some(s),
                Err(Error::ProfileCollapse { .. }) => {
                    dt *= 0.5;
                    target = state.t + dt;
                    forced = false;
                }
                Err(e) => return Err(fail(e, trace)),
            }
        };
        let Some(next) = next else {
            trace.termination = Termination::StepUnderflow;
            if trace.diagnostics.last().map(|d| d.t) != Some(state.t) {
                trace.diagnostics.push(Diagnostics::with_curvature(&state, &curv, exps));
                trace.states.push(state.clone());
            }
            break;
        };
        let next_curv = match curvature_of(&next) {
            Ok(c) => c,
            Err(e) => return Err(fail(e, trace)),
        };
        trace.steps += 1;
        state = next;
        curv = next_curv;
        let hit_ceiling = curv.max_rm >= controller.rm_ceiling;
        let hit_end = t_end.is_some_and(|te| state.t >= te);
        let growth = controller.store_growth;
        let store = forced
            || hit_ceiling
            || hit_end
            || curv.max_rm >= last_rm * growth
            || curv.max_rm * growth <= last_rm
            || controller.store_interval.is_some_and(|dt_store| state.t - last_t >= dt_store);
        if store {
            trace.diagnostics.push(Diagnostics::with_curvature(&state, &curv, exps));
            trace.states.push(state.clone());
            last_rm = curv.max_rm;
            last_t = state.t;
        }
        if hit_ceiling {
            trace.termination = Termination::CurvatureCeiling;
            break;
        }
    }
    if trace.termination == Termination::CurvatureCeiling {
        trace.t_estimate = estimate_t(&trace).ok();
    }
    Ok(trace)
}

/// Minimum number of stored states the singular-time fit uses.
pub const MIN_TAIL: usize = 10;

/// Indices of the tail used by the singular-time fit: the last decade of
/// `max|Rm|`, extended backwards to at least [`MIN_TAIL`] states.
pub fn fit_tail(trace: &FlowTrace) -> std::ops::Range<usize> {
    let rm = trace.max_rm();
    let count = rm.len();
    if count == 0 {
        return 0..0;
    }
    let last = rm[count - 1];
    let mut start = count - 1;
    while start > 0 && rm[start - 1] >= last / 10.0 {
        start -= 1;
    }
    start = start.min(count.saturating_sub(MIN_TAIL));
    start..count
}

/// Singular time from a least-squares line through `1/max|Rm|` over the tail.
pub fn estimate_t(trace: &FlowTrace) -> Result<f64> {
    estimate_t_with_error(trace).map(|(t, _)| t)
}

/// [`estimate_t`] together with the standard error of the fitted root,
/// from the scatter of the tail about the line.
pub fn estimate_t_with_error(trace: &FlowTrace) -> Result<(f64, f64)> {
    let tail = fit_tail(trace);
    if tail.len() < MIN_TAIL {
        return Err(Error::FitIllConditioned(format!("only {} stored states", tail.len())));
    }
    let d = &trace.diagnostics[tail];
    if d.iter().any(|x| !(x.max_rm > 0.0)) {
        return Err(Error::FitIllConditioned("curvature vanishes on the tail".into()));
    }
    let t: Vec<f64> = d.iter().map(|x| x.t).collect();
    let y: Vec<f64> = d.iter().map(|x| 1.0 / x.max_rm).collect();
    let (intercept, slope) = linear_fit(&t, &y).ok_or_else(|| Error::FitIllConditioned("degenerate times".into()))?;
    let scale = y.iter().copied().fold(0.0, f64::max) / (t[t.len() - 1] - t[0]).max(f64::MIN_POSITIVE);
    if !(slope < -1e-9 * scale) {
        return Err(Error::FitIllConditioned(format!("1/max|Rm| is not decreasing (slope {slope:e})")));
    }
    let root = -intercept / slope;
    if !root.is_finite() || root <= 0.0 {
        return Err(Error::FitIllConditioned(format!("fitted root {root}")));
    }
    let count = t.len() as f64;
    let mean = t.iter().sum::<f64>() / count;
    let sxx: f64 = t.iter().map(|x| (x - mean) * (x - mean)).sum();
    let ssr: f64 = t.iter().zip(&y).map(|(x, v)| (v - intercept - slope * x).powi(2)).sum();
    let spread = (ssr / (count - 2.0)).sqrt();
    let error = spread / slope.abs() * (1.0 / count + (root - mean) * (root - mean) / sxx).sqrt();
    Ok((root, error))
}

/// Residuals of the scalar-curvature evolution and volume identities at one stored time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub t: f64,
    /// `max_j |dR/dt - Delta R - 2|Ric|^2|`.
    pub r_abs: f64,
    /// `r_abs / max_j |dR/dt|`.
    pub r_rel: f64,
    /// `|dvol/dt + int R dvol|`.
    pub vol_abs: f64,
    /// `vol_abs / int |R| dvol`.
    pub vol_rel: f64,
}

/// Checks `dR/dt = Delta R + 2|Ric|^2` and `dvol/dt = -int R dvol` with
/// three-point time differences over stored states sharing a grid epoch.
/// Nodes within two of a pole are left out of the `R` check: the pole
/// Laplacian of the computed `R` magnifies its O(h^2) error by `1/h^2`.
pub fn evolution_residuals(trace: &FlowTrace) -> Result<Vec<ResidualRow>> {
    let states = &trace.states;
    let mut rows = Vec::new();
    for k in 1..states.len().saturating_sub(1) {
        let (a, b, c) = (&states[k - 1], &states[k], &states[k + 1]);
        let same_grid = match (&a.kind, &b.kind, &c.kind) {
            (MetricKind::Sphere { .. }, MetricKind::Sphere { .. }, MetricKind::Sphere { .. }) => true,
            (MetricKind::Warped(pa), MetricKind::Warped(pb), MetricKind::Warped(pc)) => {
                pa.epoch == pb.epoch && pb.epoch == pc.epoch && pa.len() == pc.len()
            }
            _ => false,
        };
        if !same_grid {
            continue;
        }
        let w = fd_weights_array(b.t, &[a.t, b.t, c.t])[1];
        let (ca, cb, cc) = (curvature_of(a)?, curvature_of(b)?, curvature_of(c)?);
        let lap = laplacian(b, &cb.r);
        let drift = node_drift_term(b, &cb.r)?;
        let mut r_abs = 0.0f64;
        let mut r_scale = 0.0f64;
        let p = b.profile();
        let near_pole = |j: usize| p.is_some_and(|p| (j.saturating_sub(2)..=(j + 2).min(p.len() - 1)).any(|i| p.is_pole(i)));
        for j in (0..cb.r.len()).filter(|&j| !near_pole(j)) {
            let dr = w[0] * ca.r[j] + w[1] * cb.r[j] + w[2] * cc.r[j] - drift[j];
            r_abs = r_abs.max((dr - lap[j] - 2.0 * cb.ricci_norm_sq(b.n, j)).abs());
            r_scale = r_scale.max(dr.abs());
        }
        let dvol = w[0] * volume_of(a) + w[1] * volume_of(b) + w[2] * volume_of(c);
        let int_r = lp_signed(b, &cb.r);
        let int_abs = lp_norm_with(b, &cb, 1.0);
        let vol_abs = (dvol + int_r).abs();
        rows.push(ResidualRow {
            t: b.t,
            r_abs,
            r_rel: if r_scale > 0.0 { r_abs / r_scale } else { r_abs },
            vol_abs,
            vol_rel: if int_abs > 0.0 { vol_abs / int_abs } else { vol_abs },
        });
    }
    Ok(rows)
}

/// `f' w_j`: the part of the time derivative of `f` at a node that comes
/// from the node sliding over the material.
pub fn node_drift_term(m: &MetricState, f: &[f64]) -> Result<Vec<f64>> {
    match &m.kind {
        MetricKind::Sphere { .. } => Ok(vec![0.0; f.len()]),
        MetricKind::Warped(p) => {
            let w = grid_velocity(m)?;
            let df = Stencils::new(&p.s, p.topology).d1(f, Parity::Even);
            Ok(df.iter().zip(&w).map(|(a, b)| a * b).collect())
        }
    }
}

fn lp_signed(m: &MetricState, r: &[f64]) -> f64 {
    match &m.kind {
        MetricKind::Sphere { .. } => volume_of(m) * r[0],
        MetricKind::Warped(p) => {
            crate::numerics::unit_sphere_volume(m.n - 1)
                * crate::geometry::cell_measures(p, m.n).iter().zip(r).map(|(w, x)| w * x).sum::<f64>()
        }
    }
}

/// Laplacian of a radial function: `f'' + (n-1)(psi'/psi) f'`, and `n f''` at poles.
pub fn laplacian(m: &MetricState, f: &[f64]) -> Vec<f64> {
    match &m.kind {
        MetricKind::Sphere { .. } => vec![0.0; f.len()],
        MetricKind::Warped(p) => {
            let st = Stencils::new(&p.s, p.topology);
            let d1 = st.d1(f, Parity::Even);
            let d2 = st.d2(f, Parity::Even);
            let dpsi = st.d1(&p.psi, Parity::Odd);
            let nf = m.n as f64;
            (0..p.len())
                .map(|j| {
                    if p.is_pole(j) {
                        nf * d2[j]
                    } else {
                        d2[j] + (nf - 1.0) * dpsi[j] / p.psi[j] * d1[j]
                    }
                })
                .collect()
        }
    }
}

/// Worst relative margin of `R_min(t) >= B(t) = R0 / (1 - 2 R0 t / n)` over stored
/// times, with `R0 = min R(0)`. The margin at each time is `(R_min - B) / max(1, |B|)`.
pub fn scalar_lower_bound_check(trace: &FlowTrace) -> f64 {
    let Some(first) = trace.diagnostics.first() else {
        return 0.0;
    };
    let n = trace.states[0].n as f64;
    let r0 = first.min_r;
    let t0 = first.t;
    trace
        .diagnostics
        .iter()
        .map(|d| {
            let b = scalar_lower_bound(r0, n, d.t - t0);
            (d.min_r - b) / b.abs().max(1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `B(t) = R0 / (1 - 2 R0 t / n)`.
pub fn scalar_lower_bound(r0: f64, n: f64, t: f64) -> f64 {
    r0 / (1.0 - 2.0 * r0 * t / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_step_is_exact() {
        let m = MetricState::sphere(3, 1.0, 0.0).unwrap();
        let next = step(&m, 0.01).unwrap();
        assert_eq!(next.kind, MetricKind::Sphere { scale: 0.96 });
    }

    #[test]
    fn flat_ball_is_stationary() {
        let m = MetricState::warped(3, Profile::euclidean_ball(21, 1.0).unwrap(), 0.0).unwrap();
        let next = step(&m, 1e-4).unwrap();
        let (a, b) = (m.profile().unwrap(), next.profile().unwrap());
        for j in 0..a.len() {
            assert!((a.psi[j] - b.psi[j]).abs() < 1e-13);
            assert!((a.s[j] - b.s[j]).abs() < 1e-13);
        }
    }
}
