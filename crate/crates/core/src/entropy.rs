//! Perelman's entropy on symmetric metrics.
//!
//! Potentials are stored as `phi = exp(-f/2)`. On a warped product `phi` is
//! piecewise linear on the grid and integrals use the lumped cell measures
//! `M_j` of [`cell_measures`], so with `A` the stiffness matrix
//!
//! ```text
//! E(phi) = 4 tau phi^T A phi + sum_j M_j (tau R_j - 2 ln phi_j - n) phi_j^2
//! W      = omega E / (4 pi tau)^{n/2}
//! ```
//!
//! under the constraint `omega sum_j M_j phi_j^2 = (4 pi tau)^{n/2}`, where
//! `omega` is the volume of the unit fibre sphere. A round sphere stored by its
//! scale is a single node carrying the whole volume.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::grid_velocity;
use crate::geometry::{
    cell_measures, curvature_of, sectional_curvatures, segment_half_measures, volume_of, MetricKind, MetricState, Parity,
    Profile, Stencils, Topology,
};
use crate::numerics::{fd_weights_array, gauss_legendre, unit_sphere_volume, Tridiagonal};

/// Constraint residual accepted by [`eval_w`] and [`soliton_residual`].
pub const EVAL_CONSTRAINT_TOLERANCE: f64 = 1e-6;

/// A minimizer counts as resolved when at least this many nodes carry
/// `phi >= max phi / 10`.
pub const MIN_RESOLVED_NODES: usize = 8;

/// Default truncation radius of [`gaussian_identities`].
pub const GAUSSIAN_TRUNCATION: f64 = 24.0;

/// A potential `f = -2 ln phi` at backward time `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialField {
    /// One value per grid node, or a single value on a round sphere.
    pub phi: Vec<f64>,
    pub tau: f64,
}

impl PotentialField {
    pub fn from_potential(f: &[f64], tau: f64) -> Self {
        PotentialField { phi: f.iter().map(|v| (-0.5 * v).exp()).collect(), tau }
    }

    /// `f = -2 ln phi`.
    pub fn potential(&self) -> Vec<f64> {
        self.phi.iter().map(|p| -2.0 * p.ln()).collect()
    }

    /// The normalized constant potential on `m`.
    pub fn constant(m: &MetricState, tau: f64) -> Result<Self> {
        normalize(&PotentialField { phi: vec![1.0; node_count(m)], tau }, m)
    }
}

fn node_count(m: &MetricState) -> usize {
    match &m.kind {
        MetricKind::Sphere { .. } => 1,
        MetricKind::Warped(p) => p.len(),
    }
}

/// The discrete quadratic forms of one metric.
struct Discrete {
    n: usize,
    omega: f64,
    mass: Vec<f64>,
    /// `(a, b, c)`: the stiffness form gains `c (v_a - v_b)^2`.
    edges: Vec<(usize, usize, f64)>,
    r: Vec<f64>,
    cyclic: bool,
}

impl Discrete {
    fn new(m: &MetricState) -> Result<Self> {
        let curv = curvature_of(m)?;
        let omega = unit_sphere_volume(m.n - 1);
        match &m.kind {
            MetricKind::Sphere { .. } => Ok(Discrete {
                n: m.n,
                omega,
                mass: vec![volume_of(m) / omega],
                edges: Vec::new(),
                r: curv.r,
                cyclic: false,
            }),
            MetricKind::Warped(p) => {
                let edges = segment_half_measures(p, m.n)
                    .into_iter()
                    .enumerate()
                    .map(|(k, (left, right))| {
                        let (a, b, h) = p.segment(k);
                        (a, b, (left + right) / (h * h))
                    })
                    .collect();
                Ok(Discrete {
                    n: m.n,
                    omega,
                    mass: cell_measures(p, m.n),
                    edges,
                    r: curv.r,
                    cyclic: matches!(p.topology, Topology::Periodic { .. }),
                })
            }
        }
    }

    fn len(&self) -> usize {
        self.mass.len()
    }

    /// `sum_j M_j phi_j^2` required by the constraint at `tau`.
    fn target(&self, tau: f64) -> f64 {
        (4.0 * PI * tau).powf(self.n as f64 / 2.0) / self.omega
    }

    fn norm_sq(&self, phi: &[f64]) -> f64 {
        self.mass.iter().zip(phi).map(|(m, p)| m * p * p).sum()
    }

    fn stiffness_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for &(a, b, c) in &self.edges {
            let d = c * (v[a] - v[b]);
            out[a] += d;
            out[b] -= d;
        }
        out
    }

    fn stiffness_form(&self, v: &[f64]) -> f64 {
        self.edges.iter().map(|&(a, b, c)| c * (v[a] - v[b]).powi(2)).sum()
    }

    /// `diag_scale * A + diag(extra)`.
    fn stiffness_plus(&self, diag_scale: f64, extra: &[f64]) -> Tridiagonal {
        let mut t = Tridiagonal::zeros(self.len(), self.cyclic);
        for (j, e) in extra.iter().enumerate() {
            t.add(j, j, *e);
        }
        for &(a, b, c) in &self.edges {
            let c = diag_scale * c;
            t.add(a, a, c);
            t.add(b, b, c);
            t.add(a, b, -c);
            t.add(b, a, -c);
        }
        t
    }

    fn energy(&self, phi: &[f64], tau: f64) -> f64 {
        let nf = self.n as f64;
        let bulk: f64 = (0..self.len())
            .map(|j| {
                let p = phi[j];
                self.mass[j] * p * p * (tau * self.r[j] - 2.0 * p.ln() - nf)
            })
            .sum();
        4.0 * tau * self.stiffness_form(phi) + bulk
    }

    fn w_of(&self, phi: &[f64], tau: f64) -> f64 {
        self.energy(phi, tau) / self.target(tau)
    }

    fn constraint_residual(&self, phi: &[f64], tau: f64) -> f64 {
        self.norm_sq(phi) / self.target(tau) - 1.0
    }

    fn normalized(&self, phi: &[f64], tau: f64) -> Result<Vec<f64>> {
        let q = self.norm_sq(phi);
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::ZeroField);
        }
        let k = (self.target(tau) / q).sqrt();
        Ok(phi.iter().map(|p| p * k).collect())
    }

    /// `mu` from the Euler-Lagrange identity and the max-norm residual of
    /// `tau(-4 Lap phi + R phi) - 2 phi ln phi - (mu + n) phi`, relative to `max phi`.
    fn euler_lagrange(&self, phi: &[f64], tau: f64) -> (f64, f64) {
        let mu = self.energy(phi, tau) / self.norm_sq(phi);
        let ap = self.stiffness_apply(phi);
        let nf = self.n as f64;
        let scale = phi.iter().copied().fold(0.0, f64::max);
        let worst = (0..self.len())
            .map(|j| {
                let p = phi[j];
                (4.0 * tau * ap[j] / self.mass[j] + p * (tau * self.r[j] - 2.0 * p.ln() - nf - mu)).abs()
            })
            .fold(0.0, f64::max);
        (mu, worst / scale)
    }
}

fn check_field(m: &MetricState, p: &PotentialField) -> Result<()> {
    if p.phi.len() != node_count(m) {
        return Err(Error::InvalidArgument(format!(
            "potential has {} values for a metric with {} nodes",
            p.phi.len(),
            node_count(m)
        )));
    }
    if !(p.tau > 0.0 && p.tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau = {} must be positive", p.tau)));
    }
    if let Some((j, v)) = p.phi.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!("phi[{j}] = {v} is not positive")));
    }
    Ok(())
}

/// `(4 pi tau)^{-n/2} int phi^2 dvol - 1`.
pub fn constraint_residual(m: &MetricState, p: &PotentialField) -> Result<f64> {
    check_field(m, p)?;
    Ok(Discrete::new(m)?.constraint_residual(&p.phi, p.tau))
}

/// Rescales `phi` so that `(4 pi tau)^{-n/2} int phi^2 dvol = 1`.
pub fn normalize(p: &PotentialField, m: &MetricState) -> Result<PotentialField> {
    if p.phi.len() != node_count(m) {
        return Err(Error::InvalidArgument("potential does not match the metric grid".into()));
    }
    let phi = Discrete::new(m)?.normalized(&p.phi, p.tau)?;
    Ok(PotentialField { phi, tau: p.tau })
}

/// `W(g, f, tau) = (4 pi tau)^{-n/2} int [tau (R + |grad f|^2) + f - n] e^{-f} dvol`.
pub fn eval_w(m: &MetricState, p: &PotentialField) -> Result<f64> {
    check_field(m, p)?;
    let d = Discrete::new(m)?;
    let residual = d.constraint_residual(&p.phi, p.tau);
    if residual.abs() > EVAL_CONSTRAINT_TOLERANCE {
        return Err(Error::ConstraintViolated { residual, tolerance: EVAL_CONSTRAINT_TOLERANCE });
    }
    Ok(d.w_of(&p.phi, p.tau))
}

/// Where a multistart begins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// The constant potential.
    Constant,
    /// A Gaussian `f = d^2 / (4 tau)` centred at this fraction of the grid length.
    Bump(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyOptions {
    /// Euler-Lagrange residual, relative to `max phi`.
    pub tolerance: f64,
    pub constraint_tolerance: f64,
    /// Descent iterations per start.
    pub max_iterations: usize,
    /// Grid used when the metric is a round sphere stored by its scale.
    pub sphere_nodes: usize,
    pub starts: Vec<Start>,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        EntropyOptions {
            tolerance: 1e-7,
            constraint_tolerance: 1e-10,
            max_iterations: 50_000,
            sphere_nodes: 801,
            starts: vec![Start::Constant, Start::Bump(0.0), Start::Bump(0.5), Start::Bump(1.0)],
        }
    }
}

impl EntropyOptions {
    /// Bump starts only, for rescaled states whose minimizer concentrates on a
    /// small part of a long grid; the constant start converges very slowly there.
    pub fn localized() -> Self {
        EntropyOptions { starts: vec![Start::Bump(0.0), Start::Bump(0.5), Start::Bump(1.0)], ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub tau: f64,
    pub w: f64,
    /// From the Euler-Lagrange identity; equals `w` for a normalized field.
    pub mu: f64,
    pub constraint_residual: f64,
    pub euler_lagrange_residual: f64,
    pub soliton_residual: f64,
    /// `int phi^2 dvol`.
    pub phi_l2: f64,
    /// `int |grad phi|^2 dvol`.
    pub grad_phi_l2: f64,
    pub min_f: f64,
    pub max_f: f64,
    /// Scalar curvature at the node where `f` is smallest.
    pub r_at_min_f: f64,
    /// Entropy-grid node of `max phi`, i.e. of `min f`.
    pub argmax_phi: usize,
    /// `max (phi + |grad phi|)`.
    pub beta: f64,
    /// Entropy-grid node where `beta` is attained.
    pub argmax_beta: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Enough grid nodes under the bulk of `phi`; see [`MIN_RESOLVED_NODES`].
    pub resolved: bool,
    /// Index into the start list of the winning start.
    pub start: usize,
}

/// Result of [`minimize_w`]: the record, the minimizer and the grid it lives on.
#[derive(Debug, Clone)]
pub struct Minimizer {
    pub record: EntropyRecord,
    pub field: PotentialField,
    /// The input metric, or a gridded copy when the input is a round sphere.
    pub metric: MetricState,
}

/// Grid on which the entropy of `m` is minimized.
pub fn entropy_grid(m: &MetricState, sphere_nodes: usize) -> Result<MetricState> {
    match &m.kind {
        MetricKind::Sphere { scale } => MetricState::warped(m.n, Profile::round(sphere_nodes, scale.sqrt())?, m.t),
        MetricKind::Warped(_) => Ok(m.clone()),
    }
}

/// `mu(g, tau) = inf W` over normalized potentials.
pub fn minimize_w(m: &MetricState, tau: f64, opts: &EntropyOptions) -> Result<Minimizer> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau = {tau} must be positive")));
    }
    if opts.starts.is_empty() {
        return Err(Error::InvalidArgument("no multistart points configured".into()));
    }
    let grid = entropy_grid(m, opts.sphere_nodes)?;
    let MetricKind::Warped(profile) = &grid.kind else { unreachable!() };
    let d = Discrete::new(&grid)?;
    let mut best: Option<(Attempt, usize)> = None;
    for (index, start) in opts.starts.iter().enumerate() {
        let phi0 = initial_guess(profile, tau, *start);
        let attempt = solve(&d, tau, d.normalized(&phi0, tau)?, opts);
        let rank = |a: &Attempt| (a.converged && resolved(&a.phi), a.converged);
        let better = match &best {
            None => true,
            Some((b, _)) => {
                let (ra, rb) = (rank(&attempt), rank(b));
                ra > rb || (ra == rb && attempt.w < b.w)
            }
        };
        if better {
            best = Some((attempt, index));
        }
    }
    let (attempt, start) = best.expect("at least one start");
    let field = PotentialField { phi: attempt.phi, tau };
    let record = record_for(&grid, &d, &field, attempt.iterations, attempt.converged, start)?;
    Ok(Minimizer { record, field, metric: grid })
}

fn resolved(phi: &[f64]) -> bool {
    let top = phi.iter().copied().fold(0.0, f64::max);
    phi.iter().filter(|p| **p >= 0.1 * top).count() >= MIN_RESOLVED_NODES
}

fn initial_guess(p: &Profile, tau: f64, start: Start) -> Vec<f64> {
    match start {
        Start::Constant => vec![1.0; p.len()],
        Start::Bump(fraction) => {
            let len = p.length();
            let centre = p.s[0] + fraction.clamp(0.0, 1.0) * len;
            let periodic = matches!(p.topology, Topology::Periodic { .. });
            p.s.iter()
                .map(|&s| {
                    let mut d = (s - centre).abs();
                    if periodic {
                        d = d.min(len - d);
                    }
                    (-d * d / (8.0 * tau)).exp().max(1e-150)
                })
                .collect()
        }
    }
}

struct Attempt {
    phi: Vec<f64>,
    w: f64,
    iterations: usize,
    converged: bool,
}

/// Descent gives up after this many iterations without lowering the energy.
const STALL_ITERATIONS: usize = 2000;

fn solve(d: &Discrete, tau: f64, mut phi: Vec<f64>, opts: &EntropyOptions) -> Attempt {
    let mut iterations = 0;
    let mut last_newton = None;
    let (mut best_e, mut best_at) = (f64::INFINITY, 0);
    let converged = loop {
        let (mu, el) = d.euler_lagrange(&phi, tau);
        if el <= opts.tolerance && d.constraint_residual(&phi, tau).abs() <= opts.constraint_tolerance {
            break true;
        }
        if el < 1e-2 && last_newton.is_none_or(|k| iterations >= k + 25) {
            last_newton = Some(iterations);
            if let Some(polished) = newton(d, tau, &phi, mu, opts) {
                let (w_new, w_old) = (d.w_of(&polished, tau), d.w_of(&phi, tau));
                if w_new <= w_old + 10.0 * opts.tolerance {
                    phi = polished;
                    continue;
                }
            }
        }
        if iterations >= opts.max_iterations {
            break false;
        }
        let e = d.energy(&phi, tau);
        if e < best_e - 1e-13 * e.abs().max(1.0) {
            (best_e, best_at) = (e, iterations);
        } else if iterations >= best_at + STALL_ITERATIONS {
            break false;
        }
        iterations += 1;
        match descent_step(d, tau, &phi) {
            Some(next) => phi = next,
            None => {
                if last_newton != Some(iterations - 1) {
                    last_newton = None;
                    continue;
                }
                break false;
            }
        }
    };
    let w = d.w_of(&phi, tau);
    Attempt { phi, w, iterations, converged }
}

/// One preconditioned projected-gradient step with Armijo backtracking.
fn descent_step(d: &Discrete, tau: f64, phi: &[f64]) -> Option<Vec<f64>> {
    let nf = d.n as f64;
    let count = d.len();
    let ap = d.stiffness_apply(phi);
    let grad: Vec<f64> = (0..count)
        .map(|j| 8.0 * tau * ap[j] + 2.0 * d.mass[j] * phi[j] * (tau * d.r[j] - 2.0 * phi[j].ln() - 1.0 - nf))
        .collect();
    let q = d.norm_sq(phi);
    let lambda = grad.iter().zip(phi).map(|(g, p)| g * p).sum::<f64>() / (2.0 * q);
    let gl: Vec<f64> = (0..count).map(|j| grad[j] - 2.0 * lambda * d.mass[j] * phi[j]).collect();
    let extra: Vec<f64> = (0..count)
        .map(|j| {
            let c = tau * d.r[j] - 2.0 * phi[j].ln() - 3.0 - nf - lambda;
            2.0 * d.mass[j] * c.max(1.0)
        })
        .collect();
    let tangent = |v: Vec<f64>| -> Vec<f64> {
        let k = (0..count).map(|j| d.mass[j] * phi[j] * v[j]).sum::<f64>() / q;
        v.iter().zip(phi).map(|(x, p)| x - k * p).collect()
    };
    let mut dir = match d.stiffness_plus(8.0 * tau, &extra).solve(&gl) {
        Some(x) => tangent(x.into_iter().map(|v| -v).collect()),
        None => tangent(gl.iter().zip(&d.mass).map(|(g, m)| -g / m).collect()),
    };
    let mut slope: f64 = gl.iter().zip(&dir).map(|(g, v)| g * v).sum();
    if !(slope < 0.0) {
        dir = tangent(gl.iter().zip(&d.mass).map(|(g, m)| -g / m).collect());
        slope = gl.iter().zip(&dir).map(|(g, v)| g * v).sum();
        if !(slope < 0.0) {
            return None;
        }
    }
    let e0 = d.energy(phi, tau);
    let mut alpha = 1.0;
    for _ in 0..60 {
        // Far tails would otherwise cap the step at the first node to cross zero.
        let trial: Vec<f64> = phi.iter().zip(&dir).map(|(p, v)| (p + alpha * v).max(0.1 * p)).collect();
        if let Ok(trial) = d.normalized(&trial, tau) {
            let e = d.energy(&trial, tau);
            if e <= e0 + 1e-4 * alpha * slope {
                return Some(trial);
            }
        }
        alpha *= 0.5;
    }
    None
}

/// Newton's method on the Euler-Lagrange system bordered by the constraint.
fn newton(d: &Discrete, tau: f64, phi0: &[f64], mu0: f64, opts: &EntropyOptions) -> Option<Vec<f64>> {
    let nf = d.n as f64;
    let count = d.len();
    let target = d.target(tau);
    let residual = |phi: &[f64], mu: f64| -> (Vec<f64>, f64) {
        let ap = d.stiffness_apply(phi);
        let f = (0..count)
            .map(|j| 4.0 * tau * ap[j] + d.mass[j] * phi[j] * (tau * d.r[j] - 2.0 * phi[j].ln() - nf - mu))
            .collect();
        (f, d.norm_sq(phi) - target)
    };
    let size = |f: &[f64], c: f64, phi: &[f64]| -> f64 {
        let scale = phi.iter().copied().fold(0.0, f64::max);
        let el = f.iter().zip(&d.mass).map(|(r, m)| (r / m).abs()).fold(0.0, f64::max) / scale;
        el.max(c.abs() / target)
    };
    let mut phi = phi0.to_vec();
    let mut mu = mu0;
    let (mut f, mut c) = residual(&phi, mu);
    let mut norm = size(&f, c, &phi);
    for _ in 0..40 {
        let extra: Vec<f64> =
            (0..count).map(|j| d.mass[j] * (tau * d.r[j] - 2.0 * phi[j].ln() - nf - mu - 2.0)).collect();
        let jac = d.stiffness_plus(4.0 * tau, &extra);
        let x1 = jac.solve(&f.iter().map(|v| -v).collect::<Vec<_>>())?;
        let border: Vec<f64> = (0..count).map(|j| -d.mass[j] * phi[j]).collect();
        let x2 = jac.solve(&border)?;
        let cx1: f64 = (0..count).map(|j| 2.0 * d.mass[j] * phi[j] * x1[j]).sum();
        let cx2: f64 = (0..count).map(|j| 2.0 * d.mass[j] * phi[j] * x2[j]).sum();
        if cx2 == 0.0 {
            return None;
        }
        let dmu = (cx1 + c) / cx2;
        let dphi: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - dmu * b).collect();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = phi.iter().zip(&dphi).map(|(p, v)| p + alpha * v).collect();
            if trial.iter().all(|v| *v > 0.0) {
                let mu_t = mu + alpha * dmu;
                let (ft, ct) = residual(&trial, mu_t);
                let nt = size(&ft, ct, &trial);
                if nt < norm {
                    phi = trial;
                    mu = mu_t;
                    f = ft;
                    c = ct;
                    norm = nt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        if norm <= 0.1 * opts.tolerance {
            break;
        }
    }
    let phi = d.normalized(&phi, tau).ok()?;
    let (_, el) = d.euler_lagrange(&phi, tau);
    (el <= opts.tolerance).then_some(phi)
}

fn record_for(
    m: &MetricState,
    d: &Discrete,
    field: &PotentialField,
    iterations: usize,
    converged: bool,
    start: usize,
) -> Result<EntropyRecord> {
    let tau = field.tau;
    let phi = &field.phi;
    let (mu, el) = d.euler_lagrange(phi, tau);
    let f = field.potential();
    let (argmin, min_f) =
        f.iter().copied().enumerate().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty field");
    let max_f = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grad = gradient(m, phi, Parity::Even);
    let argmax = |v: &mut dyn Iterator<Item = f64>| v.enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty field");
    let (argmax_beta, beta) = argmax(&mut phi.iter().zip(&grad).map(|(p, g)| p + g.abs()));
    Ok(EntropyRecord {
        tau,
        w: d.w_of(phi, tau),
        mu,
        constraint_residual: d.constraint_residual(phi, tau),
        euler_lagrange_residual: el,
        soliton_residual: soliton_residual(m, field)?,
        phi_l2: d.omega * d.norm_sq(phi),
        grad_phi_l2: d.omega * d.stiffness_form(phi),
        min_f,
        max_f,
        r_at_min_f: d.r[argmin],
        argmax_phi: argmin,
        beta,
        argmax_beta,
        iterations,
        converged,
        resolved: resolved(phi),
        start,
    })
}

fn gradient(m: &MetricState, v: &[f64], parity: Parity) -> Vec<f64> {
    match &m.kind {
        MetricKind::Sphere { .. } => vec![0.0; v.len()],
        MetricKind::Warped(p) => Stencils::new(&p.s, p.topology).d1(v, parity),
    }
}

/// Margins of the maximum-principle bound on `min f` at a minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinFBound {
    /// `n + mu - tau R(x_min) - min f`, from the equation at the minimum point of `f`.
    pub sharp: f64,
    /// `n + mu + tau max|R| - min f`.
    pub coarse: f64,
}

pub fn min_f_bound_check(m: &MetricState, record: &EntropyRecord) -> Result<MinFBound> {
    let curv = curvature_of(m)?;
    let r_abs = curv.min_r.abs().max(curv.max_r.abs());
    let nf = m.n as f64;
    Ok(MinFBound {
        sharp: nf + record.mu - record.tau * record.r_at_min_f - record.min_f,
        coarse: nf + record.mu + record.tau * r_abs - record.min_f,
    })
}

/// `(4 pi tau)^{-n/2} tau int |Ric + Hess f - g/(2 tau)|^2 e^{-f} dvol`.
pub fn soliton_residual(m: &MetricState, p: &PotentialField) -> Result<f64> {
    check_field(m, p)?;
    let d = Discrete::new(m)?;
    let residual = d.constraint_residual(&p.phi, p.tau);
    if residual.abs() > EVAL_CONSTRAINT_TOLERANCE {
        return Err(Error::ConstraintViolated { residual, tolerance: EVAL_CONSTRAINT_TOLERANCE });
    }
    let tau = p.tau;
    let nf = m.n as f64;
    let shrink = 0.5 / tau;
    let density: Vec<f64> = match &m.kind {
        MetricKind::Sphere { scale } => {
            let a = (nf - 1.0) / scale - shrink;
            vec![nf * a * a]
        }
        MetricKind::Warped(prof) => {
            let sec = sectional_curvatures(m.n, prof)?;
            let f = p.potential();
            let st = Stencils::new(&prof.s, prof.topology);
            let f1 = st.d1(&f, Parity::Even);
            let f2 = st.d2(&f, Parity::Even);
            (0..prof.len())
                .map(|j| {
                    let radial = (nf - 1.0) * sec.l[j] + f2[j] - shrink;
                    let hess_fibre = if prof.is_pole(j) { f2[j] } else { sec.dpsi[j] / prof.psi[j] * f1[j] };
                    let fibre = sec.l[j] + (nf - 2.0) * sec.k[j] + hess_fibre - shrink;
                    radial * radial + (nf - 1.0) * fibre * fibre
                })
                .collect()
        }
    };
    let integral: f64 = (0..d.len()).map(|j| d.mass[j] * p.phi[j] * p.phi[j] * density[j]).sum();
    Ok(tau * integral / d.target(tau))
}

/// `int (4 pi)^{-n/2} e^{-|y|^2/4} dy - 1` and `int (|y|^2/2 - n) (4 pi)^{-n/2} e^{-|y|^2/4} dy`
/// over `R^n`, by radial Gauss-Legendre quadrature on `[0, radius]`.
pub fn gaussian_identities(n: usize, radius: f64) -> (f64, f64) {
    let (x, w) = gauss_legendre(10);
    let panels = (radius / 0.5).ceil().max(1.0) as usize;
    let h = radius / panels as f64;
    let sphere = if n == 1 { 2.0 } else { unit_sphere_volume(n - 1) };
    let norm = sphere * (4.0 * PI).powf(-(n as f64) / 2.0);
    let (mut mass, mut moment) = (0.0, 0.0);
    for k in 0..panels {
        let mid = (k as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(&w) {
            let r = mid + 0.5 * h * xi;
            let g = norm * r.powi(n as i32 - 1) * (-r * r / 4.0).exp() * wi * 0.5 * h;
            mass += g;
            moment += g * (r * r / 2.0 - n as f64);
        }
    }
    (mass - 1.0, moment)
}

/// Cell masses `M_j` and the operator `K` of the conservative form
/// `d(M v)/dt = K v` of the conjugate heat equation `dv/dt = -Lap v + R v` on one state: `K` is the
/// stiffness matrix plus the transport of `v dvol` across cell faces that
/// drift relative to the material.
struct Conservative {
    mass: Vec<f64>,
    k: Tridiagonal,
}

impl Conservative {
    fn new(m: &MetricState) -> Result<Self> {
        let d = Discrete::new(m)?;
        let mut k = Tridiagonal::zeros(d.len(), d.cyclic);
        for &(a, b, c) in &d.edges {
            k.add(a, a, c);
            k.add(a, b, -c);
            k.add(b, b, c);
            k.add(b, a, -c);
        }
        if let MetricKind::Warped(p) = &m.kind {
            let w = grid_velocity(m)?;
            let e = m.n as i32 - 1;
            for seg in 0..p.segment_count() {
                let (a, b, _) = p.segment(seg);
                // Content swept into cell `a` (and out of `b`) by the face between them.
                let flux = 0.5 * (w[a] + w[b]) * (0.5 * (p.psi[a] + p.psi[b])).powi(e) * 0.5;
                k.add(a, a, flux);
                k.add(a, b, flux);
                k.add(b, a, -flux);
                k.add(b, b, -flux);
            }
        }
        Ok(Conservative { mass: d.mass, k })
    }
}

fn blend(a: &Tridiagonal, b: &Tridiagonal, theta: f64) -> Tridiagonal {
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| (1.0 - theta) * p + theta * q).collect() };
    Tridiagonal {
        lower: mix(&a.lower, &b.lower),
        diag: mix(&a.diag, &b.diag),
        upper: mix(&a.upper, &b.upper),
        corners: match (a.corners, b.corners) {
            (Some((a0, a1)), Some((b0, b1))) => Some(((1.0 - theta) * a0 + theta * b0, (1.0 - theta) * a1 + theta * b1)),
            _ => None,
        },
    }
}

fn mix(a: &[f64], b: &[f64], theta: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| (1.0 - theta) * p + theta * q).collect()
}

/// Moves the potential from the later state `m_next` back to `m`.
///
/// The step evolves `v = (4 pi tau)^{-n/2} e^{-f}`, which satisfies the
/// linear conjugate heat equation `-dv/dt = Lap v - R v`; this is the same
/// equation as `df/dt = -Lap f + |grad f|^2 - R + n/(2 tau)`. Written for the
/// cell contents `M_j v_j` the scheme conserves `int v dvol` exactly, so the
/// constraint is only disturbed by rounding. Crank-Nicolson substeps blend
/// the two end states and are halved until `phi` stays positive.
pub fn backward_f_step(m_next: &MetricState, m: &MetricState, p_next: &PotentialField) -> Result<PotentialField> {
    let dt = m_next.t - m.t;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("states are not in time order ({} then {})", m.t, m_next.t)));
    }
    if m.n != m_next.n {
        return Err(Error::InvalidArgument("states have different dimensions".into()));
    }
    check_field(m_next, p_next)?;
    let tau = p_next.tau + dt;
    let nf = m.n as f64;
    let to_v = |phi: &[f64], tau: f64| -> Vec<f64> {
        let k = (4.0 * PI * tau).powf(-nf / 2.0);
        phi.iter().map(|p| k * p * p).collect()
    };
    let to_phi = |v: &[f64], tau: f64| -> Vec<f64> {
        let k = (4.0 * PI * tau).powf(nf / 2.0);
        v.iter().map(|x| (k * x).sqrt()).collect()
    };
    let v_next = match (&m_next.kind, &m.kind) {
        (MetricKind::Sphere { .. }, MetricKind::Sphere { .. }) => to_v(&p_next.phi, p_next.tau),
        (MetricKind::Warped(pn), MetricKind::Warped(pm)) => to_v(&remap(pn, pm, &p_next.phi)?, p_next.tau),
        _ => return Err(Error::InvalidArgument("states have different representations".into())),
    };
    let late = Conservative::new(m_next)?;
    let early = Conservative::new(m)?;
    for substeps in [1usize, 2, 4, 8, 16, 32, 64] {
        let h = dt / substeps as f64;
        let mut v = v_next.clone();
        let mut ok = true;
        for step in 0..substeps {
            // theta = 1 at t_next, 0 at t.
            let ta = 1.0 - step as f64 / substeps as f64;
            let tb = 1.0 - (step + 1) as f64 / substeps as f64;
            let ka = blend(&early.k, &late.k, ta);
            let ma = mix(&early.mass, &late.mass, ta);
            let mb = mix(&early.mass, &late.mass, tb);
            let rhs: Vec<f64> = ka.mul_vec(&v).iter().zip(&v).zip(&ma).map(|((kv, x), mj)| mj * x - 0.5 * h * kv).collect();
            let mut lhs = blend(&early.k, &late.k, tb);
            for x in lhs.lower.iter_mut().chain(lhs.upper.iter_mut()).chain(lhs.diag.iter_mut()) {
                *x *= 0.5 * h;
            }
            if let Some((a, b)) = lhs.corners.as_mut() {
                *a *= 0.5 * h;
                *b *= 0.5 * h;
            }
            for (x, mj) in lhs.diag.iter_mut().zip(&mb) {
                *x += mj;
            }
            match lhs.solve(&rhs) {
                Some(next) if next.iter().all(|x| *x > 0.0 && x.is_finite()) => v = next,
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(PotentialField { phi: to_phi(&v, tau), tau });
        }
    }
    Err(Error::StepUnstable(format!("phi lost positivity stepping back from t = {}", m_next.t)))
}

/// Carries `phi` from `from`'s grid to `to`'s grid at equal length fractions.
fn remap(from: &Profile, to: &Profile, phi: &[f64]) -> Result<Vec<f64>> {
    if from.epoch == to.epoch && from.len() == to.len() {
        return Ok(phi.to_vec());
    }
    if from.topology != to.topology && !matches!((from.topology, to.topology), (Topology::Periodic { .. }, Topology::Periodic { .. })) {
        return Err(Error::InvalidArgument("states have different topologies".into()));
    }
    let (lf, lt) = (from.length(), to.length());
    let u_from: Vec<f64> = from.s.iter().map(|s| (s - from.s[0]) / lf).collect();
    let log_phi: Vec<f64> = phi.iter().map(|p| p.ln()).collect();
    Ok(to
        .s
        .iter()
        .map(|s| {
            let u = ((s - to.s[0]) / lt).clamp(0.0, u_from[u_from.len() - 1]);
            let k = u_from.partition_point(|x| *x <= u).clamp(1, u_from.len() - 1);
            let (u0, u1) = (u_from[k - 1], u_from[k]);
            let a = (u - u0) / (u1 - u0);
            ((1.0 - a) * log_phi[k - 1] + a * log_phi[k]).exp()
        })
        .collect())
}

/// Potentials along `states` (ascending in time), obtained by stepping
/// `p_last` (on the last state) backwards.
pub fn couple_backward(states: &[MetricState], p_last: &PotentialField) -> Result<Vec<PotentialField>> {
    let Some(last) = states.last() else {
        return Ok(Vec::new());
    };
    check_field(last, p_last)?;
    let mut fields = vec![p_last.clone()];
    for k in (0..states.len() - 1).rev() {
        let next = backward_f_step(&states[k + 1], &states[k], fields.last().expect("non-empty"))?;
        fields.push(next);
    }
    fields.reverse();
    Ok(fields)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityRow {
    pub t: f64,
    pub tau: f64,
    pub w: f64,
    /// Centred difference of `W` in `t`.
    pub dw_dt: f64,
    /// `2 tau int |Ric + Hess f - g/(2 tau)|^2 (4 pi tau)^{-n/2} e^{-f} dvol`.
    pub rhs: f64,
    pub constraint_residual: f64,
    /// Half the spread of `W` when `tau` is shifted by the error in `T_estimate`,
    /// with the potential renormalized at each shifted `tau`.
    pub w_band: f64,
}

impl MonotonicityRow {
    /// `|dw_dt - rhs| / |rhs|`.
    pub fn relative_difference(&self) -> f64 {
        (self.dw_dt - self.rhs).abs() / self.rhs.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub rows: Vec<MonotonicityRow>,
    pub min_dw_dt: f64,
    pub min_rhs: f64,
    pub max_relative_difference: f64,
}

/// Compares the time derivative of `W(g(t), f(t), tau(t))` with the
/// monotonicity integrand at every interior state of the segment.
fn w_band(m: &MetricState, p: &PotentialField, dtau: f64) -> Result<f64> {
    if !(dtau > 0.0) || dtau >= p.tau {
        return Ok(0.0);
    }
    let shifted = |tau: f64| -> Result<f64> {
        let q = normalize(&PotentialField { phi: p.phi.clone(), tau }, m)?;
        eval_w(m, &q)
    };
    Ok(0.5 * (shifted(p.tau + dtau)? - shifted(p.tau - dtau)?).abs())
}

/// `mu(m, tau)` and half the spread of `mu` over `tau +- dtau`, the band from an
/// uncertain singular time. The band is zero when `dtau` is not in `(0, tau)`.
pub fn minimize_w_with_band(m: &MetricState, tau: f64, dtau: f64, opts: &EntropyOptions) -> Result<(Minimizer, f64)> {
    let centre = minimize_w(m, tau, opts)?;
    if !(dtau > 0.0) || dtau >= tau {
        return Ok((centre, 0.0));
    }
    let hi = minimize_w(m, tau + dtau, opts)?.record.mu;
    let lo = minimize_w(m, tau - dtau, opts)?.record.mu;
    Ok((centre, 0.5 * (hi - lo).abs()))
}

/// `t_error` is the uncertainty of the singular time that fixed `tau`.
pub fn monotonicity_check(
    states: &[MetricState],
    fields: &[PotentialField],
    t_error: f64,
) -> Result<MonotonicityReport> {
    if states.len() != fields.len() || states.len() < 3 {
        return Err(Error::InvalidArgument("need at least three states with one potential each".into()));
    }
    let w: Vec<f64> = states.iter().zip(fields).map(|(m, p)| eval_w(m, p)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for k in 1..states.len() - 1 {
        let t = [states[k - 1].t, states[k].t, states[k + 1].t];
        let c = fd_weights_array(t[1], &t)[1];
        rows.push(MonotonicityRow {
            t: t[1],
            tau: fields[k].tau,
            w: w[k],
            dw_dt: c[0] * w[k - 1] + c[1] * w[k] + c[2] * w[k + 1],
            rhs: 2.0 * soliton_residual(&states[k], &fields[k])?,
            constraint_residual: constraint_residual(&states[k], &fields[k])?,
            w_band: w_band(&states[k], &fields[k], t_error)?,
        });
    }
    Ok(MonotonicityReport {
        min_dw_dt: rows.iter().map(|r| r.dw_dt).fold(f64::INFINITY, f64::min),
        min_rhs: rows.iter().map(|r| r.rhs).fold(f64::INFINITY, f64::min),
        max_relative_difference: rows.iter().map(|r| r.relative_difference()).fold(0.0, f64::max),
        rows,
    })
}
