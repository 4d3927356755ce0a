//! Symmetric metrics on `S^n` and their curvature, volume and integrals.
//!
//! Two representations are supported: a round sphere stored by its scale `c`
//! (metric `c * g_round`), and a warped product `ds^2 + psi(s)^2 g_{S^{n-1}}`
//! sampled on a one-dimensional grid. The warped product carries a
//! [`Topology`] describing what happens at the grid ends: a pole (where the
//! fibre sphere collapses smoothly), an open truncation, or periodic wrap.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fd_weights_array, gauss_legendre, unit_sphere_volume};

/// Largest accepted deviation of `|psi'|` from 1 at a pole node.
pub const POLE_SLOPE_TOLERANCE: f64 = 2e-2;

/// Largest accepted ratio between neighbouring grid spacings.
pub const MAX_SPACING_RATIO: f64 = 2.0;

/// Smallest grid the finite-difference stencils support.
pub const MIN_NODES: usize = 5;

/// How the ends of a warped-product grid are closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Topology {
    /// Poles at both ends: the warped product is a smooth `S^n`.
    TwoPoles,
    /// Pole at the first node, open truncation at the last (a ball).
    OnePole,
    /// Both ends open (a truncated cylinder or annulus).
    Open,
    /// The last node connects back to the first across `period`.
    Periodic { period: f64 },
}

impl Topology {
    fn left_pole(self) -> bool {
        matches!(self, Topology::TwoPoles | Topology::OnePole)
    }

    fn right_pole(self) -> bool {
        matches!(self, Topology::TwoPoles)
    }
}

/// Grid samples of a warped-product profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    /// Arclength coordinate of each node, strictly increasing.
    pub s: Vec<f64>,
    /// Warping function at each node.
    pub psi: Vec<f64>,
    pub topology: Topology,
    /// Incremented whenever the grid is rebuilt; nodes with the same epoch
    /// follow the same material points.
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetricKind {
    /// `scale * g_round` on the unit sphere.
    Sphere { scale: f64 },
    Warped(Profile),
}

/// A symmetric metric on an `n`-manifold at flow time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricState {
    pub n: usize,
    pub t: f64,
    pub kind: MetricKind,
}

/// Pointwise curvature of a [`MetricState`].
///
/// For a sphere state every vector has a single entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureFields {
    pub r: Vec<f64>,
    /// Sectional curvature of planes containing the radial direction.
    pub sectional_l: Vec<f64>,
    /// Sectional curvature of planes tangent to the fibre sphere.
    pub sectional_k: Vec<f64>,
    pub ricci_radial: Vec<f64>,
    pub ricci_spherical: Vec<f64>,
    pub rm_norm: Vec<f64>,
    pub max_rm: f64,
    pub argmax_rm: usize,
    pub min_r: f64,
    pub max_r: f64,
}

impl CurvatureFields {
    fn from_sectional(n: usize, l: Vec<f64>, k: Vec<f64>) -> Self {
        let nf = n as f64;
        let mut r = Vec::with_capacity(l.len());
        let mut ricci_radial = Vec::with_capacity(l.len());
        let mut ricci_spherical = Vec::with_capacity(l.len());
        let mut rm_norm = Vec::with_capacity(l.len());
        for (&lj, &kj) in l.iter().zip(&k) {
            ricci_radial.push((nf - 1.0) * lj);
            ricci_spherical.push(lj + (nf - 2.0) * kj);
            r.push(2.0 * (nf - 1.0) * lj + (nf - 1.0) * (nf - 2.0) * kj);
            rm_norm.push(rm_norm_from_sectional(n, lj, kj));
        }
        let (argmax_rm, max_rm) = rm_norm
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best });
        let min_r = r.iter().copied().fold(f64::INFINITY, f64::min);
        let max_r = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        CurvatureFields {
            r,
            sectional_l: l,
            sectional_k: k,
            ricci_radial,
            ricci_spherical,
            rm_norm,
            max_rm,
            argmax_rm,
            min_r,
            max_r,
        }
    }

    /// `|Ric|^2` at node `j`.
    pub fn ricci_norm_sq(&self, n: usize, j: usize) -> f64 {
        let a = self.ricci_radial[j];
        let b = self.ricci_spherical[j];
        a * a + (n as f64 - 1.0) * b * b
    }
}

/// `|Rm|` from the two sectional curvatures: `|Rm|^2 = 4(n-1)L^2 + 2(n-1)(n-2)K^2`.
pub fn rm_norm_from_sectional(n: usize, l: f64, k: f64) -> f64 {
    let nf = n as f64;
    (4.0 * (nf - 1.0) * l * l + 2.0 * (nf - 1.0) * (nf - 2.0) * k * k).sqrt()
}

impl MetricState {
    pub fn sphere(n: usize, scale: f64, t: f64) -> Result<Self> {
        let m = MetricState { n, t, kind: MetricKind::Sphere { scale } };
        m.validate()?;
        Ok(m)
    }

    pub fn warped(n: usize, profile: Profile, t: f64) -> Result<Self> {
        let m = MetricState { n, t, kind: MetricKind::Warped(profile) };
        m.validate()?;
        Ok(m)
    }

    pub fn profile(&self) -> Option<&Profile> {
        match &self.kind {
            MetricKind::Warped(p) => Some(p),
            MetricKind::Sphere { .. } => None,
        }
    }

    /// Checks the structural invariants and pole regularity.
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::InvalidState(format!("dimension {} < 3", self.n)));
        }
        if !self.t.is_finite() {
            return Err(Error::InvalidState("non-finite time".into()));
        }
        match &self.kind {
            MetricKind::Sphere { scale } => {
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidState(format!("sphere scale {scale} is not positive")));
                }
                Ok(())
            }
            MetricKind::Warped(p) => {
                p.validate_grid()?;
                sectional_curvatures(self.n, p).map(|_| ())
            }
        }
    }
}

impl Profile {
    pub fn new(s: Vec<f64>, psi: Vec<f64>, topology: Topology) -> Result<Self> {
        let p = Profile { s, psi, topology, epoch: 0 };
        p.validate_grid()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Number of grid segments (one more than the node gaps when periodic).
    pub fn segment_count(&self) -> usize {
        match self.topology {
            Topology::Periodic { .. } => self.len(),
            _ => self.len() - 1,
        }
    }

    /// End nodes and length of segment `k`.
    pub fn segment(&self, k: usize) -> (usize, usize, f64) {
        let n = self.len();
        if k + 1 < n {
            (k, k + 1, self.s[k + 1] - self.s[k])
        } else {
            let Topology::Periodic { period } = self.topology else {
                panic!("segment {k} out of range");
            };
            (n - 1, 0, period - (self.s[n - 1] - self.s[0]))
        }
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        (0..self.segment_count()).map(|k| self.segment(k).2).collect()
    }

    /// Total arclength (the period for periodic grids).
    pub fn length(&self) -> f64 {
        match self.topology {
            Topology::Periodic { period } => period,
            _ => self.s[self.len() - 1] - self.s[0],
        }
    }

    pub fn is_pole(&self, j: usize) -> bool {
        (j == 0 && self.topology.left_pole()) || (j + 1 == self.len() && self.topology.right_pole())
    }

    /// Largest ratio between neighbouring segment lengths.
    pub fn max_spacing_ratio(&self) -> f64 {
        let h = self.segment_lengths();
        let pairs = match self.topology {
            Topology::Periodic { .. } => h.len(),
            _ => h.len() - 1,
        };
        (0..pairs)
            .map(|k| {
                let (a, b) = (h[k], h[(k + 1) % h.len()]);
                a.max(b) / a.min(b)
            })
            .fold(1.0, f64::max)
    }

    fn validate_grid(&self) -> Result<()> {
        let n = self.len();
        if n < MIN_NODES || self.psi.len() != n {
            return Err(Error::InvalidState(format!(
                "grid needs at least {MIN_NODES} nodes and matching arrays (s: {}, psi: {})",
                n,
                self.psi.len()
            )));
        }
        if self.s.iter().chain(&self.psi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite grid value".into()));
        }
        if let Topology::Periodic { period } = self.topology {
            if !(period > self.s[n - 1] - self.s[0]) {
                return Err(Error::InvalidState(format!("period {period} does not exceed the grid span")));
            }
        }
        if self.segment_lengths().iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidState("grid spacing must be positive".into()));
        }
        let ratio = self.max_spacing_ratio();
        if ratio > MAX_SPACING_RATIO * (1.0 + 1e-9) {
            return Err(Error::InvalidState(format!("neighbour spacing ratio {ratio:.3} exceeds {MAX_SPACING_RATIO}")));
        }
        for j in 0..n {
            if self.is_pole(j) {
                if self.psi[j] != 0.0 {
                    return Err(Error::InvalidState(format!("psi must vanish at pole node {j}")));
                }
            } else if !(self.psi[j] > 0.0) {
                return Err(Error::NonPositiveProfile { index: j, value: self.psi[j] });
            }
        }
        Ok(())
    }

    /// Uniform grid on `[0, pi r]` sampling the round sphere of radius `r`.
    pub fn round(nodes: usize, radius: f64) -> Result<Self> {
        Self::from_fn(nodes, std::f64::consts::PI * radius, Topology::TwoPoles, |s| radius * (s / radius).sin())
    }

    /// Round unit sphere with a neck carved out: `sin(s) * (1 - depth * exp(-((s - center) / width)^2))`.
    pub fn dumbbell(nodes: usize, depth: f64, width: f64, center: f64) -> Result<Self> {
        Self::from_fn(nodes, std::f64::consts::PI, Topology::TwoPoles, |s| {
            s.sin() * (1.0 - depth * (-((s - center) / width).powi(2)).exp())
        })
    }

    /// Non-round perturbation of the unit sphere: `sin(s) (1 + eps cos 2s) / (1 + eps)`.
    pub fn perturbed_sphere(nodes: usize, eps: f64) -> Result<Self> {
        Self::from_fn(nodes, std::f64::consts::PI, Topology::TwoPoles, |s| {
            s.sin() * (1.0 + eps * (2.0 * s).cos()) / (1.0 + eps)
        })
    }

    /// Flat ball of the given radius: `psi(s) = s`.
    pub fn euclidean_ball(nodes: usize, radius: f64) -> Result<Self> {
        Self::from_fn(nodes, radius, Topology::OnePole, |s| s)
    }

    /// Cylinder of the given radius truncated to `s in [-half_length, half_length]`.
    pub fn cylinder_segment(nodes: usize, radius: f64, half_length: f64) -> Result<Self> {
        let h = 2.0 * half_length / (nodes as f64 - 1.0);
        let s = (0..nodes).map(|j| -half_length + h * j as f64).collect();
        Profile::new(s, vec![radius; nodes], Topology::Open)
    }

    /// Cylinder of the given radius closed up periodically.
    pub fn cylinder_periodic(nodes: usize, radius: f64, period: f64) -> Result<Self> {
        let h = period / nodes as f64;
        let s = (0..nodes).map(|j| h * j as f64).collect();
        Profile::new(s, vec![radius; nodes], Topology::Periodic { period })
    }

    /// Uniform grid on `[0, length]` with `psi = f(s)`; pole values are set to exactly zero.
    pub fn from_fn(nodes: usize, length: f64, topology: Topology, f: impl Fn(f64) -> f64) -> Result<Self> {
        if nodes < MIN_NODES {
            return Err(Error::InvalidArgument(format!("need at least {MIN_NODES} nodes, got {nodes}")));
        }
        let h = length / (nodes as f64 - 1.0);
        let s: Vec<f64> = (0..nodes).map(|j| if j + 1 == nodes { length } else { h * j as f64 }).collect();
        let mut psi: Vec<f64> = s.iter().map(|&x| f(x)).collect();
        if topology.left_pole() {
            psi[0] = 0.0;
        }
        if topology.right_pole() {
            psi[nodes - 1] = 0.0;
        }
        Profile::new(s, psi, topology)
    }
}

/// Symmetry of a grid function across a pole.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    /// Changes sign across a pole, like `psi`.
    Odd,
    /// Smooth radial functions such as `R` or a potential.
    Even,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tap {
    node: usize,
    mirrored: bool,
    w: f64,
}

/// Finite-difference operators on a profile grid: five-point first
/// derivatives and three-point second derivatives, with mirror ghosts at
/// poles and one-sided stencils at open ends.
#[derive(Debug, Clone)]
pub struct Stencils {
    d1: Vec<[Tap; 5]>,
    d2: Vec<[Tap; 4]>,
    /// Reciprocal length factor applied on top of the stored weights.
    factor: f64,
}

impl Stencils {
    pub fn new(s: &[f64], topology: Topology) -> Self {
        let n = s.len();
        let ghost = |k: isize| -> Option<(f64, usize, bool)> {
            let last = n as isize - 1;
            if (0..=last).contains(&k) {
                return Some((s[k as usize], k as usize, false));
            }
            match topology {
                Topology::Periodic { period } if k < 0 => {
                    let r = (k + n as isize) as usize;
                    Some((s[r] - period, r, false))
                }
                Topology::Periodic { period } => {
                    let r = (k - n as isize) as usize;
                    Some((s[r] + period, r, false))
                }
                _ if k < 0 && topology.left_pole() => {
                    let r = (-k) as usize;
                    (r < n).then(|| (2.0 * s[0] - s[r], r, true))
                }
                _ if k > last && topology.right_pole() => {
                    let r = 2 * last - k;
                    (r >= 0).then(|| (2.0 * s[n - 1] - s[r as usize], r as usize, true))
                }
                _ => None,
            }
        };
        let window = |start: isize, len: usize| -> Option<Vec<(f64, usize, bool)>> {
            (0..len as isize).map(|i| ghost(start + i)).collect()
        };
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        for (j, &z) in s.iter().enumerate() {
            let ji = j as isize;
            let pts = [0isize, 1, -1, 2, -2]
                .iter()
                .find_map(|shift| window(ji - 2 + shift, 5))
                .expect("grid has at least five nodes");
            let xs = [pts[0].0, pts[1].0, pts[2].0, pts[3].0, pts[4].0];
            let w = fd_weights_array(z, &xs);
            let mut taps = [Tap::default(); 5];
            for (i, tap) in taps.iter_mut().enumerate() {
                *tap = Tap { node: pts[i].1, mirrored: pts[i].2, w: w[1][i] };
            }
            d1.push(taps);

            let mut taps = [Tap::default(); 4];
            if let Some(pts) = window(ji - 1, 3) {
                let w = fd_weights_array(z, &[pts[0].0, pts[1].0, pts[2].0]);
                for i in 0..3 {
                    taps[i] = Tap { node: pts[i].1, mirrored: pts[i].2, w: w[2][i] };
                }
            } else {
                let pts = window(ji, 4).or_else(|| window(ji - 3, 4)).expect("grid has at least four nodes");
                let w = fd_weights_array(z, &[pts[0].0, pts[1].0, pts[2].0, pts[3].0]);
                for i in 0..4 {
                    taps[i] = Tap { node: pts[i].1, mirrored: pts[i].2, w: w[2][i] };
                }
            }
            d2.push(taps);
        }
        Stencils { d1, d2, factor: 1.0 }
    }

    /// Operators for the same grid stretched by `stretch` about its first node.
    pub fn stretched(&self, stretch: f64) -> Self {
        Stencils { d1: self.d1.clone(), d2: self.d2.clone(), factor: self.factor / stretch }
    }

    fn apply<const P: usize>(rows: &[[Tap; P]], v: &[f64], parity: Parity, scale: f64) -> Vec<f64> {
        rows.iter()
            .map(|taps| {
                let sum: f64 = taps
                    .iter()
                    .map(|t| {
                        let x = v[t.node];
                        let x = if t.mirrored && parity == Parity::Odd { -x } else { x };
                        t.w * x
                    })
                    .sum();
                sum * scale
            })
            .collect()
    }

    pub fn d1(&self, v: &[f64], parity: Parity) -> Vec<f64> {
        Self::apply(&self.d1, v, parity, self.factor)
    }

    pub fn d2(&self, v: &[f64], parity: Parity) -> Vec<f64> {
        Self::apply(&self.d2, v, parity, self.factor * self.factor)
    }
}

/// Sectional curvatures of a warped profile plus `psi'`.
pub(crate) struct Sectional {
    pub l: Vec<f64>,
    pub k: Vec<f64>,
    pub dpsi: Vec<f64>,
}

pub(crate) fn sectional_curvatures(_n: usize, p: &Profile) -> Result<Sectional> {
    let stencils = Stencils::new(&p.s, p.topology);
    sectional_with(p, &stencils)
}

pub(crate) fn sectional_with(p: &Profile, stencils: &Stencils) -> Result<Sectional> {
    let count = p.len();
    let dpsi = stencils.d1(&p.psi, Parity::Odd);
    let ddpsi = stencils.d2(&p.psi, Parity::Odd);
    let mut l = vec![0.0; count];
    let mut k = vec![0.0; count];
    for j in 0..count {
        if p.is_pole(j) {
            continue;
        }
        let psi = p.psi[j];
        if !(psi > 0.0) {
            return Err(Error::NonPositiveProfile { index: j, value: psi });
        }
        l[j] = -ddpsi[j] / psi;
        k[j] = (1.0 - dpsi[j] * dpsi[j]) / (psi * psi);
    }
    for j in [0, count - 1] {
        if !p.is_pole(j) {
            continue;
        }
        let slope = dpsi[j].abs();
        if (slope - 1.0).abs() > POLE_SLOPE_TOLERANCE {
            return Err(Error::PoleRegularityViolated { index: j, slope });
        }
        // Odd Taylor fit psi = a x + b x^3 through the two nearest nodes.
        let (i1, i2) = if j == 0 { (1, 2) } else { (count - 2, count - 3) };
        let x1 = (p.s[i1] - p.s[j]).abs();
        let x2 = (p.s[i2] - p.s[j]).abs();
        let b = (p.psi[i2] / x2 - p.psi[i1] / x1) / (x2 * x2 - x1 * x1);
        let a = p.psi[i1] / x1 - b * x1 * x1;
        l[j] = -6.0 * b / a;
        k[j] = l[j];
    }
    Ok(Sectional { l, k, dpsi })
}

pub fn curvature_of(m: &MetricState) -> Result<CurvatureFields> {
    match &m.kind {
        MetricKind::Sphere { scale } => {
            if !(*scale > 0.0) {
                return Err(Error::InvalidState(format!("sphere scale {scale} is not positive")));
            }
            let sec = 1.0 / scale;
            Ok(CurvatureFields::from_sectional(m.n, vec![sec], vec![sec]))
        }
        MetricKind::Warped(p) => {
            let sec = sectional_curvatures(m.n, p)?;
            Ok(CurvatureFields::from_sectional(m.n, sec.l, sec.k))
        }
    }
}

fn gauss5() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(5))
}

/// `int psi_lin^{n-1} ds` over the two halves of every segment, where
/// `psi_lin` is the piecewise-linear interpolant of the profile.
pub fn segment_half_measures(p: &Profile, n: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss5();
    let e = n as i32 - 1;
    (0..p.segment_count())
        .map(|k| {
            let (a, b, h) = p.segment(k);
            let (pa, pb) = (p.psi[a], p.psi[b]);
            let pm = 0.5 * (pa + pb);
            let half = |lo: f64, hi: f64| -> f64 {
                x.iter()
                    .zip(w)
                    .map(|(xi, wi)| wi * (0.5 * (lo + hi) + 0.5 * (hi - lo) * xi).powi(e))
                    .sum::<f64>()
                    * 0.25
                    * h
            };
            (half(pa, pm), half(pm, pb))
        })
        .collect()
}

/// Lumped dual-cell measures `M_j`; `sum_j M_j F_j` approximates `int F psi^{n-1} ds`.
pub fn cell_measures(p: &Profile, n: usize) -> Vec<f64> {
    let mut m = vec![0.0; p.len()];
    for (k, (left, right)) in segment_half_measures(p, n).into_iter().enumerate() {
        let (a, b, _) = p.segment(k);
        m[a] += left;
        m[b] += right;
    }
    m
}

pub fn volume_of(m: &MetricState) -> f64 {
    match &m.kind {
        MetricKind::Sphere { scale } => scale.powf(m.n as f64 / 2.0) * unit_sphere_volume(m.n),
        MetricKind::Warped(p) => unit_sphere_volume(m.n - 1) * cell_measures(p, m.n).iter().sum::<f64>(),
    }
}

/// `int_M |R|^alpha dvol`.
pub fn lp_norm_r(m: &MetricState, alpha: f64) -> Result<f64> {
    let curv = curvature_of(m)?;
    Ok(lp_norm_with(m, &curv, alpha))
}

/// [`lp_norm_r`] reusing already computed curvature.
pub fn lp_norm_with(m: &MetricState, curv: &CurvatureFields, alpha: f64) -> f64 {
    match &m.kind {
        MetricKind::Sphere { .. } => volume_of(m) * curv.r[0].abs().powf(alpha),
        MetricKind::Warped(p) => {
            unit_sphere_volume(m.n - 1)
                * cell_measures(p, m.n).iter().zip(&curv.r).map(|(mj, rj)| mj * rj.abs().powf(alpha)).sum::<f64>()
        }
    }
}

/// The metric `lambda * g`; the flow time is unchanged.
pub fn rescale(m: &MetricState, lambda: f64) -> Result<MetricState> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("rescale factor {lambda} must be positive")));
    }
    let kind = match &m.kind {
        MetricKind::Sphere { scale } => MetricKind::Sphere { scale: scale * lambda },
        MetricKind::Warped(p) => {
            let r = lambda.sqrt();
            let topology = match p.topology {
                Topology::Periodic { period } => Topology::Periodic { period: period * r },
                other => other,
            };
            MetricKind::Warped(Profile {
                s: p.s.iter().map(|s| s * r).collect(),
                psi: p.psi.iter().map(|v| v * r).collect(),
                topology,
                epoch: p.epoch,
            })
        }
    };
    Ok(MetricState { n: m.n, t: m.t, kind })
}
