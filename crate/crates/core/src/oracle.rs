//! Closed-form reference solutions: the shrinking round sphere, the shrinking
//! cylinder and the Gaussian shrinker.

use crate::error::{Error, Result};
use crate::geometry::{rm_norm_from_sectional, MetricState, Profile};
use crate::numerics::unit_sphere_volume;

/// The round sphere `g(t) = (c0 - 2(n-1)t) g_round`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereSolution {
    pub n: usize,
    pub c0: f64,
}

impl SphereSolution {
    pub fn new(n: usize, c0: f64) -> Self {
        SphereSolution { n, c0 }
    }

    /// Singular time `c0 / (2(n-1))`.
    pub fn t_singular(&self) -> f64 {
        self.c0 / (2.0 * (self.n as f64 - 1.0))
    }

    pub fn scale(&self, t: f64) -> f64 {
        self.c0 - 2.0 * (self.n as f64 - 1.0) * t
    }

    pub fn state(&self, t: f64) -> Result<MetricState> {
        let t_max = self.t_singular();
        if !(0.0..t_max).contains(&t) {
            return Err(Error::TimeOutOfRange { t, t_max });
        }
        MetricState::sphere(self.n, self.scale(t), t)
    }

    pub fn scalar_curvature(&self, t: f64) -> f64 {
        let n = self.n as f64;
        n * (n - 1.0) / self.scale(t)
    }

    pub fn volume(&self, t: f64) -> f64 {
        self.scale(t).powf(self.n as f64 / 2.0) * unit_sphere_volume(self.n)
    }

    pub fn max_rm(&self, t: f64) -> f64 {
        let k = 1.0 / self.scale(t);
        rm_norm_from_sectional(self.n, k, k)
    }
}

/// Exact state of the unit-sphere family at time `t`.
pub fn sphere_solution(n: usize, t: f64) -> Result<MetricState> {
    SphereSolution::new(n, 1.0).state(t)
}

/// Limit of `(T - t) max|Rm|` on the shrinking sphere: `sqrt(n / (2(n-1)))`.
pub fn sphere_rm_plateau(n: usize) -> f64 {
    let n = n as f64;
    (n / (2.0 * (n - 1.0))).sqrt()
}

/// Limit of `(T - t) max|Rm|` on the shrinking cylinder: `sqrt((n-1) / (2(n-2)))`.
pub fn cylinder_rm_plateau(n: usize) -> f64 {
    let n = n as f64;
    ((n - 1.0) / (2.0 * (n - 2.0))).sqrt()
}

/// `int |R|^alpha dvol` on the unit-sphere family at time `t`.
pub fn remark1_integral(n: usize, alpha: f64, t: f64) -> Result<f64> {
    let sol = SphereSolution::new(n, 1.0);
    let t_max = sol.t_singular();
    if !(0.0..t_max).contains(&t) {
        return Err(Error::TimeOutOfRange { t, t_max });
    }
    Ok(remark1_prefactor(n, alpha) * (t_max - t).powf(n as f64 / 2.0 - alpha))
}

fn remark1_prefactor(n: usize, alpha: f64) -> f64 {
    let nf = n as f64;
    unit_sphere_volume(n) * 2f64.powf(nf / 2.0 - alpha) * (nf - 1.0).powf(nf / 2.0) * nf.powf(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpacetimeIntegral {
    Finite(f64),
    Divergent,
}

impl SpacetimeIntegral {
    pub fn value(self) -> Option<f64> {
        match self {
            SpacetimeIntegral::Finite(v) => Some(v),
            SpacetimeIntegral::Divergent => None,
        }
    }
}

/// `int_0^{t1} int |R|^alpha dvol dt` on the unit-sphere family.
///
/// Diverges exactly when `t1 = T` and `alpha >= (n+2)/2`.
pub fn remark2_spacetime_integral(n: usize, alpha: f64, t1: f64) -> Result<SpacetimeIntegral> {
    let t_max = SphereSolution::new(n, 1.0).t_singular();
    if !(t1 > 0.0 && t1 <= t_max) {
        return Err(Error::TimeOutOfRange { t: t1, t_max });
    }
    let c = remark1_prefactor(n, alpha);
    let e = alpha - n as f64 / 2.0;
    let rest = t_max - t1;
    if rest == 0.0 {
        if e >= 1.0 {
            return Ok(SpacetimeIntegral::Divergent);
        }
        return Ok(SpacetimeIntegral::Finite(c * t_max.powf(1.0 - e) / (1.0 - e)));
    }
    let value = if e == 1.0 {
        c * (t_max / rest).ln()
    } else {
        c * (t_max.powf(1.0 - e) - rest.powf(1.0 - e)) / (1.0 - e)
    };
    Ok(SpacetimeIntegral::Finite(value))
}

/// The shrinking cylinder `R x S^{n-1}` with fibre radius `sqrt(r0^2 - 2(n-2)t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderSolution {
    pub n: usize,
    pub r0: f64,
}

impl CylinderSolution {
    pub fn new(n: usize, r0: f64) -> Self {
        CylinderSolution { n, r0 }
    }

    pub fn t_singular(&self) -> f64 {
        self.r0 * self.r0 / (2.0 * (self.n as f64 - 2.0))
    }

    pub fn radius(&self, t: f64) -> f64 {
        (self.r0 * self.r0 - 2.0 * (self.n as f64 - 2.0) * t).sqrt()
    }

    pub fn scalar_curvature(&self, t: f64) -> f64 {
        let n = self.n as f64;
        (n - 1.0) * (n - 2.0) / (self.radius(t) * self.radius(t))
    }

    fn check(&self, t: f64) -> Result<()> {
        let t_max = self.t_singular();
        if !(t < t_max && t.is_finite()) {
            return Err(Error::TimeOutOfRange { t, t_max });
        }
        Ok(())
    }

    /// Uniform periodic grid (`S^1 x S^{n-1}`) at time `t`.
    pub fn periodic_state(&self, t: f64, nodes: usize, period: f64) -> Result<MetricState> {
        self.check(t)?;
        MetricState::warped(self.n, Profile::cylinder_periodic(nodes, self.radius(t), period)?, t)
    }

    /// Uniform grid on `s in [-half_length, half_length]` at time `t`.
    pub fn segment_state(&self, t: f64, nodes: usize, half_length: f64) -> Result<MetricState> {
        self.check(t)?;
        MetricState::warped(self.n, Profile::cylinder_segment(nodes, self.radius(t), half_length)?, t)
    }

    /// Shrinker potential `s^2 / (4 tau)` along the axis, up to an additive constant.
    pub fn potential(&self, tau: f64, s: f64) -> f64 {
        gaussian_potential(tau, s)
    }
}

/// Periodic cylinder solution of radius `r0` on `nodes` grid points over one period.
pub fn cylinder_soliton(n: usize, r0: f64, t: f64, nodes: usize, period: f64) -> Result<MetricState> {
    CylinderSolution::new(n, r0).periodic_state(t, nodes, period)
}

/// Gaussian shrinker potential `|x|^2 / (4 tau)` at distance `r` from the origin.
pub fn gaussian_potential(tau: f64, r: f64) -> f64 {
    r * r / (4.0 * tau)
}
