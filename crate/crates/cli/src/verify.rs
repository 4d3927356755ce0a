//! `verify-oracle`: closed-form solutions against the numerical pipeline.

use ricci_lab::entropy::{eval_w, gaussian_identities, normalize, soliton_residual, PotentialField, GAUSSIAN_TRUNCATION};
use ricci_lab::flow::{integrate, StepController};
use ricci_lab::geometry::{curvature_of, lp_norm_r, MetricKind, MetricState, Profile};
use ricci_lab::numerics::gauss_legendre;
use ricci_lab::oracle::{
    cylinder_rm_plateau, remark1_integral, remark2_spacetime_integral, sphere_rm_plateau, sphere_solution,
    CylinderSolution, SpacetimeIntegral, SphereSolution,
};

use crate::tables::fmt_f64;

/// One cross-check: the worst observed discrepancy against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

type Outcome = Result<f64, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Singular time and scale of the integrated unit sphere.
fn sphere_flow() -> Result<(f64, f64), String> {
    let controller = StepController { checkpoints: vec![0.2], ..StepController::default() };
    let trace = integrate(&sphere_solution(3, 0.0).map_err(err)?, &controller, None).map_err(err)?;
    let t = trace.t_estimate.ok_or("no singular-time estimate")?;
    let at = trace.states.iter().find(|s| s.t == 0.2).ok_or("checkpoint 0.2 not stored")?;
    let MetricKind::Sphere { scale } = at.kind else {
        return Err("sphere state expected".into());
    };
    Ok(((t - 0.25).abs(), (scale - 0.2).abs()))
}

fn remark1_vs_quadrature() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [3, 4, 5] {
        let t_max = SphereSolution::new(n, 1.0).t_singular();
        for alpha in [1.0, n as f64 / 2.0, 3.0] {
            for frac in [0.0, 0.5, 0.9] {
                let m = sphere_solution(n, frac * t_max).map_err(err)?;
                let numeric = lp_norm_r(&m, alpha).map_err(err)?;
                let closed = remark1_integral(n, alpha, frac * t_max).map_err(err)?;
                worst = worst.max((numeric / closed - 1.0).abs());
            }
        }
    }
    Ok(worst)
}

/// Number of exponents where the divergence flag disagrees with `alpha >= (n + 2)/2`.
fn remark2_threshold() -> Outcome {
    let mut wrong = 0;
    for n in [3usize, 4, 5] {
        let t_max = SphereSolution::new(n, 1.0).t_singular();
        let threshold = (n as f64 + 2.0) / 2.0;
        for alpha in [threshold - 0.5, threshold - 1e-9, threshold, threshold + 0.5] {
            let divergent = remark2_spacetime_integral(n, alpha, t_max).map_err(err)? == SpacetimeIntegral::Divergent;
            if divergent != (alpha >= threshold) {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64)
}

/// Partial spacetime integral by Gauss-Legendre in `u = -ln(T - t)`.
fn remark2_vs_quadrature() -> Outcome {
    let (x, w) = gauss_legendre(20);
    let mut worst: f64 = 0.0;
    for n in [3usize, 4, 5] {
        let t_max = SphereSolution::new(n, 1.0).t_singular();
        for alpha in [1.0, n as f64 / 2.0, (n as f64 + 2.0) / 2.0] {
            let t1 = t_max - 1e-3;
            let (u0, u1) = (-t_max.ln(), -(t_max - t1).ln());
            let panels = 40;
            let h = (u1 - u0) / panels as f64;
            let mut numeric = 0.0;
            for k in 0..panels {
                let mid = u0 + (k as f64 + 0.5) * h;
                for (xi, wi) in x.iter().zip(&w) {
                    let rest = (-(mid + 0.5 * h * xi)).exp();
                    numeric += remark1_integral(n, alpha, t_max - rest).map_err(err)? * rest * wi * 0.5 * h;
                }
            }
            let closed = remark2_spacetime_integral(n, alpha, t1).map_err(err)?.value().ok_or("unexpected divergence")?;
            worst = worst.max((numeric / closed - 1.0).abs());
        }
    }
    Ok(worst)
}

fn sphere_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [3, 4, 6] {
        let sol = SphereSolution::new(n, 1.0);
        let t_max = sol.t_singular();
        for frac in [0.0, 0.3, 0.99] {
            let t = frac * t_max;
            let c = curvature_of(&sol.state(t).map_err(err)?).map_err(err)?;
            worst = worst
                .max((c.r[0] * (t_max - t) - n as f64 / 2.0).abs())
                .max((c.max_rm * (t_max - t) - sphere_rm_plateau(n)).abs());
        }
    }
    Ok(worst)
}

fn cylinder_identities() -> Outcome {
    let cyl = CylinderSolution::new(3, 1.0);
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.1, 0.4] {
        let c = curvature_of(&cyl.periodic_state(t, 64, 2.0 * std::f64::consts::PI).map_err(err)?).map_err(err)?;
        for r in &c.r {
            worst = worst.max((r - cyl.scalar_curvature(t)).abs());
        }
        worst = worst.max((c.max_rm * (cyl.t_singular() - t) - cylinder_rm_plateau(3)).abs());
    }
    Ok(worst)
}

fn sphere_soliton() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [3, 4, 5] {
        for tau in [0.1, 0.5, 2.0] {
            let m = MetricState::sphere(n, 2.0 * (n as f64 - 1.0) * tau, 0.0).map_err(err)?;
            let p = PotentialField::constant(&m, tau).map_err(err)?;
            worst = worst.max(soliton_residual(&m, &p).map_err(err)?.abs());
        }
    }
    Ok(worst)
}

fn cylinder_soliton() -> Outcome {
    let cyl = CylinderSolution::new(3, 1.0);
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.15] {
        let tau = cyl.t_singular() - t;
        let m = cyl.segment_state(t, 801, 12.0 * tau.sqrt()).map_err(err)?;
        let s = m.profile().ok_or("warped state expected")?.s.clone();
        let mid = 0.5 * (s[0] + s[s.len() - 1]);
        let f: Vec<f64> = s.iter().map(|x| cyl.potential(tau, x - mid)).collect();
        let p = normalize(&PotentialField::from_potential(&f, tau), &m).map_err(err)?;
        worst = worst.max(soliton_residual(&m, &p).map_err(err)?.abs());
    }
    Ok(worst)
}

fn gaussian_moments() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        let (mass, moment) = gaussian_identities(n, GAUSSIAN_TRUNCATION);
        worst = worst.max(mass.abs()).max(moment.abs());
    }
    Ok(worst)
}

/// `|W|` of the Gaussian on a flat ball of radius `12 sqrt(tau)`.
fn gaussian_patch() -> Outcome {
    let tau = 0.5;
    let m = MetricState::warped(3, Profile::euclidean_ball(3201, 12.0 * f64::sqrt(tau)).map_err(err)?, 0.0)
        .map_err(err)?;
    let s = &m.profile().ok_or("warped state expected")?.s;
    let f: Vec<f64> = s.iter().map(|r| r * r / (4.0 * tau)).collect();
    let p = normalize(&PotentialField::from_potential(&f, tau), &m).map_err(err)?;
    Ok(eval_w(&m, &p).map_err(err)?.abs())
}

/// Runs every cross-check. A check that cannot be evaluated reports an infinite discrepancy.
pub fn run_all() -> Vec<(OracleCheck, Option<String>)> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, tolerance: f64, value: Outcome| {
        let (value, error) = match value {
            Ok(v) => (v, None),
            Err(e) => (f64::INFINITY, Some(e)),
        };
        out.push((OracleCheck { name, value, tolerance }, error));
    };
    match sphere_flow() {
        Ok((t_err, scale_err)) => {
            push("sphere_singular_time", 1e-4, Ok(t_err));
            push("sphere_scale_at_0.2", 1e-10, Ok(scale_err));
        }
        Err(e) => {
            push("sphere_singular_time", 1e-4, Err(e.clone()));
            push("sphere_scale_at_0.2", 1e-10, Err(e));
        }
    }
    push("remark1_vs_lp_norm", 1e-10, remark1_vs_quadrature());
    push("remark2_divergence_threshold", 0.0, remark2_threshold());
    push("remark2_vs_quadrature", 1e-9, remark2_vs_quadrature());
    push("sphere_curvature_identities", 1e-10, sphere_identities());
    push("cylinder_curvature_identities", 1e-9, cylinder_identities());
    push("sphere_soliton_residual", 1e-9, sphere_soliton());
    push("cylinder_soliton_residual", 1e-9, cylinder_soliton());
    push("gaussian_identities", 1e-10, gaussian_moments());
    push("gaussian_patch_entropy", 1e-6, gaussian_patch());
    out
}

pub fn render(checks: &[(OracleCheck, Option<String>)]) -> String {
    let mut s = String::from("check\tvalue\ttolerance\tstatus\n");
    for (c, e) in checks {
        let status = if c.passed() { "pass".to_string() } else { "FAIL".to_string() };
        let status = match e {
            Some(e) => format!("{status} ({e})"),
            None => status,
        };
        s.push_str(&format!("{}\t{}\t{}\t{}\n", c.name, fmt_f64(c.value), fmt_f64(c.tolerance), status));
    }
    s
}
