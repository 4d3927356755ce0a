//! Conventions attached to every numeric output column. Table headers, the
//! manifest and the report all read from here.

pub const RM_NORM: &str = "|Rm| with |Rm|^2 = 4(n-1)L^2 + 2(n-1)(n-2)K^2, L radial and K spherical sectional curvature";
pub const SCALAR: &str = "scalar curvature R = 2(n-1)L + (n-1)(n-2)K";
pub const VOLUME: &str = "Riemannian volume, |S^(n-1)| int psi^(n-1) ds for warped profiles";
pub const LP_NORM: &str = "int |R|^alpha dvol";
pub const TAU: &str = "tau = T_estimate - t (backward time to the estimated singular time) unless tau policy is fixed";
pub const W_FUNCTIONAL: &str =
    "W = int [tau(R + |grad f|^2) + f - n] (4 pi tau)^(-n/2) e^(-f) dvol under int (4 pi tau)^(-n/2) e^(-f) dvol = 1";
pub const MU: &str = "mu = inf W over normalized f at fixed tau";
pub const BOUND_MARGIN: &str =
    "(min R - B) / max(1, |B|) with B = R0 / (1 - 2 R0 (t - t0) / n), R0 = min R at the first stored time";
pub const GAP_MARGIN: &str = "8 (T_estimate - t) max|Rm| - 1; nan without a singular-time estimate";
pub const SCALED_RM: &str = "(T_estimate - t) max|Rm|";
pub const SOLITON_RESIDUAL: &str = "(4 pi tau)^(-n/2) tau int |Ric + Hess f - g/(2 tau)|^2 e^(-f) dvol";
pub const CONSTRAINT: &str = "int (4 pi tau)^(-n/2) e^(-f) dvol - 1";
pub const EULER_LAGRANGE: &str = "Euler-Lagrange residual relative to max phi, phi = e^(-f/2)";
pub const PHI_L2: &str = "int phi^2 dvol, phi = e^(-f/2)";
pub const GRAD_PHI_L2: &str = "int |grad phi|^2 dvol, phi = e^(-f/2)";
pub const BETA: &str = "beta = max (phi + |grad phi|), the W^{1,2} scale of phi";
pub const BLOWUP: &str = "g_i(r) = Q_i g(t_i + r / Q_i), Q_i = max over stored t <= t_i of max|Rm|, alpha_i = Q_i (T_estimate - t_i)";
pub const FLAG: &str = "1 = true, 0 = false";

/// One labelled numeric column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Column {
    pub name: &'static str,
    pub convention: &'static str,
}

const fn col(name: &'static str, convention: &'static str) -> Column {
    Column { name, convention }
}

pub const TRACE_SCHEMA: u32 = 1;
pub const ENTROPY_SCHEMA: u32 = 1;
pub const REPORT_SCHEMA: u32 = 1;
pub const SUMMARY_SCHEMA: u32 = 1;

/// Fixed trace columns; one `lp_R_<alpha>` column per exponent follows `volume`.
pub const TRACE_HEAD: [Column; 5] = [
    col("t", "flow time"),
    col("max_rm", RM_NORM),
    col("min_R", SCALAR),
    col("max_R", SCALAR),
    col("volume", VOLUME),
];
pub const TRACE_TAIL: [Column; 3] =
    [col("bound_margin", BOUND_MARGIN), col("gap_margin", GAP_MARGIN), col("scaled_rm", SCALED_RM)];

pub const ENTROPY_COLUMNS: [Column; 15] = [
    col("t", "flow time of the metric"),
    col("tau", TAU),
    col("mu", MU),
    col("w", W_FUNCTIONAL),
    col("mu_band", "half spread of mu over tau +- T_estimate uncertainty; 0 when not computed"),
    col("constraint_residual", CONSTRAINT),
    col("euler_lagrange_residual", EULER_LAGRANGE),
    col("soliton_residual", SOLITON_RESIDUAL),
    col("min_f", "min over nodes of the minimizing f"),
    col("max_f", "max over nodes of the minimizing f"),
    col("phi_l2", PHI_L2),
    col("grad_phi_l2", GRAD_PHI_L2),
    col("beta", BETA),
    col("converged", FLAG),
    col("resolved", FLAG),
];

pub const SUMMARY_COLUMNS: [Column; 12] = [
    col("value", "swept parameter value"),
    col("failed", FLAG),
    col("classification", "0 NoSingularity, 1 TypeI, 2 TypeII, 3 Inconclusive, nan on failure"),
    col("locus", "0 Global, 1 Local, nan on failure"),
    col("plateau", SCALED_RM),
    col("t_estimate", "least-squares root of 1/max|Rm| over the tail of stored times"),
    col("t_error", "standard error of t_estimate"),
    col("final_mu", MU),
    col("trend_slope", "slope of log((T-t) max|Rm|) against log(T-t) over the final decade"),
    col("lp_alpha", "first requested exponent alpha of int |R|^alpha dvol; nan if none"),
    col("lp_growth", LP_GROWTH),
    col("lp_divergent", "1 when lp_growth > 1 + LP_GROWTH_TOLERANCE, else 0; nan if undefined"),
];

pub fn lp_column_name(alpha: f64) -> String {
    format!("lp_R_{alpha}")
}

pub const LP_GROWTH: &str =
    "int |R|^alpha dvol at the last stored time over its value where T - t is closest to 10x the final T - t";

/// Relative growth of `int |R|^alpha dvol` over the final decade above which it counts as divergent.
pub const LP_GROWTH_TOLERANCE: f64 = 1e-3;

/// Every named convention, for the manifest.
pub fn all() -> Vec<(&'static str, &'static str)> {
    vec![
        ("rm_norm", RM_NORM),
        ("scalar", SCALAR),
        ("volume", VOLUME),
        ("lp_norm", LP_NORM),
        ("tau", TAU),
        ("w_functional", W_FUNCTIONAL),
        ("mu", MU),
        ("bound_margin", BOUND_MARGIN),
        ("gap_margin", GAP_MARGIN),
        ("scaled_rm", SCALED_RM),
        ("soliton_residual", SOLITON_RESIDUAL),
        ("constraint", CONSTRAINT),
        ("euler_lagrange", EULER_LAGRANGE),
        ("phi_l2", PHI_L2),
        ("grad_phi_l2", GRAD_PHI_L2),
        ("beta", BETA),
        ("blowup", BLOWUP),
        ("lp_growth", LP_GROWTH),
        ("flag", FLAG),
    ]
}
