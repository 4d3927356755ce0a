//! Acceptance suite, criteria 1-13. Every criterion prints one `PASS`/`FAIL`
//! line to stderr (uncaptured) and fails its own test on a miss. Tolerances
//! are pinned as constants next to each check.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::OnceLock;
use std::time::Instant;

use ricci_lab::entropy::{
    eval_w, gaussian_identities, minimize_w, normalize, soliton_residual, EntropyOptions, PotentialField,
    GAUSSIAN_TRUNCATION,
};
use ricci_lab::flow::{integrate, FlowTrace, StepController};
use ricci_lab::geometry::{MetricKind, MetricState, Profile};
use ricci_lab::oracle::{
    remark1_integral, remark2_spacetime_integral, sphere_rm_plateau, sphere_solution, CylinderSolution,
    SpacetimeIntegral, SphereSolution,
};
use ricci_lab::singularity::{build_blowup, BlowupSchedule, Classification};
use ricci_lab_cli::run::{self, Command, RunOutcome};
use ricci_lab_cli::scenario::Scenario;
use ricci_lab_cli::sweep;

fn verdict(id: u32, name: &str, passed: bool, detail: impl AsRef<str>) {
    let status = if passed { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:>2} {status} {name}: {}", detail.as_ref());
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(passed, "{line}");
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).unwrap_or_else(|e| panic!("{e}"))
}

fn out_dir(tag: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(tag);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

/// The scenario runs shared by several criteria.
struct Suite {
    sphere: RunOutcome,
    neckpinch: RunOutcome,
    neckpinch_fine: RunOutcome,
    perturbed_fine: RunOutcome,
}

impl Suite {
    fn runs(&self) -> [(&'static str, &RunOutcome); 4] {
        [
            ("sphere", &self.sphere),
            ("neckpinch N=101", &self.neckpinch),
            ("neckpinch N=201", &self.neckpinch_fine),
            ("perturbed sphere N=201", &self.perturbed_fine),
        ]
    }
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let out = out_dir("suite");
        let go = |name: &str, refine: usize| {
            let s = run::effective(&scenario(name), Command::Simulate, refine);
            let o = run::run(&s, Command::Simulate, &out).expect("artifacts written");
            assert!(!o.failed(), "{name} run failed: {:?} {:?}", o.flow_error, o.errors);
            o
        };
        Suite {
            sphere: go("sphere", 1),
            neckpinch: go("neckpinch", 1),
            neckpinch_fine: go("neckpinch", 2),
            // Finest grid of the suite for the monotonicity comparison.
            perturbed_fine: go("perturbed_sphere", 2),
        }
    })
}

/// Stored-state index whose `T - t` is closest to `target`.
fn closest_tau(trace: &FlowTrace, t_est: f64, target: f64) -> usize {
    let d = |k: usize| ((t_est - trace.diagnostics[k].t) / target).ln().abs();
    (0..trace.diagnostics.len()).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap()
}

#[test]
fn criterion_01_sphere_exact_solution() {
    const T_TOL: f64 = 1e-4;
    const SCALE_TOL: f64 = 1e-10;
    const RUNTIME: f64 = 1.0;
    let clock = Instant::now();
    let controller = StepController { checkpoints: vec![0.2], ..StepController::default() };
    let trace = integrate(&sphere_solution(3, 0.0).unwrap(), &controller, None).unwrap();
    let elapsed = clock.elapsed().as_secs_f64();
    let t_err = (trace.t_estimate.unwrap() - 0.25).abs();
    let at = trace.states.iter().find(|s| s.t == 0.2).expect("checkpoint stored");
    let MetricKind::Sphere { scale } = at.kind else { panic!("sphere state expected") };
    // r^2(t) = 1 - 2 (n - 1) t
    let scale_err = (scale - (1.0 - 4.0 * 0.2)).abs();
    verdict(
        1,
        "sphere exact solution",
        t_err <= T_TOL && scale_err <= SCALE_TOL && elapsed < RUNTIME,
        format!("|T - 0.25| = {t_err:.3e}, scale error at t=0.2 = {scale_err:.3e}, runtime {elapsed:.3} s"),
    );
}

#[test]
fn criterion_02_remark1_dichotomy() {
    const GROWTH: f64 = 10.0;
    const CONSTANT_TOL: f64 = 1e-8;
    const MATCH_TOL: f64 = 1e-8;
    let o = &suite().sphere;
    let trace = &o.trace;
    let n = 3.0;
    let alphas = &trace.lp_exponents;
    let k_of = |a: f64| alphas.iter().position(|&x| x == a).expect("exponent simulated");
    let (low, mid, high) = (k_of(n / 2.0 - 0.5), k_of(n / 2.0), k_of(n / 2.0 + 0.5));
    let t_est = trace.t_estimate.unwrap();
    let series = |k: usize| trace.diagnostics.iter().map(|d| d.lp_norms[k]).collect::<Vec<f64>>();

    let mut worst_match: f64 = 0.0;
    for d in &trace.diagnostics {
        for (k, &alpha) in alphas.iter().enumerate() {
            // Round S^3 of radius r: R = 6 / r^2, vol = 2 pi^2 r^3.
            let r2 = 1.0 - 4.0 * d.t;
            let direct = 2.0 * std::f64::consts::PI.powi(2) * r2.powf(1.5) * (6.0 / r2).powf(alpha);
            let closed = remark1_integral(3, alpha, d.t).unwrap();
            worst_match = worst_match.max((d.lp_norms[k] / closed - 1.0).abs()).max((closed / direct - 1.0).abs());
        }
    }
    let m = series(mid);
    let spread = m.iter().map(|v| (v / m[0] - 1.0).abs()).fold(0.0, f64::max);
    let l = series(low);
    let decreasing = l.windows(2).all(|w| w[1] < w[0]);
    let last = trace.diagnostics.len() - 1;
    let tau_last = t_est - trace.diagnostics[last].t;
    let early = closest_tau(trace, t_est, 10.0 * tau_last);
    let h = series(high);
    let growth = h[last] / h[early];
    let decade = (t_est - trace.diagnostics[early].t) / tau_last;
    verdict(
        2,
        "Remark 1 dichotomy",
        worst_match <= MATCH_TOL && spread <= CONSTANT_TOL && decreasing && growth >= GROWTH,
        format!(
            "closed-form mismatch {worst_match:.2e}; alpha=n/2 spread {spread:.2e}; alpha=n/2-0.5 decreasing: {decreasing}; \
             alpha=n/2+0.5 grows {growth:.3}x over {decade:.2}x in T-t (needs >= {GROWTH}x; the exact law gives sqrt(10))"
        ),
    );
}

/// `|S^n|` for the dimensions used here.
fn sphere_area(n: usize) -> f64 {
    let pi = std::f64::consts::PI;
    match n {
        3 => 2.0 * pi * pi,
        4 => 8.0 * pi * pi / 3.0,
        5 => pi.powi(3),
        _ => unreachable!(),
    }
}

/// `int_0^{t1} int |R|^alpha dvol dt` on the unit-radius round S^n, by composite
/// Simpson in `u = ln(T - t)`.
fn spacetime_quadrature(n: usize, alpha: f64, t1: f64) -> f64 {
    let nf = n as f64;
    let t_max = 1.0 / (2.0 * (nf - 1.0));
    let integrand = |u: f64| {
        let rest = u.exp();
        let r2 = 2.0 * (nf - 1.0) * rest;
        sphere_area(n) * r2.powf(nf / 2.0) * (nf * (nf - 1.0) / r2).powf(alpha) * rest
    };
    let (a, b) = ((t_max - t1).ln(), t_max.ln());
    let panels = 20_000;
    let h = (b - a) / panels as f64;
    let mut sum = integrand(a) + integrand(b);
    for k in 1..panels {
        sum += integrand(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

#[test]
fn criterion_03_remark2_dichotomy() {
    const QUADRATURE_TOL: f64 = 1e-9;
    let mut wrong = Vec::new();
    let mut worst: f64 = 0.0;
    for n in [3usize, 4, 5] {
        let nf = n as f64;
        let t_max = SphereSolution::new(n, 1.0).t_singular();
        let threshold = (nf + 2.0) / 2.0;
        for alpha in [1.0, nf / 2.0, threshold - 0.5, threshold - 1e-9, threshold, threshold + 1e-9, threshold + 0.5] {
            let flagged = remark2_spacetime_integral(n, alpha, t_max).unwrap() == SpacetimeIntegral::Divergent;
            if flagged != (alpha >= threshold) {
                wrong.push((n, alpha));
            }
        }
        let t1 = t_max - 1e-3;
        for alpha in [1.0, nf / 2.0, threshold - 0.5, threshold] {
            let closed = remark2_spacetime_integral(n, alpha, t1).unwrap().value().expect("finite before T");
            worst = worst.max((spacetime_quadrature(n, alpha, t1) / closed - 1.0).abs());
        }
    }
    verdict(
        3,
        "Remark 2 dichotomy",
        wrong.is_empty() && worst <= QUADRATURE_TOL,
        format!("misflagged exponents {wrong:?}; quadrature mismatch at T-1e-3 {worst:.2e}"),
    );
}

/// Worst `(R_min - B) / max(1, |B|)` with `B(t) = R0 / (1 - 2 R0 t / n)`.
fn bound_margin(trace: &FlowTrace) -> f64 {
    let n = trace.states[0].n as f64;
    let (r0, t0) = (trace.diagnostics[0].min_r, trace.diagnostics[0].t);
    trace
        .diagnostics
        .iter()
        .map(|d| {
            let b = r0 / (1.0 - 2.0 * r0 * (d.t - t0) / n);
            (d.min_r - b) / b.abs().max(1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_04_scalar_lower_bound() {
    const MARGIN: f64 = -5e-3;
    const SPHERE_EQUALITY: f64 = 1e-10;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, o) in suite().runs() {
        let m = bound_margin(&o.trace);
        ok &= m >= MARGIN;
        parts.push(format!("{name} {m:.2e}"));
    }
    let mut sphere_worst: f64 = bound_margin(&suite().sphere.trace).abs();
    for n in [4, 5] {
        let trace = integrate(&sphere_solution(n, 0.0).unwrap(), &StepController::default(), None).unwrap();
        sphere_worst = sphere_worst.max(bound_margin(&trace).abs());
    }
    ok &= sphere_worst <= SPHERE_EQUALITY;
    verdict(
        4,
        "scalar lower bound",
        ok,
        format!("margins: {}; sphere family |margin| {sphere_worst:.2e}", parts.join(", ")),
    );
}

#[test]
fn criterion_05_curvature_gap() {
    const GAP: f64 = 0.95;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, o) in suite().runs() {
        let trace = &o.trace;
        let t_est = trace.t_estimate.expect("singular run");
        let count = trace.diagnostics.len();
        let tail = &trace.diagnostics[count - count.div_ceil(5)..];
        let worst = tail.iter().map(|d| 8.0 * (t_est - d.t) * d.max_rm).fold(f64::INFINITY, f64::min);
        ok &= worst >= GAP;
        parts.push(format!("{name} {worst:.4}"));
    }
    verdict(5, "curvature gap", ok, format!("min 8(T-t)max|Rm| over the last 20%: {}", parts.join(", ")));
}

#[test]
fn criterion_06_mu_nonpositive() {
    const MU_MAX: f64 = 1e-6;
    let opts = EntropyOptions::default();
    let slack = 2.0 * opts.tolerance;
    let t_max = SphereSolution::new(3, 1.0).t_singular();
    let mus: Vec<f64> = [0.0, 0.5, 0.9]
        .iter()
        .map(|f| {
            let t = f * t_max;
            minimize_w(&sphere_solution(3, t).unwrap(), t_max - t, &opts).unwrap().record.mu
        })
        .collect();
    let nonpositive = mus.iter().all(|&m| m <= MU_MAX);
    let nondecreasing = mus.windows(2).all(|w| w[1] >= w[0] - slack);
    verdict(
        6,
        "mu nonpositivity and monotonicity",
        nonpositive && nondecreasing,
        format!("mu at t = 0, T/2, 0.9T: {mus:?}"),
    );
}

#[test]
fn criterion_07_w_monotonicity() {
    const DW_FLOOR: f64 = -1e-6;
    const RELATIVE: f64 = 0.05;
    let o = &suite().perturbed_fine;
    let report = o.monotonicity.as_ref().expect("monotonicity computed");
    let min_dw = report.rows.iter().map(|r| r.dw_dt).fold(f64::INFINITY, f64::min);
    let worst =
        report.rows.iter().map(|r| (r.dw_dt - r.rhs).abs() / r.rhs.abs()).fold(0.0, f64::max);
    verdict(
        7,
        "W monotonicity",
        min_dw >= DW_FLOOR && worst <= RELATIVE,
        format!("{} rows, min dW/dt {min_dw:.3e}, max relative difference to the integrand {worst:.3e}", report.rows.len()),
    );
}

#[test]
fn criterion_08_gaussian_shrinker() {
    const IDENTITY_TOL: f64 = 1e-10;
    const SOLITON_TOL: f64 = 1e-9;
    const PATCH_TOL: f64 = 1e-6;
    let identities = [1, 3, 5]
        .iter()
        .map(|&n| {
            let (mass, moment) = gaussian_identities(n, GAUSSIAN_TRUNCATION);
            mass.abs().max(moment.abs())
        })
        .fold(0.0, f64::max);

    let tau = 0.3;
    // Constant f solves the shrinker equation on the round S^n with Ric = g / (2 tau).
    let sphere = MetricState::sphere(3, 4.0 * tau, 0.0).unwrap();
    let sphere_res = soliton_residual(&sphere, &PotentialField::constant(&sphere, tau).unwrap()).unwrap().abs();

    let cyl = CylinderSolution::new(3, 1.0);
    let tau_c = cyl.t_singular();
    let m = cyl.segment_state(0.0, 801, 12.0 * tau_c.sqrt()).unwrap();
    let s = m.profile().unwrap().s.clone();
    let mid = 0.5 * (s[0] + s[s.len() - 1]);
    let f: Vec<f64> = s.iter().map(|x| cyl.potential(tau_c, x - mid)).collect();
    let p = normalize(&PotentialField::from_potential(&f, tau_c), &m).unwrap();
    let cylinder_res = soliton_residual(&m, &p).unwrap().abs();

    let tau_g = 0.5;
    let ball = MetricState::warped(3, Profile::euclidean_ball(3201, 12.0 * f64::sqrt(tau_g)).unwrap(), 0.0).unwrap();
    let r = &ball.profile().unwrap().s;
    let f: Vec<f64> = r.iter().map(|r| r * r / (4.0 * tau_g)).collect();
    let p = normalize(&PotentialField::from_potential(&f, tau_g), &ball).unwrap();
    let patch = eval_w(&ball, &p).unwrap().abs();

    verdict(
        8,
        "Gaussian shrinker facts",
        identities <= IDENTITY_TOL && sphere_res <= SOLITON_TOL && cylinder_res <= SOLITON_TOL && patch <= PATCH_TOL,
        format!(
            "identities {identities:.2e}, sphere soliton {sphere_res:.2e}, cylinder soliton {cylinder_res:.2e}, \
             Euclidean patch W {patch:.2e} (N = 3201)"
        ),
    );
}

#[test]
fn criterion_09_blowup_normalization() {
    const NORMALIZATION: f64 = 0.01;
    const ALPHA_SPREAD: f64 = 1e-6;
    let mut worst_window: f64 = 0.0;
    let mut worst_mark: f64 = 0.0;
    let mut sequences = 0;
    let mut check = |entries: &[ricci_lab::singularity::BlowupEntry]| {
        sequences += 1;
        for e in entries {
            worst_window = worst_window.max(e.window_max_rm);
            worst_mark = worst_mark.max((e.marked_rm - 1.0).abs());
        }
    };
    let s = suite();
    for o in [&s.neckpinch, &s.neckpinch_fine] {
        check(&o.blowup.as_ref().expect("blow-up built").entries);
    }
    let sphere_seq = build_blowup(&s.sphere.trace, &BlowupSchedule::default()).unwrap();
    check(&sphere_seq.entries);
    let a0 = sphere_seq.entries[0].alpha;
    let alpha_spread = sphere_seq.entries.iter().map(|e| (e.alpha - a0).abs()).fold(0.0, f64::max);
    verdict(
        9,
        "blow-up normalization",
        worst_window <= 1.0 + NORMALIZATION && worst_mark <= NORMALIZATION && alpha_spread <= ALPHA_SPREAD,
        format!(
            "{sequences} sequences: max window |Rm| {worst_window:.6}, max |marked |Rm| - 1| {worst_mark:.2e}, \
             sphere alpha spread {alpha_spread:.2e}"
        ),
    );
}

#[test]
fn criterion_10_type_one_neckpinch() {
    const PLATEAU_STABILITY: f64 = 0.05;
    const RESIDUAL_RATIO: f64 = 0.1;
    let s = suite();
    let coarse = s.neckpinch.singularity.as_ref().unwrap();
    let fine = s.neckpinch_fine.singularity.as_ref().unwrap();
    let type_one = coarse.classification == Classification::TypeI && fine.classification == Classification::TypeI;
    let (p1, p2) = (coarse.plateau.unwrap(), fine.plateau.unwrap());
    let stability = (p1 - p2).abs() / p2;
    let ratio = |o: &RunOutcome| {
        let rows = &o.shrinker.as_ref().expect("shrinker diagnostics").rows;
        let first = rows.first().and_then(|r| r.soliton_residual).unwrap();
        let last = rows.last().and_then(|r| r.soliton_residual).unwrap();
        last / first
    };
    let (r1, r2) = (ratio(&s.neckpinch), ratio(&s.neckpinch_fine));
    verdict(
        10,
        "Type I neckpinch",
        type_one && stability <= PLATEAU_STABILITY && r1 <= RESIDUAL_RATIO && r2 <= RESIDUAL_RATIO,
        format!(
            "classes {:?}/{:?}, plateau {p1:.5} (N=101) vs {p2:.5} (N=201), change {stability:.2e}; \
             residual ratio {r1:.3e} / {r2:.3e}",
            coarse.classification, fine.classification
        ),
    );
}

#[test]
fn criterion_11_type_two_signature() {
    const RUNS: usize = 12;
    const SIGNATURE_FACTOR: f64 = 3.0;
    let s = scenario("neckpinch_bisection");
    let outcome = sweep::sweep(&s, &out_dir("bisection"), 1).unwrap();
    let report = outcome.bisection.expect("bisection sweep").unwrap();
    let fraction = (report.hi - report.lo) / report.initial_width;
    let plateau = sphere_rm_plateau(3);
    verdict(
        11,
        "Type II signature search",
        report.runs.len() <= RUNS
            && fraction <= 2f64.powi(-10)
            && report.max_signature >= SIGNATURE_FACTOR * plateau,
        format!(
            "bracket [{:.6}, {:.6}] = {fraction:.3e} of the initial interval after {} runs; \
             max (T-t)max|Rm| {:.4} at lambda {:.6} vs 3 x sphere plateau {:.4} (a signature, not a certificate)",
            report.lo,
            report.hi,
            report.runs.len(),
            report.max_signature,
            report.signature_lambda,
            SIGNATURE_FACTOR * plateau
        ),
    );
}

/// `mu(S^3, tau)` for the unit round 3-sphere by a normalized gradient flow on
/// rotationally symmetric `phi(theta)`: cell-centred finite volumes in the polar
/// angle, a semi-implicit step with the logarithm lagged, then renormalization.
fn sphere_mu_oracle(tau: f64, cells: usize, start: impl Fn(f64) -> f64) -> f64 {
    let pi = std::f64::consts::PI;
    let n = 3.0;
    let r = 6.0;
    let h = pi / cells as f64;
    let shell = 4.0 * pi;
    let content = |a: f64| 0.5 * (a - a.sin() * a.cos());
    let vol: Vec<f64> = (0..cells).map(|j| content((j + 1) as f64 * h) - content(j as f64 * h)).collect();
    // Face j sits between cells j - 1 and j; the pole faces carry no flux.
    let face: Vec<f64> = (0..=cells).map(|j| (j as f64 * h).sin().powi(2) / h).collect();
    let mass_target = (4.0 * pi * tau).powf(n / 2.0);

    let renormalize = |phi: &mut Vec<f64>| {
        let mass: f64 = shell * phi.iter().zip(&vol).map(|(p, v)| p * p * v).sum::<f64>();
        let k = (mass_target / mass).sqrt();
        phi.iter_mut().for_each(|p| *p *= k);
    };
    let energy = |phi: &[f64]| {
        let grad: f64 = (1..cells).map(|j| face[j] * (phi[j] - phi[j - 1]).powi(2)).sum();
        let bulk: f64 = phi
            .iter()
            .zip(&vol)
            .map(|(&p, v)| v * (tau * r * p * p - if p > 0.0 { p * p * (p * p).ln() } else { 0.0 }))
            .sum();
        shell * (4.0 * tau * grad + bulk)
    };

    let mut phi: Vec<f64> = (0..cells).map(|j| start((j as f64 + 0.5) * h)).collect();
    renormalize(&mut phi);
    let dt = 0.05;
    let mut previous = f64::INFINITY;
    for _ in 0..200_000 {
        // (V + dt (4 tau K + V c)) phi_new = V phi, c = tau R - ln phi^2 - 1 + shift
        let pot: Vec<f64> = phi.iter().map(|&p| tau * r - (p * p).max(1e-300).ln() - 1.0).collect();
        let shift = 1.0 - pot.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let mut lower = vec![0.0; cells];
        let mut diag = vec![0.0; cells];
        let mut upper = vec![0.0; cells];
        let mut rhs = vec![0.0; cells];
        for j in 0..cells {
            let (wl, wr) = (face[j], face[j + 1]);
            let k = 4.0 * tau * dt;
            diag[j] = vol[j] * (1.0 + dt * (pot[j] + shift)) + k * (wl + wr);
            if j > 0 {
                lower[j] = -k * wl;
            }
            if j + 1 < cells {
                upper[j] = -k * wr;
            }
            rhs[j] = vol[j] * phi[j];
        }
        // Thomas algorithm.
        for j in 1..cells {
            let m = lower[j] / diag[j - 1];
            diag[j] -= m * upper[j - 1];
            rhs[j] -= m * rhs[j - 1];
        }
        phi[cells - 1] = rhs[cells - 1] / diag[cells - 1];
        for j in (0..cells - 1).rev() {
            phi[j] = (rhs[j] - upper[j] * phi[j + 1]) / diag[j];
        }
        renormalize(&mut phi);
        let e = energy(&phi);
        if (previous - e).abs() <= 1e-15 * e.abs().max(1.0) {
            break;
        }
        previous = e;
    }
    energy(&phi) / mass_target - n
}

#[test]
fn criterion_12_minimizer_oracle() {
    const MU_TOL: f64 = 1e-4;
    const EL_TOL: f64 = 1e-7;
    const CONSTRAINT_TOL: f64 = 1e-10;
    let tau = 0.05;
    let opts = EntropyOptions::default();
    let unit = MetricState::sphere(3, 1.0, 0.0).unwrap();
    let record = minimize_w(&unit, tau, &opts).unwrap().record;
    let cells = 2 * (opts.sphere_nodes - 1);
    let bump = sphere_mu_oracle(tau, cells, |theta| (-theta * theta / (8.0 * tau)).exp());
    let constant = sphere_mu_oracle(tau, cells, |_| 1.0);
    let oracle = bump.min(constant);
    let diff = (record.mu - oracle).abs();
    verdict(
        12,
        "minimizer solver oracle",
        diff <= MU_TOL
            && record.euler_lagrange_residual <= EL_TOL
            && record.constraint_residual <= CONSTRAINT_TOL,
        format!(
            "mu {:.8} vs oracle {oracle:.8} ({cells} cells; bump {bump:.8}, constant {constant:.8}), |diff| {diff:.2e}; \
             EL residual {:.2e}; constraint residual {:.2e}",
            record.mu, record.euler_lagrange_residual, record.constraint_residual
        ),
    );
}

#[test]
fn criterion_13_determinism() {
    let bin = env!("CARGO_BIN_EXE_ricci-lab");
    let mut differing = Vec::new();
    let mut compared = 0;
    for name in ["sphere", "neckpinch", "perturbed_sphere"] {
        let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|tag| out_dir(&format!("determinism-{name}-{tag}"))).collect();
        for (dir, threads) in dirs.iter().zip(["1", "2"]) {
            let status = Process::new(bin)
                .args(["simulate", scenario_path(name).to_str().unwrap(), "--out", dir.to_str().unwrap()])
                .env("RAYON_NUM_THREADS", threads)
                .output()
                .unwrap();
            assert!(status.status.success(), "{name}: {}", String::from_utf8_lossy(&status.stderr));
        }
        let run_dir = |root: &Path| {
            let base = std::fs::read_dir(root).unwrap().next().unwrap().unwrap().path();
            std::fs::read_dir(base).unwrap().next().unwrap().unwrap().path()
        };
        let (a, b) = (run_dir(&dirs[0]), run_dir(&dirs[1]));
        for file in ["trace.tsv", "entropy.tsv"] {
            let (x, y) = (a.join(file), b.join(file));
            if !x.exists() {
                continue;
            }
            compared += 1;
            if std::fs::read(&x).unwrap() != std::fs::read(&y).unwrap() {
                differing.push(format!("{name}/{file}"));
            }
        }
    }
    verdict(
        13,
        "determinism",
        differing.is_empty() && compared >= 3,
        format!("{compared} files compared across 1- and 2-thread runs, differing: {differing:?}"),
    );
}
