//! Scenario files: one TOML document describes the initial geometry, the
//! integrator, the entropy solver, the analyses to run and the checks that
//! `--assert` turns into exit codes.

use std::fmt;

use ricci_lab::entropy::{EntropyOptions, Start};
use ricci_lab::flow::{RegridPolicy, StepController};
use ricci_lab::geometry::{MetricState, Profile, MIN_NODES};
use ricci_lab::singularity::{BisectionOptions, BlowupSchedule, Classification, ClassifyOptions, Locus};
use serde::{Deserialize, Serialize};

/// Every default a scenario can omit. Numerical knobs of the regridder and the
/// entropy solver default to the library values.
pub mod defaults {
    use std::f64::consts::PI;

    /// Manifold dimension.
    pub const DIMENSION: usize = 3;
    /// Nodes of the radial grid.
    pub const GRID_NODES: usize = 401;
    /// `eps` in `dt = eps * min(1/max|Rm|, h_min^2/4)`.
    pub const SAFETY: f64 = 0.2;
    /// The run stops once `max|Rm|` reaches this.
    pub const RM_CEILING: f64 = 1e6;
    /// The run stops once the admissible step falls below this.
    pub const DT_FLOOR: f64 = 1e-12;
    /// A state is stored whenever `max|Rm|` has grown by this factor.
    pub const STORE_GROWTH: f64 = 1.05;
    pub const MAX_STEPS: usize = 20_000_000;
    /// Rescaled-time window `[r_min, 0]` of the blow-up sequence.
    pub const R_WINDOW: [f64; 2] = [-1.0, 0.0];
    pub const BLOWUP_COUNT: usize = 6;
    pub const BLOWUP_DECADES: f64 = 2.5;
    pub const BLOWUP_MARGIN: f64 = 0.5;
    /// Flags runs with `max|R|` above this as scalar-unbounded.
    pub const SCALAR_BOUND: f64 = 1e3;

    /// Round sphere scale `c0` in `g = c0 g_round`.
    pub const SPHERE_SCALE: f64 = 1.0;
    pub const RADIUS: f64 = 1.0;
    pub const DUMBBELL_DEPTH: f64 = 0.9;
    pub const DUMBBELL_WIDTH: f64 = 0.3;
    pub const DUMBBELL_CENTER: f64 = PI / 2.0;
    pub const PERTURBATION: f64 = 0.05;

    /// Stored states sampled for the entropy table.
    pub const ENTROPY_SAMPLES: usize = 5;
    /// Samples are taken for `t <= ENTROPY_UNTIL * T_estimate`.
    pub const ENTROPY_UNTIL: f64 = 0.9;
    /// `tau` used when the tau policy is `fixed`.
    pub const FIXED_TAU: f64 = 0.05;
    /// Monotonicity window as fractions of `T_estimate`.
    pub const MONOTONICITY_WINDOW: [f64; 2] = [0.5, 0.9];

    pub const BISECTION_BUDGET: usize = 12;
    /// Bisection stops once the bracket is `2^-10` of its initial width.
    pub const BISECTION_TARGET: f64 = 1.0 / 1024.0;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Used as the output directory name.
    pub name: String,
    /// Recorded in the manifest; the multistart set is deterministic.
    #[serde(default)]
    pub seed: u64,
    /// Output root; `--out` overrides it.
    #[serde(default = "default_output")]
    pub output: String,
    pub geometry: Geometry,
    #[serde(default)]
    pub flow: FlowSettings,
    #[serde(default)]
    pub entropy: EntropySettings,
    #[serde(default)]
    pub analysis: Analysis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub assert: Assertions,
}

fn default_output() -> String {
    "out".into()
}

fn d_n() -> usize {
    defaults::DIMENSION
}
fn d_nodes() -> usize {
    defaults::GRID_NODES
}
fn d_scale() -> f64 {
    defaults::SPHERE_SCALE
}
fn d_radius() -> f64 {
    defaults::RADIUS
}
fn d_depth() -> f64 {
    defaults::DUMBBELL_DEPTH
}
fn d_width() -> f64 {
    defaults::DUMBBELL_WIDTH
}
fn d_center() -> f64 {
    defaults::DUMBBELL_CENTER
}
fn d_eps() -> f64 {
    defaults::PERTURBATION
}

/// Initial metric families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// `c0 g_round`, advanced by its exact scale law.
    Sphere {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_scale")]
        scale: f64,
    },
    /// Round sphere of the given radius sampled on a warped grid.
    Round {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_nodes")]
        nodes: usize,
        #[serde(default = "d_radius")]
        radius: f64,
    },
    /// `psi = sin s (1 - depth exp(-((s - center)/width)^2))` on `[0, pi]`.
    Dumbbell {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_nodes")]
        nodes: usize,
        #[serde(default = "d_depth")]
        depth: f64,
        #[serde(default = "d_width")]
        width: f64,
        #[serde(default = "d_center")]
        center: f64,
    },
    /// `psi = sin s (1 + eps cos 2s) / (1 + eps)` on `[0, pi]`.
    PerturbedSphere {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_nodes")]
        nodes: usize,
        #[serde(default = "d_eps")]
        eps: f64,
    },
    /// Flat ball `psi = s` on `[0, radius]`.
    EuclideanBall {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_nodes")]
        nodes: usize,
        #[serde(default = "d_radius")]
        radius: f64,
    },
}

impl Geometry {
    pub fn dimension(&self) -> usize {
        match *self {
            Geometry::Sphere { n, .. }
            | Geometry::Round { n, .. }
            | Geometry::Dumbbell { n, .. }
            | Geometry::PerturbedSphere { n, .. }
            | Geometry::EuclideanBall { n, .. } => n,
        }
    }

    pub fn nodes(&self) -> Option<usize> {
        match *self {
            Geometry::Sphere { .. } => None,
            Geometry::Round { nodes, .. }
            | Geometry::Dumbbell { nodes, .. }
            | Geometry::PerturbedSphere { nodes, .. }
            | Geometry::EuclideanBall { nodes, .. } => Some(nodes),
        }
    }

    /// `k`-fold refinement of the grid: `nodes -> (nodes - 1) k + 1`.
    pub fn refined(&self, k: usize) -> Geometry {
        let mut g = self.clone();
        match &mut g {
            Geometry::Sphere { .. } => {}
            Geometry::Round { nodes, .. }
            | Geometry::Dumbbell { nodes, .. }
            | Geometry::PerturbedSphere { nodes, .. }
            | Geometry::EuclideanBall { nodes, .. } => *nodes = (*nodes - 1) * k + 1,
        }
        g
    }

    pub fn initial_state(&self) -> ricci_lab::Result<MetricState> {
        match *self {
            Geometry::Sphere { n, scale } => MetricState::sphere(n, scale, 0.0),
            Geometry::Round { n, nodes, radius } => MetricState::warped(n, Profile::round(nodes, radius)?, 0.0),
            Geometry::Dumbbell { n, nodes, depth, width, center } => {
                MetricState::warped(n, Profile::dumbbell(nodes, depth, width, center)?, 0.0)
            }
            Geometry::PerturbedSphere { n, nodes, eps } => {
                MetricState::warped(n, Profile::perturbed_sphere(nodes, eps)?, 0.0)
            }
            Geometry::EuclideanBall { n, nodes, radius } => {
                MetricState::warped(n, Profile::euclidean_ball(nodes, radius)?, 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub safety: f64,
    pub rm_ceiling: f64,
    pub dt_floor: f64,
    pub store_growth: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store_interval: Option<f64>,
    pub checkpoints: Vec<f64>,
    /// Exponents `alpha` of the recorded `int |R|^alpha dvol`.
    pub lp_exponents: Vec<f64>,
    /// Stop at this time if no singularity comes first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    pub max_steps: usize,
    pub regrid: RegridPolicy,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            safety: defaults::SAFETY,
            rm_ceiling: defaults::RM_CEILING,
            dt_floor: defaults::DT_FLOOR,
            store_growth: defaults::STORE_GROWTH,
            store_interval: None,
            checkpoints: Vec::new(),
            lp_exponents: Vec::new(),
            t_end: None,
            max_steps: defaults::MAX_STEPS,
            regrid: RegridPolicy::default(),
        }
    }
}

impl FlowSettings {
    pub fn controller(&self) -> StepController {
        StepController {
            safety: self.safety,
            rm_ceiling: self.rm_ceiling,
            dt_floor: self.dt_floor,
            store_growth: self.store_growth,
            store_interval: self.store_interval,
            checkpoints: self.checkpoints.clone(),
            lp_exponents: self.lp_exponents.clone(),
            regrid: self.regrid.clone(),
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    /// `tau = T_estimate - t`.
    Remaining,
    /// The constant `entropy.tau`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySettings {
    pub tau_policy: TauPolicy,
    /// Used by the `fixed` policy.
    pub tau: f64,
    /// Stored states sampled, evenly by index.
    pub samples: usize,
    /// Fraction of `T_estimate` after which no samples are taken (`remaining` policy).
    pub until: f64,
    /// Also minimize at `tau +- dT` to band `mu` by the `T_estimate` error.
    pub bands: bool,
    pub solver: EntropyOptions,
}

impl Default for EntropySettings {
    fn default() -> Self {
        EntropySettings {
            tau_policy: TauPolicy::Remaining,
            tau: defaults::FIXED_TAU,
            samples: defaults::ENTROPY_SAMPLES,
            until: defaults::ENTROPY_UNTIL,
            bands: false,
            solver: EntropyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analysis {
    pub classify: bool,
    pub entropy: bool,
    /// Coupled backward potential and `dW/dt` over `monotonicity_window`.
    pub monotonicity: bool,
    /// Start and end of the window as fractions of `T_estimate`.
    pub monotonicity_window: [f64; 2],
    pub blowup: bool,
    /// Entropy diagnostics of the blow-up sequence; needs `blowup`.
    pub shrinker: bool,
    pub schedule: BlowupSchedule,
    pub shrinker_starts: Vec<Start>,
    pub scalar_bound: f64,
}

impl Default for Analysis {
    fn default() -> Self {
        Analysis {
            classify: true,
            entropy: false,
            monotonicity: false,
            monotonicity_window: defaults::MONOTONICITY_WINDOW,
            blowup: false,
            shrinker: false,
            schedule: BlowupSchedule {
                count: defaults::BLOWUP_COUNT,
                decades: defaults::BLOWUP_DECADES,
                margin: defaults::BLOWUP_MARGIN,
                r_min: defaults::R_WINDOW[0],
                indices: None,
            },
            shrinker_starts: EntropyOptions::localized().starts,
            scalar_bound: defaults::SCALAR_BOUND,
        }
    }
}

impl Analysis {
    pub fn classify_options(&self) -> ClassifyOptions {
        ClassifyOptions { scalar_bound: self.scalar_bound }
    }
}

fn d_budget() -> usize {
    defaults::BISECTION_BUDGET
}
fn d_target() -> f64 {
    defaults::BISECTION_TARGET
}

/// A one-parameter family: either a grid of values or a bisection bracket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    /// Dotted key of a numeric scenario value, e.g. `geometry.depth`. An array
    /// key such as `flow.lp_exponents` is replaced by the one-element array.
    pub parameter: String,
    #[serde(default)]
    pub values: Vec<f64>,
    /// Bracket `[lo, hi]` for bisection on the collapse locus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bisect: Option<[f64; 2]>,
    #[serde(default = "d_budget")]
    pub budget: usize,
    #[serde(default = "d_target")]
    pub target_fraction: f64,
}

impl SweepSettings {
    pub fn bisection_options(&self, scenario: &Scenario) -> BisectionOptions {
        BisectionOptions {
            budget: self.budget,
            target_fraction: self.target_fraction,
            controller: scenario.flow.controller(),
            classify: scenario.analysis.classify_options(),
        }
    }
}

/// Checks evaluated after every run; they only affect the exit code under `--assert`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assertions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locus: Option<Locus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_estimate: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau: Option<[f64; 2]>,
    /// Lower bound on the scalar-bound margin over all stored times.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_bound_margin: Option<f64>,
    /// Lower bound on the curvature-gap margin over the final 20% of stored times.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_gap_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_mu: Option<f64>,
    /// `mu` may decrease along the samples by at most this much.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_nondecreasing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_soliton_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blowup_normalized: Option<bool>,
    /// Largest-index over smallest-index soliton residual of the blow-up sequence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_shrinker_residual_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_dw_dt: Option<f64>,
    /// Relative mismatch between `dW/dt` and the monotonicity integrand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_monotonicity_difference: Option<f64>,
}

/// A scenario problem anchored to a line of its source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: {}", self.origin, self.line, self.column, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// A failed check, located by the dotted key it concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invalid {
    pub path: String,
    pub message: String,
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> Invalid {
    Invalid { path: path.into(), message: message.into() }
}

/// 1-based line and column of byte `offset`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text.as_bytes()[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let start = before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let column = String::from_utf8_lossy(&before[start..]).chars().count() + 1;
    (line, column)
}

/// Byte offset of the deepest key of `path` present in `text`.
fn locate(text: &str, path: &str) -> usize {
    let Ok(root) = toml::de::DeTable::parse(text) else {
        return 0;
    };
    let mut table = root.get_ref();
    let mut offset = 0;
    for key in path.split('.') {
        let Some((k, v)) = table.iter().find(|(k, _)| k.get_ref().as_ref() == key) else {
            break;
        };
        offset = k.span().start;
        match v.get_ref() {
            toml::de::DeValue::Table(t) => table = t,
            _ => break,
        }
    }
    offset
}

/// Byte offset of the first key named `name`, searching tables depth-first.
fn find_key(text: &str, name: &str) -> Option<usize> {
    fn search(table: &toml::de::DeTable<'_>, name: &str) -> Option<usize> {
        for (k, v) in table.iter() {
            if k.get_ref().as_ref() == name {
                return Some(k.span().start);
            }
            if let toml::de::DeValue::Table(t) = v.get_ref() {
                if let Some(offset) = search(t, name) {
                    return Some(offset);
                }
            }
        }
        None
    }
    search(toml::de::DeTable::parse(text).ok()?.get_ref(), name)
}

/// The `[geometry]` key whose value fails to deserialize on its own. The tagged
/// geometry enum loses key names and spans in its errors, so each key is tried
/// alone next to `family`.
fn failing_geometry_key(text: &str) -> Option<String> {
    let root: toml::Table = toml::from_str(text).ok()?;
    let geometry = root.get("geometry")?.as_table()?;
    let family = geometry.get("family")?;
    let mut bare = toml::Table::new();
    bare.insert("family".into(), family.clone());
    toml::Value::Table(bare).try_into::<Geometry>().ok()?;
    geometry.iter().filter(|(k, _)| k.as_str() != "family").find_map(|(k, v)| {
        let mut alone = toml::Table::new();
        alone.insert("family".into(), family.clone());
        alone.insert(k.clone(), v.clone());
        toml::Value::Table(alone).try_into::<Geometry>().is_err().then(|| k.clone())
    })
}

impl Scenario {
    /// Parses and validates a scenario document. `origin` names the source in diagnostics.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Scenario, ConfigError> {
        let anchored = |offset: usize, message: String| {
            let (line, column) = line_col(text, offset);
            ConfigError { origin: origin.to_string(), line, column, message }
        };
        if text.trim().is_empty() {
            return Err(anchored(0, "empty scenario: expected at least `name` and a [geometry] table".into()));
        }
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let message = e.message().trim_end().to_string();
            let unknown = message
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split_once('`'))
                .and_then(|(key, _)| find_key(text, key));
            if unknown.is_none() {
                if let Some(key) = failing_geometry_key(text) {
                    let path = format!("geometry.{key}");
                    return anchored(locate(text, &path), format!("{path}: {message}"));
                }
            }
            let offset = unknown.or_else(|| e.span().map(|s| s.start)).unwrap_or(0);
            anchored(offset, message)
        })?;
        scenario.validate().map_err(|e| anchored(locate(text, &e.path), format!("{}: {}", e.path, e.message)))?;
        Ok(scenario)
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { origin: origin.clone(), line: 1, column: 1, message: e.to_string() })?;
        Self::from_toml_str(&text, &origin)
    }

    /// The scenario with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario values are representable in TOML")
    }

    pub fn validate(&self) -> Result<(), Invalid> {
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.name.starts_with('.')
        {
            return Err(invalid("name", "must be non-empty ASCII letters, digits, '-', '_' or '.', not starting with '.'"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit integer"));
        }
        if self.output.is_empty() {
            return Err(invalid("output", "must be a non-empty path"));
        }
        self.validate_geometry()?;
        self.validate_flow()?;
        self.validate_entropy()?;
        self.validate_analysis()?;
        self.validate_sweep()?;
        Ok(())
    }

    fn validate_geometry(&self) -> Result<(), Invalid> {
        let n = self.geometry.dimension();
        if !(3..=64).contains(&n) {
            return Err(invalid("geometry.n", format!("dimension {n} outside 3..=64")));
        }
        if let Some(nodes) = self.geometry.nodes() {
            if nodes < MIN_NODES {
                return Err(invalid("geometry.nodes", format!("need at least {MIN_NODES} nodes, got {nodes}")));
            }
        }
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("geometry.{key}"), format!("must be positive and finite, got {v}")))
            }
        };
        match self.geometry {
            Geometry::Sphere { scale, .. } => positive("scale", scale)?,
            Geometry::Round { radius, .. } | Geometry::EuclideanBall { radius, .. } => positive("radius", radius)?,
            Geometry::Dumbbell { depth, width, center, .. } => {
                if !(0.0..1.0).contains(&depth) {
                    return Err(invalid("geometry.depth", format!("must lie in [0, 1), got {depth}")));
                }
                positive("width", width)?;
                if !(center > 0.0 && center < std::f64::consts::PI) {
                    return Err(invalid("geometry.center", format!("must lie in (0, pi), got {center}")));
                }
            }
            Geometry::PerturbedSphere { eps, .. } => {
                if eps.is_nan() || eps.abs() >= 1.0 {
                    return Err(invalid("geometry.eps", format!("must satisfy |eps| < 1, got {eps}")));
                }
            }
        }
        self.geometry.initial_state().map_err(|e| invalid("geometry", e.to_string()))?;
        Ok(())
    }

    fn validate_flow(&self) -> Result<(), Invalid> {
        let f = &self.flow;
        if !(f.safety > 0.0 && f.safety <= 1.0) {
            return Err(invalid("flow.safety", format!("must lie in (0, 1], got {}", f.safety)));
        }
        for (key, v) in [("rm_ceiling", f.rm_ceiling), ("dt_floor", f.dt_floor)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("flow.{key}"), format!("must be positive and finite, got {v}")));
            }
        }
        if !(f.store_growth.is_finite() && f.store_growth > 1.0) {
            return Err(invalid("flow.store_growth", format!("must exceed 1, got {}", f.store_growth)));
        }
        for (key, v) in [("store_interval", f.store_interval), ("t_end", f.t_end)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(invalid(format!("flow.{key}"), format!("must be positive and finite, got {v}")));
                }
            }
        }
        if f.checkpoints.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(invalid("flow.checkpoints", "checkpoints must be finite and non-negative"));
        }
        if f.lp_exponents.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(invalid("flow.lp_exponents", "exponents must be positive and finite"));
        }
        if f.max_steps == 0 {
            return Err(invalid("flow.max_steps", "must be at least 1"));
        }
        let r = &f.regrid;
        for (key, v) in [("curvature_weight", r.curvature_weight), ("gradation", r.gradation)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("flow.regrid.{key}"), format!("must be positive and finite, got {v}")));
            }
        }
        if !(r.trigger.is_finite() && r.trigger > 1.0) {
            return Err(invalid("flow.regrid.trigger", format!("must exceed 1, got {}", r.trigger)));
        }
        Ok(())
    }

    fn validate_entropy(&self) -> Result<(), Invalid> {
        let e = &self.entropy;
        if !(e.tau.is_finite() && e.tau > 0.0) {
            return Err(invalid("entropy.tau", format!("must be positive and finite, got {}", e.tau)));
        }
        if !(e.until > 0.0 && e.until < 1.0) {
            return Err(invalid("entropy.until", format!("must lie in (0, 1), got {}", e.until)));
        }
        validate_solver(&e.solver, "entropy.solver")?;
        Ok(())
    }

    fn validate_analysis(&self) -> Result<(), Invalid> {
        let a = &self.analysis;
        let [lo, hi] = a.monotonicity_window;
        if !(0.0 <= lo && lo < hi && hi < 1.0) {
            return Err(invalid("analysis.monotonicity_window", "need 0 <= start < end < 1"));
        }
        if a.shrinker && !a.blowup {
            return Err(invalid("analysis.shrinker", "needs analysis.blowup = true"));
        }
        let s = &a.schedule;
        if s.indices.is_none() && s.count < 3 {
            return Err(invalid("analysis.schedule.count", "need at least 3 blow-up indices"));
        }
        if let Some(indices) = &s.indices {
            if indices.len() < 3 {
                return Err(invalid("analysis.schedule.indices", "need at least 3 blow-up indices"));
            }
        }
        if !(s.decades.is_finite() && s.decades > 0.0) {
            return Err(invalid("analysis.schedule.decades", "must be positive and finite"));
        }
        if !(s.margin.is_finite() && s.margin >= 0.0) {
            return Err(invalid("analysis.schedule.margin", "must be non-negative and finite"));
        }
        if !(s.r_min.is_finite() && s.r_min < 0.0) {
            return Err(invalid("analysis.schedule.r_min", "must be negative and finite"));
        }
        validate_starts(&a.shrinker_starts, "analysis.shrinker_starts")?;
        if !(a.scalar_bound.is_finite() && a.scalar_bound > 0.0) {
            return Err(invalid("analysis.scalar_bound", "must be positive and finite"));
        }
        Ok(())
    }

    fn validate_sweep(&self) -> Result<(), Invalid> {
        let Some(sweep) = &self.sweep else {
            return Ok(());
        };
        match (&sweep.bisect, sweep.values.is_empty()) {
            (None, true) => return Err(invalid("sweep", "give either `values` or `bisect`")),
            (Some(_), false) => return Err(invalid("sweep", "`values` and `bisect` are mutually exclusive")),
            _ => {}
        }
        if let Some([lo, hi]) = sweep.bisect {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid("sweep.bisect", "need finite lo < hi"));
            }
            if sweep.budget < 2 {
                return Err(invalid("sweep.budget", "must cover both endpoints (>= 2)"));
            }
            if !(sweep.target_fraction > 0.0 && sweep.target_fraction < 1.0) {
                return Err(invalid("sweep.target_fraction", "must lie in (0, 1)"));
            }
            for v in [lo, hi] {
                self.with_parameter(&sweep.parameter, v).map_err(|e| invalid("sweep.bisect", e))?;
            }
        }
        for &v in &sweep.values {
            self.with_parameter(&sweep.parameter, v).map_err(|e| invalid("sweep.values", e))?;
        }
        Ok(())
    }

    /// The scenario with the numeric key `path` set to `value`, without its sweep table.
    pub fn with_parameter(&self, path: &str, value: f64) -> Result<Scenario, String> {
        if !value.is_finite() {
            return Err(format!("parameter value {value} is not finite"));
        }
        let mut base = self.clone();
        base.sweep = None;
        let mut root = toml::Value::try_from(&base).map_err(|e| e.to_string())?;
        let keys: Vec<&str> = path.split('.').collect();
        let (leaf, parents) = keys.split_last().ok_or("empty parameter path")?;
        let mut node = &mut root;
        for key in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*key))
                .ok_or_else(|| format!("unknown parameter `{path}`"))?;
        }
        let slot = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*leaf))
            .ok_or_else(|| format!("unknown parameter `{path}`"))?;
        *slot = match slot {
            toml::Value::Float(_) => toml::Value::Float(value),
            toml::Value::Integer(_) => {
                if value.fract() != 0.0 || value.abs() > 2f64.powi(53) {
                    return Err(format!("`{path}` takes integers, got {value}"));
                }
                toml::Value::Integer(value as i64)
            }
            toml::Value::Array(_) => toml::Value::Array(vec![toml::Value::Float(value)]),
            _ => return Err(format!("`{path}` is not numeric")),
        };
        let scenario: Scenario = root.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        scenario.validate().map_err(|e| format!("{} = {value}: {}: {}", path, e.path, e.message))?;
        Ok(scenario)
    }
}

fn validate_starts(starts: &[Start], path: &str) -> Result<(), Invalid> {
    if starts.is_empty() {
        return Err(invalid(path, "need at least one start"));
    }
    for s in starts {
        if let Start::Bump(x) = s {
            if !(0.0..=1.0).contains(x) {
                return Err(invalid(path, format!("bump position {x} outside [0, 1]")));
            }
        }
    }
    Ok(())
}

fn validate_solver(o: &EntropyOptions, path: &str) -> Result<(), Invalid> {
    for (key, v) in [("tolerance", o.tolerance), ("constraint_tolerance", o.constraint_tolerance)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!("{path}.{key}"), format!("must be positive and finite, got {v}")));
        }
    }
    if o.max_iterations == 0 {
        return Err(invalid(format!("{path}.max_iterations"), "must be at least 1"));
    }
    if o.sphere_nodes < MIN_NODES {
        return Err(invalid(format!("{path}.sphere_nodes"), format!("need at least {MIN_NODES}")));
    }
    validate_starts(&o.starts, &format!("{path}.starts"))
}
