//! Declarative scenarios: TOML configuration, execution of the requested
//! checks and the two output artifacts (JSON summary, CSV of traces).
//!
//! A scenario file has the tables `[problem]` (with `[problem.params]` and
//! `[problem.control_set]`), `[numerics]`, `[candidate]`, `[output]` and an
//! array `[[checks]]`; see the README for the full key list. Loading collects
//! every problem it finds instead of stopping at the first one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    check_relaxed_transposition_identity, check_transposition_identity, solve_first_adjoint, solve_second_adjoint,
    FirstAdjoint, IdentityStats, SecondAdjoint,
};
use crate::cones::ControlSet;
use crate::conditions::{
    critical_cone_residual, first_order_integral, first_order_pointwise, maximum_principle_gap, pointwise_second_gap,
    random_tangent_direction, second_order_integral, steepest_direction, ConditionReport, FieldStats, Verdict,
    TOL_MEASURE,
};
use crate::forward::{
    expansion_residuals, halving_check, simulate, AdaptedField, BilinearFamily, CoefficientFamily, ControlPolicy,
    FeedbackLaw, LqFamily, LqParams, NoiseEnsemble, ProblemSpec, ProjectedFeedback, Trajectory,
};
use crate::hilbert::TruncatedSpace;
use crate::oracles::{discrete_riccati, riccati_solve, LqData};
use crate::regression::RegressionConfig;
use crate::Error;

pub const FAMILIES: [&str; 2] = ["lq", "bilinear"];
pub const DEFAULT_STEPS: usize = 64;
pub const DEFAULT_PATHS: usize = 4096;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_DIRECTIONS: usize = 5;
pub const DEFAULT_TRIALS: usize = 32;
pub const DEFAULT_RATIO: f64 = 0.7;
/// Identity checks pass iff the largest normalized residual is below this.
pub const TOL_IDENTITY: f64 = 5e-2;
/// RK4 substeps per grid step for continuous Riccati feedback.
const RICCATI_SUBSTEPS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{module}: {source}")]
    Execution { module: &'static str, source: Error },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

fn in_module(module: &'static str) -> impl Fn(Error) -> ScenarioError {
    move |source| ScenarioError::Execution { module, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    FirstOrderIntegral,
    FirstOrderPointwise,
    MaximumPrinciple,
    PointwiseSecondOrder,
    CriticalCone,
    SecondOrderIntegral,
    Transposition,
    RelaxedTransposition,
    Expansion,
}

impl CheckKind {
    pub const ALL: [CheckKind; 9] = [
        CheckKind::FirstOrderIntegral,
        CheckKind::FirstOrderPointwise,
        CheckKind::MaximumPrinciple,
        CheckKind::PointwiseSecondOrder,
        CheckKind::CriticalCone,
        CheckKind::SecondOrderIntegral,
        CheckKind::Transposition,
        CheckKind::RelaxedTransposition,
        CheckKind::Expansion,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            CheckKind::FirstOrderIntegral => "first_order_integral",
            CheckKind::FirstOrderPointwise => "first_order_pointwise",
            CheckKind::MaximumPrinciple => "maximum_principle",
            CheckKind::PointwiseSecondOrder => "pointwise_second_order",
            CheckKind::CriticalCone => "critical_cone",
            CheckKind::SecondOrderIntegral => "second_order_integral",
            CheckKind::Transposition => "transposition",
            CheckKind::RelaxedTransposition => "relaxed_transposition",
            CheckKind::Expansion => "expansion",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.id() == id)
    }

    fn needs_second_adjoint(&self) -> bool {
        matches!(
            self,
            CheckKind::PointwiseSecondOrder | CheckKind::SecondOrderIntegral | CheckKind::RelaxedTransposition
        )
    }

    fn uses_directions(&self) -> bool {
        matches!(
            self,
            CheckKind::FirstOrderIntegral | CheckKind::CriticalCone | CheckKind::SecondOrderIntegral | CheckKind::Expansion
        )
    }

    fn is_integral(&self) -> bool {
        matches!(self, CheckKind::FirstOrderIntegral | CheckKind::SecondOrderIntegral)
    }

    fn is_identity(&self) -> bool {
        matches!(self, CheckKind::Transposition | CheckKind::RelaxedTransposition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    Random,
    /// `Proj_T(+𝕳_u)`.
    SteepestAscent,
    /// `Proj_T(−𝕳_u)`.
    SteepestDescent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSpec {
    pub kind: CheckKind,
    pub tol: Option<f64>,
    pub directions: usize,
    pub mode: DirectionMode,
    pub trials: usize,
    /// Seed of the random directions or identity data; derived from the master
    /// seed when absent.
    pub seed: Option<u64>,
    pub eps: Vec<f64>,
    pub ratio: f64,
}

impl CheckSpec {
    pub fn new(kind: CheckKind) -> Self {
        Self {
            kind,
            tol: None,
            directions: DEFAULT_DIRECTIONS,
            mode: DirectionMode::Random,
            trials: DEFAULT_TRIALS,
            seed: None,
            eps: default_ladder(),
            ratio: DEFAULT_RATIO,
        }
    }
}

fn default_ladder() -> Vec<f64> {
    (3..=8).map(|k| 2f64.powi(-k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackExpr {
    /// `u ≡ Proj_U(0)`.
    Zero,
    /// Continuous Riccati feedback sampled on the grid.
    RiccatiContinuous,
    /// Exact optimum of the discretized LQ problem.
    RiccatiDiscrete,
}

impl FeedbackExpr {
    const IDS: [&'static str; 3] = ["zero", "riccati-continuous", "riccati-discrete"];

    fn from_id(id: &str) -> Option<Self> {
        match id {
            "zero" => Some(FeedbackExpr::Zero),
            "riccati-continuous" => Some(FeedbackExpr::RiccatiContinuous),
            "riccati-discrete" => Some(FeedbackExpr::RiccatiDiscrete),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateControl {
    /// Discrete Riccati feedback, projected onto `U`.
    OracleRiccati,
    /// One row per step, or a single row held constant.
    OpenLoop(Vec<DVector<f64>>),
    Feedback(FeedbackExpr),
    /// `Proj_U(base + offset)`.
    Perturbation {
        base: Box<CandidateControl>,
        offset: DVector<f64>,
    },
}

impl CandidateControl {
    fn needs_lq(&self) -> bool {
        match self {
            CandidateControl::OracleRiccati => true,
            CandidateControl::Feedback(e) => *e != FeedbackExpr::Zero,
            CandidateControl::OpenLoop(_) => false,
            CandidateControl::Perturbation { base, .. } => base.needs_lq(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Numerics {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub regression: RegressionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub summary: PathBuf,
    pub csv: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub family: String,
    pub problem: ProblemSpec,
    /// LQ data for the Riccati candidates; `None` for other families.
    pub lq: Option<LqData>,
    pub numerics: Numerics,
    pub candidate: CandidateControl,
    pub checks: Vec<CheckSpec>,
    pub output: OutputSpec,
}

/// Command-line values that replace the configured numerics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

impl ScenarioConfig {
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<(), ScenarioError> {
        let mut errors = Vec::new();
        if o.paths == Some(0) {
            errors.push("--paths: must be positive".to_string());
        }
        if o.steps == Some(0) {
            errors.push("--steps: must be positive".to_string());
        }
        if !errors.is_empty() {
            return Err(ScenarioError::Config(errors));
        }
        if let Some(p) = o.paths {
            self.numerics.paths = p;
        }
        if let Some(n) = o.steps {
            self.numerics.steps = n;
        }
        if let Some(s) = o.seed {
            self.numerics.seed = s;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- raw input

type RawMatrix = Vec<Vec<f64>>;

#[derive(Debug, Default, Deserialize)]
struct RawConfig {
    name: Option<String>,
    problem: Option<RawProblem>,
    numerics: Option<RawNumerics>,
    candidate: Option<RawCandidate>,
    checks: Option<Vec<RawCheck>>,
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
struct RawProblem {
    family: Option<String>,
    n: Option<i64>,
    m: Option<i64>,
    d: Option<i64>,
    horizon: Option<f64>,
    x0: Option<Vec<f64>>,
    eigenvalues: Option<Vec<f64>>,
    diffusivity: Option<f64>,
    lipschitz: Option<f64>,
    integrability: Option<f64>,
    params: Option<RawParams>,
    control_set: Option<RawSet>,
}

#[derive(Debug, Default, Deserialize)]
struct RawParams {
    f: Option<RawMatrix>,
    b: Option<RawMatrix>,
    a0: Option<Vec<f64>>,
    c: Option<Vec<RawMatrix>>,
    d: Option<Vec<RawMatrix>>,
    sigma: Option<RawMatrix>,
    m: Option<RawMatrix>,
    r: Option<RawMatrix>,
    q_x: Option<Vec<f64>>,
    q_u: Option<Vec<f64>>,
    c0: Option<f64>,
    g: Option<RawMatrix>,
    g1: Option<Vec<f64>>,
    g0: Option<f64>,
    alpha: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
struct RawSet {
    kind: Option<String>,
    lo: Option<Vec<f64>>,
    hi: Option<Vec<f64>>,
    center: Option<Vec<f64>>,
    radius: Option<f64>,
    normal: Option<Vec<f64>>,
    offset: Option<f64>,
    a: Option<RawMatrix>,
    b: Option<Vec<f64>>,
    points: Option<RawMatrix>,
}

#[derive(Debug, Default, Deserialize)]
struct RawNumerics {
    steps: Option<i64>,
    paths: Option<i64>,
    seed: Option<i64>,
    degree: Option<i64>,
    ridge: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct RawCandidate {
    kind: Option<String>,
    table: Option<RawMatrix>,
    expression: Option<String>,
    offset: Option<Vec<f64>>,
    base: Option<Box<RawCandidate>>,
}

#[derive(Debug, Default, Deserialize)]
struct RawCheck {
    id: Option<String>,
    tol: Option<f64>,
    directions: Option<i64>,
    direction: Option<String>,
    trials: Option<i64>,
    seed: Option<i64>,
    eps: Option<Vec<f64>>,
    ratio: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct RawOutput {
    summary: Option<String>,
    csv: Option<String>,
}

// ---------------------------------------------------------------- validation

#[derive(Default)]
struct Errors(Vec<String>);

impl Errors {
    fn push(&mut self, msg: impl Into<String>) {
        self.0.push(msg.into());
    }

    fn count(&mut self, key: &str, v: Option<i64>, default: Option<usize>) -> Option<usize> {
        match v {
            None if default.is_none() => {
                self.push(format!("{key}: missing"));
                None
            }
            None => default,
            Some(v) if v <= 0 && key.starts_with("problem.") => {
                self.push(format!("{key}: dims positive (got {v})"));
                None
            }
            Some(v) if v <= 0 => {
                self.push(format!("{key}: must be positive (got {v})"));
                None
            }
            Some(v) => Some(v as usize),
        }
    }

    fn vector(&mut self, key: &str, v: &Option<Vec<f64>>, len: usize) -> Option<DVector<f64>> {
        let v = v.as_ref()?;
        if v.len() != len {
            self.push(format!("{key}: expected {len} entries, got {}", v.len()));
            return None;
        }
        Some(DVector::from_column_slice(v))
    }

    fn matrix(&mut self, key: &str, v: &Option<RawMatrix>, rows: usize, cols: usize) -> Option<DMatrix<f64>> {
        let v = v.as_ref()?;
        self.matrix_rows(key, v, rows, cols)
    }

    fn matrix_rows(&mut self, key: &str, v: &RawMatrix, rows: usize, cols: usize) -> Option<DMatrix<f64>> {
        if v.len() != rows || v.iter().any(|r| r.len() != cols) {
            self.push(format!("{key}: expected a {rows}×{cols} matrix (array of {rows} rows)"));
            return None;
        }
        Some(DMatrix::from_fn(rows, cols, |i, j| v[i][j]))
    }

    fn channels(&mut self, key: &str, v: &Option<Vec<RawMatrix>>, count: usize, rows: usize, cols: usize) -> Option<Vec<DMatrix<f64>>> {
        let v = v.as_ref()?;
        if v.len() != count {
            self.push(format!("{key}: expected one matrix per noise channel ({count}), got {}", v.len()));
            return None;
        }
        let out: Vec<_> = v
            .iter()
            .enumerate()
            .filter_map(|(j, mat)| self.matrix_rows(&format!("{key}[{j}]"), mat, rows, cols))
            .collect();
        (out.len() == count).then_some(out)
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

/// Validates a scenario given as TOML text.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut errors = Errors::default();
    let de = toml::Deserializer::parse(text).map_err(|e| ScenarioError::Config(vec![format!("parse error: {e}")]))?;
    let mut unknown = Vec::new();
    let raw: RawConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| ScenarioError::Config(vec![format!("parse error: {e}")]))?;
    for key in unknown {
        let key = key.replace(".?", "");
        errors.push(format!("{key}: unknown key"));
    }
    let cfg = build(raw, &mut errors);
    match cfg {
        Some(cfg) if errors.0.is_empty() => Ok(cfg),
        _ => Err(ScenarioError::Config(errors.0)),
    }
}

fn build(raw: RawConfig, errors: &mut Errors) -> Option<ScenarioConfig> {
    let problem = raw.problem.unwrap_or_default();
    let family = problem.family.clone().unwrap_or_default();
    if problem.family.is_none() {
        errors.push(format!("problem.family: missing (valid families: {})", FAMILIES.join(", ")));
    } else if !FAMILIES.contains(&family.as_str()) {
        errors.push(format!(
            "problem.family: unknown family `{family}` (valid families: {})",
            FAMILIES.join(", ")
        ));
    }
    let n = errors.count("problem.n", problem.n, None);
    let m = errors.count("problem.m", problem.m, None);
    let d = errors.count("problem.d", problem.d, None);

    let numerics = build_numerics(raw.numerics.unwrap_or_default(), errors);
    let checks = build_checks(raw.checks.unwrap_or_default(), errors);
    let output = raw.output.unwrap_or_default();
    let output = OutputSpec {
        summary: PathBuf::from(output.summary.unwrap_or_else(|| "summary.json".into())),
        csv: PathBuf::from(output.csv.unwrap_or_else(|| "traces.csv".into())),
    };

    let (n, m, d) = (n?, m?, d?);
    let horizon = problem.horizon.unwrap_or(1.0);
    if !(horizon > 0.0 && horizon.is_finite()) {
        errors.push(format!("problem.horizon: must be positive and finite (got {horizon})"));
    }
    let space = match (&problem.eigenvalues, problem.diffusivity) {
        (Some(_), Some(_)) => {
            errors.push("problem: give either `eigenvalues` or `diffusivity`, not both");
            None
        }
        (Some(ev), None) => {
            if ev.len() != n {
                errors.push(format!("problem.eigenvalues: expected {n} entries, got {}", ev.len()));
                None
            } else {
                TruncatedSpace::new(ev.clone()).map_err(|e| errors.push(format!("problem.eigenvalues: {e}"))).ok()
            }
        }
        (None, diffusivity) => {
            let k = diffusivity.unwrap_or(1.0);
            if !(k >= 0.0 && k.is_finite()) {
                errors.push(format!("problem.diffusivity: must be nonnegative (got {k})"));
                None
            } else {
                let pi2 = std::f64::consts::PI.powi(2);
                TruncatedSpace::new((1..=n).map(|j| -k * (j * j) as f64 * pi2).collect())
                    .map_err(|e| errors.push(format!("problem.diffusivity: {e}")))
                    .ok()
            }
        }
    };
    let x0 = match &problem.x0 {
        Some(_) => errors.vector("problem.x0", &problem.x0, n),
        None => Some(DVector::zeros(n)),
    };
    let set = build_set(problem.control_set.unwrap_or_default(), d, errors);
    let params = problem.params.unwrap_or_default();
    let (fam, lq_params): (Option<Arc<dyn CoefficientFamily>>, Option<LqParams>) = match family.as_str() {
        "lq" => match build_lq(&params, n, m, d, errors) {
            Some(p) => match LqFamily::new(p.clone()) {
                Ok(f) => (Some(Arc::new(f)), Some(p)),
                Err(e) => {
                    errors.push(format!("problem.params: {e}"));
                    (None, None)
                }
            },
            None => (None, None),
        },
        "bilinear" => (build_bilinear(&params, n, m, d, errors).map(|f| Arc::new(f) as Arc<dyn CoefficientFamily>), None),
        _ => (None, None),
    };
    let candidate = build_candidate(raw.candidate.unwrap_or_default(), "candidate", d, numerics.steps, errors);
    if let Some(c) = &candidate {
        if c.needs_lq() && family != "lq" {
            errors.push("candidate: Riccati candidates require family `lq`");
        }
    }

    let (space, fam, set, x0, candidate) = (space?, fam?, set?, x0?, candidate?);
    let lq = match &lq_params {
        Some(p) if candidate.needs_lq() => match LqData::new(&space, p.clone()) {
            Ok(lq) => Some(lq),
            Err(e) => {
                errors.push(format!("problem.params: {e}"));
                None
            }
        },
        Some(p) => LqData::new(&space, p.clone()).ok(),
        None => None,
    };
    let spec = match ProblemSpec::new(space, fam, set, horizon, x0) {
        Ok(mut s) => {
            s.metadata.lipschitz = problem.lipschitz;
            s.metadata.integrability = problem.integrability;
            s
        }
        Err(e) => {
            errors.push(format!("problem: {e}"));
            return None;
        }
    };
    Some(ScenarioConfig {
        name: raw.name.unwrap_or_else(|| "scenario".into()),
        family,
        problem: spec,
        lq,
        numerics,
        candidate,
        checks,
        output,
    })
}

fn build_numerics(raw: RawNumerics, errors: &mut Errors) -> Numerics {
    let steps = errors.count("numerics.steps", raw.steps, Some(DEFAULT_STEPS)).unwrap_or(DEFAULT_STEPS);
    let paths = errors.count("numerics.paths", raw.paths, Some(DEFAULT_PATHS)).unwrap_or(DEFAULT_PATHS);
    let seed = match raw.seed {
        None => DEFAULT_SEED,
        Some(s) if s < 0 => {
            errors.push(format!("numerics.seed: must be nonnegative (got {s})"));
            DEFAULT_SEED
        }
        Some(s) => s as u64,
    };
    let mut regression = RegressionConfig::default();
    if let Some(deg) = raw.degree {
        if deg < 0 {
            errors.push(format!("numerics.degree: must be nonnegative (got {deg})"));
        } else {
            regression.degree = deg as usize;
        }
    }
    if let Some(r) = raw.ridge {
        regression.ridge = r;
    }
    if let Err(e) = regression.validate() {
        errors.push(format!("numerics: {e}"));
    }
    Numerics {
        steps,
        paths,
        seed,
        regression,
    }
}

fn build_checks(raw: Vec<RawCheck>, errors: &mut Errors) -> Vec<CheckSpec> {
    let mut out = Vec::new();
    for (i, rc) in raw.into_iter().enumerate() {
        let key = format!("checks[{i}]");
        let Some(id) = rc.id.as_deref() else {
            errors.push(format!("{key}.id: missing"));
            continue;
        };
        let kinds: Vec<CheckKind> = if id == "all" {
            CheckKind::ALL.to_vec()
        } else if let Some(k) = CheckKind::from_id(id) {
            vec![k]
        } else {
            let valid: Vec<&str> = CheckKind::ALL.iter().map(|k| k.id()).collect();
            errors.push(format!("{key}.id: unknown check `{id}` (valid checks: all, {})", valid.join(", ")));
            continue;
        };
        let mut base = CheckSpec::new(kinds[0]);
        if let Some(t) = rc.tol {
            if !(t >= 0.0) {
                errors.push(format!("{key}.tol: must be nonnegative (got {t})"));
            } else if kinds.iter().all(|k| k.is_integral()) {
                errors.push(format!("{key}.tol: integral checks use the 3·stderr band, not a tolerance"));
            } else {
                base.tol = Some(t);
            }
        }
        if let Some(n) = errors.count(&format!("{key}.directions"), rc.directions, Some(DEFAULT_DIRECTIONS)) {
            base.directions = n;
        }
        if let Some(n) = errors.count(&format!("{key}.trials"), rc.trials, Some(DEFAULT_TRIALS)) {
            base.trials = n;
        }
        match rc.direction.as_deref() {
            None | Some("random") => {}
            Some("steepest-ascent") => base.mode = DirectionMode::SteepestAscent,
            Some("steepest-descent") => base.mode = DirectionMode::SteepestDescent,
            Some(other) => errors.push(format!(
                "{key}.direction: unknown mode `{other}` (random, steepest-ascent, steepest-descent)"
            )),
        }
        match rc.seed {
            Some(s) if s < 0 => errors.push(format!("{key}.seed: must be nonnegative")),
            Some(s) => base.seed = Some(s as u64),
            None => {}
        }
        if let Some(eps) = rc.eps {
            if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) || eps.windows(2).any(|w| !(w[1] < w[0])) {
                errors.push(format!("{key}.eps: must be a nonempty positive decreasing ladder"));
            } else {
                base.eps = eps;
            }
        }
        if let Some(r) = rc.ratio {
            if !(r > 0.0) {
                errors.push(format!("{key}.ratio: must be positive"));
            } else {
                base.ratio = r;
            }
        }
        for kind in kinds {
            let mut spec = base.clone();
            spec.kind = kind;
            if kind.is_integral() {
                spec.tol = None;
            }
            out.push(spec);
        }
    }
    out
}

fn build_set(raw: RawSet, d: usize, errors: &mut Errors) -> Option<ControlSet> {
    let kind = raw.kind.as_deref().unwrap_or("unconstrained");
    let key = "problem.control_set";
    let need = |errors: &mut Errors, name: &str| errors.push(format!("{key}.{name}: required for kind `{kind}`"));
    let result = match kind {
        "unconstrained" => Ok(ControlSet::unconstrained(d)),
        "box" => {
            let lo = errors.vector(&format!("{key}.lo"), &raw.lo, d);
            let hi = errors.vector(&format!("{key}.hi"), &raw.hi, d);
            if raw.lo.is_none() {
                need(errors, "lo");
            }
            if raw.hi.is_none() {
                need(errors, "hi");
            }
            ControlSet::new_box(lo?, hi?)
        }
        "ball" => {
            let center = errors.vector(&format!("{key}.center"), &raw.center, d).or_else(|| raw.center.is_none().then(|| DVector::zeros(d)));
            if raw.radius.is_none() {
                need(errors, "radius");
            }
            ControlSet::new_ball(center?, raw.radius?)
        }
        "halfspace" => {
            let normal = errors.vector(&format!("{key}.normal"), &raw.normal, d);
            if raw.normal.is_none() {
                need(errors, "normal");
            }
            ControlSet::new_halfspace(normal?, raw.offset.unwrap_or(0.0))
        }
        "polytope" => {
            let rows = raw.a.as_ref().map_or(0, |a| a.len());
            let a = errors.matrix(&format!("{key}.a"), &raw.a, rows, d);
            let b = errors.vector(&format!("{key}.b"), &raw.b, rows);
            if raw.a.is_none() {
                need(errors, "a");
            }
            if raw.b.is_none() {
                need(errors, "b");
            }
            ControlSet::new_polytope(a?, b?)
        }
        "finite" => {
            let count = raw.points.as_ref().map_or(0, |p| p.len());
            let pts = errors.matrix(&format!("{key}.points"), &raw.points, count, d);
            if raw.points.is_none() {
                need(errors, "points");
            }
            let pts = pts?;
            ControlSet::new_finite((0..count).map(|i| pts.row(i).transpose()).collect())
        }
        other => {
            errors.push(format!(
                "{key}.kind: unknown kind `{other}` (unconstrained, box, ball, halfspace, polytope, finite)"
            ));
            return None;
        }
    };
    result.map_err(|e| errors.push(format!("{key}: {e}"))).ok()
}

fn build_lq(raw: &RawParams, n: usize, m: usize, d: usize, errors: &mut Errors) -> Option<LqParams> {
    if raw.alpha.is_some() {
        errors.push("problem.params.alpha: not a parameter of family `lq`");
    }
    let k = "problem.params";
    let mut p = LqParams::zeros(n, m, d);
    let before = errors.0.len();
    macro_rules! mat {
        ($field:ident, $r:expr, $c:expr) => {
            if let Some(v) = errors.matrix(&format!("{k}.{}", stringify!($field)), &raw.$field, $r, $c) {
                p.$field = v;
            }
        };
    }
    macro_rules! vec {
        ($field:ident, $len:expr) => {
            if let Some(v) = errors.vector(&format!("{k}.{}", stringify!($field)), &raw.$field, $len) {
                p.$field = v;
            }
        };
    }
    mat!(f, n, n);
    mat!(b, n, d);
    mat!(sigma, n, m);
    mat!(m, n, n);
    mat!(r, d, d);
    mat!(g, n, n);
    vec!(a0, n);
    vec!(q_x, n);
    vec!(q_u, d);
    vec!(g1, n);
    if let Some(c) = errors.channels(&format!("{k}.c"), &raw.c, m, n, n) {
        p.c = c;
    }
    if let Some(dd) = errors.channels(&format!("{k}.d"), &raw.d, m, n, d) {
        p.d = dd;
    }
    p.c0 = raw.c0.unwrap_or(0.0);
    p.g0 = raw.g0.unwrap_or(0.0);
    (errors.0.len() == before).then_some(p)
}

fn build_bilinear(raw: &RawParams, n: usize, m: usize, d: usize, errors: &mut Errors) -> Option<BilinearFamily> {
    let k = "problem.params";
    let unused = [
        ("f", raw.f.is_some()),
        ("a0", raw.a0.is_some()),
        ("d", raw.d.is_some()),
        ("q_x", raw.q_x.is_some()),
        ("q_u", raw.q_u.is_some()),
        ("c0", raw.c0.is_some()),
        ("g1", raw.g1.is_some()),
        ("g0", raw.g0.is_some()),
    ];
    for (name, present) in unused {
        if present {
            errors.push(format!("{k}.{name}: not a parameter of family `bilinear`"));
        }
    }
    let before = errors.0.len();
    let b = errors.matrix(&format!("{k}.b"), &raw.b, n, d).unwrap_or_else(|| DMatrix::zeros(n, d));
    let alpha = errors.vector(&format!("{k}.alpha"), &raw.alpha, n).unwrap_or_else(|| DVector::zeros(n));
    let sigma = errors.matrix(&format!("{k}.sigma"), &raw.sigma, n, m).unwrap_or_else(|| DMatrix::zeros(n, m));
    let c = errors.channels(&format!("{k}.c"), &raw.c, m, n, n).unwrap_or_else(|| vec![DMatrix::zeros(n, n); m]);
    let mm = errors.matrix(&format!("{k}.m"), &raw.m, n, n).unwrap_or_else(|| DMatrix::zeros(n, n));
    let r = errors.matrix(&format!("{k}.r"), &raw.r, d, d).unwrap_or_else(|| DMatrix::identity(d, d));
    let g = errors.matrix(&format!("{k}.g"), &raw.g, n, n).unwrap_or_else(|| DMatrix::zeros(n, n));
    if errors.0.len() != before {
        return None;
    }
    BilinearFamily::new(b, alpha, sigma, c, mm, r, g)
        .map_err(|e| errors.push(format!("{k}: {e}")))
        .ok()
}

fn build_candidate(raw: RawCandidate, key: &str, d: usize, steps: usize, errors: &mut Errors) -> Option<CandidateControl> {
    let kind = raw.kind.as_deref().unwrap_or("oracle-riccati");
    let stray = |errors: &mut Errors, name: &str, present: bool| {
        if present {
            errors.push(format!("{key}.{name}: not used by candidate kind `{kind}`"));
        }
    };
    match kind {
        "oracle-riccati" => {
            stray(errors, "table", raw.table.is_some());
            stray(errors, "expression", raw.expression.is_some());
            stray(errors, "offset", raw.offset.is_some());
            stray(errors, "base", raw.base.is_some());
            Some(CandidateControl::OracleRiccati)
        }
        "open-loop" => {
            stray(errors, "expression", raw.expression.is_some());
            stray(errors, "offset", raw.offset.is_some());
            stray(errors, "base", raw.base.is_some());
            let Some(table) = raw.table else {
                errors.push(format!("{key}.table: required for kind `open-loop`"));
                return None;
            };
            if table.len() != 1 && table.len() != steps {
                errors.push(format!("{key}.table: expected 1 or {steps} rows, got {}", table.len()));
                return None;
            }
            let rows = errors.matrix_rows(&format!("{key}.table"), &table, table.len(), d)?;
            Some(CandidateControl::OpenLoop((0..rows.nrows()).map(|i| rows.row(i).transpose()).collect()))
        }
        "feedback" => {
            stray(errors, "table", raw.table.is_some());
            stray(errors, "offset", raw.offset.is_some());
            stray(errors, "base", raw.base.is_some());
            let Some(expr) = raw.expression.as_deref() else {
                errors.push(format!("{key}.expression: required for kind `feedback`"));
                return None;
            };
            match FeedbackExpr::from_id(expr) {
                Some(e) => Some(CandidateControl::Feedback(e)),
                None => {
                    errors.push(format!(
                        "{key}.expression: unknown feedback `{expr}` (valid: {})",
                        FeedbackExpr::IDS.join(", ")
                    ));
                    None
                }
            }
        }
        "perturbation" => {
            stray(errors, "table", raw.table.is_some());
            stray(errors, "expression", raw.expression.is_some());
            let offset = errors.vector(&format!("{key}.offset"), &raw.offset, d);
            if raw.offset.is_none() {
                errors.push(format!("{key}.offset: required for kind `perturbation`"));
            }
            let base = build_candidate(raw.base.map(|b| *b).unwrap_or_default(), &format!("{key}.base"), d, steps, errors);
            Some(CandidateControl::Perturbation {
                base: Box::new(base?),
                offset: offset?,
            })
        }
        other => {
            errors.push(format!(
                "{key}.kind: unknown kind `{other}` (oracle-riccati, open-loop, feedback, perturbation)"
            ));
            None
        }
    }
}

// ---------------------------------------------------------------- execution

#[derive(Debug)]
struct TableLaw(Vec<DVector<f64>>);

impl FeedbackLaw for TableLaw {
    fn control(&self, step: usize, _t: f64, _x: &DVector<f64>) -> DVector<f64> {
        self.0[step.min(self.0.len() - 1)].clone()
    }
}

#[derive(Debug)]
struct OffsetLaw {
    inner: Arc<dyn FeedbackLaw>,
    offset: DVector<f64>,
}

impl FeedbackLaw for OffsetLaw {
    fn control(&self, step: usize, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.inner.control(step, t, x) + &self.offset
    }
}

fn projected(law: Arc<dyn FeedbackLaw>, set: &ControlSet) -> Arc<dyn FeedbackLaw> {
    Arc::new(ProjectedFeedback {
        inner: law,
        set: set.clone(),
    })
}

/// The candidate as a feedback law on a grid of `steps` steps.
pub fn candidate_policy(cfg: &ScenarioConfig, candidate: &CandidateControl, steps: usize) -> Result<ControlPolicy, ScenarioError> {
    let spec = &cfg.problem;
    let set = &spec.control_set;
    let lq = || {
        cfg.lq.as_ref().ok_or_else(|| ScenarioError::Config(vec!["candidate: Riccati candidates require family `lq`".into()]))
    };
    let law: Arc<dyn FeedbackLaw> = match candidate {
        CandidateControl::OracleRiccati | CandidateControl::Feedback(FeedbackExpr::RiccatiDiscrete) => {
            let sol = discrete_riccati(lq()?, spec.horizon, steps).map_err(in_module("oracles"))?;
            projected(Arc::new(sol.feedback()), set)
        }
        CandidateControl::Feedback(FeedbackExpr::RiccatiContinuous) => {
            let sol = riccati_solve(lq()?, spec.horizon, steps, RICCATI_SUBSTEPS).map_err(in_module("oracles"))?;
            projected(Arc::new(sol.feedback()), set)
        }
        CandidateControl::Feedback(FeedbackExpr::Zero) => {
            Arc::new(TableLaw(vec![set.project(&DVector::zeros(spec.control_dim))]))
        }
        CandidateControl::OpenLoop(table) => {
            if table.len() != 1 && table.len() != steps {
                return Err(ScenarioError::Config(vec![format!(
                    "candidate.table: expected 1 or {steps} rows, got {}",
                    table.len()
                )]));
            }
            projected(Arc::new(TableLaw(table.clone())), set)
        }
        CandidateControl::Perturbation { base, offset } => {
            let ControlPolicy::Feedback(inner) = candidate_policy(cfg, base, steps)? else {
                unreachable!("candidates compile to feedback laws")
            };
            projected(
                Arc::new(OffsetLaw {
                    inner,
                    offset: offset.clone(),
                }),
                set,
            )
        }
    };
    Ok(ControlPolicy::Feedback(law))
}

/// Default seed for a check's own randomness, distinct per check position.
fn check_seed(master: u64, index: usize) -> u64 {
    master ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)
}

fn with_tolerance(mut r: ConditionReport, tol: f64) -> ConditionReport {
    let Some(res) = &r.residual else { return r };
    let stats = FieldStats::of(res, tol);
    let pass = if r.id == CheckKind::FirstOrderPointwise.id() {
        stats.violation_measure <= TOL_MEASURE
    } else {
        stats.max <= tol
    };
    r.verdict = if stats.max.is_nan() {
        Verdict::Inconclusive
    } else if pass {
        Verdict::Pass
    } else {
        Verdict::Violated
    };
    r.stats = Some(stats);
    r
}

fn identity_report(id: &str, stats: &IdentityStats, tol: f64) -> ConditionReport {
    let count = stats.trials.len();
    let above = stats.trials.iter().filter(|t| !(t.normalized <= tol)).count();
    let rms = if count == 0 {
        0.0
    } else {
        (stats.trials.iter().map(|t| t.normalized * t.normalized).sum::<f64>() / count as f64).sqrt()
    };
    let field = FieldStats {
        max: stats.max_normalized,
        mean: stats.mean_normalized,
        violation_measure: if count == 0 { 0.0 } else { above as f64 / count as f64 },
        tol,
    };
    let verdict = if stats.max_normalized.is_nan() {
        Verdict::Inconclusive
    } else if stats.max_normalized <= tol {
        Verdict::Pass
    } else {
        Verdict::Violated
    };
    ConditionReport {
        id: id.to_string(),
        residual: None,
        stats: Some(field),
        value: None,
        verdict,
        trace: Vec::new(),
        details: vec![("trials".into(), count as f64), ("rms_normalized".into(), rms)],
    }
}

fn expansion_report(id: String, spec: &ProblemSpec, traj: &Trajectory, v: &AdaptedField, check: &CheckSpec, noise: &NoiseEnsemble) -> Result<ConditionReport, ScenarioError> {
    let h = AdaptedField::zeros(v.shape(), v.paths(), v.steps());
    let rows = expansion_residuals(spec, traj, v, &h, &check.eps, noise).map_err(in_module("forward"))?;
    let r1: Vec<f64> = rows.iter().map(|r| r.r1).collect();
    let r2: Vec<f64> = rows.iter().map(|r| r.r2).collect();
    let f1: Vec<f64> = rows.iter().map(|r| r.floor_r1).collect();
    let f2: Vec<f64> = rows.iter().map(|r| r.floor_r2).collect();
    let (ok1, worst1) = halving_check(&r1, &f1, check.ratio);
    let (ok2, worst2) = halving_check(&r2, &f2, check.ratio);
    let verdict = if r1.iter().chain(&r2).any(|v| !v.is_finite()) {
        Verdict::Inconclusive
    } else if ok1 && ok2 {
        Verdict::Pass
    } else {
        Verdict::Violated
    };
    let mut details = vec![
        ("worst_ratio_r1".to_string(), worst1),
        ("worst_ratio_r2".to_string(), worst2),
    ];
    for (i, row) in rows.iter().enumerate() {
        details.push((format!("r1_eps{i}"), row.r1));
        details.push((format!("r2_eps{i}"), row.r2));
    }
    let tested: Vec<f64> = [(&r1, &f1), (&r2, &f2)]
        .iter()
        .flat_map(|(v, f)| {
            (1..v.len())
                .filter(|&i| v[i - 1] > 3.0 * f[i - 1] && v[i] > 3.0 * f[i])
                .map(|i| v[i] / v[i - 1])
                .collect::<Vec<_>>()
        })
        .collect();
    let above = tested.iter().filter(|r| !(**r <= check.ratio)).count();
    let stats = FieldStats {
        max: worst1.max(worst2),
        mean: if tested.is_empty() { 0.0 } else { tested.iter().sum::<f64>() / tested.len() as f64 },
        violation_measure: if tested.is_empty() { 0.0 } else { above as f64 / tested.len() as f64 },
        tol: check.ratio,
    };
    Ok(ConditionReport {
        id,
        residual: None,
        stats: Some(stats),
        value: None,
        verdict,
        trace: Vec::new(),
        details,
    })
}

/// Forward simulation, adjoint solves and every requested check, in order.
/// Nothing is written to disk.
pub fn execute(cfg: &ScenarioConfig) -> Result<Vec<ConditionReport>, ScenarioError> {
    let spec = &cfg.problem;
    let Numerics {
        steps,
        paths,
        seed,
        regression,
    } = cfg.numerics;
    if cfg.checks.is_empty() {
        return Ok(Vec::new());
    }
    let noise = NoiseEnsemble::generate(seed, paths, steps, spec.noise_dim, spec.horizon).map_err(in_module("forward"))?;
    let policy = candidate_policy(cfg, &cfg.candidate, steps)?;
    let traj = simulate(spec, &policy, &noise).map_err(in_module("forward"))?;
    let first: FirstAdjoint = solve_first_adjoint(spec, &traj, &noise, &regression).map_err(in_module("adjoint"))?;
    let second: Option<SecondAdjoint> = if cfg.checks.iter().any(|c| c.kind.needs_second_adjoint()) {
        spec.require_second_order().map_err(in_module("adjoint"))?;
        Some(solve_second_adjoint(spec, &traj, &first, &noise, &regression).map_err(in_module("adjoint"))?)
    } else {
        None
    };
    let adj2 = || second.as_ref().expect("second adjoint solved when required");

    let mut reports = Vec::new();
    for (index, check) in cfg.checks.iter().enumerate() {
        let kind = check.kind;
        let own_seed = check.seed.unwrap_or_else(|| check_seed(seed, index));
        let conditions = in_module("conditions");
        if kind.is_identity() {
            let tol = check.tol.unwrap_or(TOL_IDENTITY);
            let stats = match kind {
                CheckKind::Transposition => check_transposition_identity(spec, &traj, &first, &noise, check.trials, own_seed),
                _ => check_relaxed_transposition_identity(spec, &traj, &first, adj2(), &noise, check.trials, own_seed),
            }
            .map_err(in_module("adjoint"))?;
            reports.push(identity_report(kind.id(), &stats, tol));
            continue;
        }
        if !kind.uses_directions() {
            let report = match kind {
                CheckKind::FirstOrderPointwise => first_order_pointwise(spec, &traj, &first),
                CheckKind::MaximumPrinciple => maximum_principle_gap(spec, &traj, &first),
                _ => pointwise_second_gap(spec, &traj, &first, adj2()),
            }
            .map_err(&conditions)?;
            reports.push(match check.tol {
                Some(t) => with_tolerance(report, t),
                None => report,
            });
            continue;
        }
        let dirs: Vec<AdaptedField> = match check.mode {
            DirectionMode::Random => (0..check.directions)
                .map(|i| random_tangent_direction(spec, &traj, own_seed, i as u64))
                .collect::<Result<_, _>>()
                .map_err(&conditions)?,
            DirectionMode::SteepestAscent => vec![steepest_direction(spec, &traj, &first, true).map_err(&conditions)?],
            DirectionMode::SteepestDescent => vec![steepest_direction(spec, &traj, &first, false).map_err(&conditions)?],
        };
        for (i, v) in dirs.iter().enumerate() {
            let id = format!("{}/dir{i}", kind.id());
            let mut report = match kind {
                CheckKind::FirstOrderIntegral => first_order_integral(spec, &traj, &first, v, &noise).map_err(&conditions)?,
                CheckKind::CriticalCone => {
                    let r = critical_cone_residual(spec, &traj, &first, v).map_err(&conditions)?;
                    match check.tol {
                        Some(t) => with_tolerance(r, t),
                        None => r,
                    }
                }
                CheckKind::SecondOrderIntegral => {
                    let h = AdaptedField::zeros(v.shape(), v.paths(), v.steps());
                    second_order_integral(spec, &traj, &first, adj2(), v, &h, &noise).map_err(&conditions)?
                }
                _ => expansion_report(id.clone(), spec, &traj, v, check, &noise)?,
            };
            report.id = id;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// `0` if every verdict passes, `2` if any is violated, otherwise `3` if any
/// is inconclusive.
pub fn exit_status(reports: &[ConditionReport]) -> i32 {
    let worst = reports.iter().fold(Verdict::Pass, |acc, r| acc.combine(r.verdict));
    match worst {
        Verdict::Pass => 0,
        Verdict::Violated => 2,
        Verdict::Inconclusive => 3,
    }
}

// ---------------------------------------------------------------- artifacts

#[derive(Debug, Serialize)]
struct SummaryRecord<'a> {
    id: &'a str,
    value: Option<f64>,
    stderr: Option<f64>,
    violation_measure: Option<f64>,
    max: Option<f64>,
    mean: Option<f64>,
    tol: Option<f64>,
    verdict: &'static str,
    details: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    family: &'a str,
    steps: usize,
    paths: usize,
    seed: u64,
    exit_status: i32,
    checks: Vec<SummaryRecord<'a>>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// JSON summary with one record per report. `value` is the integral estimate
/// for integral checks and the largest residual otherwise.
pub fn render_summary(cfg: &ScenarioConfig, reports: &[ConditionReport]) -> String {
    let checks = reports
        .iter()
        .map(|r| {
            let details = r
                .details
                .iter()
                .map(|(k, v)| (k.clone(), finite(*v).map_or(serde_json::Value::Null, serde_json::Value::from)))
                .collect();
            SummaryRecord {
                id: &r.id,
                value: match (&r.value, &r.stats) {
                    (Some(e), _) => finite(e.mean),
                    (None, Some(s)) => finite(s.max),
                    _ => None,
                },
                stderr: r.value.and_then(|e| finite(e.stderr)),
                violation_measure: r.stats.and_then(|s| finite(s.violation_measure)),
                max: r.stats.and_then(|s| finite(s.max)),
                mean: r.stats.and_then(|s| finite(s.mean)),
                tol: r.stats.map(|s| s.tol),
                verdict: r.verdict.as_str(),
                details,
            }
        })
        .collect();
    let summary = Summary {
        scenario: &cfg.name,
        family: &cfg.family,
        steps: cfg.numerics.steps,
        paths: cfg.numerics.paths,
        seed: cfg.numerics.seed,
        exit_status: exit_status(reports),
        checks,
    };
    let mut out = serde_json::to_string_pretty(&summary).expect("summary serializes");
    out.push('\n');
    out
}

/// CSV with columns `step,time` and one column per report that has a
/// per-step trace, named by the report id.
pub fn render_csv(cfg: &ScenarioConfig, reports: &[ConditionReport]) -> String {
    let steps = cfg.numerics.steps;
    let dt = cfg.problem.horizon / steps as f64;
    let traced: Vec<&ConditionReport> = reports.iter().filter(|r| r.trace.len() == steps).collect();
    let mut out = String::from("step,time");
    for r in &traced {
        out.push(',');
        out.push_str(&r.id);
    }
    out.push('\n');
    for k in 0..steps {
        let _ = write!(out, "{k},{}", k as f64 * dt);
        for r in &traced {
            let _ = write!(out, ",{}", r.trace[k]);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub reports: Vec<ConditionReport>,
    pub exit_status: i32,
    pub summary_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Runs the scenario and writes both artifacts under `out_dir`.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    let reports = execute(cfg)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ScenarioError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let summary_path = out_dir.join(&cfg.output.summary);
    let csv_path = out_dir.join(&cfg.output.csv);
    for path in [&summary_path, &csv_path] {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io(parent))?;
        }
    }
    std::fs::write(&summary_path, render_summary(cfg, &reports)).map_err(io(&summary_path))?;
    std::fs::write(&csv_path, render_csv(cfg, &reports)).map_err(io(&csv_path))?;
    Ok(ScenarioOutcome {
        exit_status: exit_status(&reports),
        reports,
        summary_path,
        csv_path,
    })
}
