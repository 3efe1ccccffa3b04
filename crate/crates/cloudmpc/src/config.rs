//! JSON experiment configuration: schema, dotted-path overrides, canonical
//! hashing, and resolution into a runnable [`Experiment`] plus a run plan.
//!
//! A configuration either names a preset — individual fields then replace
//! the corresponding preset parts — or defines a custom time-invariant model
//! from matrices plus a nonlinearity (a named builtin or a table of
//! polynomial/trigonometric terms) together with a named cost family and
//! configurable weights. Unknown keys are rejected everywhere, so a typo
//! fails with an error naming the offending key instead of silently falling
//! back to a default.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::controllers::DelaySpec;
use crate::costs::CostSpec;
use crate::fusion::Choice;
use crate::error::{Error, Result};
use crate::geometry::{Halfspace, PolytopeConstraint, UnitBallPolytope};
use crate::models::{DisturbanceSpec, Model, ModelStage, NonlinearFn, SystemModel};
use crate::norms::NormKind;
use crate::presets::{self, IntegrationScheme};
use crate::sim::{EtaHatMode, Experiment, RunMode};
use crate::trajopt::SolverOptions;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Declarative form of an experiment. Every field is optional; `preset`
/// selects a ready-made experiment that the remaining fields then override
/// piecewise, while omitting `preset` makes `model`, `cost`, and `x0`
/// mandatory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in output file names; defaults to the preset name.
    pub name: Option<String>,
    pub preset: Option<String>,
    /// Discretization for the pendulum preset (its default is `euler`).
    pub scheme: Option<IntegrationScheme>,
    pub model: Option<ModelConfig>,
    pub cost: Option<CostConfig>,
    /// State constraints as halfspace rows pinned to time steps.
    pub constraints: Option<Vec<PolytopeConstraint>>,
    /// Symmetric per-component control bounds `|u_j| <= b_j`.
    pub control_box: Option<Vec<f64>>,
    /// Explicit control halfspace rows (alternative to `control_box`).
    pub control_rows: Option<Vec<Halfspace>>,
    /// Polytopic inner approximations of the norm unit balls, used by the
    /// solver to represent deviation tubes. Soundness of the tightened
    /// constraints needs these to really sit inside the unit balls; the
    /// bound audit checks the consequences empirically.
    pub gauge: Option<UnitBallPolytope>,
    pub x0: Option<Vec<f64>>,
    /// Offset added to `x0` to form the remote planner's initial estimate.
    pub inject_initial_error: Option<Vec<f64>>,
    /// Initial deviation bound handed to the remote planner; defaults to
    /// the norm of the injected error plus any delay-induced drift.
    pub delta0: Option<f64>,
    pub disturbance: Option<DisturbanceConfig>,
    pub delay: Option<DelaySpec>,
    pub eta_hat_mode: Option<EtaHatMode>,
    pub constrained_switch: Option<bool>,
    /// Pins the switch to one side at every step (degeneracy experiments).
    pub force_choice: Option<Choice>,
    pub solver: Option<SolverOptions>,
    pub mode: Option<RunMode>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
}

/// Custom time-invariant model `x+ = A x + B u + f(x, u) + w`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub nonlinearity: NonlinearityConfig,
    /// Lipschitz constant of `f` in the state over the operating region.
    pub l_f: f64,
    /// Lipschitz constant of `f` in the control.
    pub m_f: f64,
    #[serde(default)]
    pub norm: Option<NormKind>,
    /// Declared induced norm of `A`, checked against the matrix.
    #[serde(default)]
    pub declared_gain: Option<f64>,
}

/// The residual nonlinearity of a custom model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearityConfig {
    /// `f = 0`: the model is exactly linear.
    Zero,
    /// Componentwise `gain * x_i - sin(gain * x_i)`.
    LinearMinusSine { gain: f64 },
    /// One row per state component; each row sums product terms built from
    /// powers and sin/cos/tan of scaled state and control entries.
    Expression { rows: Vec<ExpressionRow> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionRow {
    pub terms: Vec<ExpressionTerm>,
}

/// `coef * product(factors)`; an empty factor list makes the term constant,
/// which the `f(0,0) = 0` model check will reject unless it cancels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionTerm {
    pub coef: f64,
    #[serde(default)]
    pub factors: Vec<FactorConfig>,
}

/// One factor `g(scale * v)^power` with `v` a state or control entry and
/// `g` the identity or a trigonometric function.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub var: VarKind,
    pub index: usize,
    #[serde(default)]
    pub func: Option<TrigFunc>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_power")]
    pub power: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    X,
    U,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigFunc {
    Sin,
    Cos,
    Tan,
}

fn default_scale() -> f64 {
    1.0
}

fn default_power() -> u32 {
    1
}

/// Named cost family with configurable diagonal weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    /// `sum q_i |x_i| + sum r_j |u_j|` per stage, `sum qt_i |x_i|` at the
    /// end (`q_terminal` defaults to `q`).
    WeightedL1 {
        q: Vec<f64>,
        r: Vec<f64>,
        #[serde(default)]
        q_terminal: Option<Vec<f64>>,
        #[serde(default)]
        horizon: Option<usize>,
    },
    /// `sqrt(x' Q x) + sqrt(u' R u)` per stage, `sqrt(x' Q x)` at the end.
    /// Only available on two-norm models, where `sqrt(max Q)` is the exact
    /// Lipschitz constant.
    WeightedNorm {
        q: Vec<f64>,
        r: Vec<f64>,
        #[serde(default)]
        horizon: Option<usize>,
    },
}

/// Disturbance ball radius; the dimension always matches the state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub omega: f64,
    #[serde(default)]
    pub norm: Option<NormKind>,
    /// Radius the certificates assume when different from the sampled one.
    /// Declaring less than `omega` is deliberately unsound — the bound audit
    /// exists to catch exactly that.
    #[serde(default)]
    pub declared_omega: Option<f64>,
}

/// Runtime choices that sit outside the experiment itself.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub mode: Option<RunMode>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value)
            .map_err(|e| cfg_err(format!("invalid configuration: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(parse_json(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&read_config_text(path)?)
    }

    /// Normalized form: the parsed fields re-serialized with canonical key
    /// order, so source formatting and key order do not affect the hash.
    pub fn canonical(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// SHA-256 of the canonical form, hex-encoded. Two configurations hash
    /// equal exactly when they normalize identically.
    pub fn resolved_hash(&self) -> Result<String> {
        let compact = serde_json::to_string(&self.canonical()?)?;
        let mut hasher = Sha256::new();
        hasher.update(compact.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Resolves the configuration into an experiment plus the run plan.
    pub fn build(&self) -> Result<(Experiment, RunPlan)> {
        let mut exp = match &self.preset {
            Some(p) => {
                if self.model.is_some() {
                    return Err(cfg_err("specify either `preset` or `model`, not both"));
                }
                if self.scheme.is_some()
                    && !matches!(p.as_str(), "example2_pendulum" | "example2")
                {
                    return Err(cfg_err("`scheme` only applies to the pendulum preset"));
                }
                preset_by_name(p, self.scheme)?
            }
            None => {
                if self.scheme.is_some() {
                    return Err(cfg_err("`scheme` only applies to the pendulum preset"));
                }
                self.build_custom()?
            }
        };
        self.apply_common(&mut exp)?;
        let seeds = match (&self.seed, &self.seeds) {
            (Some(_), Some(_)) => {
                return Err(cfg_err("specify either `seed` or `seeds`, not both"))
            }
            (Some(s), None) => vec![*s],
            (None, Some(list)) if list.is_empty() => {
                return Err(cfg_err("`seeds` must not be empty"))
            }
            (None, Some(list)) => list.clone(),
            (None, None) => vec![0],
        };
        Ok((
            exp,
            RunPlan {
                mode: self.mode,
                seeds,
                output_dir: self.output_dir.clone(),
            },
        ))
    }

    fn build_custom(&self) -> Result<Experiment> {
        let mc = self
            .model
            .as_ref()
            .ok_or_else(|| cfg_err("either `preset` or `model` is required"))?;
        let norm = mc.norm.unwrap_or(NormKind::Two);
        let a = to_matrix(&mc.a, "model.a")?;
        let b = to_matrix(&mc.b, "model.b")?;
        let n = a.nrows();
        let m = b.ncols();
        let f = mc.nonlinearity.compile(n, m)?;
        let stage = match mc.declared_gain {
            Some(g) => ModelStage::with_declared_gain(a, b, f, g, mc.l_f, mc.m_f, norm)?,
            None => ModelStage::new(a, b, f, mc.l_f, mc.m_f, norm)?,
        };
        let model = Model::Invariant(SystemModel::new(stage, norm));
        let cost_cfg = self
            .cost
            .as_ref()
            .ok_or_else(|| cfg_err("`cost` is required with a custom model"))?;
        let cost = build_cost(cost_cfg, None, n, m, norm)?;
        let x0 = self
            .x0
            .as_ref()
            .ok_or_else(|| cfg_err("`x0` is required with a custom model"))?;
        if x0.len() != n {
            return Err(cfg_err(format!(
                "`x0` has length {}, state dimension is {n}",
                x0.len()
            )));
        }
        Ok(Experiment {
            name: "custom".into(),
            model,
            cost,
            constraints: Vec::new(),
            control_rows: Vec::new(),
            gauge: UnitBallPolytope::boxed(norm, n, m),
            disturbance: DisturbanceSpec::new(0.0, norm, n)?,
            declared_omega: None,
            x0: DVector::from_vec(x0.clone()),
            delay: DelaySpec::none(),
            inject_initial_error: None,
            delta0_override: None,
            solver: SolverOptions::default(),
            eta_hat_mode: EtaHatMode::Measured,
            constrained_switch: true,
            force_choice: None,
        })
    }

    /// Fields shared between the preset and custom routes; each present
    /// field replaces the corresponding part of `exp` wholesale.
    fn apply_common(&self, exp: &mut Experiment) -> Result<()> {
        let n = exp.model.state_dim();
        let m = exp.model.control_dim();
        if let Some(name) = &self.name {
            exp.name = name.clone();
        }
        if let Some(cc) = &self.cost {
            exp.cost = build_cost(cc, Some(exp.cost.horizon), n, m, exp.model.norm())?;
        }
        if let Some(cons) = &self.constraints {
            for c in cons {
                if c.rows.is_empty() {
                    return Err(cfg_err(format!("constraint at time {} has no rows", c.time)));
                }
                if c.time > exp.cost.horizon {
                    return Err(cfg_err(format!(
                        "constraint time {} exceeds the horizon {}",
                        c.time, exp.cost.horizon
                    )));
                }
                check_rows(&c.rows, n, "constraints")?;
            }
            exp.constraints = cons.clone();
        }
        match (&self.control_box, &self.control_rows) {
            (Some(_), Some(_)) => {
                return Err(cfg_err(
                    "specify either `control_box` or `control_rows`, not both",
                ))
            }
            (Some(bounds), None) => {
                if bounds.len() != m {
                    return Err(cfg_err(format!(
                        "`control_box` has length {}, control dimension is {m}",
                        bounds.len()
                    )));
                }
                exp.control_rows = box_rows(bounds)?;
            }
            (None, Some(rows)) => {
                check_rows(rows, m, "control_rows")?;
                exp.control_rows = rows.clone();
            }
            (None, None) => {}
        }
        if let Some(g) = &self.gauge {
            check_rows(&g.state_rows, n, "gauge.state_rows")?;
            check_rows(&g.control_rows, m, "gauge.control_rows")?;
            for row in g.state_rows.iter().chain(g.control_rows.iter()) {
                if !(row.offset > 0.0) {
                    return Err(cfg_err(
                        "gauge offsets must be positive so the sets contain the origin",
                    ));
                }
            }
            exp.gauge = g.clone();
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != n {
                return Err(cfg_err(format!(
                    "`x0` has length {}, state dimension is {n}",
                    x0.len()
                )));
            }
            exp.x0 = DVector::from_vec(x0.clone());
        }
        if let Some(e) = &self.inject_initial_error {
            if e.len() != n {
                return Err(cfg_err(format!(
                    "`inject_initial_error` has length {}, state dimension is {n}",
                    e.len()
                )));
            }
            exp.inject_initial_error = Some(DVector::from_vec(e.clone()));
        }
        if let Some(d) = self.delta0 {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(cfg_err("`delta0` must be finite and nonnegative"));
            }
            exp.delta0_override = Some(d);
        }
        if let Some(dc) = &self.disturbance {
            if let Some(d) = dc.declared_omega {
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(cfg_err("`declared_omega` must be finite and nonnegative"));
                }
            }
            let norm = dc.norm.unwrap_or(exp.disturbance.norm);
            exp.disturbance = DisturbanceSpec::new(dc.omega, norm, n)?;
            exp.declared_omega = dc.declared_omega;
        }
        if let Some(dl) = &self.delay {
            if let Some(ac) = &dl.assumed_controls {
                if ac.len() < dl.steps {
                    return Err(cfg_err(format!(
                        "`delay.assumed_controls` has {} entries, `steps` is {}",
                        ac.len(),
                        dl.steps
                    )));
                }
                for u in ac {
                    if u.len() != m {
                        return Err(cfg_err(format!(
                            "`delay.assumed_controls` entry has length {}, control dimension is {m}",
                            u.len()
                        )));
                    }
                }
            }
            exp.delay = dl.clone();
        }
        if let Some(em) = self.eta_hat_mode {
            exp.eta_hat_mode = em;
        }
        if let Some(cs) = self.constrained_switch {
            exp.constrained_switch = cs;
        }
        if let Some(fc) = self.force_choice {
            exp.force_choice = Some(fc);
        }
        if let Some(so) = &self.solver {
            for (label, v) in [
                ("feasibility_tol", so.feasibility_tol),
                ("optimality_tol", so.optimality_tol),
                ("penalty_initial", so.penalty_initial),
                ("penalty_growth", so.penalty_growth),
                ("penalty_max", so.penalty_max),
                ("fd_step", so.fd_step),
            ] {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(cfg_err(format!("`solver.{label}` must be finite and positive")));
                }
            }
            if so.max_iterations == 0 {
                return Err(cfg_err("`solver.max_iterations` must be positive"));
            }
            exp.solver = so.clone();
        }
        Ok(())
    }
}

/// Returns the preset experiment registered under `name` (short aliases
/// `example1`..`example3` are accepted).
pub fn preset_by_name(name: &str, scheme: Option<IntegrationScheme>) -> Result<Experiment> {
    let sch = scheme.unwrap_or(IntegrationScheme::Euler);
    match name {
        "example1_scalar" | "example1" => Ok(presets::example1_scalar()),
        "example1_degenerate" => Ok(presets::example1_degenerate()),
        "example2_pendulum" | "example2" => Ok(presets::example2_pendulum(sch)),
        "example3_vehicle" | "example3" => Ok(presets::example3_vehicle()),
        other => Err(cfg_err(format!(
            "unknown preset `{other}`; available: example1_scalar, example1_degenerate, \
             example2_pendulum, example3_vehicle"
        ))),
    }
}

/// Applies one `path=value` override to a configuration JSON tree before it
/// is parsed. Dotted segments walk objects (created when missing) and index
/// existing arrays; the value is parsed as JSON when possible and falls
/// back to a bare string, so `disturbance.omega=0.05`, `x0=[-9.5]`, and
/// `eta_hat_mode=measured` all work.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{spec}` must look like key.path=value")))?;
    if path.is_empty() {
        return Err(cfg_err(format!("override `{spec}` has an empty path")));
    }
    let mut leaf = Some(serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into())));
    let segments: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match cur {
            Value::Array(arr) => {
                let idx: usize = seg.parse().map_err(|_| {
                    cfg_err(format!("override `{path}`: `{seg}` must be an array index"))
                })?;
                if idx >= arr.len() {
                    return Err(cfg_err(format!(
                        "override `{path}`: index {idx} out of bounds (length {})",
                        arr.len()
                    )));
                }
                if last {
                    arr[idx] = leaf.take().expect("leaf used once");
                    return Ok(());
                }
                cur = &mut arr[idx];
            }
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), leaf.take().expect("leaf used once"));
                    return Ok(());
                }
                cur = map
                    .entry(seg.to_string())
                    .or_insert_with(|| Value::Object(Default::default()));
            }
            _ => {
                return Err(cfg_err(format!(
                    "override `{path}`: `{seg}` descends into a scalar"
                )))
            }
        }
    }
    unreachable!("path always has at least one segment")
}

/// Parses the text of a configuration file into a JSON tree.
pub fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| cfg_err(format!("malformed JSON: {e}")))
}

pub fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))
}

fn to_matrix(rows: &[Vec<f64>], label: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(cfg_err(format!("`{label}` must be a nonempty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(cfg_err(format!("`{label}` rows have inconsistent lengths")));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().cloned(),
    ))
}

fn check_rows(rows: &[Halfspace], dim: usize, label: &str) -> Result<()> {
    for r in rows {
        if r.normal.len() != dim {
            return Err(cfg_err(format!(
                "`{label}` row has normal of length {}, expected {dim}",
                r.normal.len()
            )));
        }
        if !r.offset.is_finite() || r.normal.iter().any(|v| !v.is_finite()) {
            return Err(cfg_err(format!("`{label}` rows must be finite")));
        }
    }
    Ok(())
}

fn box_rows(bounds: &[f64]) -> Result<Vec<Halfspace>> {
    let mut rows = Vec::with_capacity(2 * bounds.len());
    for (j, b) in bounds.iter().enumerate() {
        if !(*b > 0.0) || !b.is_finite() {
            return Err(cfg_err("`control_box` bounds must be finite and positive"));
        }
        for sign in [1.0, -1.0] {
            let mut normal = vec![0.0; bounds.len()];
            normal[j] = sign;
            rows.push(Halfspace::new(normal, *b));
        }
    }
    Ok(rows)
}

fn build_cost(
    cc: &CostConfig,
    inherit_horizon: Option<usize>,
    n: usize,
    m: usize,
    norm: NormKind,
) -> Result<CostSpec> {
    let pick_horizon = |h: &Option<usize>| -> Result<usize> {
        match (h, inherit_horizon) {
            (Some(h), Some(ph)) if *h != ph => Err(cfg_err(format!(
                "cost.horizon {h} does not match the experiment horizon {ph}"
            ))),
            (Some(h), _) => Ok(*h),
            (None, Some(ph)) => Ok(ph),
            (None, None) => Err(cfg_err("cost.horizon is required with a custom model")),
        }
    };
    let check = |label: &str, w: &[f64], want: usize| -> Result<()> {
        if w.len() != want {
            return Err(cfg_err(format!(
                "cost.{label} has length {}, expected {want}",
                w.len()
            )));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(cfg_err(format!(
                "cost.{label} entries must be finite and nonnegative"
            )));
        }
        Ok(())
    };
    match cc {
        CostConfig::WeightedL1 {
            q,
            r,
            q_terminal,
            horizon,
        } => {
            let h = pick_horizon(horizon)?;
            check("q", q, n)?;
            check("r", r, m)?;
            let qt = q_terminal.clone().unwrap_or_else(|| q.clone());
            check("q_terminal", &qt, n)?;
            presets::weighted_l1_cost(q.clone(), r.clone(), qt, norm, h)
        }
        CostConfig::WeightedNorm { q, r, horizon } => {
            if norm != NormKind::Two {
                return Err(cfg_err(
                    "cost preset `weighted_norm` requires a two-norm model",
                ));
            }
            let h = pick_horizon(horizon)?;
            check("q", q, n)?;
            check("r", r, m)?;
            Ok(presets::norm_weighted_cost(q.clone(), r.clone(), h))
        }
    }
}

impl NonlinearityConfig {
    /// Compiles the description into a callable `f(x, u)`, checking indices
    /// and coefficients eagerly so bad tables fail at load time, not during
    /// a rollout.
    fn compile(&self, n: usize, m: usize) -> Result<NonlinearFn> {
        match self {
            NonlinearityConfig::Zero => Ok(Arc::new(move |_x: &DVector<f64>, _u: &DVector<f64>| {
                DVector::zeros(n)
            })),
            NonlinearityConfig::LinearMinusSine { gain } => {
                if !gain.is_finite() {
                    return Err(cfg_err("nonlinearity gain must be finite"));
                }
                let g = *gain;
                Ok(Arc::new(move |x: &DVector<f64>, _u: &DVector<f64>| {
                    x.map(|v| g * v - (g * v).sin())
                }))
            }
            NonlinearityConfig::Expression { rows } => {
                if rows.len() != n {
                    return Err(cfg_err(format!(
                        "nonlinearity has {} rows, state dimension is {n}",
                        rows.len()
                    )));
                }
                for (i, row) in rows.iter().enumerate() {
                    for term in &row.terms {
                        if !term.coef.is_finite() {
                            return Err(cfg_err(format!(
                                "nonlinearity row {i}: coefficient must be finite"
                            )));
                        }
                        for f in &term.factors {
                            let (dim, name) = match f.var {
                                VarKind::X => (n, "x"),
                                VarKind::U => (m, "u"),
                            };
                            if f.index >= dim {
                                return Err(cfg_err(format!(
                                    "nonlinearity row {i}: factor index {} out of range for \
                                     `{name}` (dimension {dim})",
                                    f.index
                                )));
                            }
                            if !f.scale.is_finite() {
                                return Err(cfg_err(format!(
                                    "nonlinearity row {i}: factor scale must be finite"
                                )));
                            }
                        }
                    }
                }
                let rows = rows.clone();
                Ok(Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
                    DVector::from_iterator(rows.len(), rows.iter().map(|r| eval_row(r, x, u)))
                }))
            }
        }
    }
}

fn eval_row(row: &ExpressionRow, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    row.terms
        .iter()
        .map(|t| {
            t.coef
                * t.factors
                    .iter()
                    .map(|f| {
                        let raw = match f.var {
                            VarKind::X => x[f.index],
                            VarKind::U => u[f.index],
                        };
                        let v = f.scale * raw;
                        let w = match f.func {
                            None => v,
                            Some(TrigFunc::Sin) => v.sin(),
                            Some(TrigFunc::Cos) => v.cos(),
                            Some(TrigFunc::Tan) => v.tan(),
                        };
                        w.powi(f.power as i32)
                    })
                    .product::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_closed_loop, RunMode};

    fn value(text: &str) -> Value {
        parse_json(text).expect("test JSON parses")
    }

    /// Builds from JSON and returns the error, discarding any experiment
    /// (which holds closures and so has no Debug impl).
    fn build_err(text: &str) -> Error {
        ExperimentConfig::from_json(text)
            .and_then(|c| c.build().map(|_| ()))
            .unwrap_err()
    }

    #[test]
    fn preset_resolution_matches_builtin() {
        let cfg = ExperimentConfig::from_json(r#"{"preset": "example1_scalar"}"#).unwrap();
        let (exp, plan) = cfg.build().unwrap();
        let reference = presets::example1_scalar();
        assert_eq!(exp.name, reference.name);
        assert_eq!(exp.x0, reference.x0);
        assert_eq!(exp.cost.horizon, reference.cost.horizon);
        assert_eq!(exp.disturbance.omega, reference.disturbance.omega);
        assert_eq!(plan.seeds, vec![0]);
        assert!(plan.mode.is_none());
    }

    #[test]
    fn unknown_keys_are_named_in_errors() {
        let err = ExperimentConfig::from_json(r#"{"omega_typo": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("omega_typo"), "{err}");

        let nested = ExperimentConfig::from_json(
            r#"{"preset": "example1_scalar",
                "constraints": [{"time": 10, "rows": [
                    {"normal": [1.0], "offset": 2.5, "bogus": 1}]}]}"#,
        )
        .unwrap_err();
        assert!(nested.to_string().contains("bogus"), "{nested}");
    }

    #[test]
    fn field_overrides_replace_preset_parts() {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "preset": "example1_scalar",
                "disturbance": {"omega": 0.05},
                "x0": [-9.0],
                "eta_hat_mode": "apriori_bound",
                "constrained_switch": false,
                "seed": 7
            }"#,
        )
        .unwrap();
        let (exp, plan) = cfg.build().unwrap();
        assert_eq!(exp.disturbance.omega, 0.05);
        assert_eq!(exp.disturbance.norm, NormKind::Two);
        assert_eq!(exp.x0[0], -9.0);
        assert_eq!(exp.eta_hat_mode, EtaHatMode::AprioriBound);
        assert!(!exp.constrained_switch);
        assert_eq!(plan.seeds, vec![7]);
    }

    #[test]
    fn cost_override_inherits_preset_horizon() {
        let cfg = ExperimentConfig::from_json(
            r#"{"preset": "example2_pendulum",
                "cost": {"preset": "weighted_norm",
                         "q": [3.0, 0.4, 3.0, 0.4], "r": [1e-5]}}"#,
        )
        .unwrap();
        let (exp, _) = cfg.build().unwrap();
        assert_eq!(exp.cost.horizon, 30);

        let err = build_err(
            r#"{"preset": "example2_pendulum",
                "cost": {"preset": "weighted_norm",
                         "q": [3.0, 0.4, 3.0, 0.4], "r": [1e-5], "horizon": 12}}"#,
        );
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn conflicting_and_misplaced_fields_are_rejected() {
        for (text, needle) in [
            (r#"{"preset": "example1_scalar", "seed": 1, "seeds": [2]}"#, "seed"),
            (r#"{"preset": "example3_vehicle", "scheme": "rk4"}"#, "scheme"),
            (
                r#"{"preset": "example1_scalar",
                    "control_box": [3.0],
                    "control_rows": [{"normal": [1.0], "offset": 3.0}]}"#,
                "control_box",
            ),
            (r#"{"preset": "nope"}"#, "unknown preset"),
        ] {
            let err = build_err(text);
            assert!(err.to_string().contains(needle), "{text} -> {err}");
        }
    }

    #[test]
    fn custom_route_requires_model_cost_and_x0() {
        let err = build_err("{}");
        assert!(err.to_string().contains("preset"), "{err}");

        let partial = r#"{
            "model": {"a": [[0.75]], "b": [[1.0]],
                      "nonlinearity": {"kind": "zero"}, "l_f": 0.0, "m_f": 0.0}
        }"#;
        let err = build_err(partial);
        assert!(err.to_string().contains("cost"), "{err}");
    }

    #[test]
    fn expression_table_reproduces_builtin_scalar_run() {
        // The scalar preset rebuilt from raw matrices, an expression-table
        // nonlinearity, and the weighted-l1 cost family must behave exactly
        // like the handwritten preset.
        let text = r#"{
            "model": {
                "a": [[0.75]], "b": [[1.0]],
                "nonlinearity": {"kind": "expression", "rows": [
                    {"terms": [
                        {"coef": 0.1, "factors": [{"var": "x", "index": 0}]},
                        {"coef": -1.0, "factors": [
                            {"var": "x", "index": 0, "func": "sin", "scale": 0.1}]}
                    ]}
                ]},
                "l_f": 0.2, "m_f": 0.0, "declared_gain": 0.75
            },
            "cost": {"preset": "weighted_l1",
                     "q": [1.0], "r": [2.23606797749979],
                     "q_terminal": [1.4142135623730951], "horizon": 10},
            "constraints": [{"time": 10, "rows": [
                {"normal": [1.0], "offset": 2.5},
                {"normal": [-1.0], "offset": 2.5}]}],
            "control_box": [3.0],
            "x0": [-10.0],
            "inject_initial_error": [-0.5],
            "disturbance": {"omega": 0.02}
        }"#;
        let (custom, _) = ExperimentConfig::from_json(text).unwrap().build().unwrap();
        let reference = presets::example1_scalar();

        let a = run_closed_loop(&custom, RunMode::Fused, 5).unwrap().trace;
        let b = run_closed_loop(&reference, RunMode::Fused, 5).unwrap().trace;
        assert_eq!(a.steps.len(), b.steps.len());
        assert!((a.actual_cost - b.actual_cost).abs() < 1e-9);
        for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
            assert!((sa.x[0] - sb.x[0]).abs() < 1e-9);
            let (da, db) = (sa.decision.unwrap(), sb.decision.unwrap());
            assert_eq!(da.choice, db.choice);
        }
    }

    #[test]
    fn expression_validation_catches_bad_indices_and_offsets() {
        let bad_index = r#"{
            "model": {"a": [[0.75]], "b": [[1.0]],
                      "nonlinearity": {"kind": "expression", "rows": [
                          {"terms": [{"coef": 1.0,
                                      "factors": [{"var": "x", "index": 3}]}]}
                      ]},
                      "l_f": 0.2, "m_f": 0.0},
            "cost": {"preset": "weighted_l1", "q": [1.0], "r": [1.0], "horizon": 5},
            "x0": [0.0]
        }"#;
        let err = build_err(bad_index);
        assert!(err.to_string().contains("index 3"), "{err}");

        // A lone cosine term breaks f(0,0) = 0 and must be rejected by the
        // model constructor, surfacing as a configuration error.
        let bad_origin = r#"{
            "model": {"a": [[0.75]], "b": [[1.0]],
                      "nonlinearity": {"kind": "expression", "rows": [
                          {"terms": [{"coef": 1.0,
                                      "factors": [{"var": "x", "index": 0,
                                                   "func": "cos"}]}]}
                      ]},
                      "l_f": 0.2, "m_f": 0.0},
            "cost": {"preset": "weighted_l1", "q": [1.0], "r": [1.0], "horizon": 5},
            "x0": [0.0]
        }"#;
        assert!(ExperimentConfig::from_json(bad_origin)
            .and_then(|c| c.build().map(|_| ()))
            .is_err());
    }

    #[test]
    fn overrides_patch_the_tree_before_parsing() {
        let mut root = value(r#"{"preset": "example1_scalar"}"#);
        apply_override(&mut root, "disturbance.omega=0.05").unwrap();
        apply_override(&mut root, "x0=[-9.5]").unwrap();
        apply_override(&mut root, "x0.0=-9.25").unwrap();
        apply_override(&mut root, "eta_hat_mode=apriori_bound").unwrap();
        apply_override(&mut root, "seed=3").unwrap();
        let cfg = ExperimentConfig::from_value(root).unwrap();
        let (exp, plan) = cfg.build().unwrap();
        assert_eq!(exp.disturbance.omega, 0.05);
        assert_eq!(exp.x0[0], -9.25);
        assert_eq!(exp.eta_hat_mode, EtaHatMode::AprioriBound);
        assert_eq!(plan.seeds, vec![3]);

        let mut root = value(r#"{"x0": [1.0]}"#);
        for bad in ["x0.4=1.0", "x0.first=1.0", "=3", "no_equals"] {
            assert!(apply_override(&mut root, bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_ignores_formatting_but_tracks_content() {
        let a = ExperimentConfig::from_json(
            r#"{"preset": "example1_scalar", "seed": 1}"#,
        )
        .unwrap();
        let b = ExperimentConfig::from_json(
            "{\n  \"seed\": 1,\n  \"preset\": \"example1_scalar\"\n}",
        )
        .unwrap();
        let c = ExperimentConfig::from_json(
            r#"{"preset": "example1_scalar", "seed": 2}"#,
        )
        .unwrap();
        assert_eq!(a.resolved_hash().unwrap(), b.resolved_hash().unwrap());
        assert_ne!(a.resolved_hash().unwrap(), c.resolved_hash().unwrap());
    }

    #[test]
    fn weighted_norm_cost_needs_two_norm_model() {
        let text = r#"{
            "model": {"a": [[0.5]], "b": [[1.0]],
                      "nonlinearity": {"kind": "zero"},
                      "l_f": 0.0, "m_f": 0.0, "norm": "inf"},
            "cost": {"preset": "weighted_norm", "q": [1.0], "r": [1.0], "horizon": 5},
            "x0": [1.0]
        }"#;
        let err = build_err(text);
        assert!(err.to_string().contains("two-norm"), "{err}");
    }
}
