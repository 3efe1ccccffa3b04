//! Plant, cloud, and local prediction models.
//!
//! The true plant steps `x+ = A x + B u + f(x, u) + w` with `f` Lipschitz
//! and `f(0, 0) = 0`, and `w` confined to a ball of radius `omega`. The
//! cloud model drops the disturbance; the local model additionally drops
//! the nonlinearity. Time-varying models carry one `(A_t, B_t, f_t)`
//! triple per step plus horizon-wide worst-case constants.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::norms::NormKind;

/// Model nonlinearity: maps (state, control) to a state-sized residual.
pub type NonlinearFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Tolerance for the construction-time check that the declared gain `a`
/// matches the induced norm of `A`.
pub const GAIN_CHECK_TOL: f64 = 1e-9;

/// One step of dynamics: matrices, residual nonlinearity, and the
/// regularity constants the deviation bounds are built from.
#[derive(Clone)]
pub struct ModelStage {
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub f: NonlinearFn,
    /// Induced norm of `a_mat` under the model's norm kind.
    pub a: f64,
    /// Lipschitz constant of `f` in the state argument.
    pub l_f: f64,
    /// Lipschitz constant of `f` in the control argument.
    pub m_f: f64,
}

impl ModelStage {
    /// Builds one stage, computing `a` from `A` and checking that the
    /// nonlinearity vanishes exactly at the origin.
    pub fn new(
        a_mat: DMatrix<f64>,
        b_mat: DMatrix<f64>,
        f: NonlinearFn,
        l_f: f64,
        m_f: f64,
        norm: NormKind,
    ) -> Result<Self> {
        let n = a_mat.nrows();
        if a_mat.ncols() != n {
            return Err(Error::Config(format!(
                "state matrix must be square, got {}x{}",
                n,
                a_mat.ncols()
            )));
        }
        if b_mat.nrows() != n {
            return Err(Error::Config(format!(
                "control matrix has {} rows but the state dimension is {}",
                b_mat.nrows(),
                n
            )));
        }
        if !(l_f >= 0.0) || !(m_f >= 0.0) {
            return Err(Error::Config(
                "Lipschitz constants must be nonnegative".into(),
            ));
        }
        let m = b_mat.ncols();
        let f0 = f(&DVector::zeros(n), &DVector::zeros(m));
        if f0.len() != n {
            return Err(Error::Config(format!(
                "nonlinearity returns dimension {}, expected {}",
                f0.len(),
                n
            )));
        }
        if f0.iter().any(|v| *v != 0.0) {
            return Err(Error::Config(
                "nonlinearity must vanish exactly at the origin".into(),
            ));
        }
        let a = norm.induced(&a_mat);
        Ok(ModelStage {
            a_mat,
            b_mat,
            f,
            a,
            l_f,
            m_f,
        })
    }

    /// As [`ModelStage::new`] but verifies a caller-declared gain against
    /// the computed induced norm.
    pub fn with_declared_gain(
        a_mat: DMatrix<f64>,
        b_mat: DMatrix<f64>,
        f: NonlinearFn,
        declared_a: f64,
        l_f: f64,
        m_f: f64,
        norm: NormKind,
    ) -> Result<Self> {
        let stage = Self::new(a_mat, b_mat, f, l_f, m_f, norm)?;
        if (stage.a - declared_a).abs() > GAIN_CHECK_TOL {
            return Err(Error::Config(format!(
                "declared gain a = {declared_a} but the induced norm of A is {}",
                stage.a
            )));
        }
        Ok(stage)
    }
}

/// Time-invariant model.
#[derive(Clone)]
pub struct SystemModel {
    pub stage: ModelStage,
    pub norm: NormKind,
}

impl SystemModel {
    pub fn new(stage: ModelStage, norm: NormKind) -> Self {
        SystemModel { stage, norm }
    }
}

/// Per-step model with horizon-wide worst-case constants (the bounds use
/// the maxima of `a_t`, `L_{f,t}`, `M_{f,t}` over the horizon).
#[derive(Clone)]
pub struct TimeVaryingModel {
    pub stages: Vec<ModelStage>,
    pub norm: NormKind,
    pub a_max: f64,
    pub l_f_max: f64,
    pub m_f_max: f64,
}

impl TimeVaryingModel {
    pub fn new(stages: Vec<ModelStage>, norm: NormKind) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("time-varying model needs at least one stage".into()));
        }
        let n = stages[0].a_mat.nrows();
        let m = stages[0].b_mat.ncols();
        if stages.iter().any(|s| s.a_mat.nrows() != n || s.b_mat.ncols() != m) {
            return Err(Error::Config("all stages must share the same dimensions".into()));
        }
        let a_max = stages.iter().map(|s| s.a).fold(0.0, f64::max);
        let l_f_max = stages.iter().map(|s| s.l_f).fold(0.0, f64::max);
        let m_f_max = stages.iter().map(|s| s.m_f).fold(0.0, f64::max);
        Ok(TimeVaryingModel {
            stages,
            norm,
            a_max,
            l_f_max,
            m_f_max,
        })
    }
}

/// Either model flavor, with a uniform per-step view.
#[derive(Clone)]
pub enum Model {
    Invariant(SystemModel),
    Varying(TimeVaryingModel),
}

/// Which dynamics a rollout integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fidelity {
    /// Full model plus disturbance.
    True,
    /// Full model, disturbance-free.
    Cloud,
    /// Linear part only.
    Local,
}

impl Model {
    pub fn norm(&self) -> NormKind {
        match self {
            Model::Invariant(m) => m.norm,
            Model::Varying(m) => m.norm,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.stage(0).a_mat.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.stage(0).b_mat.ncols()
    }

    /// Stage dynamics for step `t`. Time-varying models clamp to their last
    /// stage so that probing past the horizon stays defined.
    pub fn stage(&self, t: usize) -> &ModelStage {
        match self {
            Model::Invariant(m) => &m.stage,
            Model::Varying(m) => &m.stages[t.min(m.stages.len() - 1)],
        }
    }

    /// Worst-case induced norm of `A_t` over the horizon.
    pub fn gain(&self) -> f64 {
        match self {
            Model::Invariant(m) => m.stage.a,
            Model::Varying(m) => m.a_max,
        }
    }

    /// Worst-case state-Lipschitz constant of the nonlinearity.
    pub fn l_f(&self) -> f64 {
        match self {
            Model::Invariant(m) => m.stage.l_f,
            Model::Varying(m) => m.l_f_max,
        }
    }

    /// Worst-case control-Lipschitz constant of the nonlinearity.
    pub fn m_f(&self) -> f64 {
        match self {
            Model::Invariant(m) => m.stage.m_f,
            Model::Varying(m) => m.m_f_max,
        }
    }

    /// One step of the disturbed plant.
    pub fn step_true(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        self.step_cloud(t, x, u) + w
    }

    /// One step of the disturbance-free nonlinear (cloud) model.
    pub fn step_cloud(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s = self.stage(t);
        self.step_local(t, x, u) + (s.f)(x, u)
    }

    /// One step of the linear (local) model.
    pub fn step_local(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s = self.stage(t);
        &s.a_mat * x + &s.b_mat * u
    }

    /// Integrates `controls.len()` steps starting from `x0` at step `t0`;
    /// returns the `controls.len() + 1` visited states. `Fidelity::True`
    /// requires one disturbance per step.
    pub fn rollout(
        &self,
        fidelity: Fidelity,
        t0: usize,
        x0: &DVector<f64>,
        controls: &[DVector<f64>],
        disturbances: Option<&[DVector<f64>]>,
    ) -> Result<Vec<DVector<f64>>> {
        match (fidelity, disturbances) {
            (Fidelity::True, Some(w)) if w.len() != controls.len() => {
                return Err(Error::Config(format!(
                    "rollout got {} disturbances for {} controls",
                    w.len(),
                    controls.len()
                )));
            }
            (Fidelity::True, None) => {
                return Err(Error::Config(
                    "rollout of the true plant needs a disturbance per step".into(),
                ));
            }
            _ => {}
        }
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for (i, u) in controls.iter().enumerate() {
            let t = t0 + i;
            let x = states.last().unwrap();
            let next = match fidelity {
                Fidelity::True => self.step_true(t, x, u, &disturbances.unwrap()[i]),
                Fidelity::Cloud => self.step_cloud(t, x, u),
                Fidelity::Local => self.step_local(t, x, u),
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "rollout produced a non-finite state at step {t}"
                )));
            }
            states.push(next);
        }
        Ok(states)
    }
}

/// Disturbance magnitude plus a seeded sampler, uniform on the ball of the
/// model's norm kind.
#[derive(Debug, Clone)]
pub struct DisturbanceSpec {
    pub omega: f64,
    pub norm: NormKind,
    pub dim: usize,
}

impl DisturbanceSpec {
    pub fn new(omega: f64, norm: NormKind, dim: usize) -> Result<Self> {
        if !(omega >= 0.0) {
            return Err(Error::Config("disturbance radius must be nonnegative".into()));
        }
        if dim == 0 {
            return Err(Error::Config("disturbance dimension must be positive".into()));
        }
        Ok(DisturbanceSpec { omega, norm, dim })
    }

    /// Draws one disturbance, uniform on the closed ball of radius `omega`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        if self.omega == 0.0 {
            return DVector::zeros(self.dim);
        }
        let n = self.dim;
        if n == 1 {
            return DVector::from_element(1, rng.gen_range(-self.omega..=self.omega));
        }
        match self.norm {
            NormKind::Inf => {
                DVector::from_fn(n, |_, _| rng.gen_range(-self.omega..=self.omega))
            }
            NormKind::Two => {
                // Gaussian direction, radius pushed outward by U^(1/n).
                let mut d = DVector::from_fn(n, |_, _| {
                    // Box-Muller from two uniforms
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                });
                let nrm = d.norm();
                if nrm == 0.0 {
                    return DVector::zeros(n);
                }
                d /= nrm;
                let r = self.omega * rng.gen_range(0.0f64..=1.0).powf(1.0 / n as f64);
                d * r
            }
            NormKind::One => {
                // Exponential spacings give a uniform point on the simplex;
                // random signs and a U^(1/n) radius fill the cross-polytope.
                let g: Vec<f64> = (0..n)
                    .map(|_| -(rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln()))
                    .collect();
                let total: f64 = g.iter().sum();
                let r = self.omega * rng.gen_range(0.0f64..=1.0).powf(1.0 / n as f64);
                DVector::from_fn(n, |i, _| {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * r * g[i] / total
                })
            }
        }
    }
}

/// Axis-aligned sampling region for Lipschitz estimation.
#[derive(Debug, Clone)]
pub struct SampleBox {
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
}

impl SampleBox {
    /// Symmetric box `|x_i| <= x_abs[i]`, `|u_j| <= u_abs[j]`.
    pub fn symmetric(x_abs: &[f64], u_abs: &[f64]) -> Self {
        SampleBox {
            x_lo: DVector::from_iterator(x_abs.len(), x_abs.iter().map(|v| -v)),
            x_hi: DVector::from_column_slice(x_abs),
            u_lo: DVector::from_iterator(u_abs.len(), u_abs.iter().map(|v| -v)),
            u_hi: DVector::from_column_slice(u_abs),
        }
    }
}

/// Sampled lower bounds on the state/control Lipschitz constants of a
/// stage's nonlinearity over `sample_box`. Mixes far-apart and nearby
/// pairs so local slopes are captured; the result never exceeds the true
/// constants (up to floating-point noise), so an estimate above the
/// configured value flags a misdeclared constant.
pub fn estimate_lipschitz(
    stage: &ModelStage,
    norm: NormKind,
    sample_box: &SampleBox,
    n_samples: usize,
    seed: u64,
) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = sample_box.x_lo.len();
    let m = sample_box.u_lo.len();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, lo: &DVector<f64>, hi: &DVector<f64>| {
        DVector::from_fn(lo.len(), |i, _| {
            if hi[i] > lo[i] {
                rng.gen_range(lo[i]..=hi[i])
            } else {
                lo[i]
            }
        })
    };
    let mut l_est: f64 = 0.0;
    let mut m_est: f64 = 0.0;
    for k in 0..n_samples {
        let x = draw(&mut rng, &sample_box.x_lo, &sample_box.x_hi);
        let u = draw(&mut rng, &sample_box.u_lo, &sample_box.u_hi);
        // alternate far pairs with short-range perturbations
        let near = k % 2 == 1;
        let x2 = if near {
            let mut p = x.clone();
            for i in 0..n {
                let span = (sample_box.x_hi[i] - sample_box.x_lo[i]).max(1e-12);
                p[i] = (p[i] + rng.gen_range(-1e-4..=1e-4) * span)
                    .clamp(sample_box.x_lo[i], sample_box.x_hi[i]);
            }
            p
        } else {
            draw(&mut rng, &sample_box.x_lo, &sample_box.x_hi)
        };
        let u2 = if near {
            let mut p = u.clone();
            for j in 0..m {
                let span = (sample_box.u_hi[j] - sample_box.u_lo[j]).max(1e-12);
                p[j] = (p[j] + rng.gen_range(-1e-4..=1e-4) * span)
                    .clamp(sample_box.u_lo[j], sample_box.u_hi[j]);
            }
            p
        } else {
            draw(&mut rng, &sample_box.u_lo, &sample_box.u_hi)
        };
        // state slope at fixed control
        let dx = norm.norm(&(&x2 - &x));
        if dx > 0.0 {
            let df = norm.norm(&((stage.f)(&x2, &u) - (stage.f)(&x, &u)));
            l_est = l_est.max(df / dx);
        }
        // control slope at fixed state
        let du = norm.norm(&(&u2 - &u));
        if du > 0.0 {
            let df = norm.norm(&((stage.f)(&x, &u2) - (stage.f)(&x, &u)));
            m_est = m_est.max(df / du);
        }
    }
    (l_est, m_est)
}
