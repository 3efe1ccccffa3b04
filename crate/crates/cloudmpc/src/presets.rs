//! Ready-to-run experiments: a scalar regulation task with a terminal
//! window, an inverted pendulum on a cart, and kinematic-bicycle path
//! following with time-varying stage dynamics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::controllers::DelaySpec;
use crate::costs::{CostSpec, StageCostFn, StageGradFn, TerminalCostFn, TerminalGradFn};
use crate::geometry::{PolytopeConstraint, UnitBallPolytope};
use crate::models::{DisturbanceSpec, Model, ModelStage, NonlinearFn, SystemModel, TimeVaryingModel};
use crate::norms::NormKind;
use crate::sim::{EtaHatMode, Experiment};
use crate::trajopt::SolverOptions;

/// How continuous-time presets are discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationScheme {
    Euler,
    Rk4,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar plant `x+ = 0.75 x + u + f(x) + w`, `f(x) = 0.1 x - sin(0.1 x)`,
/// horizon 10, `|u| <= 3`, terminal window `|x_10| <= 2.5`, stage cost
/// `|x| + sqrt(5) |u|`, terminal cost `sqrt(2) |x|`. The plant starts at
/// -10 while the cloud plans from -10.5 (a deliberate initial estimate
/// error of norm 0.5).
pub fn example1_scalar() -> Experiment {
    let f: NonlinearFn = Arc::new(|x: &DVector<f64>, _u: &DVector<f64>| {
        DVector::from_element(1, 0.1 * x[0] - (0.1 * x[0]).sin())
    });
    // |f'(x)| = |0.1 - 0.1 cos(0.1 x)| <= 0.2 everywhere, with the bound
    // approached as cos -> -1, so 0.2 is the tight global constant.
    let stage = ModelStage::with_declared_gain(
        DMatrix::from_element(1, 1, 0.75),
        DMatrix::from_element(1, 1, 1.0),
        f,
        0.75,
        0.2,
        0.0,
        NormKind::Two,
    )
    .expect("scalar stage is well-formed");
    let model = Model::Invariant(SystemModel::new(stage, NormKind::Two));

    let sqrt5 = 5.0f64.sqrt();
    let phi: StageCostFn = Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
        x[0].abs() + sqrt5 * u[0].abs()
    });
    let psi: TerminalCostFn = Arc::new(|x: &DVector<f64>| std::f64::consts::SQRT_2 * x[0].abs());
    let phi_grad: StageGradFn = Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
        (
            DVector::from_element(1, sgn(x[0])),
            DVector::from_element(1, sqrt5 * sgn(u[0])),
        )
    });
    let psi_grad: TerminalGradFn =
        Arc::new(|x: &DVector<f64>| DVector::from_element(1, std::f64::consts::SQRT_2 * sgn(x[0])));
    let cost = CostSpec::new(phi, psi, 1.0, std::f64::consts::SQRT_2, 10)
        .expect("scalar cost is well-formed")
        .with_gradients(phi_grad, psi_grad);

    Experiment {
        name: "example1_scalar".into(),
        constraints: vec![PolytopeConstraint::symmetric_box(10, 1, 2.5)],
        control_rows: PolytopeConstraint::symmetric_box(0, 1, 3.0).rows,
        gauge: UnitBallPolytope::boxed(NormKind::Two, 1, 1),
        disturbance: DisturbanceSpec::new(0.02, NormKind::Two, 1)
            .expect("scalar disturbance is well-formed"),
        declared_omega: None,
        x0: DVector::from_element(1, -10.0),
        delay: DelaySpec::none(),
        inject_initial_error: Some(DVector::from_element(1, -0.5)),
        delta0_override: None,
        solver: SolverOptions::default(),
        eta_hat_mode: EtaHatMode::Measured,
        constrained_switch: true,
        force_choice: None,
        model,
        cost,
    }
}

/// The scalar task stripped of everything that separates the three
/// fidelities: no nonlinearity, no disturbance, no initial estimate error.
/// Cloud, local, and fused control must then coincide exactly.
pub fn example1_degenerate() -> Experiment {
    let mut exp = example1_scalar();
    let f: NonlinearFn = Arc::new(|x: &DVector<f64>, _u: &DVector<f64>| DVector::zeros(x.len()));
    let stage = ModelStage::new(
        DMatrix::from_element(1, 1, 0.75),
        DMatrix::from_element(1, 1, 1.0),
        f,
        0.0,
        0.0,
        NormKind::Two,
    )
    .expect("degenerate stage is well-formed");
    exp.name = "example1_degenerate".into();
    exp.model = Model::Invariant(SystemModel::new(stage, NormKind::Two));
    exp.disturbance =
        DisturbanceSpec::new(0.0, NormKind::Two, 1).expect("zero disturbance is well-formed");
    exp.inject_initial_error = None;
    exp.delta0_override = None;
    exp
}

// Cart-pole physical parameters.
const CART_MASS: f64 = 1.0;
const PEND_MASS: f64 = 1.0;
const PEND_LEN: f64 = 0.5;
const CART_DAMPING: f64 = 10.0;
const GRAVITY: f64 = 9.81;
const PEND_DT: f64 = 0.1;
const PEND_HORIZON: usize = 30;
/// Force bound for the cart actuator.
const PEND_FORCE_MAX: f64 = 20.0;

/// Region over which the certificate constants below were estimated:
/// |z| <= 1, |zdot| <= 1.5, |theta| <= 0.85, |thetadot| <= 2, |force| <= 20
/// — a neighborhood of the upright equilibrium covering the approach and
/// hold phases, where the cloud/local comparison is close and the certified
/// switch actually decides the handover. The swing-up transient from the
/// preset initial condition leaves this region (residual slopes out there
/// reach ~24), so during the transient the certificates are indicative
/// rather than certified; the decision is unaffected because the local
/// plan's own objective dominates its side of the comparison by orders of
/// magnitude until the state is back in the region.
pub const PEND_REGION_STATE: [f64; 4] = [1.0, 1.5, 0.85, 2.0];
pub const PEND_REGION_CONTROL: [f64; 1] = [PEND_FORCE_MAX];
/// Residual Lipschitz constants over the region above (sampled slopes plus
/// headroom; a test re-estimates and checks containment).
const PEND_L_F: [f64; 2] = [7.5, 0.15]; // Euler: (state, control)
const PEND_L_F_RK4: [f64; 2] = [4.5, 0.12];

/// Continuous-time cart-pole state derivative; state (z, zdot, theta,
/// thetadot) with theta measured from the upright equilibrium.
fn pendulum_deriv(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let (zd, th, thd) = (x[1], x[2], x[3]);
    let (s, c) = th.sin_cos();
    let zdd = (u[0] - CART_DAMPING * zd - PEND_MASS * PEND_LEN * thd * thd * s
        + PEND_MASS * GRAVITY * s * c)
        / (CART_MASS + PEND_MASS * s * s);
    let thdd = (zdd * c + GRAVITY * s) / PEND_LEN;
    DVector::from_vec(vec![zd, zdd, thd, thdd])
}

fn pendulum_linearization() -> (DMatrix<f64>, DMatrix<f64>) {
    #[rustfmt::skip]
    let a_c = DMatrix::from_row_slice(4, 4, &[
        0.0, 1.0, 0.0, 0.0,
        0.0, -CART_DAMPING / CART_MASS, PEND_MASS * GRAVITY / CART_MASS, 0.0,
        0.0, 0.0, 0.0, 1.0,
        0.0, -CART_DAMPING / (CART_MASS * PEND_LEN),
             (CART_MASS + PEND_MASS) * GRAVITY / (CART_MASS * PEND_LEN), 0.0,
    ]);
    let b_c = DMatrix::from_column_slice(4, 1, &[
        0.0,
        1.0 / CART_MASS,
        0.0,
        1.0 / (CART_MASS * PEND_LEN),
    ]);
    (a_c, b_c)
}

/// One explicit Runge-Kutta-4 step of `deriv` under a zero-order-hold
/// control.
fn rk4_step(
    deriv: &dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    dt: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    let k1 = deriv(x, u);
    let k2 = deriv(&(x + &k1 * (dt / 2.0)), u);
    let k3 = deriv(&(x + &k2 * (dt / 2.0)), u);
    let k4 = deriv(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Discrete matrices for the linear system `xdot = A x + B u` under the
/// chosen scheme: forward Euler or the fourth-order Taylor polynomial that
/// RK4 reduces to on linear dynamics with held input.
fn discretize_linear(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    dt: f64,
    scheme: IntegrationScheme,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a_c.nrows();
    let eye = DMatrix::identity(n, n);
    match scheme {
        IntegrationScheme::Euler => (&eye + a_c * dt, b_c * dt),
        IntegrationScheme::Rk4 => {
            let a1 = a_c * dt;
            let a2 = &a1 * &a1;
            let a3 = &a2 * &a1;
            let a4 = &a3 * &a1;
            let a_d = &eye + &a1 + &a2 / 2.0 + &a3 / 6.0 + &a4 / 24.0;
            let b_d = (&eye * dt + a_c * (dt * dt / 2.0) + &a2 * (dt / 6.0) + &a3 * (dt / 24.0))
                * b_c;
            (a_d, b_d)
        }
    }
}

/// Square-root-quadratic cost `sqrt(x' Q x) + sqrt(u' R u)` with diagonal
/// weights; Lipschitz in the state with constant `sqrt(max Q)`.
pub fn norm_weighted_cost(
    q: Vec<f64>,
    r: Vec<f64>,
    horizon: usize,
) -> CostSpec {
    let l = q.iter().cloned().fold(0.0f64, f64::max).sqrt();
    let wn = |w: &[f64], v: &DVector<f64>| -> f64 {
        v.iter()
            .zip(w.iter())
            .map(|(vi, wi)| wi * vi * vi)
            .sum::<f64>()
            .sqrt()
    };
    // subgradient of sqrt(v' W v): W v / ||v||_W away from 0, 0 at 0
    let wg = |w: &[f64], v: &DVector<f64>| -> DVector<f64> {
        let n = v
            .iter()
            .zip(w.iter())
            .map(|(vi, wi)| wi * vi * vi)
            .sum::<f64>()
            .sqrt();
        if n == 0.0 {
            DVector::zeros(v.len())
        } else {
            DVector::from_iterator(v.len(), v.iter().zip(w.iter()).map(|(vi, wi)| wi * vi / n))
        }
    };
    let (qs, rs) = (q.clone(), r.clone());
    let phi: StageCostFn =
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| wn(&qs, x) + wn(&rs, u));
    let qt = q.clone();
    let psi: TerminalCostFn = Arc::new(move |x: &DVector<f64>| wn(&qt, x));
    let (qg, rg) = (q.clone(), r.clone());
    let phi_grad: StageGradFn =
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| (wg(&qg, x), wg(&rg, u)));
    let qtg = q;
    let psi_grad: TerminalGradFn = Arc::new(move |x: &DVector<f64>| wg(&qtg, x));
    CostSpec::new(phi, psi, l, l, horizon)
        .expect("weighted cost is well-formed")
        .with_gradients(phi_grad, psi_grad)
}

/// Weighted absolute-value cost `sum q_i |x_i| + sum r_j |u_j|` per stage and
/// `sum qt_i |x_i|` at the end. The Lipschitz constants are the dual norms of
/// the weight vectors, which is exact for this cost family.
pub fn weighted_l1_cost(
    q: Vec<f64>,
    r: Vec<f64>,
    q_term: Vec<f64>,
    norm: NormKind,
    horizon: usize,
) -> crate::Result<CostSpec> {
    for w in q.iter().chain(r.iter()).chain(q_term.iter()) {
        if !(*w >= 0.0) || !w.is_finite() {
            return Err(crate::Error::Config(format!(
                "cost weights must be finite and nonnegative, got {w}"
            )));
        }
    }
    let l_phi = norm.dual_norm(&DVector::from_vec(q.clone()));
    let l_psi = norm.dual_norm(&DVector::from_vec(q_term.clone()));
    let wabs = |w: &[f64], v: &DVector<f64>| -> f64 {
        v.iter().zip(w.iter()).map(|(vi, wi)| wi * vi.abs()).sum()
    };
    let wsgn = |w: &[f64], v: &DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().zip(w.iter()).map(|(vi, wi)| wi * sgn(*vi)))
    };
    let (qs, rs) = (q.clone(), r.clone());
    let phi: StageCostFn =
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| wabs(&qs, x) + wabs(&rs, u));
    let qt = q_term.clone();
    let psi: TerminalCostFn = Arc::new(move |x: &DVector<f64>| wabs(&qt, x));
    let (qg, rg) = (q, r);
    let phi_grad: StageGradFn =
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| (wsgn(&qg, x), wsgn(&rg, u)));
    let qtg = q_term;
    let psi_grad: TerminalGradFn = Arc::new(move |x: &DVector<f64>| wsgn(&qtg, x));
    Ok(CostSpec::new(phi, psi, l_phi, l_psi, horizon)?.with_gradients(phi_grad, psi_grad))
}

/// Inverted pendulum on a cart, regulated to the upright equilibrium from
/// a tilted start. The cloud plans on the discretized nonlinear model; the
/// local layer sees only the linearization about upright.
pub fn example2_pendulum(scheme: IntegrationScheme) -> Experiment {
    let (a_c, b_c) = pendulum_linearization();
    let (a_d, b_d) = discretize_linear(&a_c, &b_c, PEND_DT, scheme);
    let (a_cl, b_cl) = (a_c.clone(), b_c.clone());
    let f: NonlinearFn = match scheme {
        IntegrationScheme::Euler => Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
            (pendulum_deriv(x, u) - &a_cl * x - &b_cl * u) * PEND_DT
        }),
        IntegrationScheme::Rk4 => {
            let (ad, bd) = (a_d.clone(), b_d.clone());
            Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
                rk4_step(&pendulum_deriv, PEND_DT, x, u) - &ad * x - &bd * u
            })
        }
    };
    let [l_f, m_f] = match scheme {
        IntegrationScheme::Euler => PEND_L_F,
        IntegrationScheme::Rk4 => PEND_L_F_RK4,
    };
    let stage = ModelStage::new(a_d, b_d, f, l_f, m_f, NormKind::Two)
        .expect("pendulum stage is well-formed");
    let model = Model::Invariant(SystemModel::new(stage, NormKind::Two));
    let cost = norm_weighted_cost(vec![3.0, 0.4, 3.0, 0.4], vec![1e-5], PEND_HORIZON);

    Experiment {
        name: "example2_pendulum".into(),
        constraints: vec![],
        control_rows: PolytopeConstraint::symmetric_box(0, 1, PEND_FORCE_MAX).rows,
        gauge: UnitBallPolytope::boxed(NormKind::Two, 4, 1),
        disturbance: DisturbanceSpec::new(2e-3, NormKind::Two, 4)
            .expect("pendulum disturbance is well-formed"),
        declared_omega: None,
        x0: DVector::from_vec(vec![0.5, 0.0, 0.6, 0.0]),
        delay: DelaySpec::none(),
        inject_initial_error: None,
        delta0_override: None,
        solver: SolverOptions::default(),
        eta_hat_mode: EtaHatMode::Measured,
        constrained_switch: false,
        force_choice: None,
        model,
        cost,
    }
}

// Path-following parameters.
const VEH_SPEED: f64 = 5.0;
const VEH_WHEELBASE: f64 = 2.7;
const VEH_DT: f64 = 0.05;
const VEH_HORIZON: usize = 60;
/// Reference steering angle profile (radians) over the task.
fn reference_steering(k: usize) -> f64 {
    0.3 * (2.0 * std::f64::consts::PI * k as f64 / VEH_HORIZON as f64).sin()
}

/// Region for the vehicle certificate constants: heading error within
/// VEH_EPHI_MAX, speed offset within VEH_U1_MAX, tan-steering offset
/// within VEH_U2_MAX — the tube around the reference once the initial
/// pose error has been worked off, which is where the cloud/local
/// certificate comparison is close and decides the handover. The approach
/// transient from the preset initial condition exceeds the heading bound
/// (|e_phi| starts at 1.0), so certificates are indicative rather than
/// certified out there; the decision is unaffected because the local
/// plan's own objective and envelope terms dominate its side until the
/// heading error is back inside the tube.
pub const VEH_EPHI_MAX: f64 = 0.3;
pub const VEH_U1_MAX: f64 = 2.0;
pub const VEH_U2_MAX: f64 = 0.5;

/// Path following for a kinematic bicycle in path-error coordinates
/// (longitudinal error, lateral error, heading error), controls (speed
/// offset, tan-steering offset). The reference traces a constant-speed
/// S-curve, so every stage carries its own linearization; the bounds use
/// the horizon-wide worst-case constants.
pub fn example3_vehicle() -> Experiment {
    // Reference heading, integrated with the same scheme and step as the
    // plant so the discrete stage models are exact.
    let mut phi_ref = Vec::with_capacity(VEH_HORIZON);
    let mut phi = 0.0f64;
    for k in 0..VEH_HORIZON {
        phi_ref.push(phi);
        phi += VEH_DT * (VEH_SPEED / VEH_WHEELBASE) * reference_steering(k).tan();
    }

    // Residual slopes over the documented region, scaled by the step:
    // the state slope comes entirely through the heading error (two
    // trigonometric rows), the control slopes through the heading rows
    // and the steering coupling.
    let l_f = VEH_DT * 2.0f64.sqrt() * (VEH_SPEED * VEH_EPHI_MAX + VEH_U1_MAX);
    let m_f = VEH_DT
        * (VEH_EPHI_MAX * VEH_EPHI_MAX
            + (VEH_U1_MAX * VEH_U1_MAX + VEH_U2_MAX * VEH_U2_MAX)
                / (VEH_WHEELBASE * VEH_WHEELBASE))
            .sqrt();

    let stages: Vec<ModelStage> = (0..VEH_HORIZON)
        .map(|k| {
            let pr = phi_ref[k];
            let gr = reference_steering(k).tan();
            let (sp, cp) = pr.sin_cos();
            #[rustfmt::skip]
            let a_c = DMatrix::from_row_slice(3, 3, &[
                0.0, 0.0, -VEH_SPEED * sp,
                0.0, 0.0, VEH_SPEED * cp,
                0.0, 0.0, 0.0,
            ]);
            #[rustfmt::skip]
            let b_c = DMatrix::from_row_slice(3, 2, &[
                cp, 0.0,
                sp, 0.0,
                gr / VEH_WHEELBASE, VEH_SPEED / VEH_WHEELBASE,
            ]);
            let (a_d, b_d) = discretize_linear(&a_c, &b_c, VEH_DT, IntegrationScheme::Euler);
            let f: NonlinearFn = Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
                let (e_phi, u1, u2) = (x[2], u[0], u[1]);
                let v = VEH_SPEED + u1;
                DVector::from_vec(vec![
                    VEH_DT * (((e_phi + pr).cos() - cp) * v + VEH_SPEED * sp * e_phi),
                    VEH_DT * (((e_phi + pr).sin() - sp) * v - VEH_SPEED * cp * e_phi),
                    VEH_DT * u1 * u2 / VEH_WHEELBASE,
                ])
            });
            ModelStage::new(a_d, b_d, f, l_f, m_f, NormKind::Two)
                .expect("vehicle stage is well-formed")
        })
        .collect();
    let model = Model::Varying(
        TimeVaryingModel::new(stages, NormKind::Two).expect("vehicle model is well-formed"),
    );
    let cost = norm_weighted_cost(vec![3.0, 3.0, 0.01], vec![1e-3, 1e-3], VEH_HORIZON);

    let u1_rows = PolytopeConstraint::symmetric_box(0, 2, 1.0).rows;
    let control_rows = u1_rows
        .into_iter()
        .map(|mut hs| {
            // scale each axis bound separately: |u1| <= 2, |u2| <= 0.5
            let bound = if hs.normal[0] != 0.0 { VEH_U1_MAX } else { VEH_U2_MAX };
            hs.offset = bound;
            hs
        })
        .collect();

    Experiment {
        name: "example3_vehicle".into(),
        constraints: vec![],
        control_rows,
        gauge: UnitBallPolytope::boxed(NormKind::Two, 3, 2),
        disturbance: DisturbanceSpec::new(1e-2, NormKind::Two, 3)
            .expect("vehicle disturbance is well-formed"),
        declared_omega: None,
        x0: DVector::from_vec(vec![1.5, -1.0, 1.0]),
        delay: DelaySpec::none(),
        inject_initial_error: None,
        delta0_override: None,
        solver: SolverOptions::default(),
        eta_hat_mode: EtaHatMode::Measured,
        constrained_switch: false,
        force_choice: None,
        model,
        cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{estimate_lipschitz, SampleBox};

    #[test]
    fn scalar_preset_matches_its_published_constants() {
        let exp = example1_scalar();
        assert_eq!(exp.model.gain(), 0.75);
        assert_eq!(exp.model.l_f(), 0.2);
        assert_eq!(exp.cost.horizon, 10);
        let ctx = exp.bound_context().unwrap();
        assert!((ctx.rho() - 0.95).abs() < 1e-15);
        // injected estimate error of norm 0.5
        let inj = exp.inject_initial_error.unwrap();
        assert_eq!(inj[0], -0.5);
    }

    #[test]
    fn scalar_nonlinearity_stays_within_its_declared_slope() {
        let exp = example1_scalar();
        let stage = exp.model.stage(0);
        let est = estimate_lipschitz(
            stage,
            NormKind::Two,
            &SampleBox::symmetric(&[40.0], &[3.0]),
            4000,
            9,
        );
        assert!(est.0 <= 0.2 + 1e-9, "sampled slope {} above declared 0.2", est.0);
        assert!(est.0 > 0.15, "sampling box too small to exercise the slope");
        assert_eq!(est.1, 0.0);
    }

    #[test]
    fn pendulum_linearization_matches_hand_derivation() {
        let (a_c, b_c) = pendulum_linearization();
        #[rustfmt::skip]
        let expect_a = [
            0.0, 1.0, 0.0, 0.0,
            0.0, -10.0, 9.81, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, -20.0, 39.24, 0.0,
        ];
        assert_eq!(a_c.transpose().as_slice(), &expect_a[..]);
        assert_eq!(b_c.as_slice(), &[0.0, 1.0, 0.0, 2.0][..]);
    }

    #[test]
    fn pendulum_residual_vanishes_at_upright_and_respects_declared_slopes() {
        for scheme in [IntegrationScheme::Euler, IntegrationScheme::Rk4] {
            let exp = example2_pendulum(scheme);
            let stage = exp.model.stage(0);
            let z = DVector::zeros(4);
            let fz = (stage.f)(&z, &DVector::zeros(1));
            assert!(fz.iter().all(|v| *v == 0.0));
            let est = estimate_lipschitz(
                stage,
                NormKind::Two,
                &SampleBox::symmetric(&PEND_REGION_STATE, &PEND_REGION_CONTROL),
                4000,
                11,
            );
            assert!(
                est.0 <= stage.l_f && est.1 <= stage.m_f,
                "sampled slopes ({}, {}) exceed declared ({}, {})",
                est.0,
                est.1,
                stage.l_f,
                stage.m_f
            );
        }
    }

    #[test]
    fn rk4_discretization_of_the_linear_part_is_fourth_order() {
        // against the matrix exponential computed by scaling-and-squaring
        let (a_c, b_c) = pendulum_linearization();
        let (a_d, _) = discretize_linear(&a_c, &b_c, PEND_DT, IntegrationScheme::Rk4);
        let exact = (a_c.clone() * PEND_DT).exp();
        let err = (&a_d - &exact).norm();
        // ||A dt|| ~ 4; the O(h^5) Taylor tail of exp is ~ ||A dt||^5 / 5!
        assert!(err < 4.0f64.powi(5) / 120.0, "taylor tail too large: {err}");
        let (a_e, _) = discretize_linear(&a_c, &b_c, PEND_DT, IntegrationScheme::Euler);
        assert!((&a_e - &exact).norm() > err, "rk4 should beat euler");
    }

    #[test]
    fn vehicle_stage_residuals_vanish_on_the_reference_and_respect_slopes() {
        let exp = example3_vehicle();
        for k in [0usize, 17, 59] {
            let stage = exp.model.stage(k);
            let fz = (stage.f)(&DVector::zeros(3), &DVector::zeros(2));
            assert!(fz.iter().all(|v| *v == 0.0));
            let est = estimate_lipschitz(
                stage,
                NormKind::Two,
                &SampleBox::symmetric(
                    &[2.0, 2.0, VEH_EPHI_MAX],
                    &[VEH_U1_MAX, VEH_U2_MAX],
                ),
                3000,
                13 + k as u64,
            );
            assert!(
                est.0 <= stage.l_f + 1e-9 && est.1 <= stage.m_f + 1e-9,
                "stage {k}: sampled slopes ({}, {}) exceed declared ({}, {})",
                est.0,
                est.1,
                stage.l_f,
                stage.m_f
            );
        }
    }

    #[test]
    fn vehicle_stages_follow_the_reference_heading() {
        let exp = example3_vehicle();
        // stage 0 has zero heading: B column 1 is (1, 0, gamma/l)
        let b0 = &exp.model.stage(0).b_mat;
        assert_eq!(b0[(0, 0)], VEH_DT * 1.0);
        assert_eq!(b0[(1, 0)], 0.0);
        // heading varies across stages (the reference actually turns)
        let a_early = exp.model.stage(10).a_mat[(0, 2)];
        let a_late = exp.model.stage(40).a_mat[(0, 2)];
        assert_ne!(a_early, a_late);
    }

    #[test]
    fn degenerate_preset_has_no_model_gap_and_no_noise() {
        let exp = example1_degenerate();
        assert_eq!(exp.model.l_f(), 0.0);
        assert_eq!(exp.disturbance.omega, 0.0);
        assert!(exp.inject_initial_error.is_none());
        let x = DVector::from_element(1, -3.7);
        let u = DVector::from_element(1, 1.1);
        assert_eq!(
            exp.model.step_cloud(0, &x, &u),
            exp.model.step_local(0, &x, &u)
        );
    }
}
