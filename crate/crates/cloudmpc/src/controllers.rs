//! The two plan sources: a one-shot cloud plan on the full nonlinear model
//! and a shrinking-horizon local plan on the linear model, each paired with
//! the worst-case certificates the switching rule consumes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundContext;
use crate::costs::{total_cost, CostSpec};
use crate::error::{Error, Result};
use crate::geometry::{minimal_gauge, support_ball, Halfspace, PolytopeConstraint, UnitBallPolytope};
use crate::models::{Fidelity, Model};
use crate::trajopt::{
    self, LinearRow, RowLabel, SolveStatus, SolverOptions, TrajOptProblem, Var,
};

/// How the cloud forms its estimate of the task's initial state when its
/// solve finishes `steps` ticks after the state it was given was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Use the stale measurement as-is; the deviation bound absorbs the
    /// predicted drift on top of the disturbance accumulation.
    Hold,
    /// Simulate the undisturbed model forward over the delay window.
    Forward,
}

/// Computation-delay description for the cloud solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub steps: usize,
    pub mode: PredictionMode,
    /// Controls assumed to act during the delay window (zeros when absent);
    /// the plant must be driven with the same ones for the bound to hold.
    pub assumed_controls: Option<Vec<Vec<f64>>>,
}

impl DelaySpec {
    pub fn none() -> Self {
        DelaySpec {
            steps: 0,
            mode: PredictionMode::Forward,
            assumed_controls: None,
        }
    }
}

/// Estimates the state at step 0 from a measurement taken `delay.steps`
/// ticks earlier, together with a sound bound on the estimate error.
/// The pre-roll happens before the task clock starts, so the first stage's
/// dynamics apply throughout.
pub fn predict_initial_state(
    model: &Model,
    omega: f64,
    delay: &DelaySpec,
    x_meas: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    if delay.steps == 0 {
        return Ok((x_meas.clone(), 0.0));
    }
    if let Some(us) = &delay.assumed_controls {
        if us.len() < delay.steps {
            return Err(Error::Config(format!(
                "delay of {} steps needs that many assumed controls, got {}",
                delay.steps,
                us.len()
            )));
        }
    }
    let rho = model.gain() + model.l_f();
    let mut x = x_meas.clone();
    let mut delta = 0.0;
    for i in 0..delay.steps {
        let u = match &delay.assumed_controls {
            Some(us) => DVector::from_vec(us[i].clone()),
            None => DVector::zeros(model.control_dim()),
        };
        if u.len() != model.control_dim() {
            return Err(Error::Config("assumed delay control has wrong dimension".into()));
        }
        x = model.step_cloud(0, &x, &u);
        delta = rho * delta + omega;
    }
    match delay.mode {
        PredictionMode::Forward => Ok((x, delta)),
        PredictionMode::Hold => {
            // ||x_0 - x_meas|| <= ||x_0 - x_fwd|| + ||x_fwd - x_meas||
            let drift = model.norm().norm(&(&x - x_meas));
            Ok((x_meas.clone(), delta + drift))
        }
    }
}

/// One-shot planner on the full nonlinear (cloud) model. Constraints are
/// tightened by the deviation bound at their step, so the plan stays valid
/// for the disturbed plant as long as the deviation stays within it.
pub struct CloudPlanner<'a> {
    pub model: &'a Model,
    pub cost: &'a CostSpec,
    pub constraints: &'a [PolytopeConstraint],
    /// Per-step control set rows (empty = unconstrained input).
    pub control_rows: &'a [Halfspace],
    pub ctx: BoundContext,
}

#[derive(Debug, Clone)]
pub struct CloudPlan {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    /// Plan cost from step k to the end, evaluated on the plan itself;
    /// entry 0 is the full objective, entry N the terminal cost.
    pub cost_to_go: Vec<f64>,
    /// Deviation bounds delta_0..delta_N given the initial estimate error.
    pub deltas: Vec<f64>,
    pub solver_status: SolveStatus,
    pub violation: f64,
    pub iterations: usize,
}

impl<'a> CloudPlanner<'a> {
    pub fn plan(
        &self,
        x_hat0: &DVector<f64>,
        delta0: f64,
        opts: &SolverOptions,
    ) -> Result<CloudPlan> {
        let horizon = self.cost.horizon;
        let deltas = self.ctx.delta_sequence(delta0, horizon)?;
        let mut rows = control_bound_rows(self.control_rows, horizon);
        for c in self.constraints {
            if c.time > horizon {
                return Err(Error::Config(format!(
                    "constraint at step {} lies beyond the horizon {horizon}",
                    c.time
                )));
            }
            let tight = c.tighten_by_ball(deltas[c.time], self.model.norm())?;
            for h in &tight.rows {
                rows.push(LinearRow {
                    terms: h
                        .normal
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| **g != 0.0)
                        .map(|(j, g)| (Var::State { idx: c.time, comp: j }, *g))
                        .collect(),
                    rhs: h.offset,
                    label: RowLabel::Constraint { time: c.time },
                });
            }
        }
        let problem = TrajOptProblem {
            model: self.model,
            fidelity: Fidelity::Cloud,
            cost: self.cost,
            t0: 0,
            x0: x_hat0.clone(),
            horizon,
            n_scales: 0,
            rows,
            init_controls: None,
            init_scales: None,
        };
        let sol = trajopt::solve(&problem, opts)?;
        if sol.status == SolveStatus::Infeasible {
            return Err(Error::InfeasibleCloud(format!(
                "no plan satisfies the tightened constraints (worst violation {:.3e})",
                sol.violation
            )));
        }
        // Forward-order tail sums so they are directly comparable with the
        // local plan objectives (identical accumulation order).
        let mut cost_to_go = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            cost_to_go.push(total_cost(self.cost, &sol.states[k..], &sol.controls[k..])?);
        }
        Ok(CloudPlan {
            controls: sol.controls,
            states: sol.states,
            cost_to_go,
            deltas,
            solver_status: sol.status,
            violation: sol.violation,
            iterations: sol.iterations,
        })
    }
}

impl CloudPlan {
    /// Worst-case cost-increase certificate at step k for a deviation of
    /// `eps` between the plan state and the measured state.
    pub fn eta_hat_at(&self, ctx: &BoundContext, k: usize, eps: f64) -> Result<f64> {
        ctx.cloud_cost_bound(eps, k)
    }

    /// Certificate at step k using the a-priori deviation bound delta_k.
    pub fn eta_hat(&self, ctx: &BoundContext, k: usize) -> Result<f64> {
        ctx.cloud_cost_bound(self.deltas[k], k)
    }
}

/// Outcome of one shrinking-horizon local planning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalStatus {
    /// A feasible plan for the current window.
    Fresh,
    /// Current window infeasible: the previous plan's tail is carried and
    /// the plan cost is reported as infinite so it can never be selected.
    FailSafeCarryover,
    /// No feasible plan and nothing to carry; the switch must use the cloud.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct LocalPlan {
    /// Step the plan was made at; controls cover t..horizon.
    pub t: usize,
    pub status: LocalStatus,
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    /// Norms (state, control) of the planned trajectory at each window
    /// step; these feed the worst-case certificates.
    pub envelopes: Vec<(f64, f64)>,
    /// Plan cost (infinite on carryover/infeasible).
    pub j_bar: f64,
    /// Worst-case cost-increase certificate for executing this plan.
    pub eta_bar: f64,
    pub solver_status: SolveStatus,
    pub violation: f64,
    pub iterations: usize,
}

impl LocalPlan {
    /// Worst-case deviation bound between plan and plant at step tau > t.
    pub fn xi_at(&self, ctx: &BoundContext, tau: usize) -> Result<f64> {
        ctx.local_state_bound(&self.envelopes[..tau - self.t], self.t, tau)
    }
}

/// Shrinking-horizon planner on the linear (local) model. Constraints at
/// future steps are tightened by the envelope-based deviation bound, which
/// is linear in the envelope scales and so stays inside the solver.
pub struct LocalPlanner<'a> {
    pub model: &'a Model,
    pub cost: &'a CostSpec,
    pub constraints: &'a [PolytopeConstraint],
    pub control_rows: &'a [Halfspace],
    pub gauge: &'a UnitBallPolytope,
    pub ctx: BoundContext,
}

impl<'a> LocalPlanner<'a> {
    /// Plans from the measured state at step t. `warm` carries the previous
    /// plan's shifted tail (length horizon - t); it seeds the solver, and a
    /// fresh solution replaces it only when meaningfully better, so an
    /// already-optimal tail is returned bit-for-bit. On an infeasible window
    /// the feasible warm tail is kept; if the tail violates too, it is
    /// carried with infinite reported cost.
    pub fn plan(
        &self,
        t: usize,
        x_t: &DVector<f64>,
        warm: Option<&[DVector<f64>]>,
        opts: &SolverOptions,
    ) -> Result<LocalPlan> {
        let horizon = self.cost.horizon;
        if t >= horizon {
            return Err(Error::Config(format!(
                "local planning window at step {t} is empty (horizon {horizon})"
            )));
        }
        let h = horizon - t;
        let l_f = self.model.l_f();
        let m_f = self.model.m_f();
        let needs_scales =
            (l_f > 0.0 || m_f > 0.0) && self.constraints.iter().any(|c| c.time > t);
        let n_scales = if needs_scales { h } else { 0 };
        let rows = self.build_rows(t, h, n_scales)?;

        // Evaluate the carried tail first: rollout, envelopes, residuals.
        let mut warm_eval: Option<(Vec<DVector<f64>>, Vec<(f64, f64)>, f64, f64)> = None;
        let mut warm_scales: Option<Vec<(f64, f64)>> = None;
        if let Some(w) = warm {
            if w.len() != h {
                return Err(Error::Config(format!(
                    "warm start for step {t} needs {h} controls, got {}",
                    w.len()
                )));
            }
            let states = self.model.rollout(Fidelity::Local, t, x_t, w, None)?;
            let envelopes = self.norm_envelopes(&states, w);
            let scales: Vec<(f64, f64)> = if needs_scales {
                let s = self.polytope_scales(&states, w)?;
                warm_scales = Some(s.clone());
                s
            } else {
                vec![]
            };
            let viol = rows
                .iter()
                .map(|r| trajopt::row_residual(r, &states, w, &scales))
                .fold(0.0f64, f64::max);
            let j = total_cost(self.cost, &states, w)?;
            warm_eval = Some((states, envelopes, j, viol));
        }

        let problem = TrajOptProblem {
            model: self.model,
            fidelity: Fidelity::Local,
            cost: self.cost,
            t0: t,
            x0: x_t.clone(),
            horizon: h,
            n_scales,
            rows,
            init_controls: warm.map(|w| w.to_vec()),
            init_scales: warm_scales,
        };
        let sol = trajopt::solve(&problem, opts)?;

        let fresh_ok = sol.status != SolveStatus::Infeasible;
        let warm_ok = warm_eval
            .as_ref()
            .map(|(_, _, _, v)| *v <= opts.feasibility_tol)
            .unwrap_or(false);

        if fresh_ok {
            let meaningful = match (&warm_eval, warm_ok) {
                (Some((_, _, j_w, _)), true) => {
                    sol.objective < j_w - opts.optimality_tol * j_w.abs().max(1.0)
                }
                _ => true,
            };
            if meaningful {
                let envelopes = self.norm_envelopes(&sol.states, &sol.controls);
                let eta_bar = self.ctx.local_cost_bound(&envelopes, t)?;
                return Ok(LocalPlan {
                    t,
                    status: LocalStatus::Fresh,
                    j_bar: sol.objective,
                    eta_bar,
                    controls: sol.controls,
                    states: sol.states,
                    envelopes,
                    solver_status: sol.status,
                    violation: sol.violation,
                    iterations: sol.iterations,
                });
            }
        }

        if warm_ok {
            // Carried tail stays feasible: keep it as the plan.
            let (states, envelopes, j_w, viol) = warm_eval.unwrap();
            let eta_bar = self.ctx.local_cost_bound(&envelopes, t)?;
            return Ok(LocalPlan {
                t,
                status: LocalStatus::Fresh,
                controls: warm.unwrap().to_vec(),
                states,
                envelopes,
                j_bar: j_w,
                eta_bar,
                solver_status: SolveStatus::Optimal,
                violation: viol,
                iterations: sol.iterations,
            });
        }

        if let Some(w) = warm {
            // Window infeasible and the tail violates too: execute the old
            // intentions anyway, but advertise them as unselectable.
            let (states, envelopes, _, viol) = warm_eval.unwrap();
            let eta_bar = self.ctx.local_cost_bound(&envelopes, t)?;
            return Ok(LocalPlan {
                t,
                status: LocalStatus::FailSafeCarryover,
                controls: w.to_vec(),
                states,
                envelopes,
                j_bar: f64::INFINITY,
                eta_bar,
                solver_status: sol.status,
                violation: viol,
                iterations: sol.iterations,
            });
        }

        Ok(LocalPlan {
            t,
            status: LocalStatus::Infeasible,
            controls: vec![],
            states: vec![x_t.clone()],
            envelopes: vec![],
            j_bar: f64::INFINITY,
            eta_bar: f64::INFINITY,
            solver_status: sol.status,
            violation: sol.violation,
            iterations: sol.iterations,
        })
    }

    /// Rows for the window starting at t: per-step control sets, envelope
    /// membership rows, and future constraints tightened by the deviation
    /// bound written as a linear function of the envelope scales.
    fn build_rows(&self, t: usize, h: usize, n_scales: usize) -> Result<Vec<LinearRow>> {
        let l_f = self.model.l_f();
        let m_f = self.model.m_f();
        let rho = self.ctx.rho();
        let omega = self.ctx.omega;
        let norm = self.model.norm();
        let mut rows = control_bound_rows(self.control_rows, h);
        if n_scales > 0 {
            for i in 0..h {
                if l_f > 0.0 {
                    for hs in &self.gauge.state_rows {
                        let mut terms: Vec<(Var, f64)> = hs
                            .normal
                            .iter()
                            .enumerate()
                            .filter(|(_, g)| **g != 0.0)
                            .map(|(j, g)| (Var::State { idx: i, comp: j }, *g))
                            .collect();
                        terms.push((Var::ScaleAlpha { idx: i }, -hs.offset));
                        rows.push(LinearRow {
                            terms,
                            rhs: 0.0,
                            label: RowLabel::StateGauge,
                        });
                    }
                }
                if m_f > 0.0 {
                    for hs in &self.gauge.control_rows {
                        let mut terms: Vec<(Var, f64)> = hs
                            .normal
                            .iter()
                            .enumerate()
                            .filter(|(_, g)| **g != 0.0)
                            .map(|(j, g)| (Var::Control { idx: i, comp: j }, *g))
                            .collect();
                        terms.push((Var::ScaleBeta { idx: i }, -hs.offset));
                        rows.push(LinearRow {
                            terms,
                            rhs: 0.0,
                            label: RowLabel::ControlGauge,
                        });
                    }
                }
            }
        }
        for c in self.constraints {
            if c.time <= t {
                continue; // no longer plannable
            }
            if c.time > self.cost.horizon {
                return Err(Error::Config(format!(
                    "constraint at step {} lies beyond the horizon {}",
                    c.time, self.cost.horizon
                )));
            }
            for hs in &c.rows {
                let dir = DVector::from_vec(hs.normal.clone());
                let h_b = support_ball(norm, &dir)?;
                let mut terms: Vec<(Var, f64)> = hs
                    .normal
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| **g != 0.0)
                    .map(|(j, g)| (Var::State { idx: c.time - t, comp: j }, *g))
                    .collect();
                // deviation envelope: sum_{l=t}^{T-1} rho^{T-l-1} (L_f a_l + M_f b_l + w)
                let mut pw = 1.0;
                let mut omega_sum = 0.0;
                for l in (t..c.time).rev() {
                    omega_sum += pw * omega;
                    if n_scales > 0 {
                        if l_f > 0.0 {
                            terms.push((Var::ScaleAlpha { idx: l - t }, h_b * pw * l_f));
                        }
                        if m_f > 0.0 {
                            terms.push((Var::ScaleBeta { idx: l - t }, h_b * pw * m_f));
                        }
                    }
                    pw *= rho;
                }
                rows.push(LinearRow {
                    terms,
                    rhs: hs.offset - h_b * omega_sum,
                    label: RowLabel::Constraint { time: c.time },
                });
            }
        }
        Ok(rows)
    }

    /// Tightest valid envelope scales for a concrete trajectory (the
    /// certificates may use these instead of the solver's looser decision
    /// values: smaller envelopes only shrink the deviation bound).
    /// Per-step (state, control) norms of a plan; the certificates bound
    /// the nonlinearity through `L_f ||x|| + M_f ||u||` at each step.
    fn norm_envelopes(
        &self,
        states: &[DVector<f64>],
        controls: &[DVector<f64>],
    ) -> Vec<(f64, f64)> {
        let norm = self.model.norm();
        controls
            .iter()
            .zip(states.iter())
            .map(|(u, x)| (norm.norm(x), norm.norm(u)))
            .collect()
    }

    /// Minimal polyhedral scales of a plan: the smallest alpha/beta that
    /// satisfy the envelope membership rows, used to seed and check the
    /// solver's auxiliary variables. Never below the true norms.
    fn polytope_scales(
        &self,
        states: &[DVector<f64>],
        controls: &[DVector<f64>],
    ) -> Result<Vec<(f64, f64)>> {
        controls
            .iter()
            .zip(states.iter())
            .map(|(u, x)| {
                Ok((
                    minimal_gauge(&self.gauge.state_rows, x)?,
                    minimal_gauge(&self.gauge.control_rows, u)?,
                ))
            })
            .collect()
    }
}

fn control_bound_rows(control_rows: &[Halfspace], h: usize) -> Vec<LinearRow> {
    let mut rows = Vec::with_capacity(h * control_rows.len());
    for i in 0..h {
        for hs in control_rows {
            rows.push(LinearRow {
                terms: hs
                    .normal
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| **g != 0.0)
                    .map(|(j, g)| (Var::Control { idx: i, comp: j }, *g))
                    .collect(),
                rhs: hs.offset,
                label: RowLabel::ControlBound,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelStage, NonlinearFn, SystemModel};
    use crate::norms::NormKind;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    /// x+ = 0.75 x + u + (0.1 x - sin(0.1 x)), declared state gain 0.2.
    fn bench_model() -> Model {
        let f: NonlinearFn = Arc::new(|x: &DVector<f64>, _u: &DVector<f64>| {
            DVector::from_element(1, 0.1 * x[0] - (0.1 * x[0]).sin())
        });
        let stage = ModelStage::new(
            DMatrix::from_element(1, 1, 0.75),
            DMatrix::from_element(1, 1, 1.0),
            f,
            0.2,
            0.0,
            NormKind::Two,
        )
        .unwrap();
        Model::Invariant(SystemModel::new(stage, NormKind::Two))
    }

    fn bench_cost() -> CostSpec {
        let phi = Arc::new(|x: &DVector<f64>, u: &DVector<f64>| {
            x[0].abs() + 5.0f64.sqrt() * u[0].abs()
        });
        let psi = Arc::new(|x: &DVector<f64>| 2.0f64.sqrt() * x[0].abs());
        CostSpec::new(phi, psi, 1.0, 2.0f64.sqrt(), 10).unwrap()
    }

    fn bench_pieces() -> (Vec<PolytopeConstraint>, Vec<Halfspace>, UnitBallPolytope) {
        let constraints = vec![PolytopeConstraint::symmetric_box(10, 1, 2.5)];
        let control_rows = vec![
            Halfspace::new(vec![1.0], 3.0),
            Halfspace::new(vec![-1.0], 3.0),
        ];
        let gauge = UnitBallPolytope::boxed(NormKind::Two, 1, 1);
        (constraints, control_rows, gauge)
    }

    #[test]
    fn forward_prediction_steps_the_undisturbed_model() {
        let model = bench_model();
        let delay = DelaySpec {
            steps: 1,
            mode: PredictionMode::Forward,
            assumed_controls: None,
        };
        let (x0, d0) = predict_initial_state(&model, 0.02, &delay, &v1(-10.0)).unwrap();
        assert!((x0[0] - (-7.658529015192103)).abs() < 1e-12);
        assert_eq!(d0, 0.02);
    }

    #[test]
    fn hold_prediction_widens_the_bound_by_the_predicted_drift() {
        let model = bench_model();
        let delay = DelaySpec {
            steps: 1,
            mode: PredictionMode::Hold,
            assumed_controls: None,
        };
        let (x0, d0) = predict_initial_state(&model, 0.02, &delay, &v1(-10.0)).unwrap();
        assert_eq!(x0[0], -10.0);
        // drift |x_fwd - x_meas| = |-7.658529 + 10| plus one step of noise
        assert!((d0 - (2.341470984807897 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn zero_delay_is_exact() {
        let model = bench_model();
        let (x0, d0) =
            predict_initial_state(&model, 0.02, &DelaySpec::none(), &v1(-3.0)).unwrap();
        assert_eq!(x0[0], -3.0);
        assert_eq!(d0, 0.0);
    }

    #[test]
    fn cloud_plan_certificates_and_tightening() {
        let model = bench_model();
        let cost = bench_cost();
        let (constraints, control_rows, _) = bench_pieces();
        let ctx = BoundContext::new(&model, &cost, 0.02).unwrap();
        let planner = CloudPlanner {
            model: &model,
            cost: &cost,
            constraints: &constraints,
            control_rows: &control_rows,
            ctx,
        };
        let plan = planner.plan(&v1(-10.5), 0.5, &SolverOptions::default()).unwrap();
        assert_ne!(plan.solver_status, SolveStatus::Infeasible);
        // tail sums telescope: difference of consecutive entries is a stage cost
        for k in 0..10 {
            let stage = (cost.phi)(&plan.states[k], &plan.controls[k]);
            assert!((plan.cost_to_go[k] - plan.cost_to_go[k + 1] - stage).abs() < 1e-9);
        }
        // terminal satisfied with the deviation margin, not just nominally
        let d10 = plan.deltas[10];
        assert!((d10 - 0.45987369392719995).abs() < 5e-4);
        assert!(plan.states[10][0].abs() <= 2.5 - d10 + 1e-6);
        // bound sequence matches the recursion oracle
        assert_eq!(plan.deltas, ctx.delta_sequence(0.5, 10).unwrap());
        // certificate at k=0 equals the worst-case cost bound at delta_0
        assert_eq!(
            plan.eta_hat(&ctx, 0).unwrap(),
            ctx.cloud_cost_bound(0.5, 0).unwrap()
        );
    }

    #[test]
    fn unreachable_terminal_set_is_a_hard_error() {
        let model = bench_model();
        let cost = {
            let phi = Arc::new(|x: &DVector<f64>, u: &DVector<f64>| {
                x[0].abs() + 5.0f64.sqrt() * u[0].abs()
            });
            let psi = Arc::new(|x: &DVector<f64>| 2.0f64.sqrt() * x[0].abs());
            CostSpec::new(phi, psi, 1.0, 2.0f64.sqrt(), 1).unwrap()
        };
        let constraints = vec![PolytopeConstraint::symmetric_box(1, 1, 2.5)];
        let control_rows = vec![
            Halfspace::new(vec![1.0], 3.0),
            Halfspace::new(vec![-1.0], 3.0),
        ];
        let ctx = BoundContext::new(&model, &cost, 0.02).unwrap();
        let planner = CloudPlanner {
            model: &model,
            cost: &cost,
            constraints: &constraints,
            control_rows: &control_rows,
            ctx,
        };
        // one step from -10 reaches at best about -4.66: |x_1| <= 2.5 is impossible
        let err = planner
            .plan(&v1(-10.0), 0.0, &SolverOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::InfeasibleCloud(_)));
    }

    #[test]
    fn local_plan_certificates_are_tight_and_consistent() {
        let model = bench_model();
        let cost = bench_cost();
        let (constraints, control_rows, gauge) = bench_pieces();
        let ctx = BoundContext::new(&model, &cost, 0.02).unwrap();
        let planner = LocalPlanner {
            model: &model,
            cost: &cost,
            constraints: &constraints,
            control_rows: &control_rows,
            gauge: &gauge,
            ctx,
        };
        let plan = planner.plan(0, &v1(-10.0), None, &SolverOptions::default()).unwrap();
        assert_eq!(plan.status, LocalStatus::Fresh);
        assert!(plan.violation <= 1e-6);
        // envelopes are the plan's own magnitudes in one dimension
        for (i, (a, b)) in plan.envelopes.iter().enumerate() {
            assert!((a - plan.states[i][0].abs()).abs() < 1e-12);
            assert!((b - plan.controls[i][0].abs()).abs() < 1e-12);
        }
        // the terminal deviation bound certifies the tightened constraint
        let xi = plan.xi_at(&ctx, 10).unwrap();
        assert!(plan.states[10][0].abs() + xi <= 2.5 + 1e-5);
        // certificate equals the bound recomputed from the envelopes
        assert_eq!(plan.eta_bar, ctx.local_cost_bound(&plan.envelopes, 0).unwrap());
        // plan cost is consistent with a fresh evaluation
        let j = total_cost(&cost, &plan.states, &plan.controls).unwrap();
        assert!((plan.j_bar - j).abs() < 1e-12);
    }

    #[test]
    fn undisturbed_replan_returns_the_carried_tail_bit_for_bit() {
        let model = bench_model();
        let cost = bench_cost();
        let (constraints, control_rows, gauge) = bench_pieces();
        let ctx = BoundContext::new(&model, &cost, 0.02).unwrap();
        let planner = LocalPlanner {
            model: &model,
            cost: &cost,
            constraints: &constraints,
            control_rows: &control_rows,
            gauge: &gauge,
            ctx,
        };
        let opts = SolverOptions::default();
        let p0 = planner.plan(0, &v1(-10.0), None, &opts).unwrap();
        // step the local model exactly as planned, then re-plan from there
        let x1 = model.step_local(0, &v1(-10.0), &p0.controls[0]);
        let tail: Vec<_> = p0.controls[1..].to_vec();
        let p1 = planner.plan(1, &x1, Some(&tail), &opts).unwrap();
        assert_eq!(p1.status, LocalStatus::Fresh);
        for (a, b) in p1.controls.iter().zip(tail.iter()) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }

    #[test]
    fn infeasible_window_keeps_old_intentions_at_infinite_cost() {
        let model = bench_model();
        // one-step window that cannot meet |x_1| <= 0.1 from -10
        let cost = {
            let phi = Arc::new(|x: &DVector<f64>, u: &DVector<f64>| {
                x[0].abs() + 5.0f64.sqrt() * u[0].abs()
            });
            let psi = Arc::new(|x: &DVector<f64>| 2.0f64.sqrt() * x[0].abs());
            CostSpec::new(phi, psi, 1.0, 2.0f64.sqrt(), 1).unwrap()
        };
        let constraints = vec![PolytopeConstraint::symmetric_box(1, 1, 0.1)];
        let control_rows = vec![
            Halfspace::new(vec![1.0], 3.0),
            Halfspace::new(vec![-1.0], 3.0),
        ];
        let gauge = UnitBallPolytope::boxed(NormKind::Two, 1, 1);
        let ctx = BoundContext::new(&model, &cost, 0.02).unwrap();
        let planner = LocalPlanner {
            model: &model,
            cost: &cost,
            constraints: &constraints,
            control_rows: &control_rows,
            gauge: &gauge,
            ctx,
        };
        let opts = SolverOptions::default();
        let carried = vec![v1(2.0)];
        let plan = planner.plan(0, &v1(-10.0), Some(&carried), &opts).unwrap();
        assert_eq!(plan.status, LocalStatus::FailSafeCarryover);
        assert_eq!(plan.controls[0][0], 2.0);
        assert!(plan.j_bar.is_infinite());
        assert!(plan.eta_bar.is_finite());

        let bare = planner.plan(0, &v1(-10.0), None, &opts).unwrap();
        assert_eq!(bare.status, LocalStatus::Infeasible);
        assert!(bare.controls.is_empty());
        assert!(bare.j_bar.is_infinite() && bare.eta_bar.is_infinite());
    }
}
