//! Closed-loop experiments: one plant, one disturbance stream, and a
//! controller that is the cloud plan, the local planner, or their fusion.
//! Also the hindsight oracle and the Monte-Carlo bound audits.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundContext;
use crate::controllers::{
    predict_initial_state, CloudPlan, CloudPlanner, DelaySpec, LocalPlan, LocalPlanner,
    LocalStatus,
};
use crate::costs::{total_cost, CostSpec};
use crate::error::{Error, Result};
use crate::fusion::{optimal_switch_oracle, switch_constrained, switch_unconstrained, Choice, SwitchDecision};
use crate::geometry::{Halfspace, PolytopeConstraint, UnitBallPolytope};
use crate::models::{DisturbanceSpec, Model};
use crate::trajopt::SolverOptions;

/// How the cloud certificate is evaluated each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaHatMode {
    /// At the measured deviation from the cloud trajectory (tighter).
    Measured,
    /// At the a-priori deviation bound delta_t (no measurement needed).
    AprioriBound,
}

/// A fully specified experiment; presets construct these, the CLI builds
/// them from JSON.
pub struct Experiment {
    pub name: String,
    pub model: Model,
    pub cost: CostSpec,
    pub constraints: Vec<PolytopeConstraint>,
    pub control_rows: Vec<Halfspace>,
    pub gauge: UnitBallPolytope,
    pub disturbance: DisturbanceSpec,
    /// Disturbance magnitude the certificates assume; defaults to the
    /// sampled magnitude. Setting it lower deliberately breaks soundness
    /// (used to prove the audits can fail).
    pub declared_omega: Option<f64>,
    pub x0: DVector<f64>,
    pub delay: DelaySpec,
    /// Test hook: the cloud plans from `x0 + inject` instead of predicting
    /// through the delay window.
    pub inject_initial_error: Option<DVector<f64>>,
    /// Initial deviation bound; defaults to the injected error's norm, or
    /// to the delay prediction's bound, or zero.
    pub delta0_override: Option<f64>,
    pub solver: SolverOptions,
    pub eta_hat_mode: EtaHatMode,
    /// Gate the cloud on the measured deviation staying within delta_t.
    pub constrained_switch: bool,
    /// Overrides the switch outcome at every step. Forcing cloud must
    /// reproduce the cloud-only run exactly, and likewise for local: the
    /// degeneracy property tests pin this down.
    pub force_choice: Option<Choice>,
}

impl Experiment {
    pub fn bound_context(&self) -> Result<BoundContext> {
        BoundContext::new(
            &self.model,
            &self.cost,
            self.declared_omega.unwrap_or(self.disturbance.omega),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Fused,
    CloudOnly,
    LocalOnly,
}

/// One step of a closed-loop run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub stage_cost: f64,
    /// Certificate comparison (fused runs only).
    pub decision: Option<SwitchDecision>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleRecord {
    pub t: usize,
    /// Hindsight cost of executing the remaining cloud plan from here.
    pub j_cloud: f64,
    /// Hindsight cost of executing this step's local plan from here.
    pub j_local: f64,
    pub choice: Choice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTrace {
    pub name: String,
    pub mode: RunMode,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub x_final: Vec<f64>,
    pub terminal_cost: f64,
    /// Realized cost of the whole run (stage sums plus terminal).
    pub actual_cost: f64,
    /// Mean state norm over t = 0..=N.
    pub mean_regulation_error: f64,
    /// Realized state-constraint satisfaction at each constrained step.
    pub constraints_met: Vec<(usize, bool)>,
    /// Fraction of steps where the fused choice matched the hindsight
    /// oracle (fused runs only).
    pub oracle_match: Option<f64>,
}

/// A run plus everything needed to audit it after the fact.
pub struct RunArtifacts {
    pub trace: SimTrace,
    pub cloud: CloudPlan,
    /// Per-step local plans (empty for cloud-only runs).
    pub locals: Vec<LocalPlan>,
    pub oracle: Vec<OracleRecord>,
}

/// Runs one closed-loop experiment. The disturbance stream is drawn from
/// the seed before control starts, so every mode sees identical noise.
pub fn run_closed_loop(exp: &Experiment, mode: RunMode, seed: u64) -> Result<RunArtifacts> {
    let model = &exp.model;
    let horizon = exp.cost.horizon;
    let norm = model.norm();
    let ctx = exp.bound_context()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Disturbances: delay pre-roll first, then one per control step.
    let preroll: Vec<DVector<f64>> = (0..exp.delay.steps)
        .map(|_| exp.disturbance.sample(&mut rng))
        .collect();
    let ws: Vec<DVector<f64>> = (0..horizon)
        .map(|_| exp.disturbance.sample(&mut rng))
        .collect();

    // Initial state of the plant and of the cloud's estimate.
    let (x_start, x_hat0, delta0) = if let Some(inject) = &exp.inject_initial_error {
        if exp.delay.steps > 0 {
            return Err(Error::Config(
                "injected initial error and a delay window cannot be combined".into(),
            ));
        }
        let d0 = exp.delta0_override.unwrap_or_else(|| norm.norm(inject));
        (exp.x0.clone(), &exp.x0 + inject, d0)
    } else if exp.delay.steps > 0 {
        let (x_hat, d_pred) = predict_initial_state(
            model,
            exp.declared_omega.unwrap_or(exp.disturbance.omega),
            &exp.delay,
            &exp.x0,
        )?;
        // plant runs through the delay window under the assumed controls
        let mut x = exp.x0.clone();
        for (i, w) in preroll.iter().enumerate() {
            let u = match &exp.delay.assumed_controls {
                Some(us) => DVector::from_vec(us[i].clone()),
                None => DVector::zeros(model.control_dim()),
            };
            x = model.step_true(0, &x, &u, w);
        }
        (x, x_hat, exp.delta0_override.unwrap_or(d_pred))
    } else {
        (exp.x0.clone(), exp.x0.clone(), exp.delta0_override.unwrap_or(0.0))
    };

    let cloud_planner = CloudPlanner {
        model,
        cost: &exp.cost,
        constraints: &exp.constraints,
        control_rows: &exp.control_rows,
        ctx,
    };
    let cloud = cloud_planner.plan(&x_hat0, delta0, &exp.solver)?;
    let local_planner = LocalPlanner {
        model,
        cost: &exp.cost,
        constraints: &exp.constraints,
        control_rows: &exp.control_rows,
        gauge: &exp.gauge,
        ctx,
    };

    let mut x = x_start;
    let mut xs: Vec<DVector<f64>> = vec![x.clone()];
    let mut steps: Vec<StepRecord> = Vec::with_capacity(horizon);
    let mut locals: Vec<LocalPlan> = Vec::new();
    let mut actual_cost = 0.0;
    for t in 0..horizon {
        let eps = norm.norm(&(&cloud.states[t] - &x));
        let local = if mode == RunMode::CloudOnly {
            None
        } else {
            let warm_tail: Option<Vec<DVector<f64>>> = if exp.solver.warm_start {
                locals.last().map(|p| {
                    if p.controls.is_empty() {
                        cloud.controls[t..].to_vec()
                    } else {
                        p.controls[1..].to_vec()
                    }
                })
            } else {
                None
            };
            Some(local_planner.plan(t, &x, warm_tail.as_deref(), &exp.solver)?)
        };

        let decision = local.as_ref().map(|p| {
            let j_hat = cloud.cost_to_go[t];
            let eta_hat = match exp.eta_hat_mode {
                EtaHatMode::Measured => ctx.cloud_cost_bound(eps, t).unwrap_or(f64::INFINITY),
                EtaHatMode::AprioriBound => {
                    ctx.cloud_cost_bound(cloud.deltas[t], t).unwrap_or(f64::INFINITY)
                }
            };
            let ruled = if exp.constrained_switch {
                switch_constrained(j_hat, eta_hat, p.j_bar, p.eta_bar, eps, cloud.deltas[t], p.status)
            } else {
                switch_unconstrained(j_hat, eta_hat, p.j_bar, p.eta_bar)
            };
            let choice = exp.force_choice.unwrap_or(ruled);
            SwitchDecision {
                t,
                choice,
                j_hat,
                eta_hat,
                j_bar: p.j_bar,
                eta_bar: p.eta_bar,
                eps,
                delta: cloud.deltas[t],
                trusted: eps <= cloud.deltas[t],
                local_status: p.status,
            }
        });

        let u = match mode {
            RunMode::CloudOnly => cloud.controls[t].clone(),
            RunMode::LocalOnly => {
                let p = local.as_ref().unwrap();
                match p.controls.first() {
                    Some(u) => u.clone(),
                    None => {
                        return Err(Error::Numeric(format!(
                            "local baseline has no applicable control at step {t}"
                        )))
                    }
                }
            }
            RunMode::Fused => match decision.as_ref().unwrap().choice {
                Choice::Cloud => cloud.controls[t].clone(),
                Choice::Local => local.as_ref().unwrap().controls[0].clone(),
            },
        };

        let stage_cost = (exp.cost.phi)(&x, &u);
        actual_cost += stage_cost;
        steps.push(StepRecord {
            t,
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            w: ws[t].iter().copied().collect(),
            stage_cost,
            decision: if mode == RunMode::Fused { decision } else { None },
        });
        x = model.step_true(t, &x, &u, &ws[t]);
        xs.push(x.clone());
        if let Some(p) = local {
            locals.push(p);
        }
    }
    let terminal_cost = (exp.cost.psi)(&x);
    actual_cost += terminal_cost;

    // Hindsight oracle over the logged run.
    let mut oracle = Vec::new();
    if mode != RunMode::CloudOnly {
        for (t, plan) in locals.iter().enumerate() {
            let x_t = &xs[t];
            let j_cloud =
                counterfactual_cost(model, &exp.cost, t, x_t, &cloud.controls[t..], &ws[t..])?;
            let j_local = if plan.controls.is_empty() {
                f64::INFINITY
            } else {
                counterfactual_cost(model, &exp.cost, t, x_t, &plan.controls, &ws[t..])?
            };
            oracle.push(OracleRecord {
                t,
                j_cloud,
                j_local,
                choice: optimal_switch_oracle(j_cloud, j_local),
            });
        }
    }
    let oracle_match = if mode == RunMode::Fused {
        let hits = steps
            .iter()
            .zip(oracle.iter())
            .filter(|(s, o)| s.decision.as_ref().unwrap().choice == o.choice)
            .count();
        Some(hits as f64 / horizon as f64)
    } else {
        None
    };

    let mean_regulation_error =
        xs.iter().map(|x| norm.norm(x)).sum::<f64>() / (horizon + 1) as f64;
    let constraints_met = exp
        .constraints
        .iter()
        .map(|c| (c.time, c.contains(&xs[c.time])))
        .collect();

    Ok(RunArtifacts {
        trace: SimTrace {
            name: exp.name.clone(),
            mode,
            seed,
            steps,
            x_final: x.iter().copied().collect(),
            terminal_cost,
            actual_cost,
            mean_regulation_error,
            constraints_met,
            oracle_match,
        },
        cloud,
        locals,
        oracle,
    })
}

/// Cost of executing `controls` on the disturbed plant from `x_t` at step
/// `t` under the given disturbances (hindsight evaluation).
pub fn counterfactual_cost(
    model: &Model,
    cost: &CostSpec,
    t: usize,
    x_t: &DVector<f64>,
    controls: &[DVector<f64>],
    ws: &[DVector<f64>],
) -> Result<f64> {
    if controls.len() + t != cost.horizon {
        return Err(Error::Config(format!(
            "counterfactual from step {t} needs {} controls, got {}",
            cost.horizon - t,
            controls.len()
        )));
    }
    let states = model.rollout(
        crate::models::Fidelity::True,
        t,
        x_t,
        controls,
        Some(&ws[..controls.len()]),
    )?;
    total_cost(cost, &states, controls)
}

/// Aggregate of a batch of runs of one mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub mode: RunMode,
    pub runs: usize,
    pub mean_cost: f64,
    pub mean_regulation_error: f64,
    pub mean_oracle_match: Option<f64>,
    /// Runs in which every constrained step was satisfied.
    pub constraint_satisfaction_rate: f64,
}

pub fn summarize(mode: RunMode, traces: &[SimTrace]) -> BatchSummary {
    let runs = traces.len();
    let mean = |f: &dyn Fn(&SimTrace) -> f64| -> f64 {
        traces.iter().map(|t| f(t)).sum::<f64>() / runs.max(1) as f64
    };
    let matches: Vec<f64> = traces.iter().filter_map(|t| t.oracle_match).collect();
    BatchSummary {
        mode,
        runs,
        mean_cost: mean(&|t| t.actual_cost),
        mean_regulation_error: mean(&|t| t.mean_regulation_error),
        mean_oracle_match: if matches.is_empty() {
            None
        } else {
            Some(matches.iter().sum::<f64>() / matches.len() as f64)
        },
        constraint_satisfaction_rate: mean(&|t| {
            if t.constraints_met.iter().all(|(_, ok)| *ok) {
                1.0
            } else {
                0.0
            }
        }),
    }
}

/// Monte-Carlo audit of every worst-case certificate against hindsight
/// executions. A sound configuration must produce zero violations; a
/// configuration that understates the disturbance must produce some.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundAuditReport {
    pub trials: usize,
    pub checks: usize,
    pub violations: usize,
    /// Largest realized/bound ratio seen (1.0 means a bound held exactly).
    pub worst_ratio: f64,
    /// Human-readable descriptions of the first few violations.
    pub examples: Vec<String>,
}

pub fn verify_bounds(exp: &Experiment, trials: usize, seed0: u64) -> Result<BoundAuditReport> {
    let model = &exp.model;
    let norm = model.norm();
    let ctx = exp.bound_context()?;
    let mut report = BoundAuditReport {
        trials,
        checks: 0,
        violations: 0,
        worst_ratio: 0.0,
        examples: vec![],
    };
    let tol = 1e-9;
    let register = |desc: &str, seed: u64, t: usize, actual: f64, bound: f64, rep: &mut BoundAuditReport| {
        rep.checks += 1;
        if bound > 0.0 {
            rep.worst_ratio = rep.worst_ratio.max(actual / bound);
        }
        if actual > bound + tol * (1.0 + bound.abs()) {
            rep.violations += 1;
            if rep.examples.len() < 8 {
                rep.examples.push(format!(
                    "{desc} (seed {seed}, step {t}): {actual:.6e} > {bound:.6e}"
                ));
            }
        }
    };

    for i in 0..trials {
        let seed = seed0.wrapping_add(i as u64);
        let art = run_closed_loop(exp, RunMode::Fused, seed)?;
        let horizon = exp.cost.horizon;
        let ws: Vec<DVector<f64>> = art
            .trace
            .steps
            .iter()
            .map(|s| DVector::from_vec(s.w.clone()))
            .collect();
        let x0 = DVector::from_vec(art.trace.steps[0].x.clone());

        // Executing the cloud plan end-to-end: state deviation stays within
        // the growth bound from the measured initial deviation, and the
        // realized tail cost stays within each certificate.
        let cloud_exec = model.rollout(
            crate::models::Fidelity::True,
            0,
            &x0,
            &cloud_controls(&art),
            Some(&ws),
        )?;
        let eps0 = norm.norm(&(&art.cloud.states[0] - &x0));
        for tau in 1..=horizon {
            let dev = norm.norm(&(&art.cloud.states[tau] - &cloud_exec[tau]));
            let bound = ctx.cloud_state_bound(eps0, 0, tau)?;
            register("cloud deviation growth", seed, tau, dev, bound, &mut report);
            if eps0 <= art.cloud.deltas[0] {
                register(
                    "cloud deviation vs a-priori sequence",
                    seed,
                    tau,
                    dev,
                    art.cloud.deltas[tau],
                    &mut report,
                );
            }
        }
        for k in 0..horizon {
            let eps_k = norm.norm(&(&art.cloud.states[k] - &cloud_exec[k]));
            let realized =
                total_cost(&exp.cost, &cloud_exec[k..], &art.cloud.controls[k..])?;
            let bound = art.cloud.cost_to_go[k] + ctx.cloud_cost_bound(eps_k, k)?;
            register("cloud tail cost certificate", seed, k, realized, bound, &mut report);
        }

        // Executing each step's local plan from its own start state: the
        // deviation stays within the envelope bound and the realized cost
        // within the plan certificate.
        for plan in &art.locals {
            if plan.controls.is_empty() {
                continue;
            }
            let t = plan.t;
            let x_t = DVector::from_vec(art.trace.steps[t].x.clone());
            let exec = model.rollout(
                crate::models::Fidelity::True,
                t,
                &x_t,
                &plan.controls,
                Some(&ws[t..]),
            )?;
            for tau in t + 1..=horizon {
                let dev = norm.norm(&(&plan.states[tau - t] - &exec[tau - t]));
                let bound = plan.xi_at(&ctx, tau)?;
                register("local deviation envelope", seed, tau, dev, bound, &mut report);
            }
            if plan.status == LocalStatus::Fresh {
                let realized = total_cost(&exp.cost, &exec, &plan.controls)?;
                register(
                    "local plan cost certificate",
                    seed,
                    t,
                    realized,
                    plan.j_bar + plan.eta_bar,
                    &mut report,
                );
            }
        }
    }
    Ok(report)
}

fn cloud_controls(art: &RunArtifacts) -> Vec<DVector<f64>> {
    art.cloud.controls.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn same_seed_reproduces_the_run_bit_for_bit() {
        let exp = presets::example1_scalar();
        let a = run_closed_loop(&exp, RunMode::Fused, 7).unwrap();
        let b = run_closed_loop(&exp, RunMode::Fused, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a.trace).unwrap(),
            serde_json::to_string(&b.trace).unwrap()
        );
    }

    #[test]
    fn disturbance_stream_is_mode_independent() {
        let exp = presets::example1_scalar();
        let a = run_closed_loop(&exp, RunMode::Fused, 3).unwrap();
        let b = run_closed_loop(&exp, RunMode::CloudOnly, 3).unwrap();
        let c = run_closed_loop(&exp, RunMode::LocalOnly, 3).unwrap();
        for t in 0..exp.cost.horizon {
            assert_eq!(a.trace.steps[t].w, b.trace.steps[t].w);
            assert_eq!(a.trace.steps[t].w, c.trace.steps[t].w);
        }
    }

    #[test]
    fn forcing_the_switch_collapses_fused_onto_the_single_mode_runs() {
        for seed in [0u64, 3, 11] {
            for (forced, solo) in [
                (Choice::Cloud, RunMode::CloudOnly),
                (Choice::Local, RunMode::LocalOnly),
            ] {
                let mut exp = presets::example1_scalar();
                exp.force_choice = Some(forced);
                let fused = run_closed_loop(&exp, RunMode::Fused, seed).unwrap();
                let single = run_closed_loop(&exp, solo, seed).unwrap();
                for (a, b) in fused.trace.steps.iter().zip(&single.trace.steps) {
                    assert_eq!(a.x, b.x, "seed {seed} forced {forced:?} t {}", a.t);
                    assert_eq!(a.u, b.u);
                    assert_eq!(a.w, b.w);
                    assert_eq!(a.stage_cost, b.stage_cost);
                }
                assert_eq!(fused.trace.x_final, single.trace.x_final);
                assert_eq!(fused.trace.actual_cost, single.trace.actual_cost);
            }
        }
    }

    #[test]
    fn logged_steps_replay_exactly() {
        let exp = presets::example1_scalar();
        let art = run_closed_loop(&exp, RunMode::Fused, 11).unwrap();
        let mut x = DVector::from_vec(art.trace.steps[0].x.clone());
        for s in &art.trace.steps {
            assert_eq!(x.as_slice(), s.x.as_slice());
            x = exp.model.step_true(
                s.t,
                &x,
                &DVector::from_vec(s.u.clone()),
                &DVector::from_vec(s.w.clone()),
            );
        }
        assert_eq!(x.as_slice(), art.trace.x_final.as_slice());
    }

    #[test]
    fn realized_cost_telescopes_through_counterfactuals() {
        let exp = presets::example1_scalar();
        let art = run_closed_loop(&exp, RunMode::Fused, 19).unwrap();
        // executing the logged controls from the logged state equals the
        // realized suffix cost
        let t = 4;
        let ws: Vec<DVector<f64>> = art.trace.steps[t..]
            .iter()
            .map(|s| DVector::from_vec(s.w.clone()))
            .collect();
        let us: Vec<DVector<f64>> = art.trace.steps[t..]
            .iter()
            .map(|s| DVector::from_vec(s.u.clone()))
            .collect();
        let x_t = DVector::from_vec(art.trace.steps[t].x.clone());
        let j = counterfactual_cost(&exp.model, &exp.cost, t, &x_t, &us, &ws).unwrap();
        let suffix: f64 = art.trace.steps[t..].iter().map(|s| s.stage_cost).sum::<f64>()
            + art.trace.terminal_cost;
        assert!((j - suffix).abs() < 1e-9, "{j} vs {suffix}");
    }

    #[test]
    fn certificates_bound_their_hindsight_costs() {
        // the defining invariant of the switching rule's inputs
        let exp = presets::example1_scalar();
        for seed in 0..5u64 {
            let art = run_closed_loop(&exp, RunMode::Fused, seed).unwrap();
            for (o, s) in art.oracle.iter().zip(art.trace.steps.iter()) {
                let d = s.decision.as_ref().unwrap();
                assert!(
                    o.j_cloud <= d.j_hat + d.eta_hat + 1e-9,
                    "seed {seed} t {}: cloud hindsight {} above certificate {}",
                    o.t,
                    o.j_cloud,
                    d.j_hat + d.eta_hat
                );
                if d.j_bar.is_finite() {
                    assert!(
                        o.j_local <= d.j_bar + d.eta_bar + 1e-9,
                        "seed {seed} t {}: local hindsight {} above certificate {}",
                        o.t,
                        o.j_local,
                        d.j_bar + d.eta_bar
                    );
                }
            }
        }
    }

    #[test]
    fn bound_audit_is_clean_when_sound_and_dirty_when_lied_to() {
        let exp = presets::example1_scalar();
        let clean = verify_bounds(&exp, 10, 1000).unwrap();
        assert_eq!(clean.violations, 0, "{:?}", clean.examples);
        assert!(clean.worst_ratio <= 1.0 + 1e-9);

        // understating the disturbance must surface as violations
        let mut lied = presets::example1_scalar();
        lied.declared_omega = Some(exp.disturbance.omega * 0.05);
        let dirty = verify_bounds(&lied, 10, 1000).unwrap();
        assert!(dirty.violations > 0, "audit failed to catch an unsound bound");
    }

    #[test]
    fn fused_run_records_decisions_and_matches_plans() {
        let exp = presets::example1_scalar();
        let art = run_closed_loop(&exp, RunMode::Fused, 42).unwrap();
        assert_eq!(art.trace.steps.len(), exp.cost.horizon);
        assert_eq!(art.locals.len(), exp.cost.horizon);
        for s in &art.trace.steps {
            let d = s.decision.as_ref().unwrap();
            let applied = DVector::from_vec(s.u.clone());
            let expected = match d.choice {
                Choice::Cloud => &art.cloud.controls[s.t],
                Choice::Local => &art.locals[s.t].controls[0],
            };
            assert_eq!(applied, *expected);
        }
        assert!(art.trace.oracle_match.is_some());
    }
}
