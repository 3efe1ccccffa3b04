//! Single-shooting trajectory optimization.
//!
//! Decision variables are the control sequence over a window plus optional
//! per-step envelope scales (alpha, beta). States are eliminated by rolling
//! the chosen prediction model forward, so constraints become functions of
//! the decision vector; inequalities are handled by an augmented-Lagrangian
//! outer loop around a limited-memory quasi-Newton inner minimizer with
//! adjoint gradients. Deterministic: identical problems and options produce
//! bit-identical solutions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::costs::CostSpec;
use crate::error::{Error, Result};
use crate::models::{Fidelity, Model};

/// Where a linear-inequality coefficient attaches. State index 0 is the
/// fixed initial state of the window (its coefficients fold into constants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Component `comp` of the predicted state at window position `idx`
    /// (0 = initial state, `horizon` = last).
    State { idx: usize, comp: usize },
    /// Component `comp` of the control at window position `idx`.
    Control { idx: usize, comp: usize },
    /// State-envelope scale for window position `idx`.
    ScaleAlpha { idx: usize },
    /// Control-envelope scale for window position `idx`.
    ScaleBeta { idx: usize },
}

/// Role of a row, kept for diagnostics and certificate extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowLabel {
    ControlBound,
    StateGauge,
    ControlGauge,
    /// Tightened state-constraint row at the given absolute time.
    Constraint { time: usize },
    ScaleSign,
}

/// One inequality row: `sum coef * var <= rhs`.
#[derive(Debug, Clone)]
pub struct LinearRow {
    pub terms: Vec<(Var, f64)>,
    pub rhs: f64,
    pub label: RowLabel,
}

/// A trajectory optimization problem over the window `t0..t0+horizon`.
pub struct TrajOptProblem<'a> {
    pub model: &'a Model,
    pub fidelity: Fidelity,
    pub cost: &'a CostSpec,
    /// Absolute start step of the window.
    pub t0: usize,
    /// Fixed initial state of the window.
    pub x0: DVector<f64>,
    /// Steps in the window (controls to decide); the cost always runs to
    /// the end of the window, which is the task horizon for planners.
    pub horizon: usize,
    /// Number of envelope scale pairs (window positions `0..n_scales`).
    pub n_scales: usize,
    pub rows: Vec<LinearRow>,
    /// Warm-start controls (zeros otherwise).
    pub init_controls: Option<Vec<DVector<f64>>>,
    /// Warm-start scales (zeros otherwise).
    pub init_scales: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Converged on a convex problem.
    Optimal,
    /// Feasible within tolerance; optimality not certified (nonconvex
    /// model, or iteration budget exhausted).
    FeasibleSuboptimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct TrajOptSolution {
    pub status: SolveStatus,
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub scales: Vec<(f64, f64)>,
    /// True (unpenalized) objective at the returned point.
    pub objective: f64,
    /// Largest row residual at the returned point (recomputed from a fresh
    /// rollout, independent of solver internals); <= 0 means feasible.
    pub violation: f64,
    pub iterations: usize,
}

/// Tolerances and caps for the optimizer. Defaults: feasibility 1e-6
/// (absolute, per row), optimality 1e-6 (relative), 5000 iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_iterations: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Finite-difference step for model/cost derivatives.
    pub fd_step: f64,
    /// Seed each shrinking-horizon solve from the tail of the previous plan.
    /// Disabling this makes every solve start cold (slower, same optima up
    /// to solver tolerance).
    pub warm_start: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            feasibility_tol: 1e-6,
            optimality_tol: 1e-6,
            max_iterations: 5000,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e10,
            fd_step: 1e-6,
            warm_start: true,
        }
    }
}

/// Progress floor: a candidate only replaces the incumbent when it improves
/// by more than this relative amount, so warm starts that are already
/// optimal are returned bit-identically.
const IMPROVE_EPS: f64 = 1e-14;
const LBFGS_MEMORY: usize = 8;
const ARMIJO_C1: f64 = 1e-4;
const MAX_OUTER_ROUNDS: usize = 30;

struct Layout {
    n: usize,
    m: usize,
    horizon: usize,
    n_scales: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        self.horizon * self.m + 2 * self.n_scales
    }
    fn control(&self, z: &DVector<f64>, idx: usize) -> DVector<f64> {
        DVector::from_fn(self.m, |j, _| z[idx * self.m + j])
    }
    fn alpha(&self, z: &DVector<f64>, idx: usize) -> f64 {
        z[self.horizon * self.m + idx]
    }
    fn beta(&self, z: &DVector<f64>, idx: usize) -> f64 {
        z[self.horizon * self.m + self.n_scales + idx]
    }
}

/// Solves the problem. `Fidelity::True` is rejected: plans never optimize
/// through disturbances.
pub fn solve(problem: &TrajOptProblem, opts: &SolverOptions) -> Result<TrajOptSolution> {
    if problem.fidelity == Fidelity::True {
        return Err(Error::Config("cannot optimize through the disturbed plant".into()));
    }
    if problem.horizon == 0 {
        return Err(Error::Config("optimization window must contain at least one step".into()));
    }
    let n = problem.model.state_dim();
    let m = problem.model.control_dim();
    if problem.x0.len() != n {
        return Err(Error::Config("initial state dimension mismatch".into()));
    }
    validate_rows(problem, n, m)?;
    let layout = Layout {
        n,
        m,
        horizon: problem.horizon,
        n_scales: problem.n_scales,
    };

    let mut z = DVector::zeros(layout.dim());
    if let Some(init) = &problem.init_controls {
        if init.len() != problem.horizon {
            return Err(Error::Config("warm-start control count mismatch".into()));
        }
        for (i, u) in init.iter().enumerate() {
            if u.len() != m {
                return Err(Error::Config("warm-start control dimension mismatch".into()));
            }
            for j in 0..m {
                z[i * m + j] = u[j];
            }
        }
    }
    if let Some(init) = &problem.init_scales {
        if init.len() != problem.n_scales {
            return Err(Error::Config("warm-start scale count mismatch".into()));
        }
        for (i, (a, b)) in init.iter().enumerate() {
            z[layout.horizon * m + i] = *a;
            z[layout.horizon * m + layout.n_scales + i] = *b;
        }
    }

    let mut lambda = vec![0.0f64; problem.rows.len()];
    let mut mu = opts.penalty_initial;
    let mut iters_total = 0usize;
    let mut prev_violation = f64::INFINITY;
    let mut prev_obj = f64::NAN;
    let mut feasible_converged = false;

    for round in 0..MAX_OUTER_ROUNDS {
        let budget = 600.min(opts.max_iterations.saturating_sub(iters_total));
        if budget == 0 {
            break;
        }
        let (z_new, used) = lbfgs(
            |p| eval_augmented(problem, &layout, p, &lambda, mu, opts),
            z.clone(),
            budget,
        )?;
        iters_total += used;
        z = z_new;
        let (obj, residuals) = eval_plain(problem, &layout, &z)?;
        let violation = max_violation(&residuals);
        let obj_settled = (obj - prev_obj).abs() <= opts.optimality_tol * obj.abs().max(1.0);
        if violation <= opts.feasibility_tol && round >= 1 && obj_settled {
            feasible_converged = true;
            break;
        }
        for (l, c) in lambda.iter_mut().zip(residuals.iter()) {
            *l = (*l + mu * c).max(0.0);
        }
        if violation > 0.25 * prev_violation {
            mu = (mu * opts.penalty_growth).min(opts.penalty_max);
        }
        prev_violation = violation;
        prev_obj = obj;
    }

    // Dedicated feasibility phase: if the augmented loop could not reach
    // tolerance, minimize the squared violations alone before declaring
    // the problem infeasible.
    let (_, residuals) = eval_plain(problem, &layout, &z)?;
    if max_violation(&residuals) > opts.feasibility_tol && !feasible_converged {
        let budget = 2000.min(opts.max_iterations.saturating_sub(iters_total)).max(200);
        let (z_f, used) = lbfgs(
            |p| eval_feasibility(problem, &layout, p, opts),
            z.clone(),
            budget,
        )?;
        iters_total += used;
        let (_, res_f) = eval_plain(problem, &layout, &z_f)?;
        if max_violation(&res_f) <= max_violation(&residuals) {
            z = z_f;
        }
    }

    // Final extraction with an independent feasibility recheck.
    let controls: Vec<DVector<f64>> = (0..layout.horizon).map(|i| layout.control(&z, i)).collect();
    let scales: Vec<(f64, f64)> = (0..layout.n_scales)
        .map(|i| (layout.alpha(&z, i), layout.beta(&z, i)))
        .collect();
    let states = problem
        .model
        .rollout(problem.fidelity, problem.t0, &problem.x0, &controls, None)?;
    let objective = crate::costs::total_cost(problem.cost, &states, &controls)?;
    let violation = problem
        .rows
        .iter()
        .map(|row| row_residual(row, &states, &controls, &scales))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(f64::NEG_INFINITY);
    let status = if violation <= opts.feasibility_tol {
        match problem.fidelity {
            Fidelity::Local => SolveStatus::Optimal,
            _ => SolveStatus::FeasibleSuboptimal,
        }
    } else {
        SolveStatus::Infeasible
    };
    Ok(TrajOptSolution {
        status,
        controls,
        states,
        scales,
        objective,
        violation: if problem.rows.is_empty() { 0.0 } else { violation },
        iterations: iters_total,
    })
}

/// Residual of one row (`<= 0` feasible) at a candidate trajectory.
pub fn row_residual(
    row: &LinearRow,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    scales: &[(f64, f64)],
) -> f64 {
    let mut v = -row.rhs;
    for (var, coef) in &row.terms {
        v += coef
            * match *var {
                Var::State { idx, comp } => states[idx][comp],
                Var::Control { idx, comp } => controls[idx][comp],
                Var::ScaleAlpha { idx } => scales[idx].0,
                Var::ScaleBeta { idx } => scales[idx].1,
            };
    }
    v
}

fn max_violation(residuals: &[f64]) -> f64 {
    residuals.iter().fold(0.0f64, |m, c| m.max(*c))
}

fn validate_rows(problem: &TrajOptProblem, n: usize, m: usize) -> Result<()> {
    for row in &problem.rows {
        for (var, _) in &row.terms {
            let ok = match *var {
                Var::State { idx, comp } => idx <= problem.horizon && comp < n,
                Var::Control { idx, comp } => idx < problem.horizon && comp < m,
                Var::ScaleAlpha { idx } | Var::ScaleBeta { idx } => idx < problem.n_scales,
            };
            if !ok {
                return Err(Error::Config(format!("row references out-of-range variable {var:?}")));
            }
        }
    }
    Ok(())
}

/// True objective plus per-row residuals at `z` (no penalties).
fn eval_plain(
    problem: &TrajOptProblem,
    layout: &Layout,
    z: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let controls: Vec<DVector<f64>> = (0..layout.horizon).map(|i| layout.control(z, i)).collect();
    let scales: Vec<(f64, f64)> = (0..layout.n_scales)
        .map(|i| (layout.alpha(z, i), layout.beta(z, i)))
        .collect();
    let states = problem
        .model
        .rollout(problem.fidelity, problem.t0, &problem.x0, &controls, None)?;
    let obj = crate::costs::total_cost(problem.cost, &states, &controls)?;
    let residuals = problem
        .rows
        .iter()
        .map(|row| row_residual(row, &states, &controls, &scales))
        .collect();
    Ok((obj, residuals))
}

/// Augmented-Lagrangian value and gradient at `z`.
fn eval_augmented(
    problem: &TrajOptProblem,
    layout: &Layout,
    z: &DVector<f64>,
    lambda: &[f64],
    mu: f64,
    opts: &SolverOptions,
) -> (f64, DVector<f64>) {
    eval_with_penalty(problem, layout, z, opts, true, |c, j| {
        // shifted quadratic penalty: (max(0, l + mu c)^2 - l^2) / (2 mu)
        let l = lambda[j];
        let y = (l + mu * c).max(0.0);
        ((y * y - l * l) / (2.0 * mu), y)
    })
}

/// Pure violation objective (feasibility phase): sum max(0, c)^2 with the
/// true cost excluded, so the verdict is about feasibility alone.
fn eval_feasibility(
    problem: &TrajOptProblem,
    layout: &Layout,
    z: &DVector<f64>,
    opts: &SolverOptions,
) -> (f64, DVector<f64>) {
    eval_with_penalty(problem, layout, z, opts, false, |c, _| {
        let y = c.max(0.0);
        (y * y, 2.0 * y)
    })
}

/// Shared value/gradient pipeline. `penalty(c_j, j)` returns the penalty
/// value added for row j and its derivative with respect to c_j.
fn eval_with_penalty(
    problem: &TrajOptProblem,
    layout: &Layout,
    z: &DVector<f64>,
    opts: &SolverOptions,
    include_cost: bool,
    penalty: impl Fn(f64, usize) -> (f64, f64),
) -> (f64, DVector<f64>) {
    let (n, m, h) = (layout.n, layout.m, layout.horizon);
    let controls: Vec<DVector<f64>> = (0..h).map(|i| layout.control(z, i)).collect();
    let scales: Vec<(f64, f64)> = (0..layout.n_scales)
        .map(|i| (layout.alpha(z, i), layout.beta(z, i)))
        .collect();

    // Forward rollout.
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(h + 1);
    states.push(problem.x0.clone());
    for i in 0..h {
        let t = problem.t0 + i;
        let x = states.last().unwrap();
        let next = match problem.fidelity {
            Fidelity::Cloud => problem.model.step_cloud(t, x, &controls[i]),
            Fidelity::Local => problem.model.step_local(t, x, &controls[i]),
            Fidelity::True => unreachable!("rejected in solve"),
        };
        states.push(next);
    }
    if states.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return (f64::INFINITY, DVector::zeros(layout.dim()));
    }

    // Stage-cost accumulation and gradients.
    let mut value = 0.0;
    let mut gx: Vec<DVector<f64>> = (0..=h).map(|_| DVector::zeros(n)).collect();
    let mut gu: Vec<DVector<f64>> = (0..h).map(|_| DVector::zeros(m)).collect();
    let mut gs = DVector::zeros(2 * layout.n_scales);
    if include_cost {
        for i in 0..h {
            value += (problem.cost.phi)(&states[i], &controls[i]);
            let (dx, du) = stage_cost_grad(problem.cost, &states[i], &controls[i], opts.fd_step);
            gx[i] += dx;
            gu[i] += du;
        }
        value += (problem.cost.psi)(&states[h]);
        gx[h] += terminal_cost_grad(problem.cost, &states[h], opts.fd_step);
    }

    // Penalties on rows.
    for (j, row) in problem.rows.iter().enumerate() {
        let c = row_residual(row, &states, &controls, &scales);
        let (p, dp) = penalty(c, j);
        value += p;
        if dp != 0.0 {
            for (var, coef) in &row.terms {
                let g = dp * coef;
                match *var {
                    Var::State { idx, comp } => gx[idx][comp] += g,
                    Var::Control { idx, comp } => gu[idx][comp] += g,
                    Var::ScaleAlpha { idx } => gs[idx] += g,
                    Var::ScaleBeta { idx } => gs[layout.n_scales + idx] += g,
                }
            }
        }
    }
    if !value.is_finite() {
        return (f64::INFINITY, DVector::zeros(layout.dim()));
    }

    // Adjoint sweep: fold state gradients back onto the controls.
    let mut grad = DVector::zeros(layout.dim());
    let mut lam = gx[h].clone();
    for i in (0..h).rev() {
        let t = problem.t0 + i;
        let (jx_t_lam, ju_t_lam) = adjoint_pullback(
            problem.model,
            problem.fidelity,
            t,
            &states[i],
            &controls[i],
            &lam,
            opts.fd_step,
        );
        let du = &gu[i] + ju_t_lam;
        for j in 0..m {
            grad[i * m + j] = du[j];
        }
        lam = &gx[i] + jx_t_lam;
    }
    for i in 0..2 * layout.n_scales {
        grad[h * m + i] = gs[i];
    }
    (value, grad)
}

/// Returns (Jx' lam, Ju' lam) for one dynamics step; the nonlinearity's
/// Jacobians come from central differences.
fn adjoint_pullback(
    model: &Model,
    fidelity: Fidelity,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    lam: &DVector<f64>,
    fd_step: f64,
) -> (DVector<f64>, DVector<f64>) {
    let stage = model.stage(t);
    let mut jx_t_lam = stage.a_mat.transpose() * lam;
    let mut ju_t_lam = stage.b_mat.transpose() * lam;
    if fidelity == Fidelity::Cloud {
        // lam' (df/dx) and lam' (df/du) by columns
        for i in 0..x.len() {
            let h = fd_step * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = ((stage.f)(&xp, u) - (stage.f)(&xm, u)) / (2.0 * h);
            jx_t_lam[i] += col.dot(lam);
        }
        for j in 0..u.len() {
            let h = fd_step * u[j].abs().max(1.0);
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let col = ((stage.f)(x, &up) - (stage.f)(x, &um)) / (2.0 * h);
            ju_t_lam[j] += col.dot(lam);
        }
    }
    (jx_t_lam, ju_t_lam)
}

fn stage_cost_grad(
    cost: &CostSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    fd_step: f64,
) -> (DVector<f64>, DVector<f64>) {
    if let Some(g) = &cost.phi_grad {
        return g(x, u);
    }
    let dx = DVector::from_fn(x.len(), |i, _| {
        let h = fd_step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        ((cost.phi)(&xp, u) - (cost.phi)(&xm, u)) / (2.0 * h)
    });
    let du = DVector::from_fn(u.len(), |j, _| {
        let h = fd_step * u[j].abs().max(1.0);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        ((cost.phi)(x, &up) - (cost.phi)(x, &um)) / (2.0 * h)
    });
    (dx, du)
}

fn terminal_cost_grad(cost: &CostSpec, x: &DVector<f64>, fd_step: f64) -> DVector<f64> {
    if let Some(g) = &cost.psi_grad {
        return g(x);
    }
    DVector::from_fn(x.len(), |i, _| {
        let h = fd_step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        ((cost.psi)(&xp) - (cost.psi)(&xm)) / (2.0 * h)
    })
}

/// Limited-memory BFGS with Armijo backtracking. Returns the best visited
/// point; a warm start that admits no sufficient decrease is returned
/// unchanged, bit for bit.
fn lbfgs(
    mut eval: impl FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    z0: DVector<f64>,
    max_iters: usize,
) -> Result<(DVector<f64>, usize)> {
    let (mut f, mut g) = eval(&z0);
    if !f.is_finite() {
        return Err(Error::Numeric("objective is not finite at the starting point".into()));
    }
    let mut z = z0.clone();
    let mut z_best = z0;
    let mut f_best = f;
    let mut hist: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new(); // (s, y, 1/s'y)
    let mut used = 0usize;
    let mut stalls = 0usize;

    while used < max_iters {
        used += 1;
        if g.amax() <= 1e-13 * f.abs().max(1.0) {
            break;
        }
        // Two-loop recursion for the quasi-Newton direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, inv_sy) in hist.iter().rev() {
            let a = inv_sy * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        let gamma = hist
            .last()
            .map(|(s, y, _)| s.dot(y) / y.dot(y))
            .unwrap_or(1.0);
        let mut r = q * gamma;
        for ((s, y, inv_sy), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = inv_sy * y.dot(&r);
            r.axpy(a - b, s, 1.0);
        }
        let mut d = -r;
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            d = -g.clone();
            slope = g.dot(&d);
            if !(slope < 0.0) {
                break;
            }
        }

        // Backtracking line search.
        let mut step = 1.0f64;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = &z + &d * step;
            let (fc, gc) = eval(&cand);
            if fc.is_finite() && fc <= f + ARMIJO_C1 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((z_new, f_new, g_new)) = accepted else {
            // no sufficient decrease along this direction
            if hist.is_empty() {
                break;
            }
            hist.clear(); // retry once as plain gradient descent
            stalls += 1;
            if stalls >= 2 {
                break;
            }
            continue;
        };

        let s = &z_new - &z;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if hist.len() == LBFGS_MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        z = z_new;
        f = f_new;
        g = g_new;
        if f < f_best - IMPROVE_EPS * f_best.abs().max(1.0) {
            f_best = f;
            z_best = z.clone();
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        }
    }
    Ok((z_best, used))
}
