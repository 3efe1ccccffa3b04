//! Stage/terminal cost specification and trajectory cost evaluation.
//!
//! Costs are `sum phi(x_t, u_t) + psi(x_N)` with both pieces Lipschitz in
//! the state; those constants feed the worst-case cost-gap bounds.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

pub type StageCostFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalCostFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
/// Optional analytic (sub)gradient of the stage cost: returns (d/dx, d/du).
pub type StageGradFn =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> (DVector<f64>, DVector<f64>) + Send + Sync>;
pub type TerminalGradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Finite-horizon cost with state-Lipschitz metadata.
#[derive(Clone)]
pub struct CostSpec {
    pub phi: StageCostFn,
    pub psi: TerminalCostFn,
    /// Lipschitz constant of `phi` in its state argument.
    pub l_phi: f64,
    /// Lipschitz constant of `psi`.
    pub l_psi: f64,
    /// Task horizon N.
    pub horizon: usize,
    /// Analytic gradients for the optimizer (finite differences otherwise).
    pub phi_grad: Option<StageGradFn>,
    pub psi_grad: Option<TerminalGradFn>,
}

impl CostSpec {
    pub fn new(
        phi: StageCostFn,
        psi: TerminalCostFn,
        l_phi: f64,
        l_psi: f64,
        horizon: usize,
    ) -> Result<Self> {
        if !(l_phi >= 0.0) || !(l_psi >= 0.0) {
            return Err(Error::Config("cost Lipschitz constants must be nonnegative".into()));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(CostSpec {
            phi,
            psi,
            l_phi,
            l_psi,
            horizon,
            phi_grad: None,
            psi_grad: None,
        })
    }

    pub fn with_gradients(mut self, phi_grad: StageGradFn, psi_grad: TerminalGradFn) -> Self {
        self.phi_grad = Some(phi_grad);
        self.psi_grad = Some(psi_grad);
        self
    }
}

/// Cost of a full trajectory segment: stage costs over every control plus
/// the terminal cost at the last state. Requires one more state than
/// controls.
pub fn total_cost(
    cost: &CostSpec,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> Result<f64> {
    if states.len() != controls.len() + 1 {
        return Err(Error::Config(format!(
            "cost evaluation needs len(states) = len(controls) + 1, got {} and {}",
            states.len(),
            controls.len()
        )));
    }
    let mut j = 0.0;
    for (x, u) in states.iter().zip(controls.iter()) {
        j += (cost.phi)(x, u);
    }
    j += (cost.psi)(states.last().unwrap());
    Ok(j)
}

/// Cost-to-go from step `k`: the tail slices must cover exactly steps
/// `k..N` (states) and `k..N-1` (controls) of the horizon.
pub fn cost_to_go(
    cost: &CostSpec,
    k: usize,
    states_tail: &[DVector<f64>],
    controls_tail: &[DVector<f64>],
) -> Result<f64> {
    if k > cost.horizon {
        return Err(Error::Config(format!(
            "cost-to-go start {k} exceeds horizon {}",
            cost.horizon
        )));
    }
    let want = cost.horizon - k;
    if controls_tail.len() != want || states_tail.len() != want + 1 {
        return Err(Error::Config(format!(
            "cost-to-go from {k} needs {want} controls and {} states, got {} and {}",
            want + 1,
            controls_tail.len(),
            states_tail.len()
        )));
    }
    total_cost(cost, states_tail, controls_tail)
}
