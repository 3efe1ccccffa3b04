//! Worst-case deviation and cost-gap bounds.
//!
//! All bounds propagate through the contraction/expansion factor
//! `rho = a + L_f`: a deviation of eps at step k grows to at most
//! `rho^(tau-k) eps` plus accumulated disturbance terms by step tau.
//! Every bound here is computed by the forward recursion
//! `acc <- rho * acc + term`, which is well defined for every rho
//! including rho = 1 (the closed-form geometric-series expression is used
//! only as an independent test oracle).

use serde::Serialize;

use crate::costs::CostSpec;
use crate::error::{Error, Result};
use crate::models::Model;

/// The constants the deviation/cost bounds are evaluated from.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundContext {
    /// Induced norm of A (worst case over the horizon when time-varying).
    pub a: f64,
    /// State-Lipschitz constant of the nonlinearity.
    pub l_f: f64,
    /// Control-Lipschitz constant of the nonlinearity.
    pub m_f: f64,
    /// Disturbance ball radius.
    pub omega: f64,
    /// State-Lipschitz constant of the stage cost.
    pub l_phi: f64,
    /// Lipschitz constant of the terminal cost.
    pub l_psi: f64,
    /// Task horizon N.
    pub horizon: usize,
}

impl BoundContext {
    pub fn new(model: &Model, cost: &CostSpec, omega: f64) -> Result<Self> {
        if !(omega >= 0.0) {
            return Err(Error::Config("disturbance radius must be nonnegative".into()));
        }
        Ok(BoundContext {
            a: model.gain(),
            l_f: model.l_f(),
            m_f: model.m_f(),
            omega,
            l_phi: cost.l_phi,
            l_psi: cost.l_psi,
            horizon: cost.horizon,
        })
    }

    /// One-step deviation growth factor.
    pub fn rho(&self) -> f64 {
        self.a + self.l_f
    }

    /// Worst-case `||x_hat_tau - x_tau||` when the plan's remaining controls
    /// are applied open loop from a deviation of `eps_k` at step k:
    /// `rho^(tau-k) eps_k` plus the disturbance accumulation.
    pub fn cloud_state_bound(&self, eps_k: f64, k: usize, tau: usize) -> Result<f64> {
        if !(eps_k >= 0.0) {
            return Err(Error::Config("deviation must be nonnegative".into()));
        }
        if tau <= k || tau > self.horizon {
            return Err(Error::Config(format!(
                "cloud state bound needs k < tau <= N, got k={k}, tau={tau}, N={}",
                self.horizon
            )));
        }
        let rho = self.rho();
        let mut acc = eps_k;
        for _ in k..tau {
            acc = rho * acc + self.omega;
        }
        Ok(acc)
    }

    /// `[delta_0, ..., delta_t_end]`: the worst-case plan-vs-plant deviation
    /// at each step before any feedback, from an initial bound `delta0`.
    /// Satisfies `delta_{k+1} = rho * delta_k + omega` exactly.
    pub fn delta_sequence(&self, delta0: f64, t_end: usize) -> Result<Vec<f64>> {
        if !(delta0 >= 0.0) {
            return Err(Error::Config("initial deviation bound must be nonnegative".into()));
        }
        if t_end > self.horizon {
            return Err(Error::Config(format!(
                "delta sequence end {t_end} exceeds horizon {}",
                self.horizon
            )));
        }
        let rho = self.rho();
        let mut out = Vec::with_capacity(t_end + 1);
        out.push(delta0);
        for _ in 0..t_end {
            out.push(rho * out.last().unwrap() + self.omega);
        }
        Ok(out)
    }

    /// Worst-case cost gap `|J_hat_k - J^c_k|` when the remaining plan
    /// controls are applied from a deviation of `eps_k` at step k: the
    /// stage-cost Lipschitz constant times each step's deviation bound plus
    /// the terminal-cost term. At `k = N` this degenerates to
    /// `l_psi * eps_k`.
    pub fn cloud_cost_bound(&self, eps_k: f64, k: usize) -> Result<f64> {
        if !(eps_k >= 0.0) {
            return Err(Error::Config("deviation must be nonnegative".into()));
        }
        if k > self.horizon {
            return Err(Error::Config(format!(
                "cost bound start {k} exceeds horizon {}",
                self.horizon
            )));
        }
        let rho = self.rho();
        let mut acc = eps_k; // deviation bound at step tau, starting at tau = k
        let mut total = 0.0;
        for _ in k..self.horizon {
            total += self.l_phi * acc;
            acc = rho * acc + self.omega;
        }
        Ok(total + self.l_psi * acc)
    }

    /// Worst-case `||x_bar_{tau|t} - x_tau||` when the local plan's controls
    /// are applied to the plant: per-step model-mismatch terms
    /// `l_f * alpha_l + m_f * beta_l + omega` propagated by rho, where
    /// `(alpha_l, beta_l)` envelope the planned state/control magnitudes.
    /// `gauges` covers steps `t..tau-1`.
    pub fn local_state_bound(&self, gauges: &[(f64, f64)], t: usize, tau: usize) -> Result<f64> {
        if tau <= t || tau > self.horizon {
            return Err(Error::Config(format!(
                "local state bound needs t < tau <= N, got t={t}, tau={tau}, N={}",
                self.horizon
            )));
        }
        if gauges.len() != tau - t {
            return Err(Error::Config(format!(
                "local state bound from {t} to {tau} needs {} envelope pairs, got {}",
                tau - t,
                gauges.len()
            )));
        }
        let rho = self.rho();
        let mut acc = 0.0;
        for (alpha, beta) in gauges {
            if !(*alpha >= 0.0) || !(*beta >= 0.0) {
                return Err(Error::Config("envelope scales must be nonnegative".into()));
            }
            acc = rho * acc + (self.l_f * alpha + self.m_f * beta + self.omega);
        }
        Ok(acc)
    }

    /// Worst-case `|J_bar_t - J^l_t|` for a local plan whose trajectory is
    /// enveloped by `gauges` over steps `t..N-1`: stage terms for
    /// tau = t+1..N-1 plus the terminal term at N.
    pub fn local_cost_bound(&self, gauges: &[(f64, f64)], t: usize) -> Result<f64> {
        if t >= self.horizon {
            return Err(Error::Config(format!(
                "local cost bound needs t < N, got t={t}, N={}",
                self.horizon
            )));
        }
        if gauges.len() != self.horizon - t {
            return Err(Error::Config(format!(
                "local cost bound from {t} needs {} envelope pairs, got {}",
                self.horizon - t,
                gauges.len()
            )));
        }
        let rho = self.rho();
        let mut acc = 0.0;
        let mut total = 0.0;
        for (i, (alpha, beta)) in gauges.iter().enumerate() {
            if !(*alpha >= 0.0) || !(*beta >= 0.0) {
                return Err(Error::Config("envelope scales must be nonnegative".into()));
            }
            acc = rho * acc + (self.l_f * alpha + self.m_f * beta + self.omega);
            let tau = t + i + 1;
            if tau < self.horizon {
                total += self.l_phi * acc;
            }
        }
        Ok(total + self.l_psi * acc)
    }
}
