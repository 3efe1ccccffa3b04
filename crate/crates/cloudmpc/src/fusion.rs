//! Switching between the cloud and local plans by worst-case cost.
//!
//! At each step both plans carry a certificate: plan cost plus a bound on
//! how much execution under disturbances can exceed it. The applied input
//! comes from whichever certificate is smaller, with ties going to the
//! cloud plan (it was optimized on the richer model). The constrained
//! variant additionally demands that the measured deviation from the cloud
//! trajectory still lies within the bound that tightened the constraints,
//! since outside it the cloud plan's feasibility promise is void.

use serde::{Deserialize, Serialize};

use crate::controllers::LocalStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Cloud,
    Local,
}

/// Everything the switching rule looked at in one step, for traces and
/// hindsight audits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub t: usize,
    pub choice: Choice,
    /// Cloud plan cost-to-go and its worst-case-increase certificate.
    pub j_hat: f64,
    pub eta_hat: f64,
    /// Local plan cost and certificate (infinite when carrying/infeasible).
    pub j_bar: f64,
    pub eta_bar: f64,
    /// Measured deviation from the cloud trajectory and its a-priori bound.
    pub eps: f64,
    pub delta: f64,
    /// Whether the deviation was inside the bound (always true for the
    /// unconstrained rule, which does not gate on it).
    pub trusted: bool,
    pub local_status: LocalStatus,
}

/// Worst-case-cost rule: cloud unless the local certificate is strictly
/// smaller.
pub fn switch_unconstrained(j_hat: f64, eta_hat: f64, j_bar: f64, eta_bar: f64) -> Choice {
    if j_hat + eta_hat <= j_bar + eta_bar {
        Choice::Cloud
    } else {
        Choice::Local
    }
}

/// Constrained-task rule: as above, but the cloud is only eligible while
/// the measured deviation stays within the bound used to tighten its
/// constraints. An unplannable local window forces the cloud regardless —
/// there is nothing else to apply.
pub fn switch_constrained(
    j_hat: f64,
    eta_hat: f64,
    j_bar: f64,
    eta_bar: f64,
    eps: f64,
    delta: f64,
    local_status: LocalStatus,
) -> Choice {
    if local_status == LocalStatus::Infeasible {
        return Choice::Cloud;
    }
    if eps > delta {
        return Choice::Local;
    }
    switch_unconstrained(j_hat, eta_hat, j_bar, eta_bar)
}

/// Hindsight oracle: which plan would actually have cost less if executed
/// from here on under the realized disturbances. Ties go to the cloud so
/// the oracle is comparable with the certificate rule.
pub fn optimal_switch_oracle(j_cloud: f64, j_local: f64) -> Choice {
    if j_cloud <= j_local {
        Choice::Cloud
    } else {
        Choice::Local
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_the_cloud() {
        assert_eq!(switch_unconstrained(10.0, 2.0, 11.0, 1.0), Choice::Cloud);
        assert_eq!(optimal_switch_oracle(5.0, 5.0), Choice::Cloud);
    }

    #[test]
    fn strictly_smaller_local_certificate_wins() {
        assert_eq!(switch_unconstrained(10.0, 2.0, 11.0, 0.9), Choice::Local);
    }

    #[test]
    fn unselectable_local_plans_yield_to_the_cloud() {
        // carryover advertises an infinite cost
        assert_eq!(
            switch_unconstrained(1e9, 1e9, f64::INFINITY, 3.0),
            Choice::Cloud
        );
        // no local plan at all: cloud even when untrusted
        assert_eq!(
            switch_constrained(1.0, 1.0, f64::INFINITY, f64::INFINITY, 9.0, 0.5, LocalStatus::Infeasible),
            Choice::Cloud
        );
    }

    #[test]
    fn deviation_outside_its_bound_disqualifies_the_cloud() {
        assert_eq!(
            switch_constrained(1.0, 0.0, 50.0, 0.0, 0.51, 0.5, LocalStatus::Fresh),
            Choice::Local
        );
        // inside the bound the cost comparison decides as usual
        assert_eq!(
            switch_constrained(1.0, 0.0, 50.0, 0.0, 0.49, 0.5, LocalStatus::Fresh),
            Choice::Cloud
        );
    }

    #[test]
    fn boundary_deviation_is_still_trusted() {
        assert_eq!(
            switch_constrained(100.0, 0.0, 1.0, 0.0, 0.5, 0.5, LocalStatus::Fresh),
            Choice::Local // trusted, but local is cheaper
        );
        assert_eq!(
            switch_constrained(1.0, 0.0, 100.0, 0.0, 0.5, 0.5, LocalStatus::Fresh),
            Choice::Cloud
        );
    }
}
