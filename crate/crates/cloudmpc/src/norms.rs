//! Vector norms, their duals, and induced matrix norms.
//!
//! Every uncertainty set in this crate is a ball of one configured norm.
//! Support functions of such balls evaluate the dual norm, and the model
//! gain constant `a` is the induced matrix norm of the same kind.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Which vector norm deviations and disturbance balls are measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    One,
    Two,
    Inf,
}

impl NormKind {
    /// Vector norm of `v`.
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        match self {
            NormKind::One => v.iter().map(|x| x.abs()).sum(),
            NormKind::Two => v.norm(),
            NormKind::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Dual norm of `v`: the support function of this norm's unit ball in
    /// direction `v` (one <-> inf are dual, two is self-dual).
    pub fn dual_norm(&self, v: &DVector<f64>) -> f64 {
        match self {
            NormKind::One => NormKind::Inf.norm(v),
            NormKind::Two => v.norm(),
            NormKind::Inf => NormKind::One.norm(v),
        }
    }

    /// Induced (operator) norm of the matrix `m`.
    pub fn induced(&self, m: &DMatrix<f64>) -> f64 {
        match self {
            // Max absolute column sum.
            NormKind::One => (0..m.ncols())
                .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            // Largest singular value.
            NormKind::Two => m.singular_values().iter().fold(0.0, |a: f64, s| a.max(*s)),
            // Max absolute row sum.
            NormKind::Inf => (0..m.nrows())
                .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
        }
    }
}
