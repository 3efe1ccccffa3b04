//! Closed-loop simulation of cloud-assisted model predictive control for
//! finite-duration tasks.
//!
//! A remote (cloud) optimizer solves one nonlinear trajectory plan before
//! the task starts; an onboard (local) optimizer re-solves a simplified
//! linear problem every step. At each step the controller applies whichever
//! plan has the smaller worst-case cost certificate, built from Lipschitz
//! bounds on the model mismatch and the disturbance magnitude. Constraints
//! are tightened by the same bounds so the certified plan also certifies
//! constraint satisfaction under disturbances.
//!
//! Module map:
//! - [`models`]: linear-plus-Lipschitz dynamics, rollouts, disturbance sampling
//! - [`costs`]: Lipschitz stage/terminal cost wrappers
//! - [`norms`] / [`geometry`]: norm machinery, polytopes, tightening, gauges
//! - [`bounds`]: worst-case state- and cost-error certificates
//! - [`trajopt`]: deterministic single-shooting solver used by both planners
//! - [`controllers`]: the one-shot cloud planner and shrinking-horizon local planner
//! - [`fusion`]: the switching rules and the hindsight oracle
//! - [`sim`]: closed-loop experiments, metrics, and bound audits
//! - [`presets`] / [`config`]: built-in example systems and JSON experiment configs

pub mod bounds;
pub mod config;
pub mod controllers;
pub mod costs;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod models;
pub mod norms;
pub mod presets;
pub mod sim;
pub mod trajopt;

pub use error::{Error, Result};
pub use models::{Fidelity, Model};
pub use norms::NormKind;
