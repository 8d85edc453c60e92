//! Conservative Hamilton-Jacobi reachability for nonlinear control-affine
//! systems.
//!
//! A nonlinear system is lifted into a higher-dimensional state-inclusive
//! space, approximated there by a linear model, and the model mismatch over
//! the backward feasible tube is handed to an antagonistic error player. The
//! resulting linear differential game is solved pointwise with the
//! generalized Hopf formula; its sign sets under-approximate reach sets and
//! over-approximate avoid sets of the true system. A Lax-Friedrichs dynamic
//! programming solver provides ground truth in two dimensions.

pub mod contours;
pub mod dp;
pub mod error;
pub mod hopf;
pub mod interval;
pub mod io;
pub mod lifting;
pub mod models;
pub mod pipeline;
pub mod rollout;
pub mod scenario;
pub mod systems;
pub mod targets;
pub mod tube;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Which player minimizes the terminal cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameSense {
    /// Control minimizes, disturbance maximizes; `V <= 0` marks the reach set.
    Reach,
    /// Control maximizes, disturbance minimizes; `V <= 0` marks the avoid set.
    Avoid,
}
