//! Convexification solver for the retrospective problem of a second-order
//! mean field games system.
//!
//! Given the terminal value function `u(., T)` and the agent density at both
//! ends of the time interval, the solver reconstructs `(u, p)` on the whole
//! space-time cylinder by minimizing a Carleman-weighted least-squares
//! functional with gradient descent. Synthetic data with a known answer are
//! manufactured by a forward Fokker-Planck solve.

pub mod carleman;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod functional;
pub mod grid;
pub mod io;
pub mod metric;
pub mod model;
pub mod optimizer;

pub use error::{MfgError, Result};
