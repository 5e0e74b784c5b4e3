//! Learned construction heuristics for dynamic routing problems.
//!
//! Node coordinates change over a discrete horizon; a route visiting its
//! `k`-th node at time `k` pays distances between the positions at the
//! times each leg is travelled. A spatio-temporal attention encoder
//! embeds the whole time series, and a pointing decoder builds routes one
//! node per step, reading the encoder slice of the current time.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod instances;
pub mod model;
pub mod params;
pub mod plot;
pub mod realtime;
pub mod rng;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
pub use instances::{DynamicInstance, ProblemKind, ProblemSpec, Solution};
pub use model::{DecodeMode, Model, ModelConfig};
