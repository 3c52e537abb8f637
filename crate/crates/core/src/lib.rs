//! Model-based policy search for clutch-to-clutch gearshift controllers.
//!
//! A virtual test bench runs the shift; Gaussian processes learn where the
//! bench departs from the nominal driveline model; Gaussian belief rollouts
//! through the corrected model score a feedforward plus feedback policy,
//! which is then improved by gradient descent.

pub mod bench;
pub mod config;
pub mod controller;
pub mod driveline;
pub mod error;
pub mod gp;
pub mod gradient;
pub mod history;
pub mod learner;
pub mod linalg;
pub mod reference;
pub mod rollout;

pub use error::{Error, Result};
