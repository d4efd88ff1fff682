//! Joint MAP (Onsager–Machlup) and minimum-energy state-path and parameter
//! estimation for stochastic differential equations.
//!
//! The estimators are transcribed into nonlinear programs by Hermite–Simpson
//! direct collocation ([`transcribe`]) and solved with an augmented
//! Lagrangian method ([`solve`]). A continuous-discrete unscented Kalman
//! filter/smoother with prediction-error parameter estimation ([`baseline`])
//! serves as the comparison method, and [`harness`] runs the Monte Carlo
//! experiments on the forced Duffing oscillator.

pub mod baseline;
pub mod check;
pub mod error;
pub mod harness;
pub mod model;
pub mod simulate;
pub mod solve;
pub mod spline;
pub mod trajectory;
pub mod transcribe;

pub use error::{Error, Result};
