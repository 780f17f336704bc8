//! Optimal truncated Bayesian sequential tests for joint detection and
//! estimation.
//!
//! The pipeline is: [`model`] describes the problem, [`grid`] discretizes it,
//! [`bellman`] solves the optimal stopping problem for given cost
//! coefficients, [`coeffopt`] chooses the coefficients that meet the error
//! constraints, [`simulate`] checks the designed test by Monte Carlo and
//! [`persist`] stores it; [`verify`] audits a stored test.

pub mod bellman;
pub mod coeffopt;
pub mod error;
pub mod grid;
pub mod model;
pub mod par;
pub mod persist;
pub mod simulate;
pub mod table;
pub mod verify;

pub use error::{Error, Result};
