#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Twin-in-the-loop anti-lock braking.
//!
//! A nominal slip MPC drives a digital-twin vehicle while a scheduled PI
//! compensator closes a second loop on the (perturbed) physical vehicle
//! around the twin/plant slip mismatch. Bayesian optimization calibrates the
//! compensator and, for comparison, the predictive model of a plain MPC.

pub mod compensator;
pub mod config;
pub mod error;
pub mod indices;
pub mod mpc;
pub mod scenario;
pub mod sensors;
pub mod sim;
pub mod tuner;
pub mod vehicle;

pub use error::{Error, Result};
