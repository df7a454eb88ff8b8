//! Conditional-Gaussian nonlinear modeling toolkit.
//!
//! The crate implements a complete workflow for stochastic dynamical systems
//! whose state splits into an observed part `u1` and an unobserved part `u2`
//! such that, conditioned on the history of `u1`, the dynamics of `u2` are
//! linear with additive Gaussian noise:
//!
//! ```text
//! du1 = [ f1(u1) + g1(u1) u2 ] dt + s1 dW1
//! du2 = [ f2(u1) + g2(u1) u2 ] dt + s2 dW2
//! ```
//!
//! Under this structure the conditional distribution `p(u2 | u1 history)` is
//! exactly Gaussian `N(mu, R)` and evolves by closed-form moment equations,
//! which makes optimal nonlinear filtering cheap enough to place inside a
//! training loss.
//!
//! The workflow stages are:
//! 1. simulate a benchmark system ([`dynamics`]),
//! 2. identify a sparse knowledge-based parametric model from data via
//!    causation entropy ([`causation`], [`regression`]),
//! 3. augment it with neural corrections that preserve the conditional
//!    structure ([`model`], [`nn`]),
//! 4. train with a forecast loss plus a filtering loss, differentiating
//!    through the filter recursion ([`tape`], [`filter`], [`train`]),
//! 5. evaluate against an ensemble reference filter and statistical metrics
//!    ([`enkbf`], [`metrics`]),
//! 6. drive everything from declarative configs ([`config`], [`pipeline`],
//!    [`io`]).

pub mod causation;
pub mod config;
pub mod dynamics;
pub mod enkbf;
pub mod error;
pub mod filter;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
