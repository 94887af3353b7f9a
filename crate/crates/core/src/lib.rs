//! Conditional distribution equality testing for two samples.
//!
//! A mixture density network is trained on the first sample and used to
//! synthesize responses at the covariates of half of the second sample.
//! The problem then reduces to an unconditional two-sample test between the
//! synthesized rows and the untouched half, carried out either with a
//! binned permutation U-statistic ([`gp`]) or with a held-out
//! classification-accuracy z-test ([`gca`]).
//!
//! [`sim`] reproduces the simulation models used to benchmark the tests and
//! [`report`] wires everything together for the command-line front end.

pub mod data;
pub mod error;
pub mod exec;
pub mod gca;
pub mod gp;
pub mod io;
pub mod mdn;
pub mod method;
pub mod nn;
pub mod report;
pub mod rng;
pub mod sim;

pub use data::Dataset;
pub use error::{CdetError, Result};
pub use exec::ExecMode;
pub use mdn::{ConditionalSampler, MdnGenerator, MdnSpec};
pub use method::{MethodSettings, TestMethod};
