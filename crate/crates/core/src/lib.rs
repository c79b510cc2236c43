// Negated float guards (`!(x > 0.0)`) deliberately send NaN into the
// error branch; the positive rewrite would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Learning symplectic maps as generating functions.
//!
//! The crate trains a scalar network `S(q, P)` so that the implicit
//! map it generates reproduces observed trajectory steps, and ships
//! everything around that idea: exact first- and second-order network
//! derivatives, the implicit solver that turns `S` into a map,
//! benchmark Hamiltonian systems, dataset generation, training loops
//! for the generating-function model and unstructured baselines, and
//! long-horizon diagnostics.

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod genfun;
pub mod net;
pub mod state;
pub mod systems;
pub mod training;

mod ioutil;
mod parutil;

pub use error::{Error, Result};
pub use genfun::{AnalyticGf, GenFunMap, GfSource, RolloutFailure, SolverConfig, StepStats};
pub use net::{Activation, InputGrad, ParamGrads, ParamNet};
pub use state::{PhaseState, Trajectory, TrainingPair};
pub use systems::SystemSpec;
