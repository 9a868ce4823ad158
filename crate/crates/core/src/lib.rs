//! Continuous-time networks whose layer weights are rebuilt at every
//! solver time by a coupled-oscillator scaling function.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: f64 tensors and a reverse-mode tape.
//! * [`scaling`]: temporal weight layers and their static counterpart.
//! * [`solver`]: RK4 and Dormand–Prince integration through the tape.
//! * [`models`]: ODE functions, the ODE-RNN encoder and the Latent ODE.
//! * [`data`]: irregular series, the synthetic generator, CSV and batching.
//! * [`training`]: Adamax, losses, metrics and the epoch loop.
//! * [`config`] and [`checkpoint`]: persisted run state.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod scaling;
pub mod seed;
pub mod solver;
pub mod tensor;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
