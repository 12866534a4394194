//! Minimal reverse-mode autodiff engine on top of ndarray.
//!
//! The engine is a classic define-by-run tape: every operation records its
//! inputs and a backward closure, and [`Tape::backward`] walks the recorded
//! nodes in reverse to accumulate gradients. Values are stored as
//! [`ndarray::ArcArray`] so backward closures can capture them cheaply.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in f32
//! for training and in f64 for finite-difference gradient checks.

pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use params::{ParamId, ParamStore, Session};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Value, Var};
