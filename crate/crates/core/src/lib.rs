//! Explainable face presentation-attack detection: a PAD head, an LSTM
//! explanation generator, their losses, text and biometric metrics, and a
//! subject-disjoint three-fold training pipeline, all on a small
//! reverse-mode autodiff tape.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod lg;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pad;
pub mod par;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
