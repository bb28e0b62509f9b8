//! Object-centric video representation learning with a growing slot budget.
//!
//! The library trains a recurrent slot-attention model on synthetic videos of
//! moving shapes, starting from a deliberately undersized number of slots and
//! expanding the slot bank during training. New slots are allocated to the
//! regions the current model reconstructs worst, and spawned near their parent
//! slots in latent space. Reconstruction quality is judged by a pixel loss, a
//! structural-similarity loss over space and time, and a contrastive term that
//! keeps slots from collapsing onto each other.
//!
//! Everything — tensors, autodiff, the model, training, evaluation, file
//! formats — is implemented here on top of the standard library plus a few
//! small utility crates, with deterministic seeded behavior end to end.

pub mod book;
pub mod cli;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub(crate) mod util;

pub use cli::run;
pub use error::{Error, Result};
