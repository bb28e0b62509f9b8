//! The user guide, embedded chapter by chapter.
//!
//! The book under `book/` is ordinary mdBook source; including each chapter
//! here as module documentation makes every one of its code blocks a
//! doctest, so `cargo test --doc` keeps the prose and the library honest
//! with each other. Nothing in this module exists at runtime.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
pub mod tensors_and_autodiff {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/the-model.md")]
pub mod the_model {}

#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}

#[doc = include_str!("../../../book/src/growing-slots.md")]
pub mod growing_slots {}

#[doc = include_str!("../../../book/src/inference.md")]
pub mod inference {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
