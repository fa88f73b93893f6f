//! Progressive disentanglement of facial motion on a synthetic face world.
//!
//! The pipeline learns an appearance code and a unified motion code, splits the
//! motion code into lip, eye, pose and expression codes, and trains a generator
//! that renders any combination of them. [`synthworld`] supplies frames with
//! exact ground truth so that every disentanglement property can be measured.

pub mod augment;
pub mod eval;
pub mod error;
pub mod image;
pub mod losses;
pub mod nets;
pub mod synthworld;
pub mod train;

pub use error::{Error, Result};
