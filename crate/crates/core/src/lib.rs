//! Contrastive multilingual translation at desk scale.
//!
//! A small pre-norm transformer encoder–decoder trained with a joint
//! translation + in-batch contrastive objective on synthetic cipher
//! languages, with code-switching augmentation and cross-lingual evaluation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
