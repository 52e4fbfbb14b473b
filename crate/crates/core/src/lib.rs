//! Edge-map self-supervision for semi-supervised few-shot cell segmentation.
//!
//! Unlabelled images get Canny edge maps as proxy targets; a shared encoder is
//! trained jointly with a segmentation decoder (on the few labelled images)
//! and an edge decoder (on the unlabelled images). The resulting segmentation
//! model is fine-tuned on K annotated target images and scored by IoU over
//! repeated random episodes.

pub mod cli;
pub mod corpus;
pub mod edgemaps;
pub mod error;
pub mod eval;
pub mod maps;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod training;
pub mod util;

pub use error::{Error, Result};
