//! Few-shot object detection.
//!
//! A shared convolutional feature extractor produces general features for a
//! query image and embeddings for one support crop per class. A coarse
//! highlighter (three fully-connected layers and a sigmoid) and a fine
//! highlighter (one fully-connected layer) turn each embedding into
//! per-channel exciting factors, which are applied to the query features one
//! after the other by depth-wise cross correlation. Each class-specific map
//! goes through a small two-stage backend (RPN + RoI head) and the per-class
//! results are fused.
//!
//! Training follows two phases: base training on abundant base-class data,
//! then fine-tuning on a k-shot balanced set of base and novel classes.

pub mod backbone;
pub mod boxes;
pub mod dataset;
pub mod detector;
pub mod episode;
mod error;
pub mod eval;
pub mod fixtures;
pub mod highlight;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Integer class identifier; assigned alphabetically over class names.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for ClassId {
    fn from(v: usize) -> Self {
        ClassId(v)
    }
}
