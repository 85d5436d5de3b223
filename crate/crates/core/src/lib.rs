//! Cross-representation attention for object detection, with a miniature
//! trainable detector, synthetic data and a geometry-term cost model.

pub mod complexity;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod keypoints;
pub mod numerics;
pub mod relation;
pub mod synthdata;

pub use error::{Error, Result};
