//! Similarity-aware prompt routing for rehearsal-free continual learning
//! over frozen feature extractors.
//!
//! A growing pool of prompt experts is trained task by task. Each training
//! sample is routed either to existing experts or to the experts created for
//! the current task, depending on whether its relative Mahalanobis distance
//! to everything seen so far stays under a quantile threshold. Only streaming
//! statistics and scalar scores are kept between tasks.

pub mod data;
pub mod dump;
mod error;
pub mod gate;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};
