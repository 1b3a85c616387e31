//! Clustering-based supervised representation learning for point cloud
//! segmentation.
//!
//! Each training step alternates two phases. Points of every class are first
//! softly partitioned into subclasses by an entropic optimal-transport solve
//! against momentum-tracked centers; the network is then optimized with
//! cross-entropy plus point-point and point-center contrast over those
//! subclass labels. Only the encoder and head are needed at inference.

pub mod cluster;
pub mod data;
pub mod error;
pub mod inspect;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sinkhorn;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
