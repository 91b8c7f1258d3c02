//! Online fusion of per-frame 2D instance masks into a 3D instance map.
//!
//! Each RGB-D frame is unprojected to points, its 2D masks are lifted to
//! superpoints, point features are pooled into one query per superpoint, and
//! an optional masked-attention decoder refines the queries into point masks.
//! Detections are summarized as fixed-size records (box, contrastive vector,
//! semantic distribution) and merged into a global map by one similarity
//! matrix and a bipartite matching per frame.
//!
//! [`pipeline::run`] drives a frame directory end to end; the modules below
//! expose each stage on its own.

pub mod assignment;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod merging;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod superpoint;
pub mod synthetic;

pub use error::{Error, Result};
