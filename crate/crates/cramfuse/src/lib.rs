//! Camera-radar fusion toolkit: projection geometry, ray-constrained
//! cross-attention, sensor dropout, dynamic voxelization, detection losses
//! with analytic gradients, BEV evaluation, a synthetic scene simulator,
//! and a small trainable-head learner.
//!
//! ```
//! use cramfuse::config::PipelineConfig;
//!
//! let config = PipelineConfig::default();
//! config.validate().unwrap();
//! assert_eq!(config.tau, 0.15);
//! ```

pub mod attention;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod learner;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod types;
pub mod voxel;

pub use config::PipelineConfig;
pub use error::{CramError, Result};
pub use types::{Box3D, BoolGrid, Grid};
