//! Pipeline hyperparameters shared across the stages.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};

/// All knobs of the fusion pipeline with their default operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Foreground score cutoff.
    pub tau: f64,
    /// 2D feature dimension before the modality code.
    pub d: usize,
    /// Ray samples per side (total samples 2s+1).
    pub s: usize,
    /// Relative depth-error fraction for ray sampling.
    pub epsilon: f64,
    /// Sensor dropout probability.
    pub p_drop: f64,
    pub lambda_seg: f64,
    pub lambda_depth: f64,
    pub lambda_hm: f64,
    /// Heatmap ground-truth decay constant.
    pub sigma_h: f64,
    /// Heatmap focal-loss positive threshold: positives have h > 1 - epsilon_h.
    pub epsilon_h: f64,
    /// Ground-truth heatmap cutoff selecting boxes for the box loss.
    pub tau_hm: f64,
    /// Segmentation focal-loss exponent.
    pub gamma_s: f64,
    /// Heatmap focal-loss exponents.
    pub gamma_h: f64,
    pub alpha_h: f64,
    pub voxel_region_min: Vector3<f64>,
    pub voxel_region_max: Vector3<f64>,
    pub voxel_size: f64,
    pub num_heading_bins: usize,
    /// Chebyshev radius (in cells) for sparse neighborhood aggregation. The
    /// window must span a typical object footprint: evidence for an object
    /// center (camera points on the visible surface, radar returns across the
    /// footprint) sits up to half an object length away from the center cell.
    pub neighborhood_radius: usize,
    /// Detection score cutoff at decode time.
    pub tau_score: f64,
    /// Rotated-IoU threshold for NMS.
    pub nms_iou: f64,
    /// Maximum detections per frame.
    pub max_detections: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau: 0.15,
            d: 16,
            s: 1,
            epsilon: 0.10,
            p_drop: 0.2,
            lambda_seg: 400.0,
            lambda_depth: 20.0,
            lambda_hm: 4.0,
            sigma_h: 1.0,
            epsilon_h: 0.2,
            tau_hm: 0.2,
            gamma_s: 2.0,
            gamma_h: 2.0,
            alpha_h: 4.0,
            voxel_region_min: Vector3::new(-100.0, -100.0, -5.0),
            voxel_region_max: Vector3::new(100.0, 100.0, 5.0),
            voxel_size: 0.2,
            num_heading_bins: 12,
            neighborhood_radius: 8,
            tau_score: 0.5,
            nms_iou: 0.3,
            max_detections: 200,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CramError::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if self.d < 4 {
            return Err(CramError::Config(format!("feature dim must be >= 4, got {}", self.d)));
        }
        if self.epsilon <= 0.0 {
            return Err(CramError::Config("epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(CramError::Config("p_drop must be in [0,1)".into()));
        }
        if self.voxel_size <= 0.0 {
            return Err(CramError::Config("voxel_size must be positive".into()));
        }
        if self.num_heading_bins == 0 {
            return Err(CramError::Config("num_heading_bins must be positive".into()));
        }
        Ok(())
    }
}
