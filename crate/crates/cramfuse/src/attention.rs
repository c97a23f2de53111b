//! Ray-constrained cross-attention: sample candidate 3D locations along
//! each camera ray, gather the nearest radar BEV features, and snap the
//! camera point toward radar-supported depth with a softmax over
//! query-key similarities.
//!
//! With uninformative (identical) keys the attention weights are uniform
//! and the symmetric sampling recovers the depth estimate:
//!
//! ```
//! use cramfuse::attention::{cross_attend, sample_along_ray};
//! use cramfuse::geometry::pixel_to_ray;
//! use cramfuse::scene::default_camera;
//!
//! let ray = pixel_to_ray(&default_camera(), (32.0, 24.0)).unwrap();
//! let samples = sample_along_ray(&ray, 20.0, 2, 0.1); // depths 16..24
//! let keys = vec![vec![1.0, -0.5]; 5];
//! let out = cross_attend(&[0.3, 0.7], &keys, &samples).unwrap();
//! let depth: f64 = out.weights.iter().zip(&samples.depths).map(|(w, d)| w * d).sum();
//! assert!((depth - 20.0).abs() < 1e-12);
//! ```

use nalgebra::Vector3;

use crate::config::PipelineConfig;
use crate::error::{CramError, Result};
use crate::features::FeatureMap;
use crate::geometry::{pixel_to_ray, CameraModel, PixelRay, RadarModel};
use crate::types::Grid;

/// Depth floor for clamped ray samples.
pub const SAMPLE_DEPTH_MIN: f64 = 0.1;

/// Candidate 3D locations along a pixel ray, depths ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub locations: Vec<Vector3<f64>>,
    pub depths: Vec<f64>,
    pub s: usize,
    pub epsilon: f64,
}

/// Attended location and its simplex weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub location: Vector3<f64>,
    pub weights: Vec<f64>,
}

/// Sample 2s+1 depths `d_est * (1 + epsilon * k)` for k in -s..=s, with any
/// nonpositive depth clamped to [`SAMPLE_DEPTH_MIN`].
pub fn sample_along_ray(ray: &PixelRay, d_est: f64, s: usize, epsilon: f64) -> RaySamples {
    let mut depths = Vec::with_capacity(2 * s + 1);
    for k in -(s as i64)..=(s as i64) {
        let d = d_est * (1.0 + epsilon * k as f64);
        depths.push(if d <= 0.0 { SAMPLE_DEPTH_MIN } else { d });
    }
    let locations = depths.iter().map(|&d| ray.point_at(d)).collect();
    RaySamples { locations, depths, s, epsilon }
}

/// For every sample, the feature of the radar cell nearest in (x, y);
/// samples outside the radar extent get the zero vector.
pub fn gather_radar_features(
    samples: &RaySamples,
    radar_fm: &FeatureMap,
    radar: &RadarModel,
) -> Vec<Vec<f64>> {
    samples
        .locations
        .iter()
        .map(|p| match radar.nearest_cell(p.x, p.y) {
            Some((r, c)) if r < radar_fm.rows && c < radar_fm.cols => {
                radar_fm.at(r, c).to_vec()
            }
            _ => vec![0.0; radar_fm.d],
        })
        .collect()
}

/// Max-subtraction stabilized softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Scaled dot-product attention over the ray samples: weights =
/// softmax(q . k / sqrt(d)), location = weighted sum of sample locations.
pub fn cross_attend(
    query: &[f64],
    keys: &[Vec<f64>],
    samples: &RaySamples,
) -> Result<AttentionResult> {
    if query.is_empty() {
        return Err(CramError::DimMismatch { expected: 1, got: 0 });
    }
    if keys.len() != samples.locations.len() {
        return Err(CramError::DimMismatch { expected: samples.locations.len(), got: keys.len() });
    }
    let d = query.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = Vec::with_capacity(keys.len());
    for k in keys {
        if k.len() != d {
            return Err(CramError::DimMismatch { expected: d, got: k.len() });
        }
        let dot: f64 = query.iter().zip(k).map(|(a, b)| a * b).sum();
        logits.push(dot * scale);
    }
    let weights = softmax(&logits);
    let mut location = Vector3::zeros();
    for (w, p) in weights.iter().zip(&samples.locations) {
        location += p * *w;
    }
    Ok(AttentionResult { location, weights })
}

/// Refine all foreground camera pixels: build the ray, sample, gather radar
/// keys, attend. Returns each attended location paired with the pixel's
/// camera feature vector. Cost is linear in the pixel count.
#[allow(clippy::too_many_arguments)]
pub fn refine_camera_points(
    pixels: &[(usize, usize)],
    depth_map: &Grid,
    camera_fm: &FeatureMap,
    radar_fm: &FeatureMap,
    cam: &CameraModel,
    radar: &RadarModel,
    config: &PipelineConfig,
) -> Result<Vec<(Vector3<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(pixels.len());
    for &(r, c) in pixels {
        let px = (c as f64 + 0.5, r as f64 + 0.5);
        let ray = pixel_to_ray(cam, px)?;
        let d_est = depth_map.get(r, c);
        let samples = sample_along_ray(&ray, d_est, config.s, config.epsilon);
        let query = camera_fm.at(r, c);
        let keys = gather_radar_features(&samples, radar_fm, radar);
        let attended = cross_attend(query, &keys, &samples)?;
        out.push((attended.location, query.to_vec()));
    }
    Ok(out)
}

/// Project camera foreground pixels without attention: the point sits at the
/// predicted depth on the pixel ray.
pub fn project_camera_points(
    pixels: &[(usize, usize)],
    depth_map: &Grid,
    camera_fm: &FeatureMap,
    cam: &CameraModel,
) -> Result<Vec<(Vector3<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(pixels.len());
    for &(r, c) in pixels {
        let px = (c as f64 + 0.5, r as f64 + 0.5);
        let ray = pixel_to_ray(cam, px)?;
        out.push((ray.point_at(depth_map.get(r, c)), camera_fm.at(r, c).to_vec()));
    }
    Ok(out)
}
