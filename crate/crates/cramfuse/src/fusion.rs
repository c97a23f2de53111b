//! Joint 3D point-cloud fusion and sensor dropout with its placement
//! variants.
//!
//! Fusing appends a two-entry modality code to every feature vector, and
//! the dropout draw never removes both modalities at once:
//!
//! ```
//! use cramfuse::fusion::{draw_dropout, fuse};
//! use nalgebra::Vector3;
//!
//! let cam = vec![(Vector3::new(10.0, 0.0, 1.0), vec![0.2, 0.4])];
//! let rad = vec![(Vector3::new(12.0, 1.0, 0.5), vec![0.9, 0.1])];
//! let cloud = fuse(&cam, &rad).unwrap();
//! assert_eq!(cloud.features[0], vec![0.2, 0.4, 1.0, 0.0]); // camera code
//! assert_eq!(cloud.features[1], vec![0.9, 0.1, 0.0, 1.0]); // radar code
//!
//! let d = draw_dropout(0.2, 7).unwrap();
//! assert_eq!(d, draw_dropout(0.2, 7).unwrap()); // seeded, reproducible
//! ```

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::features::{append_modality_code, Modality};

/// The fused foreground cloud: aligned rows of positions, (d+2)-dim
/// features carrying the modality code, and source tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCloud {
    pub points: Vec<Vector3<f64>>,
    pub features: Vec<Vec<f64>>,
    pub source: Vec<Modality>,
}

impl FusedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Where the dropout mask is applied in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutLocation {
    /// Conventional dropout: each point's features zeroed independently.
    Normal,
    /// Zero the chosen modality's raw 2D image before stage 1.
    Input,
    /// Remove the chosen modality's rows entirely.
    PointCloud,
    /// Zero the d feature entries of the chosen modality's rows,
    /// preserving positions and the modality code.
    PointFeature,
}

impl std::str::FromStr for DropoutLocation {
    type Err = CramError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(DropoutLocation::Normal),
            "input" => Ok(DropoutLocation::Input),
            "point_cloud" => Ok(DropoutLocation::PointCloud),
            "point_feature" => Ok(DropoutLocation::PointFeature),
            other => Err(CramError::Config(format!("unknown dropout location '{other}'"))),
        }
    }
}

/// Outcome of the two uniform draws deciding which modality (if any) drops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutDecision {
    pub r1: f64,
    pub r2: f64,
    pub dropped: Option<Modality>,
}

/// Draw (r1, r2) and resolve the branch: nothing when r1 >= p_drop;
/// otherwise camera when r2 >= 0.5, radar when r2 < 0.5. The two
/// modalities are never dropped together.
pub fn draw_dropout(p_drop: f64, seed: u64) -> Result<DropoutDecision> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(CramError::Config(format!("p_drop must be in [0,1), got {p_drop}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r1: f64 = rng.gen_range(0.0..1.0);
    let r2: f64 = rng.gen_range(0.0..1.0);
    let dropped = if r1 >= p_drop {
        None
    } else if r2 >= 0.5 {
        Some(Modality::Camera)
    } else {
        Some(Modality::Radar)
    };
    Ok(DropoutDecision { r1, r2, dropped })
}

/// Concatenate camera then radar rows, appending the modality code to each
/// feature vector. Both inputs must share the pre-code feature dimension.
pub fn fuse(
    camera: &[(Vector3<f64>, Vec<f64>)],
    radar: &[(Vector3<f64>, Vec<f64>)],
) -> Result<FusedCloud> {
    let d = camera
        .first()
        .map(|(_, f)| f.len())
        .or_else(|| radar.first().map(|(_, f)| f.len()));
    let mut cloud = FusedCloud { points: Vec::new(), features: Vec::new(), source: Vec::new() };
    let Some(d) = d else { return Ok(cloud) };
    for (set, modality) in [(camera, Modality::Camera), (radar, Modality::Radar)] {
        for (p, f) in set {
            if f.len() != d {
                return Err(CramError::DimMismatch { expected: d, got: f.len() });
            }
            cloud.points.push(*p);
            cloud.features.push(append_modality_code(f, modality));
            cloud.source.push(modality);
        }
    }
    Ok(cloud)
}

/// Apply sensor dropout to a fused cloud.
///
/// The `Input` location cannot be applied here (it acts on raw images
/// before stage 1); use [`draw_dropout`] and zero the chosen image instead.
pub fn sensor_dropout(
    cloud: &FusedCloud,
    p_drop: f64,
    seed: u64,
    location: DropoutLocation,
) -> Result<FusedCloud> {
    let d_code = 2;
    match location {
        DropoutLocation::Normal => {
            // per-point independent dropout, no modality coupling, no rescaling
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = cloud.clone();
            for f in out.features.iter_mut() {
                if rng.gen_range(0.0..1.0) < p_drop {
                    let d = f.len() - d_code;
                    for v in f.iter_mut().take(d) {
                        *v = 0.0;
                    }
                }
            }
            Ok(out)
        }
        DropoutLocation::PointFeature => {
            let decision = draw_dropout(p_drop, seed)?;
            let Some(target) = decision.dropped else { return Ok(cloud.clone()) };
            let mut out = cloud.clone();
            for (f, &src) in out.features.iter_mut().zip(&out.source) {
                if src == target {
                    let d = f.len() - d_code;
                    for v in f.iter_mut().take(d) {
                        *v = 0.0;
                    }
                }
            }
            Ok(out)
        }
        DropoutLocation::PointCloud => {
            let decision = draw_dropout(p_drop, seed)?;
            let Some(target) = decision.dropped else { return Ok(cloud.clone()) };
            let mut out = FusedCloud { points: Vec::new(), features: Vec::new(), source: Vec::new() };
            for i in 0..cloud.len() {
                if cloud.source[i] != target {
                    out.points.push(cloud.points[i]);
                    out.features.push(cloud.features[i].clone());
                    out.source.push(cloud.source[i]);
                }
            }
            Ok(out)
        }
        DropoutLocation::Input => Err(CramError::Config(
            "input-location dropout applies to raw images before stage 1".into(),
        )),
    }
}
