//! Seeded synthetic scenes and sensor renderings: ground-truth boxes on a
//! world rectangle, a shaded pinhole camera view with sparse depth
//! supervision, a BEV radar intensity image, and the corruption and
//! sparsification protocols used by the robustness experiments.
//!
//! Generation is a pure function of the seed:
//!
//! ```
//! use cramfuse::scene::{generate_scene, SceneConfig};
//!
//! let config = SceneConfig::default();
//! let a = generate_scene(7, &config).unwrap();
//! assert_eq!(a, generate_scene(7, &config).unwrap());
//! assert!(!a.boxes.is_empty() && !a.ghosts.is_empty());
//! ```

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::geometry::{pixel_to_ray, CameraModel, PixelRay, RadarModel, RigidTransform};
use crate::metrics::rotated_bev_iou;
use crate::types::{BoolGrid, Box3D, Grid};

/// Weather label attached to a scene; `Noisy` scenes get camera noise
/// applied by the robustness protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Noisy,
}

/// Ground-truth world: boxes on a rectangle, plus the weather tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<Box3D>,
    /// Ghost footprints: radar clutter blobs with no physical object behind
    /// them, rendered slightly weaker than real returns. The camera never
    /// sees them, which is what makes fusion worth having.
    #[serde(default)]
    pub ghosts: Vec<Box3D>,
    pub weather: Weather,
    pub bounds_min: (f64, f64),
    pub bounds_max: (f64, f64),
}

/// One rendered frame: camera intensities, per-pixel true depth (range
/// along the viewing ray; 0 where no surface), the sparse depth
/// supervision mask, and the radar intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub camera_image: Grid,
    pub true_depth: Grid,
    pub depth_valid: BoolGrid,
    pub radar_rf: Grid,
}

/// Camera degradation knobs for the robustness experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub gaussian_sigma: f64,
    pub rf_intensity_threshold: Option<f64>,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gaussian_sigma < 0.0 {
            return Err(CramError::Config("gaussian_sigma must be >= 0".into()));
        }
        if let Some(t) = self.rf_intensity_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(CramError::Config(format!("rf threshold must be in [0,1], got {t}")));
            }
        }
        Ok(())
    }
}

/// Scene generation and rendering knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub bounds_min: (f64, f64),
    pub bounds_max: (f64, f64),
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    pub heading_range: (f64, f64),
    pub weather: Weather,
    /// Placement attempts per box before giving up.
    pub max_retries: usize,
    /// Bernoulli rate of the sparse depth supervision mask.
    pub depth_valid_rate: f64,
    /// Mean background RF intensity.
    pub clutter_level: f64,
    /// Log-normal speckle sigma (multiplicative, mean 1).
    pub speckle_sigma: f64,
    /// RF intensity floor inside a box footprint.
    pub footprint_base: f64,
    /// Extra RF intensity at the footprint center, decaying radially.
    pub footprint_peak: f64,
    /// Gaussian radius of the center peak, as a fraction of the BEV
    /// half-diagonal.
    pub peak_radius_frac: f64,
    /// Range in meters at which surface shading bottoms out. Shading falls
    /// linearly with range, which is what makes depth recoverable from
    /// appearance.
    pub shade_decay: f64,
    pub min_ghosts: usize,
    pub max_ghosts: usize,
    /// Ghost intensity relative to a real footprint.
    pub ghost_gain: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            bounds_min: (6.0, -10.0),
            bounds_max: (34.0, 10.0),
            min_boxes: 2,
            max_boxes: 5,
            length_range: (2.4, 2.8),
            width_range: (1.6, 2.0),
            height_range: (1.4, 1.8),
            // one-way road-aligned traffic with mild curvature
            heading_range: (0.0, 0.3),
            weather: Weather::Clear,
            max_retries: 200,
            depth_valid_rate: 0.3,
            clutter_level: 0.06,
            speckle_sigma: 0.25,
            footprint_base: 0.45,
            footprint_peak: 0.5,
            peak_radius_frac: 0.6,
            shade_decay: 40.0,
            min_ghosts: 2,
            max_ghosts: 4,
            ghost_gain: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("length_range", self.length_range),
            ("width_range", self.width_range),
            ("height_range", self.height_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && hi >= lo) {
                return Err(CramError::Config(format!("{name} must be positive and ordered")));
            }
        }
        if self.heading_range.1 < self.heading_range.0 {
            return Err(CramError::Config("heading_range must be ordered".into()));
        }
        if self.bounds_max.0 <= self.bounds_min.0 || self.bounds_max.1 <= self.bounds_min.1 {
            return Err(CramError::Config("scene bounds are degenerate".into()));
        }
        if self.max_boxes < self.min_boxes {
            return Err(CramError::Config("max_boxes < min_boxes".into()));
        }
        if !(0.0..=1.0).contains(&self.depth_valid_rate) {
            return Err(CramError::Config("depth_valid_rate must be in [0,1]".into()));
        }
        for (name, v) in [
            ("clutter_level", self.clutter_level),
            ("speckle_sigma", self.speckle_sigma),
            ("footprint_base", self.footprint_base),
            ("footprint_peak", self.footprint_peak),
        ] {
            if v < 0.0 {
                return Err(CramError::Config(format!("{name} must be >= 0")));
            }
        }
        if self.peak_radius_frac <= 0.0 || self.shade_decay <= 0.0 {
            return Err(CramError::Config("peak_radius_frac and shade_decay must be positive".into()));
        }
        if self.max_ghosts < self.min_ghosts {
            return Err(CramError::Config("max_ghosts < min_ghosts".into()));
        }
        if !(0.0..=1.0).contains(&self.ghost_gain) {
            return Err(CramError::Config("ghost_gain must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Ego-mounted forward camera: 128x96 at (0, 0, 1.6), optical axis along
/// world +x.
pub fn default_camera() -> CameraModel {
    // columns: camera x (world -y), camera y (world -z), camera z (world +x)
    let rot = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let pose = RigidTransform::new(rot, Vector3::new(0.0, 0.0, 1.6)).unwrap();
    CameraModel::new(120.0, 120.0, 64.0, 48.0, 128, 96, pose).unwrap()
}

/// BEV radar covering x in [0, 40], y in [-12, 12] at 0.2 m cells.
pub fn default_radar() -> RadarModel {
    RadarModel::new(0.0, -12.0, 0.2, 120, 200, 0.5, RigidTransform::identity()).unwrap()
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn bev_in_bounds(b: &Box3D, min: (f64, f64), max: (f64, f64)) -> bool {
    b.bev_corners()
        .iter()
        .all(|&(x, y)| x >= min.0 && x <= max.0 && y >= min.1 && y <= max.1)
}

/// Sample a scene: box count uniform in [min_boxes, max_boxes], rejection
/// placement keeping footprints inside the bounds and pairwise disjoint.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = if config.max_boxes > config.min_boxes {
        rng.gen_range(config.min_boxes..=config.max_boxes)
    } else {
        config.max_boxes
    };
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..config.max_retries {
            let l = sample_range(&mut rng, config.length_range);
            let w = sample_range(&mut rng, config.width_range);
            let h = sample_range(&mut rng, config.height_range);
            let heading = sample_range(&mut rng, config.heading_range);
            let cx = rng.gen_range(config.bounds_min.0..config.bounds_max.0);
            let cy = rng.gen_range(config.bounds_min.1..config.bounds_max.1);
            let cand = Box3D::new(Vector3::new(cx, cy, h / 2.0), Vector3::new(l, w, h), heading);
            if !bev_in_bounds(&cand, config.bounds_min, config.bounds_max) {
                continue;
            }
            if boxes.iter().all(|b| rotated_bev_iou(b, &cand) == 0.0) {
                boxes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CramError::Domain(format!(
                "could not place box {} of {count} within {} attempts",
                boxes.len() + 1,
                config.max_retries
            )));
        }
    }
    let ghost_count = if config.max_ghosts > config.min_ghosts {
        rng.gen_range(config.min_ghosts..=config.max_ghosts)
    } else {
        config.max_ghosts
    };
    let mut ghosts: Vec<Box3D> = Vec::with_capacity(ghost_count);
    for _ in 0..ghost_count {
        let mut placed = false;
        for _ in 0..config.max_retries {
            let l = sample_range(&mut rng, config.length_range);
            let w = sample_range(&mut rng, config.width_range);
            let h = sample_range(&mut rng, config.height_range);
            let heading = sample_range(&mut rng, config.heading_range);
            let cx = rng.gen_range(config.bounds_min.0..config.bounds_max.0);
            let cy = rng.gen_range(config.bounds_min.1..config.bounds_max.1);
            let cand = Box3D::new(Vector3::new(cx, cy, h / 2.0), Vector3::new(l, w, h), heading);
            if !bev_in_bounds(&cand, config.bounds_min, config.bounds_max) {
                continue;
            }
            // margin keeps ghost and real footprints out of each other's
            // voxel neighborhoods
            let inflated = Box3D::new(
                cand.center,
                cand.size + Vector3::new(2.0, 2.0, 0.0),
                cand.heading,
            );
            if boxes.iter().chain(&ghosts).all(|b| rotated_bev_iou(b, &inflated) == 0.0) {
                ghosts.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CramError::Domain(format!(
                "could not place ghost {} of {ghost_count} within {} attempts",
                ghosts.len() + 1,
                config.max_retries
            )));
        }
    }
    Ok(Scene {
        boxes,
        ghosts,
        weather: config.weather,
        bounds_min: config.bounds_min,
        bounds_max: config.bounds_max,
    })
}

/// Slab-method intersection of a world ray with an oriented box. Returns
/// the entering and leaving ray parameters when the ray hits.
pub fn ray_box_intersect(ray: &PixelRay, b: &Box3D) -> Option<(f64, f64)> {
    let (s, c) = b.heading.sin_cos();
    // into the box frame: rotate by -heading about z after centering
    let to_box = |p: &Vector3<f64>| {
        Vector3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z)
    };
    let o = to_box(&(ray.origin - b.center));
    let d = to_box(&ray.direction);
    let half = b.size / 2.0;
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if d[axis].abs() < 1e-15 {
            if o[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let t1 = (-half[axis] - o[axis]) / d[axis];
        let t2 = (half[axis] - o[axis]) / d[axis];
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        t_near = t_near.max(lo);
        t_far = t_far.min(hi);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        return None;
    }
    Some((t_near, t_far))
}

fn background_intensity(row: usize, col: usize) -> f64 {
    0.05 + 0.05 * (0.5 + 0.25 * (0.35 * row as f64).sin() + 0.25 * (0.23 * col as f64).sin())
}

/// Surface shading at range `t`: linear falloff from bright (near) to dark
/// at `shade_decay` meters, clamped. Linear-in-range shading keeps depth
/// decodable by an affine map from appearance.
pub fn shade(t: f64, config: &SceneConfig) -> f64 {
    (0.95 - 0.7 * t / config.shade_decay).clamp(0.2, 0.95)
}

/// Render the camera view: per-pixel range to the nearest box surface
/// (0 where the ray escapes), a shaded intensity image, and the seeded
/// sparse depth-supervision mask.
///
/// Surface intensity falls off with range, so appearance carries the depth
/// signal the depth head regresses.
pub fn render_camera(
    scene: &Scene,
    cam: &CameraModel,
    config: &SceneConfig,
    seed: u64,
) -> Result<SensorFrame> {
    let (h, w) = (cam.height, cam.width);
    let mut image = Grid::zeros(h, w);
    let mut depth = Grid::zeros(h, w);
    let mut valid = BoolGrid::filled(h, w, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in 0..h {
        for c in 0..w {
            let ray = pixel_to_ray(cam, (c as f64 + 0.5, r as f64 + 0.5))?;
            let mut best = f64::INFINITY;
            for b in &scene.boxes {
                if let Some((t_near, _)) = ray_box_intersect(&ray, b) {
                    let t = t_near.max(0.0);
                    if t > 0.0 && t < best {
                        best = t;
                    }
                }
            }
            if best.is_finite() {
                depth.set(r, c, best);
                image.set(r, c, shade(best, config));
                if rng.gen_range(0.0..1.0) < config.depth_valid_rate {
                    valid.set(r, c, true);
                }
            } else {
                image.set(r, c, background_intensity(r, c).clamp(0.0, 1.0));
            }
        }
    }
    Ok(SensorFrame { camera_image: image, true_depth: depth, depth_valid: valid, radar_rf: Grid::zeros(0, 0) })
}

/// Render the BEV radar intensity image: footprint cells get a base level
/// plus a radial peak at the box center; ghost footprints get the same
/// profile scaled by `ghost_gain`; background cells get clutter.
/// Everything is multiplied by seeded log-normal speckle and clipped.
pub fn render_radar(scene: &Scene, radar: &RadarModel, config: &SceneConfig, seed: u64) -> Grid {
    let mut rf = Grid::zeros(radar.rows, radar.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = config.speckle_sigma;
    let speckle_dist = Normal::new(0.0, sigma).unwrap();
    for row in 0..radar.rows {
        for col in 0..radar.cols {
            let x = radar.min_x + (col as f64 + 0.5) * radar.cell_size;
            let y = radar.min_y + (row as f64 + 0.5) * radar.cell_size;
            let mut mean = config.clutter_level;
            for b in &scene.boxes {
                if b.contains_bev(x, y) {
                    let dx = x - b.center.x;
                    let dy = y - b.center.y;
                    let rho = config.peak_radius_frac * (b.size.x.hypot(b.size.y) / 2.0);
                    let radial = (-(dx * dx + dy * dy) / (2.0 * rho * rho)).exp();
                    mean = mean.max(config.footprint_base + config.footprint_peak * radial);
                }
            }
            for b in &scene.ghosts {
                if b.contains_bev(x, y) {
                    let dx = x - b.center.x;
                    let dy = y - b.center.y;
                    let rho = config.peak_radius_frac * (b.size.x.hypot(b.size.y) / 2.0);
                    let radial = (-(dx * dx + dy * dy) / (2.0 * rho * rho)).exp();
                    mean = mean.max(
                        config.ghost_gain
                            * (config.footprint_base + config.footprint_peak * radial),
                    );
                }
            }
            // log-normal with unit mean: exp(sigma z - sigma^2 / 2)
            let speckle = if sigma > 0.0 {
                (speckle_dist.sample(&mut rng) - sigma * sigma / 2.0).exp()
            } else {
                1.0
            };
            rf.set(row, col, (mean * speckle).clamp(0.0, 1.0));
        }
    }
    rf
}

/// Render camera and radar for one scene with split sub-seeds.
pub fn render_frame(
    scene: &Scene,
    cam: &CameraModel,
    radar: &RadarModel,
    config: &SceneConfig,
    seed: u64,
) -> Result<SensorFrame> {
    let mut frame = render_camera(scene, cam, config, crate::types::child_seed(seed, 0))?;
    frame.radar_rf = render_radar(scene, radar, config, crate::types::child_seed(seed, 1));
    Ok(frame)
}

/// Additive Gaussian noise on the camera image, clipped to [0,1]; depth
/// channels untouched. `sigma = 0` is an exact identity.
pub fn corrupt_camera(frame: &SensorFrame, sigma: f64, seed: u64) -> Result<SensorFrame> {
    if sigma < 0.0 {
        return Err(CramError::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = frame.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).unwrap();
    for v in out.camera_image.data.iter_mut() {
        *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Exactly the cells with intensity strictly above `t`, row-major.
pub fn threshold_rf(rf: &Grid, t: f64) -> Result<Vec<((usize, usize), f64)>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CramError::Domain(format!("threshold must be in [0,1], got {t}")));
    }
    let mut out = Vec::new();
    for r in 0..rf.rows {
        for c in 0..rf.cols {
            let v = rf.get(r, c);
            if v > t {
                out.push(((r, c), v));
            }
        }
    }
    Ok(out)
}
