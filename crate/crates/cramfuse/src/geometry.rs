//! Sensor models, coordinate frames, projection in both directions, and the
//! two 3D augmentations.
//!
//! Conventions: the world frame is the ego frame at the capture instant,
//! x forward, y left, z up. The camera frame follows the usual optical
//! convention (z forward along the optical axis, x right, y down).
//! Extrinsics map sensor coordinates to world coordinates.
//!
//! Projection and unprojection are exact inverses along a pixel ray:
//!
//! ```
//! use cramfuse::geometry::{project_pixel_depth, world_to_pixel};
//! use cramfuse::scene::default_camera;
//!
//! let cam = default_camera();
//! let p = project_pixel_depth(&cam, (20.0, 30.0), 15.0).unwrap();
//! let ((u, v), depth) = world_to_pixel(&cam, &p).unwrap();
//! assert!((u - 20.0).abs() < 1e-9 && (v - 30.0).abs() < 1e-9);
//! assert!((depth - 15.0).abs() < 1e-9);
//! ```

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::types::{normalize_angle, Box3D};

/// Rigid transform sensor -> world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err >= 1e-9 {
            return Err(CramError::Domain(format!(
                "rotation not orthonormal (||R'R - I||_inf = {err:.3e})"
            )));
        }
        if (self.rotation.determinant() - 1.0).abs() >= 1e-9 {
            return Err(CramError::Domain("rotation determinant is not +1".into()));
        }
        Ok(())
    }

    /// Rotation about the z axis by `angle`, plus translation.
    pub fn rot_z(angle: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = angle.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        RigidTransform { rotation, translation }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot = self.rotation.transpose();
        RigidTransform { rotation: rot, translation: -(rot * self.translation) }
    }
}

/// Pinhole camera with rigid extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsics: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsics: RigidTransform,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CramError::Domain("focal lengths must be positive".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(CramError::Domain("principal point outside image".into()));
        }
        extrinsics.validate()?;
        Ok(CameraModel { fx, fy, cx, cy, width, height, extrinsics })
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.translation
    }

    fn in_bounds(&self, px: (f64, f64)) -> bool {
        px.0 >= 0.0 && px.0 < self.width as f64 && px.1 >= 0.0 && px.1 < self.height as f64
    }
}

/// A world-frame viewing ray through a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelRay {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl PixelRay {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Cast the world-frame viewing ray through pixel `(u, v)`.
///
/// The direction is unit length and points into the positive-depth half
/// space of the camera.
pub fn pixel_to_ray(cam: &CameraModel, px: (f64, f64)) -> Result<PixelRay> {
    if !cam.in_bounds(px) {
        return Err(CramError::Domain(format!("pixel {px:?} outside {}x{} image", cam.width, cam.height)));
    }
    let dir_cam = Vector3::new((px.0 - cam.cx) / cam.fx, (px.1 - cam.cy) / cam.fy, 1.0);
    let dir_world = cam.extrinsics.rotation * dir_cam;
    Ok(PixelRay { origin: cam.center(), direction: dir_world.normalize() })
}

/// Lift pixel `(u, v)` with camera-frame depth `z = depth` to a world point.
pub fn project_pixel_depth(cam: &CameraModel, px: (f64, f64), depth: f64) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(CramError::Domain(format!("depth must be positive, got {depth}")));
    }
    if !cam.in_bounds(px) {
        return Err(CramError::Domain(format!("pixel {px:?} outside {}x{} image", cam.width, cam.height)));
    }
    let p_cam = Vector3::new(
        (px.0 - cam.cx) / cam.fx * depth,
        (px.1 - cam.cy) / cam.fy * depth,
        depth,
    );
    Ok(cam.extrinsics.apply(&p_cam))
}

/// Project a world point to the image plane. Returns `None` when the point
/// is at or behind the camera.
pub fn world_to_pixel(cam: &CameraModel, p: &Vector3<f64>) -> Option<((f64, f64), f64)> {
    let p_cam = cam.extrinsics.apply_inverse(p);
    if p_cam.z <= 0.0 {
        return None;
    }
    let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
    let v = cam.fy * p_cam.y / p_cam.z + cam.cy;
    Some(((u, v), p_cam.z))
}

/// Radar as a BEV grid: a world-frame rectangle sliced into square cells.
///
/// Cell `(row, col)` covers `[min + idx*cell, min + (idx+1)*cell)` with the
/// row axis along world y and the column axis along world x. All radar
/// points live at `sensor_height` (pillar assumption).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarModel {
    pub min_x: f64,
    pub min_y: f64,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub sensor_height: f64,
    pub pose: RigidTransform,
}

impl RadarModel {
    pub fn new(
        min_x: f64,
        min_y: f64,
        cell_size: f64,
        rows: usize,
        cols: usize,
        sensor_height: f64,
        pose: RigidTransform,
    ) -> Result<Self> {
        if cell_size <= 0.0 {
            return Err(CramError::Domain("cell_size must be positive".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(CramError::Domain("radar extent is degenerate".into()));
        }
        pose.validate()?;
        Ok(RadarModel { min_x, min_y, cell_size, rows, cols, sensor_height, pose })
    }

    pub fn max_x(&self) -> f64 {
        self.min_x + self.cols as f64 * self.cell_size
    }

    pub fn max_y(&self) -> f64 {
        self.min_y + self.rows as f64 * self.cell_size
    }

    /// Nearest cell to a world (x, y), or `None` outside the extent.
    /// Ties at cell boundaries break toward the smaller (row, col).
    pub fn nearest_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.min_x || x >= self.max_x() || y < self.min_y || y >= self.max_y() {
            return None;
        }
        let pick = |v: f64, min: f64, n: usize| -> usize {
            let u = (v - min) / self.cell_size;
            let mut k = u.floor() as i64;
            if u == u.floor() && k > 0 {
                k -= 1; // boundary point is equidistant; take the smaller index
            }
            (k.clamp(0, n as i64 - 1)) as usize
        };
        Some((pick(y, self.min_y, self.rows), pick(x, self.min_x, self.cols)))
    }
}

/// World point of a radar cell center, at the sensor elevation.
pub fn radar_cell_to_point(radar: &RadarModel, cell: (usize, usize)) -> Result<Vector3<f64>> {
    let (row, col) = cell;
    if row >= radar.rows || col >= radar.cols {
        return Err(CramError::Domain(format!(
            "cell ({row}, {col}) outside {}x{} radar grid",
            radar.rows, radar.cols
        )));
    }
    let x = radar.min_x + (col as f64 + 0.5) * radar.cell_size;
    let y = radar.min_y + (row as f64 + 0.5) * radar.cell_size;
    Ok(Vector3::new(x, y, radar.sensor_height))
}

/// Project a 3D box to the image as the convex hull of its visible corners.
///
/// Corners behind the camera are dropped rather than frustum-clipped; the
/// resulting label noise is acceptable for mask supervision. Returns `None`
/// when every corner is behind the camera.
pub fn project_box_to_image(cam: &CameraModel, b: &Box3D) -> Option<Vec<(f64, f64)>> {
    let pts: Vec<(f64, f64)> = b
        .corners()
        .iter()
        .filter_map(|c| world_to_pixel(cam, c).map(|(px, _)| px))
        .collect();
    if pts.is_empty() {
        return None;
    }
    Some(convex_hull(&pts))
}

/// Andrew's monotone chain. Returns counter-clockwise hull vertices
/// (image coordinates treated as plain xy).
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Mirror points and boxes across the x axis (y -> -y); headings negate.
pub fn augment_flip_x(points: &[Vector3<f64>], boxes: &[Box3D]) -> (Vec<Vector3<f64>>, Vec<Box3D>) {
    let pts = points.iter().map(|p| Vector3::new(p.x, -p.y, p.z)).collect();
    let bxs = boxes
        .iter()
        .map(|b| {
            let mut nb = b.clone();
            nb.center.y = -nb.center.y;
            nb.heading = normalize_angle(-b.heading);
            nb
        })
        .collect();
    (pts, bxs)
}

/// Rotate points and boxes about the world z axis by `angle`.
pub fn augment_rotate_z(
    points: &[Vector3<f64>],
    boxes: &[Box3D],
    angle: f64,
) -> (Vec<Vector3<f64>>, Vec<Box3D>) {
    let (s, c) = angle.sin_cos();
    let rot = |p: &Vector3<f64>| Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z);
    let pts = points.iter().map(rot).collect();
    let bxs = boxes
        .iter()
        .map(|b| {
            let mut nb = b.clone();
            nb.center = rot(&b.center);
            nb.heading = normalize_angle(b.heading + angle);
            nb
        })
        .collect();
    (pts, bxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_cam() -> CameraModel {
        CameraModel::new(100.0, 110.0, 64.0, 48.0, 128, 96, RigidTransform::identity()).unwrap()
    }

    fn random_extrinsics(rng: &mut impl Rng) -> RigidTransform {
        // compose rotations about z and x for a generic orientation
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-0.4..0.4);
        let rz = RigidTransform::rot_z(a, Vector3::zeros()).rotation;
        let (sb, cb) = b.sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cb, -sb, 0.0, sb, cb);
        let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0));
        RigidTransform::new(rz * rx, t).unwrap()
    }

    #[test]
    fn ray_at_principal_point_is_optical_axis() {
        let cam = test_cam();
        let ray = pixel_to_ray(&cam, (64.0, 48.0)).unwrap();
        assert!((ray.direction - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ray_one_focal_length_off() {
        let cam =
            CameraModel::new(100.0, 100.0, 128.0, 48.0, 256, 96, RigidTransform::identity())
                .unwrap();
        // principal point offset by exactly fx: direction proportional to (1, 0, 1)
        let ray = pixel_to_ray(&cam, (128.0 + 100.0, 48.0)).unwrap();
        let expect = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert!((ray.direction - expect).norm() < 1e-12);
    }

    #[test]
    fn ray_out_of_bounds_rejected() {
        let cam = test_cam();
        assert!(pixel_to_ray(&cam, (-1.0, 0.0)).is_err());
        assert!(pixel_to_ray(&cam, (0.0, 96.0)).is_err());
    }

    #[test]
    fn project_principal_point() {
        let cam = test_cam();
        let p = project_pixel_depth(&cam, (64.0, 48.0), 5.0).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
        // one focal length off: similar triangles give x = depth
        let cam2 =
            CameraModel::new(100.0, 110.0, 128.0, 48.0, 256, 96, RigidTransform::identity())
                .unwrap();
        let p2 = project_pixel_depth(&cam2, (128.0 + 100.0, 48.0), 5.0).unwrap();
        assert!((p2 - Vector3::new(5.0, 0.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn project_rejects_nonpositive_depth() {
        let cam = test_cam();
        assert!(project_pixel_depth(&cam, (10.0, 10.0), 0.0).is_err());
        assert!(project_pixel_depth(&cam, (10.0, 10.0), -2.0).is_err());
    }

    #[test]
    fn world_to_pixel_identity_case() {
        let cam = test_cam();
        let ((u, v), d) = world_to_pixel(&cam, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert!((u - 64.0).abs() < 1e-12 && (v - 48.0).abs() < 1e-12);
        assert!((d - 5.0).abs() < 1e-12);
        assert!(world_to_pixel(&cam, &Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(world_to_pixel(&cam, &Vector3::new(0.0, 0.0, 0.0)).is_none());
    }

    // Independent oracle: full 4x4 homogeneous projection matrix.
    fn homogeneous_lift(cam: &CameraModel, px: (f64, f64), depth: f64) -> Vector3<f64> {
        let k_inv = Matrix3::new(
            1.0 / cam.fx, 0.0, -cam.cx / cam.fx,
            0.0, 1.0 / cam.fy, -cam.cy / cam.fy,
            0.0, 0.0, 1.0,
        );
        let p_cam = k_inv * Vector3::new(px.0, px.1, 1.0) * depth;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.extrinsics.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.extrinsics.translation);
        let h = m * p_cam.push(1.0);
        Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w)
    }

    #[test]
    fn lift_matches_homogeneous_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let ext = random_extrinsics(&mut rng);
            let cam = CameraModel::new(90.0, 105.0, 60.0, 45.0, 128, 96, ext).unwrap();
            let px = (rng.gen_range(0.0..127.0), rng.gen_range(0.0..95.0));
            let depth = rng.gen_range(0.5..60.0);
            let p = project_pixel_depth(&cam, px, depth).unwrap();
            let q = homogeneous_lift(&cam, px, depth);
            assert!((p - q).norm() < 1e-9, "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn roundtrip_project_unproject() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let ext = random_extrinsics(&mut rng);
            let cam = CameraModel::new(85.0, 95.0, 63.0, 47.0, 128, 96, ext).unwrap();
            let px = (rng.gen_range(0.0..127.0), rng.gen_range(0.0..95.0));
            let depth = rng.gen_range(0.3..80.0);
            let p = project_pixel_depth(&cam, px, depth).unwrap();
            let ((u, v), z) = world_to_pixel(&cam, &p).unwrap();
            assert!((u - px.0).abs() < 1e-9 && (v - px.1).abs() < 1e-9);
            assert!((z - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn lifted_point_lies_on_ray() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let ext = random_extrinsics(&mut rng);
            let cam = CameraModel::new(85.0, 95.0, 63.0, 47.0, 128, 96, ext).unwrap();
            let px = (rng.gen_range(0.0..127.0), rng.gen_range(0.0..95.0));
            let depth = rng.gen_range(0.3..80.0);
            let p = project_pixel_depth(&cam, px, depth).unwrap();
            let ray = pixel_to_ray(&cam, px).unwrap();
            let t = (p - ray.origin).dot(&ray.direction);
            let dist = (p - ray.point_at(t)).norm();
            assert!(dist < 1e-9, "distance to ray {dist}");
            assert!(t > 0.0);
        }
    }

    #[test]
    fn radar_cell_center_convention() {
        let radar = RadarModel::new(
            -10.0, -10.0, 1.0, 20, 20, 0.8, RigidTransform::identity(),
        )
        .unwrap();
        // cell (10, 10) covers [0, 1) x [0, 1); center at (0.5, 0.5)
        let p = radar_cell_to_point(&radar, (10, 10)).unwrap();
        assert!((p - Vector3::new(0.5, 0.5, 0.8)).norm() < 1e-12);
        // corner cell
        let q = radar_cell_to_point(&radar, (0, 0)).unwrap();
        assert!((q - Vector3::new(-9.5, -9.5, 0.8)).norm() < 1e-12);
        assert!(radar_cell_to_point(&radar, (20, 0)).is_err());
        // pillar: z is uniformly the sensor height
        for r in 0..20 {
            for c in 0..20 {
                assert_eq!(radar_cell_to_point(&radar, (r, c)).unwrap().z, 0.8);
            }
        }
    }

    #[test]
    fn nearest_cell_ties_toward_smaller_index() {
        let radar =
            RadarModel::new(0.0, 0.0, 1.0, 4, 4, 0.0, RigidTransform::identity()).unwrap();
        assert_eq!(radar.nearest_cell(0.5, 0.5), Some((0, 0)));
        // x = 1.0 is equidistant between cell centers 0 and 1
        assert_eq!(radar.nearest_cell(1.0, 0.5), Some((0, 0)));
        assert_eq!(radar.nearest_cell(1.0 + 1e-9, 0.5), Some((0, 1)));
        assert_eq!(radar.nearest_cell(4.0, 0.5), None);
        assert_eq!(radar.nearest_cell(-0.1, 0.5), None);
    }

    #[test]
    fn box_projection_symmetric_rectangle() {
        let cam = test_cam();
        // unit cube on the optical axis at depth 10 (world z is optical axis here)
        let b = Box3D::new(Vector3::new(0.0, 0.0, 10.0), Vector3::new(1.0, 1.0, 1.0), 0.0);
        let poly = project_box_to_image(&cam, &b).unwrap();
        let (mut su, mut sv) = (0.0, 0.0);
        for &(u, v) in &poly {
            su += u;
            sv += v;
        }
        assert!((su / poly.len() as f64 - 64.0).abs() < 1e-9);
        assert!((sv / poly.len() as f64 - 48.0).abs() < 1e-9);
    }

    #[test]
    fn box_projection_matches_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            let cam = test_cam();
            let b = Box3D::new(
                Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(6.0..30.0)),
                Vector3::new(rng.gen_range(0.5..4.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..2.0)),
                rng.gen_range(-3.0..3.0),
            );
            let poly = project_box_to_image(&cam, &b).unwrap();
            // every projected corner must be inside or on the hull
            let corners: Vec<(f64, f64)> = b
                .corners()
                .iter()
                .filter_map(|c| world_to_pixel(&cam, c).map(|(px, _)| px))
                .collect();
            for &(u, v) in &corners {
                for i in 0..poly.len() {
                    let a = poly[i];
                    let bb = poly[(i + 1) % poly.len()];
                    let cr = (bb.0 - a.0) * (v - a.1) - (bb.1 - a.1) * (u - a.0);
                    assert!(cr >= -1e-7, "corner ({u},{v}) outside hull edge");
                }
            }
            // and every hull vertex is one of the projected corners
            for &h in &poly {
                assert!(corners.iter().any(|&c| (c.0 - h.0).abs() < 1e-12 && (c.1 - h.1).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn box_fully_behind_camera_not_visible() {
        let cam = test_cam();
        let b = Box3D::new(Vector3::new(0.0, 0.0, -10.0), Vector3::new(1.0, 1.0, 1.0), 0.0);
        assert!(project_box_to_image(&cam, &b).is_none());
    }

    #[test]
    fn augmentations_identity_and_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<Vector3<f64>> =
            (0..50).map(|_| Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..2.0))).collect();
        let boxes: Vec<Box3D> = (0..5)
            .map(|_| {
                Box3D::new(
                    Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0.8),
                    Vector3::new(4.0, 2.0, 1.6),
                    rng.gen_range(-3.0..3.0),
                )
            })
            .collect();

        let (p0, b0) = augment_rotate_z(&pts, &boxes, 0.0);
        for (a, b) in pts.iter().zip(&p0) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in boxes.iter().zip(&b0) {
            assert!((a.center - b.center).norm() < 1e-12);
        }

        let (p1, b1) = augment_flip_x(&pts, &boxes);
        let (p2, b2) = augment_flip_x(&p1, &b1);
        for (a, b) in pts.iter().zip(&p2) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in boxes.iter().zip(&b2) {
            assert!((a.center - b.center).norm() < 1e-12 && (a.heading - b.heading).abs() < 1e-12);
        }

        let q = std::f64::consts::FRAC_PI_4;
        let (p3, b3) = augment_rotate_z(&pts, &boxes, q);
        let (p4, b4) = augment_rotate_z(&p3, &b3, -q);
        for (a, b) in pts.iter().zip(&p4) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in boxes.iter().zip(&b4) {
            assert!((a.center - b.center).norm() < 1e-12 && (a.heading - b.heading).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let pts: Vec<Vector3<f64>> =
            (0..30).map(|_| Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..2.0))).collect();
        let (rot, _) = augment_rotate_z(&pts, &[], 0.6);
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let d0 = (pts[i] - pts[j]).norm();
                let d1 = (rot[i] - rot[j]).norm();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }
}
