//! Shared value types: dense grids, 3D boxes, angle and seeding helpers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Dense row-major `f64` grid, used for images, depth maps, and RF imagery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Grid { rows, cols, data: vec![value; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Dense row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoolGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolGrid {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        BoolGrid { rows, cols, data: vec![value; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }
}

/// A 3D bounding box: center, size `(l, w, h)`, heading about +z, score, category.
///
/// Length `l` extends along the heading direction, width `w` perpendicular to
/// it, height `h` along z. Heading is normalized to `[-pi, pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    pub heading: f64,
    pub score: f64,
    pub category: u32,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, size: Vector3<f64>, heading: f64) -> Self {
        Box3D { center, size, heading: normalize_angle(heading), score: 1.0, category: 0 }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// The 8 corners in world coordinates.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (hl, hw, hh) = (self.size.x / 2.0, self.size.y / 2.0, self.size.z / 2.0);
        let mut out = [Vector3::zeros(); 8];
        let mut i = 0;
        for &dx in &[-hl, hl] {
            for &dy in &[-hw, hw] {
                for &dz in &[-hh, hh] {
                    out[i] = self.center
                        + Vector3::new(c * dx - s * dy, s * dx + c * dy, dz);
                    i += 1;
                }
            }
        }
        out
    }

    /// BEV footprint corners (x, y), counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (hl, hw) = (self.size.x / 2.0, self.size.y / 2.0);
        let rot = |dx: f64, dy: f64| {
            (self.center.x + c * dx - s * dy, self.center.y + s * dx + c * dy)
        };
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    /// Whether a world point falls inside the box (boundaries inclusive).
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = p - self.center;
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let lx = c * d.x + s * d.y;
        let ly = -s * d.x + c * d.y;
        lx.abs() <= self.size.x / 2.0 + 1e-12
            && ly.abs() <= self.size.y / 2.0 + 1e-12
            && d.z.abs() <= self.size.z / 2.0 + 1e-12
    }

    /// Whether the BEV footprint contains the (x, y) point.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.x;
        let dy = y - self.center.y;
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.size.x / 2.0 + 1e-12 && ly.abs() <= self.size.y / 2.0 + 1e-12
    }

    pub fn bev_area(&self) -> f64 {
        self.size.x * self.size.y
    }
}

/// Normalize an angle to `[-pi, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (theta + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if t >= std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Splittable seeding scheme: `(seed, index) -> child seed` via splitmix64.
///
/// Used everywhere a per-scene or per-trial stream is derived from a global
/// seed, so parallel and serial runs see identical randomness.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
