//! Dynamic voxelization of the fused foreground cloud and sparse
//! neighborhood aggregation feeding the detection head.
//!
//! No point is ever dropped: every in-region point joins its cell, and the
//! cell feature is the mean of its members, independent of input order:
//!
//! ```
//! use cramfuse::fusion::{fuse, FusedCloud};
//! use cramfuse::voxel::{voxelize_dynamic, VoxelConfig, VoxelMode};
//! use nalgebra::Vector3;
//!
//! let cam = vec![
//!     (Vector3::new(1.1, 1.1, 0.0), vec![0.0]),
//!     (Vector3::new(1.9, 1.9, 0.0), vec![1.0]),
//! ];
//! let cloud = fuse(&cam, &[]).unwrap();
//! let config = VoxelConfig {
//!     region_min: Vector3::new(0.0, 0.0, -1.0),
//!     region_max: Vector3::new(4.0, 4.0, 1.0),
//!     voxel_size: 2.0,
//!     mode: VoxelMode::Pillar,
//! };
//! let grid = voxelize_dynamic(&cloud, &config);
//! let cell = &grid.cells[&(0, 0, 0)];
//! assert_eq!(cell.members.len(), 2);
//! assert_eq!(cell.feature[0], 0.5); // mean of the two features
//! ```

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::features::sigmoid;
use crate::fusion::FusedCloud;
use crate::learner::TinyHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelMode {
    Pillar,
    Voxel3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelConfig {
    pub region_min: Vector3<f64>,
    pub region_max: Vector3<f64>,
    pub voxel_size: f64,
    pub mode: VoxelMode,
}

impl VoxelConfig {
    pub fn from_pipeline(cfg: &crate::config::PipelineConfig) -> Self {
        VoxelConfig {
            region_min: cfg.voxel_region_min,
            region_max: cfg.voxel_region_max,
            voxel_size: cfg.voxel_size,
            mode: VoxelMode::Voxel3d,
        }
    }
}

/// One occupied cell: mean feature, member point indices, world center.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    pub feature: Vec<f64>,
    pub members: Vec<usize>,
    pub center: Vector3<f64>,
    /// Mean of member point positions.
    pub centroid: Vector3<f64>,
}

/// Sparse voxel grid keyed by (ix, iy, iz); pillar mode pins iz to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub cells: BTreeMap<(i64, i64, i64), VoxelCell>,
    pub config: VoxelConfig,
}

/// Neumaier compensated accumulator, order-stable to ~1 ulp.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Assign every in-region point to its voxel; no capacity limit, no points
/// dropped. Cell feature is the arithmetic mean of member features
/// (compensated summation, so any input permutation yields the same cells).
pub fn voxelize_dynamic(cloud: &FusedCloud, config: &VoxelConfig) -> VoxelGrid {
    let size = config.voxel_size;
    let mut buckets: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        // half-open region: [min, max)
        if p.x < config.region_min.x
            || p.x >= config.region_max.x
            || p.y < config.region_min.y
            || p.y >= config.region_max.y
            || p.z < config.region_min.z
            || p.z >= config.region_max.z
        {
            continue;
        }
        let ix = ((p.x - config.region_min.x) / size).floor() as i64;
        let iy = ((p.y - config.region_min.y) / size).floor() as i64;
        let iz = match config.mode {
            VoxelMode::Pillar => 0,
            VoxelMode::Voxel3d => ((p.z - config.region_min.z) / size).floor() as i64,
        };
        buckets.entry((ix, iy, iz)).or_default().push(i);
    }

    let mut cells = BTreeMap::new();
    for (idx, mut members) in buckets {
        members.sort_unstable();
        let dim = cloud.features[members[0]].len();
        let mut acc: Vec<Kahan> = vec![Kahan::default(); dim];
        let mut pos = [Kahan::default(), Kahan::default(), Kahan::default()];
        for &m in &members {
            for (a, v) in acc.iter_mut().zip(&cloud.features[m]) {
                a.add(*v);
            }
            pos[0].add(cloud.points[m].x);
            pos[1].add(cloud.points[m].y);
            pos[2].add(cloud.points[m].z);
        }
        let n = members.len() as f64;
        let feature = acc.iter().map(|a| a.value() / n).collect();
        let centroid = Vector3::new(pos[0].value() / n, pos[1].value() / n, pos[2].value() / n);
        let center_z = match config.mode {
            VoxelMode::Pillar => (config.region_min.z + config.region_max.z) / 2.0,
            VoxelMode::Voxel3d => config.region_min.z + (idx.2 as f64 + 0.5) * size,
        };
        let center = Vector3::new(
            config.region_min.x + (idx.0 as f64 + 0.5) * size,
            config.region_min.y + (idx.1 as f64 + 0.5) * size,
            center_z,
        );
        cells.insert(idx, VoxelCell { feature, members, center, centroid });
    }
    VoxelGrid { cells, config: config.clone() }
}

/// Enrich each occupied cell: concat(own mean, mean over occupied Chebyshev
/// neighbors, occupied-neighbor count / (2r+1)^2). Only occupied cells are
/// touched (submanifold-style sparsity).
pub fn neighborhood_aggregate(grid: &VoxelGrid, radius_cells: usize) -> VoxelGrid {
    let r = radius_cells as i64;
    let z_range: Vec<i64> = match grid.config.mode {
        VoxelMode::Pillar => vec![0],
        VoxelMode::Voxel3d => (-r..=r).collect(),
    };
    let norm = ((2 * radius_cells + 1) * (2 * radius_cells + 1) * z_range.len()) as f64;
    let mut cells = BTreeMap::new();
    for (&idx, cell) in &grid.cells {
        let dim = cell.feature.len();
        let mut acc = vec![Kahan::default(); dim];
        let mut count = 0usize;
        for dx in -r..=r {
            for dy in -r..=r {
                for &dz in &z_range {
                    let nb = (idx.0 + dx, idx.1 + dy, idx.2 + dz);
                    if let Some(n) = grid.cells.get(&nb) {
                        for (a, v) in acc.iter_mut().zip(&n.feature) {
                            a.add(*v);
                        }
                        count += 1;
                    }
                }
            }
        }
        let mut feature = Vec::with_capacity(2 * dim + 1);
        feature.extend_from_slice(&cell.feature);
        feature.extend(acc.iter().map(|a| a.value() / count as f64));
        feature.push(count as f64 / norm);
        cells.insert(
            idx,
            VoxelCell {
                feature,
                members: cell.members.clone(),
                center: cell.center,
                centroid: cell.centroid,
            },
        );
    }
    VoxelGrid { cells, config: grid.config.clone() }
}

/// Raw regression outputs of the box head for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxParams {
    pub offset: Vector3<f64>,
    pub log_size: Vector3<f64>,
    pub bin_logits: Vec<f64>,
    pub bin_residual: f64,
}

/// Per-cell head outputs: objectness and raw box parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub index: (i64, i64, i64),
    pub center: Vector3<f64>,
    pub heat: f64,
    pub box_params: BoxParams,
}

/// Expected box-head output dimension for `bins` heading bins.
pub fn box_head_out_dim(bins: usize) -> usize {
    3 + 3 + bins + 1
}

/// Apply the heatmap and box heads to every occupied cell.
pub fn apply_detection_head(
    grid: &VoxelGrid,
    heatmap_head: &TinyHead,
    box_head: &TinyHead,
    num_heading_bins: usize,
) -> Result<Vec<CellOutput>> {
    if box_head.out_dim() != box_head_out_dim(num_heading_bins) {
        return Err(CramError::DimMismatch {
            expected: box_head_out_dim(num_heading_bins),
            got: box_head.out_dim(),
        });
    }
    let mut out = Vec::with_capacity(grid.cells.len());
    for (&index, cell) in &grid.cells {
        let h = sigmoid(heatmap_head.forward(&cell.feature)?[0]);
        let b = box_head.forward(&cell.feature)?;
        out.push(CellOutput {
            index,
            center: cell.center,
            heat: h,
            box_params: BoxParams {
                offset: Vector3::new(b[0], b[1], b[2]),
                log_size: Vector3::new(b[3], b[4], b[5]),
                bin_logits: b[6..6 + num_heading_bins].to_vec(),
                bin_residual: b[6 + num_heading_bins],
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Modality;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> VoxelConfig {
        VoxelConfig {
            region_min: Vector3::new(0.0, 0.0, 0.0),
            region_max: Vector3::new(2.0, 2.0, 2.0),
            voxel_size: 0.2,
            mode: VoxelMode::Voxel3d,
        }
    }

    fn cloud_from(points: Vec<Vector3<f64>>, features: Vec<Vec<f64>>) -> FusedCloud {
        let n = points.len();
        FusedCloud { points, features, source: vec![Modality::Camera; n] }
    }

    #[test]
    fn single_point_own_feature() {
        let cfg = small_config();
        let cloud = cloud_from(vec![Vector3::new(0.1, 0.1, 0.1)], vec![vec![1.0, 2.0]]);
        let grid = voxelize_dynamic(&cloud, &cfg);
        assert_eq!(grid.cells.len(), 1);
        let cell = &grid.cells[&(0, 0, 0)];
        assert_eq!(cell.feature, vec![1.0, 2.0]);
        assert_eq!(cell.members, vec![0]);
    }

    #[test]
    fn two_points_mean_feature() {
        let cfg = small_config();
        let cloud = cloud_from(
            vec![Vector3::new(0.05, 0.05, 0.05), Vector3::new(0.15, 0.15, 0.15)],
            vec![vec![1.0, 0.0], vec![3.0, 2.0]],
        );
        let grid = voxelize_dynamic(&cloud, &cfg);
        assert_eq!(grid.cells.len(), 1);
        assert_eq!(grid.cells[&(0, 0, 0)].feature, vec![2.0, 1.0]);
    }

    #[test]
    fn region_max_excluded_half_open() {
        let cfg = small_config();
        let cloud = cloud_from(vec![Vector3::new(2.0, 1.0, 1.0)], vec![vec![1.0]]);
        let grid = voxelize_dynamic(&cloud, &cfg);
        assert!(grid.cells.is_empty());
    }

    #[test]
    fn point_conservation() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        let mut in_region = 0usize;
        for _ in 0..500 {
            let p = Vector3::new(
                rng.gen_range(-0.5..2.5),
                rng.gen_range(-0.5..2.5),
                rng.gen_range(-0.5..2.5),
            );
            if (0.0..2.0).contains(&p.x) && (0.0..2.0).contains(&p.y) && (0.0..2.0).contains(&p.z) {
                in_region += 1;
            }
            pts.push(p);
        }
        let n = pts.len();
        let cloud = cloud_from(pts, vec![vec![1.0]; n]);
        let grid = voxelize_dynamic(&cloud, &cfg);
        let total: usize = grid.cells.values().map(|c| c.members.len()).sum();
        assert_eq!(total, in_region);
    }

    #[test]
    fn permutation_invariance() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                )
            })
            .collect();
        let feats: Vec<Vec<f64>> =
            (0..300).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let cloud = cloud_from(pts.clone(), feats.clone());
        let base = voxelize_dynamic(&cloud, &cfg);

        for shuffle in 0..20 {
            let mut order: Vec<usize> = (0..300).collect();
            let mut srng = ChaCha8Rng::seed_from_u64(shuffle);
            order.shuffle(&mut srng);
            let cloud2 = cloud_from(
                order.iter().map(|&i| pts[i]).collect(),
                order.iter().map(|&i| feats[i].clone()).collect(),
            );
            let grid2 = voxelize_dynamic(&cloud2, &cfg);
            assert_eq!(
                base.cells.keys().collect::<Vec<_>>(),
                grid2.cells.keys().collect::<Vec<_>>()
            );
            for (a, b) in base.cells.values().zip(grid2.cells.values()) {
                for (fa, fb) in a.feature.iter().zip(&b.feature) {
                    assert!((fa - fb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pillar_and_voxel3d_agree_on_xy() {
        let mut cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                )
            })
            .collect();
        let n = pts.len();
        let cloud = cloud_from(pts, vec![vec![1.0]; n]);
        let g3 = voxelize_dynamic(&cloud, &cfg);
        cfg.mode = VoxelMode::Pillar;
        let gp = voxelize_dynamic(&cloud, &cfg);
        let xy3: std::collections::BTreeSet<(i64, i64)> =
            g3.cells.keys().map(|&(x, y, _)| (x, y)).collect();
        let xyp: std::collections::BTreeSet<(i64, i64)> =
            gp.cells.keys().map(|&(x, y, _)| (x, y)).collect();
        assert_eq!(xy3, xyp);
        for k in gp.cells.keys() {
            assert_eq!(k.2, 0);
        }
    }

    #[test]
    fn aggregate_radius_zero() {
        let cfg = small_config();
        let cloud = cloud_from(vec![Vector3::new(0.1, 0.1, 0.1)], vec![vec![0.5, -0.5]]);
        let grid = voxelize_dynamic(&cloud, &cfg);
        let agg = neighborhood_aggregate(&grid, 0);
        let cell = agg.cells.values().next().unwrap();
        assert_eq!(cell.feature, vec![0.5, -0.5, 0.5, -0.5, 1.0]);
    }

    #[test]
    fn aggregate_isolated_cell_radius_two() {
        let cfg = small_config();
        let cloud = cloud_from(vec![Vector3::new(1.0, 1.0, 1.0)], vec![vec![2.0]]);
        let grid = voxelize_dynamic(&cloud, &cfg);
        let agg = neighborhood_aggregate(&grid, 2);
        let cell = agg.cells.values().next().unwrap();
        // Voxel3d window at radius 2 is 5x5 in xy times 5 z-slices
        assert_eq!(cell.feature, vec![2.0, 2.0, 1.0 / 125.0]);
    }

    #[test]
    fn aggregate_matches_dense_oracle() {
        let cfg = small_config(); // 10x10x10 cells
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                )
            })
            .collect();
        let feats: Vec<Vec<f64>> =
            (0..200).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let cloud = cloud_from(pts, feats);
        let grid = voxelize_dynamic(&cloud, &cfg);
        let r = 2usize;
        let agg = neighborhood_aggregate(&grid, r);

        // dense scan over the full 10^3 region
        for (&(ix, iy, iz), cell) in &agg.cells {
            let mut sum = vec![0.0; 3];
            let mut count = 0usize;
            for dx in -(r as i64)..=r as i64 {
                for dy in -(r as i64)..=r as i64 {
                    for dz in -(r as i64)..=r as i64 {
                        if let Some(n) = grid.cells.get(&(ix + dx, iy + dy, iz + dz)) {
                            for (s, v) in sum.iter_mut().zip(&n.feature) {
                                *s += v;
                            }
                            count += 1;
                        }
                    }
                }
            }
            for k in 0..3 {
                assert!((cell.feature[3 + k] - sum[k] / count as f64).abs() < 1e-12);
            }
            assert!((cell.feature[6] - count as f64 / 125.0).abs() < 1e-15);
        }
    }

    #[test]
    fn detection_head_zero_heads() {
        let cfg = small_config();
        let cloud = cloud_from(
            vec![Vector3::new(0.1, 0.1, 0.1), Vector3::new(1.0, 1.0, 1.0)],
            vec![vec![0.5, 0.5], vec![-0.5, 0.5]],
        );
        let grid = voxelize_dynamic(&cloud, &cfg);
        let agg = neighborhood_aggregate(&grid, 1);
        let dim = agg.cells.values().next().unwrap().feature.len();
        let hm = TinyHead::zeros(dim, 1);
        let bx = TinyHead::zeros(dim, box_head_out_dim(12));
        let out = apply_detection_head(&agg, &hm, &bx, 12).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert_eq!(o.heat, 0.5);
            assert_eq!(o.box_params.log_size, Vector3::zeros());
            assert_eq!(o.box_params.bin_logits.len(), 12);
        }
    }

    #[test]
    fn detection_head_scalar_oracle() {
        let cfg = small_config();
        let cloud = cloud_from(vec![Vector3::new(0.3, 0.7, 0.4)], vec![vec![0.2, -0.8]]);
        let grid = voxelize_dynamic(&cloud, &cfg);
        let agg = neighborhood_aggregate(&grid, 0);
        let dim = 5;
        let hm = TinyHead::random_linear(dim, 1, 3);
        let bx = TinyHead::random_linear(dim, box_head_out_dim(4), 4);
        let out = apply_detection_head(&agg, &hm, &bx, 4).unwrap();
        let f = &agg.cells.values().next().unwrap().feature;
        let logit: f64 = f
            .iter()
            .zip(hm.layers[0].w.row(0).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + hm.layers[0].b[0];
        assert!((out[0].heat - sigmoid(logit)).abs() < 1e-12);
        let b0: f64 = f
            .iter()
            .zip(bx.layers[0].w.row(0).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + bx.layers[0].b[0];
        assert!((out[0].box_params.offset.x - b0).abs() < 1e-12);
    }

    #[test]
    fn detection_head_empty_grid() {
        let cfg = small_config();
        let cloud = cloud_from(vec![], vec![]);
        let grid = voxelize_dynamic(&cloud, &cfg);
        let hm = TinyHead::zeros(5, 1);
        let bx = TinyHead::zeros(5, box_head_out_dim(12));
        let out = apply_detection_head(&grid, &hm, &bx, 12).unwrap();
        assert!(out.is_empty());
    }
}
