//! End-to-end orchestration: trainable heads for all three stages,
//! single-frame inference in fusion / camera-only / radar-only modes,
//! pooled evaluation, and the teacher-forced training problem driving
//! the SGD loop.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{project_camera_points, refine_camera_points};
use crate::config::PipelineConfig;
use crate::dataset::DatasetFrame;
use crate::detect::{decode_boxes, nms_rotated};
use crate::error::{CramError, Result};
use crate::features::{
    extract_features, predict_depth, score_foreground, select_foreground, sigmoid, softplus,
    FeatureMap, DEPTH_MIN, DEPTH_SCALE,
};
use crate::fusion::{fuse, sensor_dropout, DropoutLocation, FusedCloud};
use crate::geometry::{pixel_to_ray, radar_cell_to_point, CameraModel, RadarModel};
use crate::learner::{fit, HeadGrads, TinyHead, TrainConfig, TrainProblem};
use crate::losses::{
    depth_l2_loss, heading_bin_loss, heatmap_focal_loss, iou_surrogate_loss, seg_focal_loss,
    smooth_l1, total_loss,
};
use crate::metrics::{bev_ap_frames, EvalResult};
use crate::scene::SensorFrame;
use crate::types::{child_seed, Box3D};
use crate::voxel::{
    apply_detection_head, box_head_out_dim, neighborhood_aggregate, voxelize_dynamic, VoxelConfig,
    VoxelMode,
};

/// IoU threshold used for headline AP numbers.
pub const EVAL_IOU: f64 = 0.5;

/// Range buckets for the per-distance AP breakdown.
pub const RANGE_BUCKETS: [(f64, f64); 3] = [(0.0, 15.0), (15.0, 25.0), (25.0, f64::INFINITY)];

/// Which sensors feed the fused cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fusion,
    CameraOnly,
    RadarOnly,
}

impl std::str::FromStr for Mode {
    type Err = CramError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Mode::Fusion),
            "camera_only" | "camera" => Ok(Mode::CameraOnly),
            "radar_only" | "radar" => Ok(Mode::RadarOnly),
            other => Err(CramError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Fusion => "fusion",
            Mode::CameraOnly => "camera_only",
            Mode::RadarOnly => "radar_only",
        };
        f.write_str(s)
    }
}

/// Inference-time switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: Mode,
    /// Ray-constrained attention on camera points; off projects them at the
    /// predicted depth directly.
    pub attention: bool,
    pub use_modality_code: bool,
    /// Zero radar cells at or below this intensity before stage 1.
    pub rf_threshold: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: Mode::Fusion,
            attention: true,
            use_modality_code: true,
            rf_threshold: None,
        }
    }
}

/// The five trainable heads of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHeads {
    pub cam_seg: TinyHead,
    pub cam_depth: TinyHead,
    pub radar_seg: TinyHead,
    pub heatmap: TinyHead,
    pub boxreg: TinyHead,
}

/// Enriched cell feature dimension after neighborhood aggregation.
pub fn cell_feature_dim(cfg: &PipelineConfig) -> usize {
    2 * (cfg.d + 2) + 1
}

impl ModelHeads {
    pub fn random(cfg: &PipelineConfig, seed: u64) -> Self {
        let cd = cell_feature_dim(cfg);
        ModelHeads {
            cam_seg: TinyHead::random(cfg.d, 8, 1, child_seed(seed, 0)),
            cam_depth: TinyHead::random(cfg.d, 8, 1, child_seed(seed, 1)),
            radar_seg: TinyHead::random(cfg.d, 8, 1, child_seed(seed, 2)),
            heatmap: TinyHead::random(cd, 8, 1, child_seed(seed, 3)),
            boxreg: TinyHead::random_linear(cd, box_head_out_dim(cfg.num_heading_bins), child_seed(seed, 4)),
        }
    }

    /// Fixed serialization order: cam_seg, cam_depth, radar_seg, heatmap, boxreg.
    pub fn to_vec(&self) -> Vec<TinyHead> {
        vec![
            self.cam_seg.clone(),
            self.cam_depth.clone(),
            self.radar_seg.clone(),
            self.heatmap.clone(),
            self.boxreg.clone(),
        ]
    }

    pub fn from_vec(mut heads: Vec<TinyHead>) -> Result<Self> {
        if heads.len() != 5 {
            return Err(CramError::Parse {
                location: "model heads".into(),
                message: format!("expected 5 heads, got {}", heads.len()),
            });
        }
        let boxreg = heads.pop().unwrap();
        let heatmap = heads.pop().unwrap();
        let radar_seg = heads.pop().unwrap();
        let cam_depth = heads.pop().unwrap();
        let cam_seg = heads.pop().unwrap();
        Ok(ModelHeads { cam_seg, cam_depth, radar_seg, heatmap, boxreg })
    }
}

/// Per-frame inference result with the intermediate cardinalities.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub detections: Vec<Box3D>,
    pub num_camera_points: usize,
    pub num_radar_points: usize,
    pub num_cells: usize,
}

/// Pillar grid over the pipeline's detection region.
pub fn detection_voxel_config(cfg: &PipelineConfig) -> VoxelConfig {
    VoxelConfig {
        region_min: cfg.voxel_region_min,
        region_max: cfg.voxel_region_max,
        voxel_size: cfg.voxel_size,
        mode: VoxelMode::Pillar,
    }
}

fn zero_modality_codes(cloud: &mut FusedCloud) {
    for f in &mut cloud.features {
        let d = f.len() - 2;
        f[d] = 0.0;
        f[d + 1] = 0.0;
    }
}

/// Run the full three-stage pipeline on one sensor frame.
pub fn run_frame(
    frame: &SensorFrame,
    heads: &ModelHeads,
    cam: &CameraModel,
    radar: &RadarModel,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<FrameOutput> {
    let rf = match opts.rf_threshold {
        Some(t) => {
            if !(t >= 0.0) {
                return Err(CramError::Config(format!("rf threshold must be >= 0, got {t}")));
            }
            frame.radar_rf.map(|v| if v > t { v } else { 0.0 })
        }
        None => frame.radar_rf.clone(),
    };
    // camera-only mode treats the radar as absent: zero features make the
    // attention keys uninformative and contribute no radar points
    let radar_fm = if opts.mode == Mode::CameraOnly {
        FeatureMap::zeros(rf.rows, rf.cols, cfg.d)
    } else {
        extract_features(&rf, cfg.d)?
    };

    let mut cam_pts: Vec<(Vector3<f64>, Vec<f64>)> = Vec::new();
    if opts.mode != Mode::RadarOnly {
        let cam_fm = extract_features(&frame.camera_image, cfg.d)?;
        let scores = score_foreground(&cam_fm, &heads.cam_seg)?;
        let pixels = select_foreground(&scores, cfg.tau);
        let depth = predict_depth(&cam_fm, &heads.cam_depth)?;
        cam_pts = if opts.attention {
            refine_camera_points(&pixels, &depth, &cam_fm, &radar_fm, cam, radar, cfg)?
        } else {
            project_camera_points(&pixels, &depth, &cam_fm, cam)?
        };
    }

    let mut radar_pts: Vec<(Vector3<f64>, Vec<f64>)> = Vec::new();
    if opts.mode != Mode::CameraOnly {
        let scores = score_foreground(&radar_fm, &heads.radar_seg)?;
        for (r, c) in select_foreground(&scores, cfg.tau) {
            radar_pts.push((radar_cell_to_point(radar, (r, c))?, radar_fm.at(r, c).to_vec()));
        }
    }

    let mut cloud = fuse(&cam_pts, &radar_pts)?;
    if !opts.use_modality_code {
        zero_modality_codes(&mut cloud);
    }
    let vox = detection_voxel_config(cfg);
    let grid = voxelize_dynamic(&cloud, &vox);
    let grid = neighborhood_aggregate(&grid, cfg.neighborhood_radius);
    let cells = apply_detection_head(&grid, &heads.heatmap, &heads.boxreg, cfg.num_heading_bins)?;
    let boxes = decode_boxes(&cells, cfg.tau_score);
    let detections = nms_rotated(&boxes, cfg.nms_iou, cfg.max_detections);
    Ok(FrameOutput {
        detections,
        num_camera_points: cam_pts.len(),
        num_radar_points: radar_pts.len(),
        num_cells: cells.len(),
    })
}

/// Run every frame and score the pooled detections at [`EVAL_IOU`].
pub fn evaluate_frames(
    frames: &[DatasetFrame],
    heads: &ModelHeads,
    cam: &CameraModel,
    radar: &RadarModel,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<(Vec<FrameOutput>, EvalResult)> {
    let mut outputs = Vec::with_capacity(frames.len());
    let mut dets = Vec::with_capacity(frames.len());
    let mut gts = Vec::with_capacity(frames.len());
    for df in frames {
        let out = run_frame(&df.frame, heads, cam, radar, cfg, opts)?;
        dets.push(out.detections.clone());
        gts.push(df.scene.boxes.clone());
        outputs.push(out);
    }
    let eval = bev_ap_frames(&dets, &gts, EVAL_IOU, &RANGE_BUCKETS);
    Ok((outputs, eval))
}

/// Training-time switches and supervision budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub dropout: Option<DropoutLocation>,
    pub use_modality_code: bool,
    /// Foreground cap and background sample size for pixel supervision.
    pub pixels_per_frame: usize,
    /// Same for radar cells.
    pub cells_per_frame: usize,
    /// Zero-heat voxel cells sampled per frame for heatmap supervision. The
    /// focal loss is a mean over the selected cells, so this budget sets the
    /// positive/negative balance and with it the effective gradient scale of
    /// the heatmap head.
    pub hm_negatives: usize,
    /// Cap on teacher camera points per frame.
    pub max_camera_points: usize,
    /// Background teacher points per modality, teaching the heatmap head to
    /// reject clusters from stage-1 false positives.
    pub background_points: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            dropout: None,
            use_modality_code: true,
            pixels_per_frame: 512,
            cells_per_frame: 512,
            hm_negatives: 96,
            max_camera_points: 1024,
            background_points: 256,
        }
    }
}

/// One enriched voxel cell with its supervision targets.
struct CellTarget {
    feature: Vec<f64>,
    center: Vector3<f64>,
    h_gt: f64,
    boxi: Option<usize>,
}

/// Cached voxelization of one teacher cloud.
struct GridTargets {
    cells: Vec<CellTarget>,
    /// Cells entering the heatmap loss (all in-box cells plus sampled
    /// background).
    hm_select: Vec<usize>,
    /// Cells entering the box losses (h_gt above the cutoff).
    box_select: Vec<usize>,
}

/// Per-point heat targets with the argmax box, mirroring the ground-truth
/// heatmap definition.
fn heat_targets(
    points: &[Vector3<f64>],
    boxes: &[Box3D],
    sigma: f64,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let closest: Vec<f64> = boxes
        .iter()
        .map(|b| points.iter().map(|p| (p - b.center).norm()).fold(f64::INFINITY, f64::min))
        .collect();
    let mut h = vec![0.0; points.len()];
    let mut who = vec![None; points.len()];
    for (i, p) in points.iter().enumerate() {
        for (bi, (b, &d_c)) in boxes.iter().zip(&closest).enumerate() {
            if b.contains(p) {
                let d = (p - b.center).norm();
                let v = (-(d - d_c) / (sigma * sigma)).exp();
                if v > h[i] {
                    h[i] = v;
                    who[i] = Some(bi);
                }
            }
        }
        h[i] = h[i].min(1.0);
    }
    (h, who)
}

/// All foreground indices (capped) plus a background sample, sorted.
fn sample_split(mask: &[bool], cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let bg: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let pick = |pool: &[usize], k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if pool.len() <= k {
            pool.to_vec()
        } else {
            rand::seq::index::sample(rng, pool.len(), k).iter().map(|i| pool[i]).collect()
        }
    };
    let mut out = pick(&fg, cap, rng);
    out.extend(pick(&bg, cap, rng));
    out.sort_unstable();
    out
}

fn build_grid_targets(
    cloud: &FusedCloud,
    boxes: &[Box3D],
    cfg: &PipelineConfig,
    vox: &VoxelConfig,
    neg_seed: u64,
    cells_per_frame: usize,
) -> GridTargets {
    let grid = voxelize_dynamic(cloud, vox);
    let grid = neighborhood_aggregate(&grid, cfg.neighborhood_radius);
    let centroids: Vec<Vector3<f64>> = grid.cells.values().map(|c| c.centroid).collect();
    let (h, who) = heat_targets(&centroids, boxes, cfg.sigma_h);
    let cells: Vec<CellTarget> = grid
        .cells
        .values()
        .zip(h.iter().zip(&who))
        .map(|(c, (&h_gt, &boxi))| CellTarget { feature: c.feature.clone(), center: c.center, h_gt, boxi })
        .collect();
    // Heat supervision uses the unambiguous ends only: solid positives and
    // empty-space negatives. In-box cells in between hold the camera-side
    // evidence (surface points cluster there); penalizing them would teach
    // the head that camera support predicts background. They still receive
    // box supervision (h_gt > tau_hm), so at decode time their boxes collapse
    // onto the object and rotated NMS keeps a single detection.
    let pos: Vec<usize> =
        (0..cells.len()).filter(|&i| cells[i].h_gt > 1.0 - cfg.epsilon_h).collect();
    let neg: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].h_gt == 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(neg_seed);
    let mut hm_select = pos;
    if neg.len() <= cells_per_frame {
        hm_select.extend(&neg);
    } else {
        hm_select.extend(
            rand::seq::index::sample(&mut rng, neg.len(), cells_per_frame).iter().map(|i| neg[i]),
        );
    }
    hm_select.sort_unstable();
    let box_select: Vec<usize> = (0..cells.len())
        .filter(|&i| cells[i].h_gt > cfg.tau_hm && cells[i].boxi.is_some())
        .collect();
    GridTargets { cells, hm_select, box_select }
}

/// Precomputed supervision for one frame. Pixel and cell subsamples are
/// fixed per frame (seeded from the frame seed), so a zero learning rate
/// yields a constant loss trace when dropout is off.
struct FrameData {
    cam_fm: FeatureMap,
    cam_sample: Vec<usize>,
    cam_fg: Vec<bool>,
    depth_gt: Vec<f64>,
    depth_valid: Vec<bool>,
    radar_fm: FeatureMap,
    radar_sample: Vec<usize>,
    radar_fg: Vec<bool>,
    cloud: FusedCloud,
    boxes: Vec<Box3D>,
    clean: GridTargets,
}

fn build_frame_data(
    df: &DatasetFrame,
    cam: &CameraModel,
    radar: &RadarModel,
    cfg: &PipelineConfig,
    topts: &TrainOptions,
    vox: &VoxelConfig,
) -> Result<FrameData> {
    let cam_fm = extract_features(&df.frame.camera_image, cfg.d)?;
    let radar_fm = extract_features(&df.frame.radar_rf, cfg.d)?;
    let (rows, cols) = (cam_fm.rows, cam_fm.cols);

    let fg_mask: Vec<bool> = (0..rows * cols).map(|i| df.frame.true_depth.data[i] > 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(df.seed, 901));
    let cam_sample = sample_split(&fg_mask, topts.pixels_per_frame, &mut rng);
    let cam_fg: Vec<bool> = cam_sample.iter().map(|&i| fg_mask[i]).collect();
    let depth_gt: Vec<f64> = cam_sample.iter().map(|&i| df.frame.true_depth.data[i]).collect();
    let depth_valid: Vec<bool> =
        cam_sample.iter().map(|&i| fg_mask[i] && df.frame.depth_valid.data[i]).collect();

    let rmask: Vec<bool> = (0..radar.rows * radar.cols)
        .map(|i| {
            let p = radar_cell_to_point(radar, (i / radar.cols, i % radar.cols)).unwrap();
            // "return present" labels: radar segmentation cannot tell a real
            // footprint from a ghost; separating them is the fusion head's job
            df.scene
                .boxes
                .iter()
                .chain(&df.scene.ghosts)
                .any(|b| b.contains_bev(p.x, p.y))
        })
        .collect();
    let radar_sample = sample_split(&rmask, topts.cells_per_frame, &mut rng);
    let radar_fg: Vec<bool> = radar_sample.iter().map(|&i| rmask[i]).collect();

    // teacher cloud at ground-truth positions
    let fg_all: Vec<usize> = (0..rows * cols).filter(|&i| fg_mask[i]).collect();
    let fg_idx_len = fg_all.len();
    let picked: Vec<usize> = if fg_all.len() <= topts.max_camera_points {
        fg_all.clone()
    } else {
        let mut v: Vec<usize> =
            rand::seq::index::sample(&mut rng, fg_all.len(), topts.max_camera_points)
                .iter()
                .map(|i| fg_all[i])
                .collect();
        v.sort_unstable();
        v
    };
    let mut cam_pts = Vec::with_capacity(picked.len());
    for i in picked {
        let (r, c) = (i / cols, i % cols);
        let ray = pixel_to_ray(cam, (c as f64 + 0.5, r as f64 + 0.5))?;
        cam_pts.push((ray.point_at(df.frame.true_depth.data[i]), cam_fm.at(r, c).to_vec()));
    }
    // background camera pixels at arbitrary depths: their rays miss every
    // box, so they form guaranteed-negative clusters for the heatmap head
    let bg_pix: Vec<usize> = (0..rows * cols).filter(|&i| !fg_mask[i]).collect();
    let take = topts.background_points.min(bg_pix.len());
    if take > 0 {
        let mut v: Vec<usize> = rand::seq::index::sample(&mut rng, bg_pix.len(), take)
            .iter()
            .map(|i| bg_pix[i])
            .collect();
        v.sort_unstable();
        for i in v {
            let (r, c) = (i / cols, i % cols);
            let ray = pixel_to_ray(cam, (c as f64 + 0.5, r as f64 + 0.5))?;
            let depth = rng.gen_range(2.0..40.0);
            let p = ray.point_at(depth);
            // keep pillar columns over box footprints purely positive
            if df.scene.boxes.iter().any(|b| b.contains_bev(p.x, p.y)) {
                continue;
            }
            cam_pts.push((p, cam_fm.at(r, c).to_vec()));
        }
    }
    // decoy clusters: foreground pixels projected at a wrong depth mimic the
    // dense camera clusters a mispredicted depth head produces, so the
    // heatmap head learns to reject clusters without radar support
    let take = topts.background_points.min(fg_idx_len);
    if take > 0 {
        let mut v: Vec<usize> = rand::seq::index::sample(&mut rng, fg_idx_len, take)
            .iter()
            .map(|i| fg_all[i])
            .collect();
        v.sort_unstable();
        for i in v {
            let (r, c) = (i / cols, i % cols);
            let ray = pixel_to_ray(cam, (c as f64 + 0.5, r as f64 + 0.5))?;
            let factor = if rng.gen_bool(0.5) {
                rng.gen_range(0.4..0.8)
            } else {
                rng.gen_range(1.25..2.0)
            };
            let p = ray.point_at(df.frame.true_depth.data[i] * factor);
            if df.scene.boxes.iter().any(|b| b.contains_bev(p.x, p.y)) {
                continue;
            }
            cam_pts.push((p, cam_fm.at(r, c).to_vec()));
        }
    }
    let mut radar_pts = Vec::new();
    for i in (0..rmask.len()).filter(|&i| rmask[i]) {
        let cell = (i / radar.cols, i % radar.cols);
        radar_pts.push((radar_cell_to_point(radar, cell)?, radar_fm.at(cell.0, cell.1).to_vec()));
    }
    // likewise off-footprint radar cells, covering clutter false positives
    let bg_cells: Vec<usize> = (0..rmask.len()).filter(|&i| !rmask[i]).collect();
    let take = topts.background_points.min(bg_cells.len());
    if take > 0 {
        let mut v: Vec<usize> = rand::seq::index::sample(&mut rng, bg_cells.len(), take)
            .iter()
            .map(|i| bg_cells[i])
            .collect();
        v.sort_unstable();
        for i in v {
            let cell = (i / radar.cols, i % radar.cols);
            radar_pts
                .push((radar_cell_to_point(radar, cell)?, radar_fm.at(cell.0, cell.1).to_vec()));
        }
    }
    let mut cloud = fuse(&cam_pts, &radar_pts)?;
    if !topts.use_modality_code {
        zero_modality_codes(&mut cloud);
    }
    let clean = build_grid_targets(
        &cloud,
        &df.scene.boxes,
        cfg,
        vox,
        child_seed(df.seed, 903),
        topts.hm_negatives,
    );
    Ok(FrameData {
        cam_fm,
        cam_sample,
        cam_fg,
        depth_gt,
        depth_valid,
        radar_fm,
        radar_sample,
        radar_fg,
        cloud,
        boxes: df.scene.boxes.clone(),
        clean,
    })
}

/// Teacher-forced training problem over a set of frames: stage-1 heads are
/// supervised on ground-truth masks and depth, stage-3 heads on clouds
/// voxelized from ground-truth positions. Head order matches
/// [`ModelHeads::to_vec`].
pub struct FusionProblem {
    frames: Vec<FrameData>,
    cfg: PipelineConfig,
    topts: TrainOptions,
    vox: VoxelConfig,
}

impl FusionProblem {
    pub fn new(
        frames: &[DatasetFrame],
        cam: &CameraModel,
        radar: &RadarModel,
        cfg: &PipelineConfig,
        topts: &TrainOptions,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(CramError::Config("training set is empty".into()));
        }
        let vox = detection_voxel_config(cfg);
        let data = frames
            .iter()
            .map(|df| build_frame_data(df, cam, radar, cfg, topts, &vox))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionProblem { frames: data, cfg: cfg.clone(), topts: topts.clone(), vox })
    }
}

/// Segmentation-style term: forward the head per sample, chain the focal
/// gradient through the sigmoid, accumulate weighted parameter gradients.
fn seg_term(
    head: &TinyHead,
    grads: &mut HeadGrads,
    fm: &FeatureMap,
    sample: &[usize],
    is_fg: &[bool],
    gamma: f64,
    weight: f64,
) -> Result<f64> {
    let mut ys = Vec::with_capacity(sample.len());
    let mut ps = Vec::with_capacity(sample.len());
    for &i in sample {
        let x = fm.at(i / fm.cols, i % fm.cols);
        let y = head.forward(x)?[0];
        ys.push(y);
        ps.push(sigmoid(y));
    }
    let (value, dp) = seg_focal_loss(&ps, is_fg, gamma);
    for (j, &i) in sample.iter().enumerate() {
        let dl_dy = dp[j] * ps[j] * (1.0 - ps[j]) * weight;
        if dl_dy == 0.0 {
            continue;
        }
        let x = fm.at(i / fm.cols, i % fm.cols);
        let (g, _) = head.backward(x, &[dl_dy])?;
        grads.add_assign(&g);
    }
    Ok(value)
}

impl TrainProblem for FusionProblem {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn loss_and_grads(
        &self,
        heads: &[TinyHead],
        frames: &[usize],
        step_seed: u64,
    ) -> Result<(f64, Vec<HeadGrads>)> {
        if heads.len() != 5 {
            return Err(CramError::Config(format!("expected 5 heads, got {}", heads.len())));
        }
        let cfg = &self.cfg;
        let bins = cfg.num_heading_bins;
        let mut grads: Vec<HeadGrads> = heads.iter().map(HeadGrads::zeros_like).collect();
        let (mut seg_sum, mut depth_sum, mut hm_sum) = (0.0, 0.0, 0.0);
        let (mut sl1_sum, mut bin_sum, mut iou_sum) = (0.0, 0.0, 0.0);

        for (pos, &fi) in frames.iter().enumerate() {
            let fd = &self.frames[fi];
            let (g01, rest) = grads.split_at_mut(2);
            let (g0, g1) = g01.split_at_mut(1);
            seg_sum += seg_term(
                &heads[0],
                &mut g0[0],
                &fd.cam_fm,
                &fd.cam_sample,
                &fd.cam_fg,
                cfg.gamma_s,
                cfg.lambda_seg,
            )?;
            seg_sum += seg_term(
                &heads[2],
                &mut rest[0],
                &fd.radar_fm,
                &fd.radar_sample,
                &fd.radar_fg,
                cfg.gamma_s,
                cfg.lambda_seg,
            )?;

            // depth over the same pixel sample, masked to valid foreground;
            // supervised in DEPTH_SCALE units so the squared error and its
            // gradient stay O(1) regardless of the sensing range in meters
            let mut ys = Vec::with_capacity(fd.cam_sample.len());
            let mut preds = Vec::with_capacity(fd.cam_sample.len());
            for &i in &fd.cam_sample {
                let x = fd.cam_fm.at(i / fd.cam_fm.cols, i % fd.cam_fm.cols);
                let y = heads[1].forward(x)?[0];
                ys.push(y);
                preds.push(softplus(y) + DEPTH_MIN / DEPTH_SCALE);
            }
            let gt_norm: Vec<f64> = fd.depth_gt.iter().map(|&t| t / DEPTH_SCALE).collect();
            let (l_depth, dpred) = depth_l2_loss(&preds, &gt_norm, &fd.depth_valid);
            depth_sum += l_depth;
            for (j, &i) in fd.cam_sample.iter().enumerate() {
                let dl_dy = dpred[j] * sigmoid(ys[j]) * cfg.lambda_depth;
                if dl_dy == 0.0 {
                    continue;
                }
                let x = fd.cam_fm.at(i / fd.cam_fm.cols, i % fd.cam_fm.cols);
                let (g, _) = heads[1].backward(x, &[dl_dy])?;
                g1[0].add_assign(&g);
            }

            // stage 3 on the (possibly dropped-out) teacher cloud
            let dropped;
            let targets = match self.topts.dropout {
                None => &fd.clean,
                Some(loc) => {
                    // the image is zero after input dropout, so its stage-1
                    // features are zero: at the cloud level that is exactly
                    // the point-feature placement
                    let loc = if loc == DropoutLocation::Input {
                        DropoutLocation::PointFeature
                    } else {
                        loc
                    };
                    let cloud = sensor_dropout(
                        &fd.cloud,
                        cfg.p_drop,
                        child_seed(step_seed, 7000 + pos as u64),
                        loc,
                    )?;
                    dropped = build_grid_targets(
                        &cloud,
                        &fd.boxes,
                        cfg,
                        &self.vox,
                        child_seed(step_seed, 8000 + pos as u64),
                        self.topts.hm_negatives,
                    );
                    &dropped
                }
            };

            let mut hys = Vec::with_capacity(targets.hm_select.len());
            let mut hs = Vec::with_capacity(targets.hm_select.len());
            let mut hgts = Vec::with_capacity(targets.hm_select.len());
            for &ci in &targets.hm_select {
                let y = heads[3].forward(&targets.cells[ci].feature)?[0];
                hys.push(y);
                hs.push(sigmoid(y));
                hgts.push(targets.cells[ci].h_gt);
            }
            let (l_hm, dh) = heatmap_focal_loss(&hs, &hgts, cfg.alpha_h, cfg.gamma_h, cfg.epsilon_h);
            hm_sum += l_hm;
            for (j, &ci) in targets.hm_select.iter().enumerate() {
                let dl_dy = dh[j] * hs[j] * (1.0 - hs[j]) * cfg.lambda_hm;
                if dl_dy == 0.0 {
                    continue;
                }
                let (g, _) = heads[3].backward(&targets.cells[ci].feature, &[dl_dy])?;
                rest[1].add_assign(&g);
            }

            let nb = targets.box_select.len();
            for &ci in &targets.box_select {
                let cell = &targets.cells[ci];
                let b = &fd.boxes[cell.boxi.unwrap()];
                let y = heads[4].forward(&cell.feature)?;
                let tgt = [
                    b.center.x - cell.center.x,
                    b.center.y - cell.center.y,
                    b.center.z - cell.center.z,
                    b.size.x.ln(),
                    b.size.y.ln(),
                    b.size.z.ln(),
                ];
                let (v6, g6) = smooth_l1(&y[..6], &tgt, 1.0);
                let (v_bin, dlog, dres) = heading_bin_loss(&y[6..6 + bins], y[6 + bins], b.heading);
                let pred = Box3D::new(
                    cell.center + Vector3::new(y[0], y[1], y[2]),
                    Vector3::new(y[3].exp(), y[4].exp(), y[5].exp()),
                    b.heading,
                );
                let (v_iou, ig) = iou_surrogate_loss(&pred, b);

                let mut dl = vec![0.0; heads[4].out_dim()];
                dl[..6].copy_from_slice(&g6);
                dl[0] += ig.d_cx;
                dl[1] += ig.d_cy;
                dl[3] += ig.d_l * y[3].exp();
                dl[4] += ig.d_w * y[4].exp();
                dl[6..6 + bins].copy_from_slice(&dlog);
                dl[6 + bins] = dres;
                for v in dl.iter_mut() {
                    *v /= nb as f64;
                }
                let (g, _) = heads[4].backward(&cell.feature, &dl)?;
                rest[2].add_assign(&g);
                sl1_sum += v6 / nb as f64;
                bin_sum += v_bin / nb as f64;
                iou_sum += v_iou / nb as f64;
            }
        }

        let nf = frames.len() as f64;
        for g in &mut grads {
            g.scale(1.0 / nf);
        }
        let report = total_loss(
            seg_sum / nf,
            depth_sum / nf,
            hm_sum / nf,
            sl1_sum / nf,
            bin_sum / nf,
            iou_sum / nf,
            cfg,
        )?;
        Ok((report.total, grads))
    }
}

/// Training schedule tuned for the synthetic scenes.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig { steps: 4800, learning_rate: 1e-3, momentum: 0.9, seed, batch: 4 }
}

/// Train all heads with SGD and return them with the loss trace.
pub fn train_model(
    frames: &[DatasetFrame],
    cam: &CameraModel,
    radar: &RadarModel,
    cfg: &PipelineConfig,
    topts: &TrainOptions,
    tcfg: &TrainConfig,
) -> Result<(ModelHeads, Vec<f64>)> {
    let problem = FusionProblem::new(frames, cam, radar, cfg, topts)?;
    let mut heads = ModelHeads::random(cfg, tcfg.seed).to_vec();
    let trace = fit(&mut heads, &problem, tcfg)?;
    Ok((ModelHeads::from_vec(heads)?, trace))
}
