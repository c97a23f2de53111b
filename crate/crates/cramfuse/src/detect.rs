//! Box decoding from per-voxel head outputs and rotated NMS.

use crate::losses::bin_center;
use crate::metrics::rotated_bev_iou;
use crate::types::{normalize_angle, Box3D};
use crate::voxel::CellOutput;

/// Decode heading from bin logits and the normalized residual.
/// Ties in the argmax break toward the lower bin index.
pub fn decode_heading(bin_logits: &[f64], residual: f64) -> f64 {
    let num_bins = bin_logits.len();
    let mut best = 0;
    for (i, &l) in bin_logits.iter().enumerate() {
        if l > bin_logits[best] {
            best = i;
        }
    }
    let half = std::f64::consts::PI / num_bins as f64;
    normalize_angle(bin_center(best, num_bins) + residual * half)
}

/// Emit a box from every cell with objectness above `tau_score`:
/// center = voxel center + offsets, sizes = exp(log sizes), heading from
/// the bin head, score = objectness.
pub fn decode_boxes(cells: &[CellOutput], tau_score: f64) -> Vec<Box3D> {
    cells
        .iter()
        .filter(|c| c.heat > tau_score)
        .map(|c| {
            let p = &c.box_params;
            Box3D::new(
                c.center + p.offset,
                p.log_size.map(f64::exp),
                decode_heading(&p.bin_logits, p.bin_residual),
            )
            .with_score(c.heat)
        })
        .collect()
}

/// Greedy rotated NMS by descending score; deterministic tie-break by
/// decode order. Kept boxes pairwise overlap at most `iou_thresh`.
pub fn nms_rotated(boxes: &[Box3D], iou_thresh: f64, max_out: usize) -> Vec<Box3D> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Box3D> = Vec::new();
    for &i in &order {
        if kept.len() >= max_out {
            break;
        }
        if kept.iter().all(|k| rotated_bev_iou(k, &boxes[i]) <= iou_thresh) {
            kept.push(boxes[i].clone());
        }
    }
    kept
}
