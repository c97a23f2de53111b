//! Training objectives with closed-form values and analytic gradients:
//! segmentation focal loss, depth L2, heatmap focal loss, smooth-L1,
//! heading bin loss, a differentiable BEV IoU surrogate, the weighted
//! total, the heatmap ground-truth generator, and a central
//! finite-difference checker.
//!
//! Every loss returns its value together with the analytic gradient, which
//! the finite-difference checker validates directly:
//!
//! ```
//! use cramfuse::losses::{finite_diff_check, smooth_l1};
//!
//! let (value, grad) = smooth_l1(&[0.3, 2.0], &[0.0, 0.0], 1.0);
//! assert!((value - (0.045 + 1.5)).abs() < 1e-12);
//! let f = |x: &[f64]| smooth_l1(x, &[0.0, 0.0], 1.0).0;
//! assert!(finite_diff_check(&f, &[0.3, 2.0], &grad, 1e-6) < 1e-8);
//! ```

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::config::PipelineConfig;
use crate::error::{CramError, Result};
use crate::types::{normalize_angle, Box3D};

/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Ground-truth objectness heatmap for every point.
///
/// For each box with center c, x_c is the point of the input set closest to
/// c. A point inside the box gets `exp(-(|x - c| - |x_c - c|) / sigma^2)`,
/// maximized over its containing boxes; points inside no box get 0.
pub fn heatmap_gt(points: &[Vector3<f64>], boxes: &[Box3D], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let closest: Vec<f64> = boxes
        .iter()
        .map(|b| {
            points
                .iter()
                .map(|p| (p - b.center).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    points
        .iter()
        .map(|p| {
            let mut h: f64 = 0.0;
            for (b, &d_c) in boxes.iter().zip(&closest) {
                if b.contains(p) {
                    let d = (p - b.center).norm();
                    h = h.max((-(d - d_c) / (sigma * sigma)).exp());
                }
            }
            h.min(1.0)
        })
        .collect()
}

/// Pixel-wise segmentation focal loss over foreground/background sets.
///
/// `-(1/N) [ sum_F (1-p)^g log p + sum_B p^g log(1-p) ]`, gradient wrt p.
pub fn seg_focal_loss(p: &[f64], is_fg: &[bool], gamma_s: f64) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    if p.is_empty() {
        return (0.0, Vec::new());
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (i, (&pi, &fg)) in p.iter().zip(is_fg).enumerate() {
        let pi = clamp_prob(pi);
        if fg {
            let q = 1.0 - pi;
            value -= q.powf(gamma_s) * pi.ln();
            grad[i] = -(-gamma_s * q.powf(gamma_s - 1.0) * pi.ln() + q.powf(gamma_s) / pi) / n;
        } else {
            let q = 1.0 - pi;
            value -= pi.powf(gamma_s) * q.ln();
            grad[i] = -(gamma_s * pi.powf(gamma_s - 1.0) * q.ln() - pi.powf(gamma_s) / q) / n;
        }
    }
    (value / n, grad)
}

/// Mean squared depth error over valid pixels; empty mask gives (0, zeros).
pub fn depth_l2_loss(pred: &[f64], gt: &[f64], valid: &[bool]) -> (f64, Vec<f64>) {
    let m = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![0.0; pred.len()];
    if m == 0 {
        return (0.0, grad);
    }
    let mut value = 0.0;
    for i in 0..pred.len() {
        if valid[i] {
            let e = pred[i] - gt[i];
            value += e * e;
            grad[i] = 2.0 * e / m as f64;
        }
    }
    (value / m as f64, grad)
}

/// Heatmap focal loss with the positive/negative split at `h_gt > 1 - eps_h`.
pub fn heatmap_focal_loss(
    h_pred: &[f64],
    h_gt: &[f64],
    alpha_h: f64,
    gamma_h: f64,
    epsilon_h: f64,
) -> (f64, Vec<f64>) {
    let n = h_pred.len() as f64;
    if h_pred.is_empty() {
        return (0.0, Vec::new());
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; h_pred.len()];
    for i in 0..h_pred.len() {
        let hp = clamp_prob(h_pred[i]);
        let hg = h_gt[i];
        if hg > 1.0 - epsilon_h {
            let q = 1.0 - hp;
            value -= q.powf(gamma_h) * hp.ln();
            grad[i] = -(-gamma_h * q.powf(gamma_h - 1.0) * hp.ln() + q.powf(gamma_h) / hp) / n;
        } else {
            let w = (1.0 - hg).powf(alpha_h);
            let q = 1.0 - hp;
            value -= w * hp.powf(gamma_h) * q.ln();
            grad[i] = -w * (gamma_h * hp.powf(gamma_h - 1.0) * q.ln() - hp.powf(gamma_h) / q) / n;
        }
    }
    (value / n, grad)
}

/// Elementwise smooth L1 summed over the vector.
pub fn smooth_l1(pred: &[f64], gt: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let e = pred[i] - gt[i];
        if e.abs() < beta {
            value += 0.5 * e * e / beta;
            grad[i] = e / beta;
        } else {
            value += e.abs() - 0.5 * beta;
            grad[i] = e.signum();
        }
    }
    (value, grad)
}

/// Heading-bin encoding: target bin index and residual normalized by the
/// half bin width.
pub fn encode_heading(theta: f64, num_bins: usize) -> (usize, f64) {
    let theta = normalize_angle(theta);
    let bin_width = 2.0 * std::f64::consts::PI / num_bins as f64;
    let bin = (((theta + std::f64::consts::PI) / bin_width).floor() as usize).min(num_bins - 1);
    let center = -std::f64::consts::PI + (bin as f64 + 0.5) * bin_width;
    let residual = (theta - center) / (bin_width / 2.0);
    (bin, residual)
}

/// Bin center of a heading bin.
pub fn bin_center(bin: usize, num_bins: usize) -> f64 {
    let bin_width = 2.0 * std::f64::consts::PI / num_bins as f64;
    -std::f64::consts::PI + (bin as f64 + 0.5) * bin_width
}

/// Cross-entropy over heading bins plus smooth-L1 on the normalized
/// within-bin residual. Returns (value, d/d logits, d/d residual).
pub fn heading_bin_loss(
    bin_logits: &[f64],
    residual_pred: f64,
    theta_gt: f64,
) -> (f64, Vec<f64>, f64) {
    let num_bins = bin_logits.len();
    let (target, target_res) = encode_heading(theta_gt, num_bins);
    let probs = crate::attention::softmax(bin_logits);
    let ce = -clamp_prob(probs[target]).ln();
    let mut dlogits = probs;
    dlogits[target] -= 1.0;
    let (res_loss, res_grad) = smooth_l1(&[residual_pred], &[target_res], 1.0);
    (ce + res_loss, dlogits, res_grad[0])
}

/// Gradient of the IoU surrogate with respect to the predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IouGrad {
    pub d_cx: f64,
    pub d_cy: f64,
    pub d_l: f64,
    pub d_w: f64,
}

/// Differentiable BEV IoU surrogate: both footprints are treated as
/// axis-aligned in the ground-truth box's heading frame. Loss = 1 - IoU,
/// with piecewise-analytic gradients and subgradient 0 at kinks.
pub fn iou_surrogate_loss(pred: &Box3D, gt: &Box3D) -> (f64, IouGrad) {
    let (c, s) = (gt.heading.cos(), gt.heading.sin());
    // rotate the pred center into the gt frame
    let dp = Vector2::new(pred.center.x - gt.center.x, pred.center.y - gt.center.y);
    let qx = c * dp.x + s * dp.y;
    let qy = -s * dp.x + c * dp.y;

    let (pl, pw) = (pred.size.x, pred.size.y);
    let (gl, gw) = (gt.size.x, gt.size.y);

    // overlap along one axis and its partials wrt (q, half-extent)
    let axis = |q: f64, ph: f64, gh: f64| -> (f64, f64, f64) {
        let hi = (gh).min(q + ph);
        let lo = (-gh).max(q - ph);
        let o = hi - lo;
        if o <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let dhi_dq = if q + ph < gh { 1.0 } else { 0.0 };
        let dlo_dq = if q - ph > -gh { 1.0 } else { 0.0 };
        let dhi_dph = if q + ph < gh { 1.0 } else { 0.0 };
        let dlo_dph = if q - ph > -gh { -1.0 } else { 0.0 };
        (o, dhi_dq - dlo_dq, dhi_dph - dlo_dph)
    };
    let (ox, dox_dqx, dox_dhx) = axis(qx, pl / 2.0, gl / 2.0);
    let (oy, doy_dqy, doy_dhy) = axis(qy, pw / 2.0, gw / 2.0);

    let inter = ox * oy;
    let union = pl * pw + gl * gw - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };

    // d iou / dv = (I' U - I U') / U^2 with U' = Ap' - I'
    let diou = |di: f64, dap: f64| -> f64 {
        if union <= 0.0 {
            return 0.0;
        }
        (di * union - inter * (dap - di)) / (union * union)
    };
    let di_dqx = dox_dqx * oy;
    let di_dqy = doy_dqy * ox;
    let di_dl = dox_dhx * 0.5 * oy; // d(half-extent)/dl = 1/2
    let di_dw = doy_dhy * 0.5 * ox;

    let g_qx = -diou(di_dqx, 0.0);
    let g_qy = -diou(di_dqy, 0.0);
    let g_l = -diou(di_dl, pw);
    let g_w = -diou(di_dw, pl);

    // back to world coordinates: q = R(-theta) (p - g)
    let rot = Matrix2::new(c, -s, s, c);
    let gw_vec = rot * Vector2::new(g_qx, g_qy);

    (1.0 - iou, IouGrad { d_cx: gw_vec.x, d_cy: gw_vec.y, d_l: g_l, d_w: g_w })
}

/// Per-term loss values and the lambda-weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub depth: f64,
    pub hm: f64,
    pub box_smooth_l1: f64,
    pub box_bin: f64,
    pub box_iou: f64,
    pub total: f64,
}

/// Weighted total: `lambda_seg*seg + lambda_depth*depth + lambda_hm*hm +
/// (box terms)`. Box terms are already averaged over the selected boxes.
pub fn total_loss(
    seg: f64,
    depth: f64,
    hm: f64,
    box_smooth_l1: f64,
    box_bin: f64,
    box_iou: f64,
    cfg: &PipelineConfig,
) -> Result<LossReport> {
    let parts = [seg, depth, hm, box_smooth_l1, box_bin, box_iou];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(CramError::Domain(format!("non-finite loss part: {parts:?}")));
    }
    let total = cfg.lambda_seg * seg
        + cfg.lambda_depth * depth
        + cfg.lambda_hm * hm
        + box_smooth_l1
        + box_bin
        + box_iou;
    Ok(LossReport { seg, depth, hm, box_smooth_l1, box_bin, box_iou, total })
}

/// Central finite differences per coordinate; returns the max relative
/// error against the supplied analytic gradient, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    let mut max_rel = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    max_rel
}
