//! Deterministic 2D feature extraction, foreground scoring, depth
//! prediction, and threshold selection.
//!
//! The feature channels are handcrafted (intensity, gradients, local
//! statistics, multi-scale box filters); the only learnable pieces are the
//! [`TinyHead`]s applied per pixel.

use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::learner::TinyHead;
use crate::types::Grid;

/// H x W x d feature grid, channel-last, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(rows: usize, cols: usize, d: usize) -> Self {
        FeatureMap { rows, cols, d, data: vec![0.0; rows * cols * d] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let base = (r * self.cols + c) * self.d;
        &self.data[base..base + self.d]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let base = (r * self.cols + c) * self.d;
        &mut self.data[base..base + self.d]
    }
}

/// Per-pixel foreground probabilities, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Camera,
    Radar,
}

/// Edge-clamped windowed mean along one axis via prefix sums: out-of-range
/// taps repeat the first/last element.
fn box_pass_1d(line: &mut Vec<f64>, radius: i64) {
    let n = line.len() as i64;
    if n == 0 {
        return;
    }
    let mut prefix = Vec::with_capacity(line.len() + 1);
    prefix.push(0.0);
    for &v in line.iter() {
        prefix.push(prefix.last().unwrap() + v);
    }
    let total = 2 * radius + 1;
    let first = line[0];
    let last = line[n as usize - 1];
    let mut out = Vec::with_capacity(line.len());
    for i in 0..n {
        let lo = i - radius;
        let hi = i + radius;
        let under = (-lo).max(0) as f64;
        let over = (hi - (n - 1)).max(0) as f64;
        let a = lo.clamp(0, n - 1) as usize;
        let b = hi.clamp(0, n - 1) as usize;
        let core = prefix[b + 1] - prefix[a];
        out.push((core + under * first + over * last) / total as f64);
    }
    *line = out;
}

/// Mean-filtered copy with a (2r+1)^2 box kernel, edge-clamped. The kernel
/// is separable (clamping acts per axis), so this runs in O(n) per radius.
fn box_filter(img: &Grid, radius: usize) -> Grid {
    let r = radius as i64;
    let mut out = img.clone();
    let mut row_buf = vec![0.0; img.cols];
    for row in 0..img.rows {
        row_buf.copy_from_slice(&out.data[row * img.cols..(row + 1) * img.cols]);
        let mut line = std::mem::take(&mut row_buf);
        box_pass_1d(&mut line, r);
        out.data[row * img.cols..(row + 1) * img.cols].copy_from_slice(&line);
        row_buf = line;
    }
    let mut col_buf = vec![0.0; img.rows];
    for col in 0..img.cols {
        for row in 0..img.rows {
            col_buf[row] = out.get(row, col);
        }
        let mut line = std::mem::take(&mut col_buf);
        box_pass_1d(&mut line, r);
        for (row, &v) in line.iter().enumerate() {
            out.set(row, col, v);
        }
        col_buf = line;
    }
    out
}

/// Affinely map a channel into [-1, 1] with a FIXED transform chosen from
/// the channel's a-priori value range. The transform must not depend on the
/// image content: per-image normalization would make the appearance-depth
/// relationship frame-dependent and unlearnable by per-pixel heads.
fn rescale(channel: &mut [f64], lo: f64, hi: f64) {
    let span = hi - lo;
    for v in channel.iter_mut() {
        *v = (2.0 * (*v - lo) / span - 1.0).clamp(-1.0, 1.0);
    }
}

/// Handcrafted per-pixel features: intensity, central-difference gradients,
/// 3x3 local mean and variance, then multi-scale box-filtered copies until
/// the requested dimension is filled. Each channel is rescaled to [-1, 1].
pub fn extract_features(image: &Grid, d: usize) -> Result<FeatureMap> {
    if d < 4 {
        return Err(CramError::Config(format!("feature dim must be >= 4, got {d}")));
    }
    let (rows, cols) = (image.rows, image.cols);
    let n = rows * cols;
    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(d);

    channels.push(image.data.clone());

    // horizontal / vertical central differences (zero at borders)
    let mut hgrad = vec![0.0; n];
    let mut vgrad = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 && c + 1 < cols {
                hgrad[r * cols + c] = (image.get(r, c + 1) - image.get(r, c - 1)) / 2.0;
            }
            if r > 0 && r + 1 < rows {
                vgrad[r * cols + c] = (image.get(r + 1, c) - image.get(r - 1, c)) / 2.0;
            }
        }
    }
    channels.push(hgrad);
    channels.push(vgrad);

    let mean3 = box_filter(image, 1);
    let mut var3 = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let m = mean3.get(r, c);
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = (r as i64 + dr).clamp(0, rows as i64 - 1) as usize;
                    let cc = (c as i64 + dc).clamp(0, cols as i64 - 1) as usize;
                    let dv = image.get(rr, cc) - m;
                    acc += dv * dv;
                    cnt += 1.0;
                }
            }
            var3[r * cols + c] = acc / cnt;
        }
    }
    channels.push(mean3.data);
    channels.push(var3);

    // multi-scale box filters at growing radii fill the remaining channels
    let mut radius = 2;
    while channels.len() < d {
        channels.push(box_filter(image, radius).data);
        radius *= 2;
    }
    channels.truncate(d);

    for (k, ch) in channels.iter_mut().enumerate() {
        // a-priori ranges for a [0,1] input image: central differences live
        // in [-0.5, 0.5], the 3x3 variance in [0, 0.25], means in [0, 1]
        let (lo, hi) = match k {
            1 | 2 => (-0.5, 0.5),
            4 => (0.0, 0.25),
            _ => (0.0, 1.0),
        };
        rescale(ch, lo, hi);
    }

    let mut fm = FeatureMap::zeros(rows, cols, d);
    for (k, ch) in channels.iter().enumerate() {
        for i in 0..n {
            fm.data[i * d + k] = ch[i];
        }
    }
    Ok(fm)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Depth floor guaranteeing positivity.
pub const DEPTH_MIN: f64 = 0.5;

/// Output scale for the depth head: depth = DEPTH_SCALE * softplus(head)
/// + DEPTH_MIN. The scale keeps the head's raw output in O(1) range, where
/// the tanh hidden layer has healthy gradients, while still covering the
/// full sensing range in meters.
pub const DEPTH_SCALE: f64 = 25.0;

/// Per-pixel sigmoid of the head applied to the pixel's feature vector.
pub fn score_foreground(fm: &FeatureMap, head: &TinyHead) -> Result<ScoreMap> {
    if head.in_dim() != fm.d {
        return Err(CramError::DimMismatch { expected: fm.d, got: head.in_dim() });
    }
    if head.out_dim() != 1 {
        return Err(CramError::DimMismatch { expected: 1, got: head.out_dim() });
    }
    let mut data = Vec::with_capacity(fm.rows * fm.cols);
    for r in 0..fm.rows {
        for c in 0..fm.cols {
            let y = head.forward(fm.at(r, c))?[0];
            data.push(sigmoid(y));
        }
    }
    Ok(ScoreMap { rows: fm.rows, cols: fm.cols, data })
}

/// Per-pixel depth prediction: DEPTH_SCALE * softplus(head) + DEPTH_MIN
/// meters.
pub fn predict_depth(fm: &FeatureMap, head: &TinyHead) -> Result<Grid> {
    if head.in_dim() != fm.d {
        return Err(CramError::DimMismatch { expected: fm.d, got: head.in_dim() });
    }
    if head.out_dim() != 1 {
        return Err(CramError::DimMismatch { expected: 1, got: head.out_dim() });
    }
    let mut out = Grid::zeros(fm.rows, fm.cols);
    for r in 0..fm.rows {
        for c in 0..fm.cols {
            let y = head.forward(fm.at(r, c))?[0];
            out.set(r, c, DEPTH_SCALE * softplus(y) + DEPTH_MIN);
        }
    }
    Ok(out)
}

/// Exactly the pixels with score > tau, in row-major order.
pub fn select_foreground(scores: &ScoreMap, tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..scores.rows {
        for c in 0..scores.cols {
            if scores.get(r, c) > tau {
                out.push((r, c));
            }
        }
    }
    out
}

/// Append the one-hot modality code: camera (1, 0), radar (0, 1).
pub fn append_modality_code(features: &[f64], modality: Modality) -> Vec<f64> {
    let mut out = Vec::with_capacity(features.len() + 2);
    out.extend_from_slice(features);
    match modality {
        Modality::Camera => out.extend_from_slice(&[1.0, 0.0]),
        Modality::Radar => out.extend_from_slice(&[0.0, 1.0]),
    }
    out
}
