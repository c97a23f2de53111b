//! Minimal trainable heads (affine / affine-tanh-affine) with exact
//! backpropagation, plus the SGD-with-momentum loop driving the full
//! loss stack.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};

/// One affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// A 1- or 2-layer head. With two layers an elementwise tanh sits between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyHead {
    pub layers: Vec<Affine>,
}

/// Gradients matching a head's parameter layout.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub layers: Vec<Affine>,
}

impl TinyHead {
    /// Single affine layer with zero parameters.
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        TinyHead {
            layers: vec![Affine { w: DMatrix::zeros(out_dim, in_dim), b: DVector::zeros(out_dim) }],
        }
    }

    /// Two-layer head, small uniform init.
    pub fn random(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale1 = (1.0 / in_dim as f64).sqrt();
        let scale2 = (1.0 / hidden as f64).sqrt();
        let layer = |rows: usize, cols: usize, s: f64, rng: &mut ChaCha8Rng| Affine {
            w: DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-s..s)),
            b: DVector::zeros(rows),
        };
        TinyHead {
            layers: vec![
                layer(hidden, in_dim, scale1, &mut rng),
                layer(out_dim, hidden, scale2, &mut rng),
            ],
        }
    }

    /// Single-layer random head.
    pub fn random_linear(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 / in_dim as f64).sqrt();
        TinyHead {
            layers: vec![Affine {
                w: DMatrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-s..s)),
                b: DVector::zeros(out_dim),
            }],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(CramError::DimMismatch { expected: self.in_dim(), got: x.len() });
        }
        let mut h = DVector::from_column_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            h = &layer.w * h + &layer.b;
            if i + 1 < self.layers.len() {
                h.apply(|v| *v = v.tanh());
            }
        }
        Ok(h.as_slice().to_vec())
    }

    /// Exact chain rule through affine(-tanh-affine). Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backward(&self, x: &[f64], dl_dy: &[f64]) -> Result<(HeadGrads, Vec<f64>)> {
        if x.len() != self.in_dim() {
            return Err(CramError::DimMismatch { expected: self.in_dim(), got: x.len() });
        }
        if dl_dy.len() != self.out_dim() {
            return Err(CramError::DimMismatch { expected: self.out_dim(), got: dl_dy.len() });
        }
        // forward pass, caching pre- and post-activation values
        let mut inputs: Vec<DVector<f64>> = vec![DVector::from_column_slice(x)];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = &layer.w * inputs.last().unwrap() + &layer.b;
            if i + 1 < self.layers.len() {
                h.apply(|v| *v = v.tanh());
            }
            inputs.push(h);
        }
        let mut grads: Vec<Affine> = self
            .layers
            .iter()
            .map(|l| Affine { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: DVector::zeros(l.b.len()) })
            .collect();
        let mut delta = DVector::from_column_slice(dl_dy);
        for i in (0..self.layers.len()).rev() {
            // inputs[i] is the input to layer i; inputs[i+1] its (activated) output
            if i + 1 < self.layers.len() {
                // inputs[i+1] = tanh(pre); d tanh = 1 - tanh^2
                let act = &inputs[i + 1];
                for (d, a) in delta.iter_mut().zip(act.iter()) {
                    *d *= 1.0 - a * a;
                }
            }
            grads[i].w = &delta * inputs[i].transpose();
            grads[i].b = delta.clone();
            delta = self.layers[i].w.transpose() * delta;
        }
        Ok((HeadGrads { layers: grads }, delta.as_slice().to_vec()))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }
}

impl HeadGrads {
    pub fn zeros_like(head: &TinyHead) -> Self {
        HeadGrads {
            layers: head
                .layers
                .iter()
                .map(|l| Affine { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: DVector::zeros(l.b.len()) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &HeadGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w *= k;
            l.b *= k;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Frames per step.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 300, learning_rate: 0.05, momentum: 0.9, seed: 0, batch: 4 }
    }
}

/// A training problem: evaluates total loss and head gradients on one batch.
pub trait TrainProblem {
    fn num_frames(&self) -> usize;
    /// Loss and per-head gradients, averaged over the given frames.
    /// `step_seed` drives any stochastic pieces (sensor dropout).
    fn loss_and_grads(
        &self,
        heads: &[TinyHead],
        frames: &[usize],
        step_seed: u64,
    ) -> Result<(f64, Vec<HeadGrads>)>;
}

/// SGD with momentum over the given heads. Returns the per-step loss trace.
///
/// Deterministic for fixed inputs: frames are visited in a fixed cyclic
/// order and all reductions are sequential.
pub fn fit<P: TrainProblem>(
    heads: &mut Vec<TinyHead>,
    problem: &P,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if problem.num_frames() == 0 {
        return Err(CramError::Config("training dataset is empty".into()));
    }
    if cfg.learning_rate < 0.0 {
        return Err(CramError::Config("learning rate must be nonnegative".into()));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(CramError::Config("momentum must be in [0,1)".into()));
    }
    let mut velocity: Vec<HeadGrads> = heads.iter().map(HeadGrads::zeros_like).collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    let n = problem.num_frames();
    for step in 0..cfg.steps {
        let frames: Vec<usize> =
            (0..cfg.batch.max(1)).map(|i| (step * cfg.batch.max(1) + i) % n).collect();
        let step_seed = crate::types::child_seed(cfg.seed, step as u64);
        let (loss, grads) = problem.loss_and_grads(heads, &frames, step_seed)?;
        if !loss.is_finite() {
            return Err(CramError::Diverged { step, loss });
        }
        for ((head, v), g) in heads.iter_mut().zip(&mut velocity).zip(&grads) {
            for (lv, lg) in v.layers.iter_mut().zip(&g.layers) {
                lv.w = &lv.w * cfg.momentum - &lg.w * cfg.learning_rate;
                lv.b = &lv.b * cfg.momentum - &lg.b * cfg.learning_rate;
            }
            for (layer, lv) in head.layers.iter_mut().zip(&v.layers) {
                layer.w += &lv.w;
                layer.b += &lv.b;
            }
        }
        trace.push(loss);
    }
    Ok(trace)
}
