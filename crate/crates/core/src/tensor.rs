//! Dense numerical kernel with hand-derived backward passes.
//!
//! Batches are `(samples, features)` matrices. Every layer exposes a pure
//! forward pass that returns whatever the backward pass needs, so gradients
//! can be checked against finite differences without hidden state.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Uses the sort-and-threshold rule: with `z` sorted in decreasing order,
/// the support size is the largest `k` with `1 + k*z_(k) > sum_{j<=k} z_(j)`.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Domain("sparsemax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("sparsemax input must be finite".into()));
    }
    let tau = sparsemax_threshold(z);
    Ok(z.iter().map(|&v| (v - tau).max(0.0)).collect())
}

/// The threshold `tau` such that `sparsemax(z) = max(z - tau, 0)`.
pub fn sparsemax_threshold(z: &[f64]) -> f64 {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = sorted[0];
    let mut support = 1usize;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// Vector-Jacobian product of sparsemax at output `p`.
///
/// The Jacobian is `diag(s) - s s^T / |S|` with `s` the support indicator.
pub fn sparsemax_backward(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(p.len(), upstream.len());
    let mut count = 0usize;
    let mut sum = 0.0;
    for (&pi, &gi) in p.iter().zip(upstream) {
        if pi > 0.0 {
            count += 1;
            sum += gi;
        }
    }
    if count == 0 {
        return vec![0.0; p.len()];
    }
    let mean = sum / count as f64;
    p.iter()
        .zip(upstream)
        .map(|(&pi, &gi)| if pi > 0.0 { gi - mean } else { 0.0 })
        .collect()
}

/// Row-wise sparsemax of a matrix.
pub fn sparsemax_rows(z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(z.raw_dim());
    for (mut row_out, row) in out.outer_iter_mut().zip(z.outer_iter()) {
        let p = sparsemax(&row.to_vec())?;
        row_out.assign(&ArrayView1::from(&p));
    }
    Ok(out)
}

fn check_cols(x: &ArrayView2<f64>, expected: usize, what: &str) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::Dimension(format!(
            "{what} expects {expected} input columns, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

/// Fully-connected layer computing `x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `d_out x d_in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

impl DenseLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weights: Array2::zeros((d_out, d_in)),
            bias: Array1::zeros(d_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let weights = Array2::from_shape_fn((d_out, d_in), |_| rng.gen_range(-limit..limit));
        Self {
            weights,
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols(&x, self.d_in(), "dense layer")?;
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    pub fn backward(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<DenseGrads> {
        check_cols(&x, self.d_in(), "dense layer")?;
        check_cols(&upstream, self.d_out(), "dense backward")?;
        if x.nrows() != upstream.nrows() {
            return Err(Error::Dimension("dense backward batch mismatch".into()));
        }
        Ok(DenseGrads {
            weights: upstream.t().dot(&x),
            bias: upstream.sum_axis(Axis(0)),
            input: upstream.dot(&self.weights),
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        take_into(self.weights.iter_mut(), src);
        take_into(self.bias.iter_mut(), src);
    }
}

impl DenseGrads {
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }
}

fn take_into<'a>(dst: impl Iterator<Item = &'a mut f64>, src: &mut &[f64]) {
    let mut n = 0;
    for (d, s) in dst.zip(src.iter()) {
        *d = *s;
        n += 1;
    }
    *src = &src[n..];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Batch normalization over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
    pub epsilon: f64,
}

/// Everything the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Array2<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub input: Array2<f64>,
}

impl BatchNormLayer {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Training-mode forward on batch statistics. Running statistics are
    /// untouched; call [`BatchNormLayer::update_running`] with the cache.
    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, BnCache)> {
        check_cols(&x, self.dim(), "batch norm")?;
        if x.nrows() < 2 {
            return Err(Error::Dimension(
                "batch norm in training mode needs at least 2 samples".into(),
            ));
        }
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let normalized = centered * &inv_std;
        let out = &normalized * &self.scale + &self.shift;
        Ok((
            out,
            BnCache {
                normalized,
                batch_mean: mean,
                batch_var: var,
                inv_std,
            },
        ))
    }

    pub fn forward_infer(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols(&x, self.dim(), "batch norm")?;
        let inv_std = self
            .running_var
            .mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        Ok((&x - &self.running_mean) * &inv_std * &self.scale + &self.shift)
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: BnMode) -> Result<Array2<f64>> {
        match mode {
            BnMode::Train => self.forward_train(x).map(|(y, _)| y),
            BnMode::Infer => self.forward_infer(x),
        }
    }

    pub fn update_running(&mut self, cache: &BnCache, batch_size: usize) {
        let m = self.momentum;
        let unbias = batch_size as f64 / (batch_size as f64 - 1.0);
        self.running_mean = &self.running_mean * m + &cache.batch_mean * (1.0 - m);
        self.running_var = &self.running_var * m + &cache.batch_var * ((1.0 - m) * unbias);
    }

    pub fn backward(&self, cache: &BnCache, upstream: ArrayView2<f64>) -> BnGrads {
        let n = upstream.nrows() as f64;
        let dshift = upstream.sum_axis(Axis(0));
        let dscale = (&upstream * &cache.normalized).sum_axis(Axis(0));
        // dx = scale * inv_std / n * (n*dy - sum(dy) - xhat * sum(dy*xhat))
        let coef = &self.scale * &cache.inv_std / n;
        let input = (&upstream * n - &dshift - &cache.normalized * &dscale) * &coef;
        BnGrads {
            scale: dscale,
            shift: dshift,
            input,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.scale.iter());
        out.extend(self.shift.iter());
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        take_into(self.scale.iter_mut(), src);
        take_into(self.shift.iter_mut(), src);
    }
}

impl BnGrads {
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.scale.iter());
        out.extend(self.shift.iter());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_factor: 0.1,
            decay_every: 75,
            weight_decay: 0.0005,
        }
    }
}

impl AdamConfig {
    /// Step-decayed learning rate for `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = if self.decay_every == 0 {
            0
        } else {
            epoch / self.decay_every
        };
        self.base_lr * self.decay_factor.powi(drops as i32)
    }
}

/// Adam with step-decayed learning rate and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], epoch: usize) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Optimizer(format!("non-finite gradient at index {i}")));
        }
        let c = self.config;
        let lr = c.lr_at(epoch);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let decay = lr * c.weight_decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + c.epsilon) + decay;
        }
        Ok(())
    }
}
