//! Parameters, the regularized squared-error objective, Adam, and the
//! step learning-rate schedule.

pub mod checkpoint;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Whether a parameter is penalized by the Frobenius regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        let shape = value.shape();
        Parameter {
            name: name.into(),
            kind,
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
            step_count: 0,
        }
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds `2λW` to the gradient of a weight; biases are left alone.
    pub fn add_decay_grad(&mut self, lambda: f32) {
        if self.kind != ParamKind::Weight || lambda == 0.0 {
            return;
        }
        for (g, &w) in self.grad.data_mut().iter_mut().zip(self.value.data()) {
            *g = (*g as f64 + 2.0 * lambda as f64 * w as f64) as f32;
        }
    }
}

/// Value and gradient of the objective at one batch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Data term plus regularizer.
    pub loss: f64,
    /// `(1/N) Σ_i ‖pred_i − target_i‖²_F`.
    pub data_loss: f64,
    /// `(2/N)(pred − target)`.
    pub grad_pred: Tensor,
}

/// `(1/N) Σ_i ‖pred_i − target_i‖²_F + λ Σ_W ‖W‖²_F`, with `N` the batch
/// size and the second sum over weight tensors only.
pub fn loss_mse_l2(pred: &Tensor, target: &Tensor, params: &[Parameter], lambda: f32) -> Result<LossOutput> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "loss_mse_l2",
            format!("prediction {} vs target {}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.shape().n.max(1) as f64;
    let mut sq = 0.0f64;
    let mut grad = Vec::with_capacity(pred.numel());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p as f64 - t as f64;
        sq += d * d;
        grad.push((2.0 * d / n) as f32);
    }
    let data_loss = sq / n;
    let reg: f64 = params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.sum_sq())
        .sum();
    Ok(LossOutput {
        loss: data_loss + lambda as f64 * reg,
        data_loss,
        grad_pred: Tensor::from_vec(pred.shape(), grad)?,
    })
}

/// Adam moment coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from `param.grad`.
pub fn adam_step(param: &mut Parameter, lr: f64, cfg: AdamConfig) {
    param.step_count += 1;
    let t = param.step_count as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let grads = param.grad.data();
    let m = param.adam_m.data_mut();
    let v = param.adam_v.data_mut();
    let w = param.value.data_mut();
    for i in 0..w.len() {
        let g = grads[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        w[i] = (w[i] as f64 - step) as f32;
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_drop_iters: Vec<usize>,
    pub lr_drop_factor: f64,
    pub max_iters: usize,
    pub batch: usize,
    /// Frobenius regularization weight on conv weights.
    pub lambda: f32,
    pub seed: u64,
    /// Loss log cadence in iterations.
    pub log_every: usize,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_drop_iters: vec![100_000, 200_000],
            lr_drop_factor: 10.0,
            max_iters: 300_000,
            batch: 64,
            lambda: 1e-6,
            seed: 0,
            log_every: 100,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr0)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config(format!(
                "learning-rate drop factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.lr_drop_iters.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "learning-rate drops must be strictly increasing: {:?}",
                self.lr_drop_iters
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `lr0` divided by `lr_drop_factor` once
/// for every drop point at or before `iter`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.max_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} outside [0, {})",
            cfg.max_iters
        )));
    }
    let drops = cfg.lr_drop_iters.iter().filter(|&&d| d <= iter).count() as i32;
    Ok(cfg.lr0 / cfg.lr_drop_factor.powi(drops))
}
