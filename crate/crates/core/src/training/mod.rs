//! Losses, optimizer, learning-rate schedule, the training loop and
//! checkpoints.

mod checkpoint;
mod feature;
mod trainer;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::patching::MaskConfig;
use crate::schedule::ScheduleConfig;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use feature::{FeatureExtractor, RandomProjection};
pub use trainer::{BatchInputs, StepStats, Trainer};

/// What the decoder regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Clean masked pixels.
    Pixel,
    /// Clean masked pixels, each patch standardized; diffusion runs in the
    /// standardized space.
    PixelNorm,
    /// The injected noise.
    Eps,
    /// Clean pixels plus features of the masked patches from a second decoder.
    PixelPlusFeature,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Pixel, Target::PixelNorm, Target::Eps, Target::PixelPlusFeature];

    pub fn name(self) -> &'static str {
        match self {
            Target::Pixel => "pixel",
            Target::PixelNorm => "pixel_norm",
            Target::Eps => "eps",
            Target::PixelPlusFeature => "pixel_plus_feature",
        }
    }

    pub fn normalized(self) -> bool {
        self == Target::PixelNorm
    }

    pub fn predicts_eps(self) -> bool {
        self == Target::Eps
    }
}

impl std::str::FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown target `{s}` (pixel, pixel_norm, eps, pixel_plus_feature)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak learning rate, used as is (no batch-size scaling).
    pub base_lr: f64,
    /// Fraction of the total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub end_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping threshold.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            warmup_frac: 0.025,
            end_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    /// Fine-tuning recipe: 5 warmup epochs of 100, cosine to 1e-6.
    pub fn finetune() -> Self {
        Self { base_lr: 5e-4, warmup_frac: 0.05, end_lr: 1e-6, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return invalid(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return invalid(format!("warmup_frac must be in [0, 1), got {}", self.warmup_frac));
        }
        if self.end_lr < 0.0 || self.end_lr > self.base_lr {
            return invalid(format!("end_lr must be in [0, base_lr], got {}", self.end_lr));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return invalid("weight_decay >= 0, betas in [0, 1) and eps > 0 required");
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return invalid("grad_clip must be positive when set");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub mask: MaskConfig,
    pub target: Target,
    /// Weight of the feature loss relative to the pixel loss.
    pub feature_weight: f64,
    /// Random horizontal flips.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            seed: 0,
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            mask: MaskConfig::default(),
            target: Target::Pixel,
            feature_weight: 1.0,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return invalid("steps and batch_size must be positive");
        }
        if !(self.feature_weight >= 0.0 && self.feature_weight.is_finite()) {
            return invalid("feature_weight must be finite and non-negative");
        }
        self.optim.validate()
    }
}

/// Warmup length in steps.
pub fn warmup_steps(total: usize, cfg: &OptimConfig) -> usize {
    (cfg.warmup_frac * total as f64).round() as usize
}

/// Linear warmup from 0 to `base_lr`, then half-cosine down to `end_lr` at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &OptimConfig) -> f64 {
    let w = warmup_steps(total, cfg);
    if step < w {
        return cfg.base_lr * step as f64 / w as f64;
    }
    if total <= w {
        return cfg.base_lr;
    }
    let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
    cfg.end_lr + (cfg.base_lr - cfg.end_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean squared error over every element of the (masked-token) tensors.
pub fn loss_simple<T: Scalar>(g: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return shape_err("loss_simple", format!("{:?} vs {:?}", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Mean over rows of `1 - cos(pred_i, target_i)`.
pub fn loss_feature<T: Scalar>(g: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) || g.shape(pred).len() != 2 {
        return shape_err("loss_feature", format!("{:?} vs {:?}", g.shape(pred), g.shape(target)));
    }
    let p = g.normalize_rows(pred)?;
    let t = g.normalize_rows(target)?;
    let prod = g.mul(p, t)?;
    let cos = g.sum_axis(prod, 1)?;
    let mean = g.mean(cos)?;
    let neg = g.scale(mean, T::cast(-1.0))?;
    g.add_scalar(neg, T::one())
}

/// `x0 = (x_t - sqrt(1 - abar) eps) / sqrt(abar)`.
pub fn x0_from_eps<T: Scalar>(x_t: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(eps, |x, e| T::cast((x.as_f64() - b * e.as_f64()) / a))
}

/// First and second moments of AdamW, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sq_norm_f64()).sum::<f64>().sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdamW update with decoupled weight decay. `lr_scale` multiplies the
/// learning rate per parameter (layer decay); decay applies only to params
/// flagged for it. Non-finite gradients abort before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimConfig,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return shape_err("adamw_step", format!("{} grads, {} moments, {} params", grads.len(), state.m.len(), params.len()));
    }
    if let Some(s) = lr_scale {
        if s.len() != params.len() {
            return shape_err("adamw_step", format!("{} lr scales for {} params", s.len(), params.len()));
        }
    }
    if !grads.iter().all(|g| g.all_finite()) {
        return Err(Error::NonFinite { op: "adamw_step" });
    }
    state.step += 1;
    let k = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    let (b1, b2) = (T::cast(cfg.beta1), T::cast(cfg.beta2));
    let (c1, c2) = (T::cast(1.0 - cfg.beta1), T::cast(1.0 - cfg.beta2));
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.value.shape() {
            return shape_err("adamw_step", format!("{}: grad {:?} vs {:?}", p.name, g.shape(), p.value.shape()));
        }
        let lr_i = lr * lr_scale.map_or(1.0, |s| s[i]);
        let shrink = T::cast(if p.decay { 1.0 - lr_i * cfg.weight_decay } else { 1.0 });
        let step_size = T::cast(lr_i / bc1);
        let inv_bc2 = T::cast(1.0 / bc2);
        let eps = T::cast(cfg.eps);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            *w *= shrink;
            *w -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
