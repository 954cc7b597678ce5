//! Diffusion noise schedules, timestep sampling, the closed-form forward
//! process and the Gaussian reverse-step coefficients.
//!
//! Timesteps are 1-based: `beta(1)` is the first forward variance and
//! `alpha_bar(0) == 1`, so the reverse step from `t = 1` is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{RngStream, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Exponent applied to every linear-schedule variance.
    pub rho: f64,
    /// Training-time timestep range, inclusive.
    pub t_min: usize,
    pub t_max: usize,
    /// Train at a single noise level instead of sampling `[t_min, t_max]`.
    #[serde(default)]
    pub fixed_t: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, rho: 1.0, t_min: 1, t_max: 1000, fixed_t: None }
    }
}

/// Coefficients of `q(x_{t-1} | x_t, x_0)`:
/// mean `coef_x0 * x0 + coef_xt * x_t`, variance `var`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    steps: usize,
    rho: f64,
    t_min: usize,
    t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear variances from `beta_start` to `beta_end`, each raised to `rho`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64, rho: f64) -> Result<Schedule> {
    if steps == 0 {
        return invalid("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return invalid(format!("rho must be positive, got {rho}"));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            (beta_start + frac * (beta_end - beta_start)).powf(rho)
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(Schedule { steps, rho, t_min: 1, t_max: steps, beta, alpha_bar })
}

impl Schedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        build_schedule(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.rho)?.with_range(cfg.t_min, cfg.t_max)
    }

    /// Restrict the training-time timestep range.
    pub fn with_range(mut self, t_min: usize, t_max: usize) -> Result<Self> {
        if !(1 <= t_min && t_min <= t_max && t_max <= self.steps) {
            return invalid(format!("need 1 <= t_min <= t_max <= {}, got [{t_min}, {t_max}]", self.steps));
        }
        self.t_min = t_min;
        self.t_max = t_max;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn t_range(&self) -> (usize, usize) {
        (self.t_min, self.t_max)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Timestep { t, min: 1, max: self.steps });
        }
        Ok(())
    }

    /// Forward variance `beta_t`, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// Cumulative signal fraction, defined for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(alpha_bar[T])`: the signal left at the end of the forward process.
    pub fn terminal_signal(&self) -> f64 {
        self.alpha_bar[self.steps].sqrt()
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t];
        let (a, b) = (T::cast(ab.sqrt()), T::cast((1.0 - ab).sqrt()));
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// A single forward Markov step from `x_{t-1}`: `sqrt(1 - beta_t) x + sqrt(beta_t) eps`.
    pub fn q_step<T: Scalar>(&self, x_prev: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let b = self.beta(t);
        let (a, s) = (T::cast((1.0 - b).sqrt()), T::cast(b.sqrt()));
        x_prev.zip_map(eps, |x, e| a * x + s * e)
    }

    /// `fixed_t` when given, otherwise uniform on `[t_min, t_max]`.
    pub fn sample_t(&self, rng: &mut RngStream, fixed_t: Option<usize>) -> Result<usize> {
        match fixed_t {
            Some(t) => {
                self.check_t(t)?;
                Ok(t)
            }
            None => Ok(rng.int_in(self.t_min, self.t_max)),
        }
    }

    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t)?;
        self.posterior_between(t, t - 1)
    }

    /// Reverse-step coefficients for jumping from `t` to an earlier `s < t`
    /// (used when sampling with fewer steps than `T`).
    pub fn posterior_between(&self, t: usize, s: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t)?;
        if s >= t {
            return Err(Error::Timestep { t: s, min: 0, max: t - 1 });
        }
        let (ab_t, ab_s) = (self.alpha_bar[t], self.alpha_bar[s]);
        let alpha = ab_t / ab_s;
        let beta = 1.0 - alpha;
        let denom = 1.0 - ab_t;
        Ok(PosteriorCoeffs {
            coef_x0: ab_s.sqrt() * beta / denom,
            coef_xt: alpha.sqrt() * (1.0 - ab_s) / denom,
            var: beta * (1.0 - ab_s) / denom,
        })
    }

    /// Descending timesteps visited by a sampler that uses `steps` reverse
    /// steps (evenly strided; `steps == T` visits every timestep).
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.steps {
            return invalid(format!("sampler steps must be in [1, {}], got {steps}", self.steps));
        }
        let mut ts: Vec<usize> = (1..=steps)
            .rev()
            .map(|k| ((k as f64) * self.steps as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}
