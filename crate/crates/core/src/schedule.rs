//! Linear β schedule, closed-form forward noising and Gaussian posterior
//! coefficients.
//!
//! Tables are indexed by timestep `t ∈ 1..=T`; index 0 holds the boundary
//! value `ᾱ₀ = 1`. All tables are `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Coefficients of `q(x_{t−1} | x_t, x_0) = N(c_x0·x_0 + c_xt·x_t, var)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub c_x0: f64,
    pub c_xt: f64,
    pub var: f64,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        linear_schedule(params.timesteps, params.beta_start, params.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Param(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t)?;
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        Ok(PosteriorCoeffs {
            c_x0: ab_prev.sqrt() * self.beta[t] / (1.0 - ab),
            c_xt: self.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            var: self.posterior_var[t],
        })
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`, one timestep per batch element.
    pub fn q_sample(&self, x0: &Tensor<f32>, t: &[usize], eps: &Tensor<f32>) -> Result<Tensor<f32>> {
        x0.check_same_shape(eps)?;
        let n = x0.shape().first().copied().unwrap_or(0);
        if t.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", t.len())));
        }
        let per = x0.numel() / n.max(1);
        let mut out = Tensor::zeros(x0.shape());
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let a = self.alpha_bar[ti].sqrt() as f32;
            let b = (1.0 - self.alpha_bar[ti]).sqrt() as f32;
            let range = i * per..(i + 1) * per;
            for ((o, &x), &e) in out.data_mut()[range.clone()]
                .iter_mut()
                .zip(&x0.data()[range.clone()])
                .zip(&eps.data()[range])
            {
                *o = a * x + b * e;
            }
        }
        Ok(out)
    }
}

/// `β_t` linear from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Param("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Param(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut beta = vec![0.0; timesteps + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = if timesteps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (timesteps - 1) as f64
        };
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; timesteps + 1];
    for t in 1..=timesteps {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    let mut posterior_var = vec![0.0; timesteps + 1];
    for t in 1..=timesteps {
        posterior_var[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
    }
    Ok(NoiseSchedule {
        params: ScheduleParams { timesteps, beta_start, beta_end },
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}
