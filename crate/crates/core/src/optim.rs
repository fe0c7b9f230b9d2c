//! Adam / AdamW and an exponential moving average of parameters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 2] = [OptimizerKind::Adam, OptimizerKind::AdamW];

    pub fn config(self, lr: f64, weight_decay: f64) -> AdamConfig {
        match self {
            OptimizerKind::Adam => AdamConfig::adam(lr),
            OptimizerKind::AdamW => AdamConfig::adamw(lr, weight_decay),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::UnknownPreset { name: s.into(), valid: "adam, adamw".into() }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, ..Self::adam(lr) }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

fn check_grads(params: &[Arc<Tensor<f32>>], grads: &[Tensor<f32>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        p.check_same_shape(g)?;
    }
    Ok(())
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Arc<Tensor<f32>>]) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Arc<Tensor<f32>>], grads: &[Tensor<f32>]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = (c.lr * c.weight_decay) as f32;
        let eps = c.eps as f32;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = Arc::make_mut(p);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= decay * *pv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// First and second moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore(config: AdamConfig, step: u64, m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("inconsistent optimizer moments".into()));
        }
        Ok(Self { config, step, m, v })
    }
}

/// `shadow ← decay·shadow + (1 − decay)·param`.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Tensor<f32>>,
}

impl Ema {
    pub fn new(decay: f64, params: &[Arc<Tensor<f32>>]) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Param(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        Ok(Self { decay, shadow: params.iter().map(|p| (**p).clone()).collect() })
    }

    pub fn from_shadow(decay: f64, shadow: Vec<Tensor<f32>>) -> Self {
        Self { decay, shadow }
    }

    pub fn update(&mut self, params: &[Arc<Tensor<f32>>]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Shape("EMA state does not match parameters".into()));
        }
        let d = self.decay as f32;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            s.check_same_shape(p)?;
            if d == 0.0 {
                s.data_mut().copy_from_slice(p.data());
                continue;
            }
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }

    pub fn shadow(&self) -> &[Tensor<f32>] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Arc<Tensor<f32>>> {
        vec![
            Arc::new(Tensor::from_fn(&[3, 2], |i| i as f32 - 2.5)),
            Arc::new(Tensor::from_vec(&[2], vec![0.25, -7.0]).unwrap()),
        ]
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = params();
        let grads: Vec<Tensor<f32>> = p.iter().map(|t| t.map(|v| v * 3.0 + 1.0)).collect();
        let mut opt = Adam::new(AdamConfig::adamw(0.0, 0.01), &p);
        for _ in 0..5 {
            opt.step(&mut p, &grads).unwrap();
        }
        assert_eq!(p, params());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let grads: Vec<Tensor<f32>> = p.iter().map(|t| t.map(|v| if v >= 0.0 { 2.0 } else { -0.5 })).collect();
        Adam::new(AdamConfig::adam(0.01), &p).step(&mut p, &grads).unwrap();
        for (after, before) in p.iter().zip(params()) {
            for (a, b) in after.data().iter().zip(before.data()) {
                assert!(((b - a).abs() - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Arc::new(Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap())];
        let mut opt = Adam::new(AdamConfig::adam(0.05), &p);
        for _ in 0..500 {
            let g = vec![p[0].map(|v| 2.0 * (v - 1.0))];
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p[0].data().iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn ema_decay_extremes() {
        let p0 = params();
        let p1: Vec<Arc<Tensor<f32>>> = p0.iter().map(|t| Arc::new(t.map(|v| v + 1.0))).collect();
        let mut zero = Ema::new(0.0, &p0).unwrap();
        zero.update(&p1).unwrap();
        assert!(zero.shadow().iter().zip(&p1).all(|(s, p)| s == &**p));
        let mut one = Ema::new(1.0, &p0).unwrap();
        one.update(&p1).unwrap();
        assert!(one.shadow().iter().zip(&p0).all(|(s, p)| s == &**p));
        assert!(Ema::new(1.5, &p0).is_err());
    }
}
