//! Decoupled-weight-decay Adam over a subset of a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Parameter ids owned by this optimizer.
    pub ids: Vec<usize>,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore, ids: Vec<usize>) -> Self {
        let zeros = |i: &usize| {
            let (r, c) = params.value(*i).shape();
            Matrix::zeros(r, c)
        };
        let m = ids.iter().map(zeros).collect();
        let v = ids.iter().map(zeros).collect();
        Self { config, ids, step: 0, m, v }
    }

    /// One update at learning rate `lr`. Returns the pre-clip gradient norm.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> f64 {
        let norm = grads.norm(&self.ids);
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            let grad = grads.get(id);
            let p = params.value_mut(id);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for k in 0..p.len() {
                let g = grad.map_or(0.0, |g| g.data()[k] * clip);
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * g;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * g * g;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let w = &mut p.data_mut()[k];
                *w -= lr * (weight_decay * *w + (mk / bc1) / ((vk / bc2).sqrt() + eps));
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut params = ParamStore::new();
        params.insert("blender.w", Matrix::from_rows(&[vec![1.0, -2.0]]));
        let before = params.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &params, vec![0]);
        let mut grads = GradStore::empty(1);
        grads.accumulate(0, &Matrix::from_rows(&[vec![0.5, 0.5]]));
        opt.update(&mut params, &grads, 0.0);
        assert_eq!(params, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("blender.w", Matrix::from_rows(&[vec![3.0, -4.0]]));
        let cfg = AdamWConfig { weight_decay: 0.0, clip_norm: None, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params, vec![0]);
        for _ in 0..2000 {
            let mut grads = GradStore::empty(1);
            grads.accumulate(0, &params.value(0).map(|w| 2.0 * w));
            opt.update(&mut params, &grads, 0.01);
        }
        assert!(params.value(0).sq_norm() < 1e-4);
    }

    #[test]
    fn clipping_caps_the_step_direction() {
        let mut params = ParamStore::new();
        params.insert("blender.w", Matrix::zeros(1, 2));
        let cfg = AdamWConfig { clip_norm: Some(1.0), ..Default::default() };
        let mut opt = AdamW::new(cfg, &params, vec![0]);
        let mut grads = GradStore::empty(1);
        grads.accumulate(0, &Matrix::from_rows(&[vec![30.0, 40.0]]));
        let norm = opt.update(&mut params, &grads, 0.1);
        assert_eq!(norm, 50.0);
        assert!((opt.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-12);
    }
}
