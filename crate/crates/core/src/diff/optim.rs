use std::collections::BTreeMap;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore, Tag};
use super::tensor::Tensor;
use crate::error::{config_err, shape_err, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with per-parameter step counters, so frozen parameters do not age.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return config_err(format!("learning rate must be > 0, got {}", cfg.lr));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return config_err(format!("betas must lie in [0, 1), got ({}, {})", cfg.beta1, cfg.beta2));
        }
        if !(cfg.eps > 0.0) {
            return config_err(format!("eps must be > 0, got {}", cfg.eps));
        }
        Ok(Self {
            cfg,
            state: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update to every parameter whose tag is in `tags`; all
    /// other parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, tags: &[Tag]) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for p in params.iter_mut().filter(|p| tags.contains(&p.tag)) {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.len() != p.value.numel() {
                return shape_err(format!("gradient for '{}' has {} values, expected {}", p.name, g.len(), p.value.numel()));
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            for (((w, &gi), m), v) in p.value.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One-shot Adam update, for callers that keep their own optimiser state.
pub fn step_adam(
    opt: &mut Adam,
    params: &mut ParamStore,
    grads: &Gradients,
    tags: &[Tag],
) -> Result<()> {
    opt.step(params, grads, tags)
}

/// Plain gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return config_err(format!("learning rate must be > 0, got {lr}"));
        }
        Ok(Self { lr })
    }

    pub fn step(&self, params: &mut ParamStore, grads: &Gradients, tags: &[Tag]) -> Result<()> {
        for p in params.iter_mut().filter(|p| tags.contains(&p.tag)) {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.len() != p.value.numel() {
                return shape_err(format!("gradient for '{}' has {} values, expected {}", p.name, g.len(), p.value.numel()));
            }
            for (w, gi) in p.value.data_mut().iter_mut().zip(g) {
                *w -= self.lr * gi;
            }
        }
        Ok(())
    }
}

/// `[fan_out, fan_in]` weights uniform in `±√(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Tensor::from_fn(&[fan_out, fan_in], |_| dist.sample(rng))
}
