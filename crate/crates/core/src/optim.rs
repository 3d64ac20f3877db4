//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(
                "eps must be > 0 and weight decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

struct Moments<T> {
    name: String,
    m: Vec<T>,
    v: Vec<T>,
}

pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    state: Vec<Moments<T>>,
    /// Parameters whose name starts with one of these are left untouched.
    frozen_prefixes: Vec<String>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            step: 0,
            state: Vec::new(),
            frozen_prefixes: Vec::new(),
        })
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes
            .iter()
            .any(|p| name.starts_with(p.as_str()))
    }

    /// One update from the gradients currently accumulated in `model`.
    pub fn step(&mut self, model: &mut dyn Parameterized<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let lr = T::c(c.lr);
        let decay = T::one() - T::c(c.lr * c.weight_decay);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(t));
        let bc2_sqrt = T::c((1.0 - c.beta2.powi(t)).sqrt());
        let eps = T::c(c.eps);

        let frozen = &self.frozen_prefixes;
        let first = self.state.is_empty();
        let state = &mut self.state;
        let mut idx = 0;
        let mut mismatch = None;
        model.visit_mut("", &mut |name, p: &mut Param<T>| {
            if frozen.iter().any(|f| name.starts_with(f.as_str())) || mismatch.is_some() {
                return;
            }
            if first {
                state.push(Moments {
                    name: name.to_string(),
                    m: vec![T::zero(); p.len()],
                    v: vec![T::zero(); p.len()],
                });
            }
            let Some(s) = state
                .get_mut(idx)
                .filter(|s| s.name == name && s.m.len() == p.len())
            else {
                mismatch = Some(name.to_string());
                return;
            };
            idx += 1;
            let grads = p.grad.data().to_vec();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(&mut s.m)
                .zip(&mut s.v)
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w = *w * decay - lr * (*m / bc1) / denom;
            }
        });
        if let Some(name) = mismatch {
            return Err(Error::Validation(format!(
                "optimizer state does not match parameter {name}; the model changed between steps"
            )));
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(model: &dyn Parameterized<T>) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, p| {
        sq += p
            .grad
            .data()
            .iter()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>();
    });
    sq.sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(model: &mut dyn Parameterized<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        model.visit_mut("", &mut |_, p| {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s)
        });
    }
    norm
}
