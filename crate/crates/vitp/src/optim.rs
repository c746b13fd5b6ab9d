//! Parameter storage, the LR schedule, gradient clipping, and SGD.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named trainable tensors with deterministic (lexicographic) iteration.
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, dims: &[usize], values: Vec<T>) -> Result<Tensor<T>> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter '{}'", name)));
        }
        let t = Tensor::param(dims, values)?;
        self.entries.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Overwrite an entry's values in place (checkpoint loading).
    pub fn set_values(&self, name: &str, values: &[T]) -> Result<()> {
        let t = self
            .entries
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter '{}'", name)))?;
        if t.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                detail: format!("'{}': {} values vs stored {}", name, values.len(), t.len()),
            });
        }
        t.update_leaf(|v, _| v.copy_from_slice(values));
        Ok(())
    }

    pub fn zero_grads(&self) {
        for t in self.entries.values() {
            t.zero_grad();
        }
    }
}

/// LR schedule and clipping hyperparameters: linear warmup to `base_lr`,
/// then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
}

impl ScheduleConfig {
    pub fn new(total_steps: usize) -> Self {
        ScheduleConfig {
            base_lr: 1e-2,
            warmup_steps: 1000,
            total_steps,
            clip_norm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "need 0 < warmup_steps <= total_steps, got {} / {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear ramp 0 -> base over the warmup, then
/// cosine decay base -> 0 at `total_steps`. Both branches meet at the
/// warmup boundary.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::InvalidInput(format!(
            "step {} past total_steps {}",
            step, cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.base_lr);
    }
    let t = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Scale all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the applied scale (1.0 when already within the bound).
pub fn clip_global_norm<T: Scalar>(params: &ParamStore<T>, clip_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (name, t) in params.iter() {
        let g = t.grad().ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
        for v in g {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm <= clip_norm || norm == 0.0 {
        return Ok(1.0);
    }
    let scale = clip_norm / norm;
    let s = T::from_f64(scale);
    for (_, t) in params.iter() {
        t.update_leaf(|_, g| {
            if let Some(g) = g.as_mut() {
                for v in g.iter_mut() {
                    *v = *v * s;
                }
            }
        });
    }
    Ok(scale)
}

/// Global gradient L2 norm (diagnostic; used by the training log).
pub fn global_grad_norm<T: Scalar>(params: &ParamStore<T>) -> Result<f64> {
    let mut sq = 0.0f64;
    for (name, t) in params.iter() {
        let g = t.grad().ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
        for v in g {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    Ok(sq.sqrt())
}

/// One SGD update: `p <- p - lr * grad` for every parameter, then zero grads.
pub fn sgd_step<T: Scalar>(params: &ParamStore<T>, lr: f64) -> Result<()> {
    let lr_t = T::from_f64(lr);
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::MissingGrad { name: name.clone() });
        }
        t.update_leaf(|v, g| {
            let grad = g.take().expect("checked above");
            for (p, gi) in v.iter_mut().zip(grad) {
                *p = *p - lr_t * gi;
            }
        });
    }
    Ok(())
}

/// SGD with an optional momentum knob (default off). With momentum `m > 0`,
/// keeps per-parameter velocity `v <- m*v + grad` and applies `p <- p - lr*v`.
pub struct Sgd<T: Scalar> {
    momentum: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore<T>, lr: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, lr);
        }
        let m = T::from_f64(self.momentum);
        let lr_t = T::from_f64(lr);
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(Error::MissingGrad { name: name.clone() });
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::ZERO; t.len()]);
            t.update_leaf(|v, g| {
                let grad = g.take().expect("checked above");
                for ((p, vi), gi) in v.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *vi = m * *vi + gi;
                    *p = *p - lr_t * *vi;
                }
            });
        }
        Ok(())
    }
}
