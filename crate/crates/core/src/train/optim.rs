//! Adam with L2 weight decay and the warmup-then-linear-decay schedule.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::params::ParamStore;

/// Adam; weight decay is added to the gradient (L2), not decoupled.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Update every parameter in `trainable` that received a gradient.
    /// Everything else is left untouched, byte for byte.
    pub fn step(&mut self, store: &ParamStore, trainable: &BTreeSet<String>, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for name in trainable {
            let Some(entry) = store.get(name) else { continue };
            let var = entry.param.var();
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients carry the step's graph; moments must not retain it.
            let theta = var.as_tensor().detach();
            let g = g.detach();
            let g = if self.weight_decay > 0.0 { (g + (&theta * self.weight_decay)?)? } else { g };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((&g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(&theta - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

/// Linear warmup from 0 over `ceil(warmup_ratio * total)` steps, then linear
/// decay to 0 at `total`. `step` is 0-based.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let rest = (total - warmup).max(1);
    peak * ((total - step) as f64 / rest as f64)
}
