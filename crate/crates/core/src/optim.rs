use std::collections::BTreeMap;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps; bias correction uses `step + 1` on the next update.
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Starts a new step; call once before the per-parameter updates of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `param` in place from `grad`. `decay` selects whether weight decay applies.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut [f64],
        grad: &[f64],
        lr: f64,
        decay: bool,
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(dim_err!(
                "{name}: gradient of length {} for {} parameters",
                grad.len(),
                param.len()
            ));
        }
        let t = self.step.max(1) as i32;
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        if m.len() != param.len() {
            return Err(dim_err!("{name}: optimizer state shape changed"));
        }
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        let shrink = if decay {
            1.0 - lr * self.weight_decay
        } else {
            1.0
        };
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let denom = v[i].sqrt() / bc2_sqrt + self.eps;
            param[i] = param[i] * shrink - step_size * m[i] / denom;
        }
        Ok(())
    }

    /// Moments as named tensors, `{name}.m` and `{name}.v`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, m) in &self.first {
            out.push((format!("{k}.m"), Tensor::from_vec(m.clone())));
            out.push((format!("{k}.v"), Tensor::from_vec(self.second[k].clone())));
        }
        out
    }

    pub fn load_state_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) {
        self.first.clear();
        self.second.clear();
        for (k, t) in tensors {
            if let Some(base) = k.strip_suffix(".m") {
                self.first.insert(base.to_string(), t.data().to_vec());
            } else if let Some(base) = k.strip_suffix(".v") {
                self.second.insert(base.to_string(), t.data().to_vec());
            }
        }
    }
}

/// Cosine decay from `start` to `end` over `total` steps, inclusive at both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total <= 1 {
            return self.start;
        }
        let p = (step.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        self.end + 0.5 * (self.start - self.end) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}
