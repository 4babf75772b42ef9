//! AdamW with decoupled weight decay.
//!
//! Moment state is keyed by parameter name, so the set of live parameters
//! can differ between steps (frozen submodules, toggled loss terms)
//! without disturbing the others. A parameter with no accumulated
//! gradient is skipped entirely for that step, including its step count,
//! matching the usual lazy behavior.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot {
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> AdamW {
        AdamW {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to a single parameter, replacing the tensor behind
    /// `slot` with the stepped value. Returns false when the parameter had
    /// no gradient and was left untouched.
    pub fn step_param(&mut self, name: &str, slot: &mut Tensor, lr: f32) -> Result<bool> {
        let Some(grad) = slot.grad() else {
            return Ok(false);
        };
        let n = slot.numel();
        if grad.len() != n {
            return Err(Error::Contract(format!(
                "gradient length {} does not match parameter {name:?} of {n} elements",
                grad.len()
            )));
        }
        let s = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if s.m.len() != n {
            return Err(Error::Contract(format!(
                "optimizer state for {name:?} has {} elements, parameter has {n}",
                s.m.len()
            )));
        }
        s.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - (b1 as f64).powi(s.t as i32);
        let bc2 = 1.0 - (b2 as f64).powi(s.t as i32);
        let mut data = slot.data().to_vec();
        for i in 0..n {
            let g = grad[i];
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
            let m_hat = (s.m[i] as f64 / bc1) as f32;
            let v_hat = (s.v[i] as f64 / bc2) as f32;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps))
                + lr * self.cfg.weight_decay * data[i];
        }
        *slot = slot.with_data(data);
        Ok(true)
    }

    /// Number of parameters with optimizer state.
    pub fn tracked(&self) -> usize {
        self.state.len()
    }
}

/// Euclidean norm over all gradients of the given tensors; tensors
/// without a gradient contribute nothing.
pub fn global_grad_norm(params: &[&Tensor]) -> f32 {
    let mut acc = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                acc += (v as f64) * (v as f64);
            }
        }
    }
    acc.sqrt() as f32
}

/// Scale all gradients down so the global norm is at most `max_norm`.
/// Returns the scale that was applied (1.0 when already within bounds).
pub fn clip_grad_norm(params: &[&Tensor], max_norm: f32) -> f32 {
    let norm = global_grad_norm(params);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in params {
        p.scale_grad(scale);
    }
    scale
}
