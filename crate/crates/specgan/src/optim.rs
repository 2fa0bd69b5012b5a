//! RAdam wrapped in Lookahead.
//!
//! RAdam rectifies Adam's adaptive learning rate: while the variance
//! estimate's simple moving average length rho_t stays at or below 4 the
//! update falls back to plain bias-corrected momentum (no variance division);
//! once rho_t exceeds 4 the rectification factor r_t scales the adaptive
//! step. Lookahead keeps a slow copy of the weights and every k inner steps
//! interpolates it toward the fast weights, then resets the fast weights onto
//! it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
    slow: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UpdateMode {
    Radam,
    /// Adaptive branch unconditionally, rectification factor forced to 1;
    /// used to cross-check against a plain Adam oracle.
    #[allow(dead_code)]
    AdamNoRectification,
}

#[derive(Debug)]
pub struct RAdamLookahead {
    pub config: OptimizerConfig,
    t: u64,
    slots: Vec<Slot>,
    mode: UpdateMode,
}

impl RAdamLookahead {
    /// Creates optimizer state for a parameter list; the slow weights start
    /// as a copy of the current values.
    pub fn new(config: OptimizerConfig, params: &[(String, &Tensor)]) -> Self {
        let slots = params
            .iter()
            .map(|(name, t)| Slot {
                name: name.clone(),
                shape: t.shape().to_vec(),
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                slow: t.data().to_vec(),
            })
            .collect();
        RAdamLookahead {
            config,
            t: 0,
            slots,
            mode: UpdateMode::Radam,
        }
    }

    #[cfg(test)]
    fn adam_mode(mut self) -> Self {
        self.mode = UpdateMode::AdamNoRectification;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One inner RAdam step over all parameters (reading each tensor's
    /// accumulated gradient), followed by a Lookahead sync every k-th call.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], lr: f64) -> Result<()> {
        debug_assert_eq!(params.len(), self.slots.len());
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2_t = b2.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2_t / (1.0 - b2_t);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2_t;
        let adaptive = match self.mode {
            UpdateMode::Radam => rho_t > 4.0,
            UpdateMode::AdamNoRectification => true,
        };
        let r_t = match self.mode {
            UpdateMode::Radam if adaptive => (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt(),
            _ => 1.0,
        };

        for (slot, (name, param)) in self.slots.iter_mut().zip(params.iter_mut()) {
            debug_assert_eq!(&slot.name, name);
            let (data, grad) = param.update_view();
            let grad = match grad {
                Some(g) => g,
                None => continue,
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                });
            }
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / bias1;
                if adaptive {
                    let denom = (slot.v[i] / bias2).sqrt() + eps;
                    data[i] -= lr * r_t * m_hat / denom;
                } else {
                    data[i] -= lr * m_hat;
                }
            }
        }

        if self.t % self.config.lookahead_k == 0 {
            let alpha = self.config.lookahead_alpha;
            for (slot, (_, param)) in self.slots.iter_mut().zip(params.iter_mut()) {
                let data = param.data_mut();
                for i in 0..data.len() {
                    slot.slow[i] += alpha * (data[i] - slot.slow[i]);
                    data[i] = slot.slow[i];
                }
            }
        }
        Ok(())
    }

    /// State tensors for checkpointing, named `<prefix>.<param>.{m,v,slow}`.
    pub fn state_entries(&self, prefix: &str) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for slot in &self.slots {
            out.push((
                format!("{prefix}.{}.m", slot.name),
                slot.shape.clone(),
                slot.m.as_slice(),
            ));
            out.push((
                format!("{prefix}.{}.v", slot.name),
                slot.shape.clone(),
                slot.v.as_slice(),
            ));
            out.push((
                format!("{prefix}.{}.slow", slot.name),
                slot.shape.clone(),
                slot.slow.as_slice(),
            ));
        }
        out
    }

    /// Restores state written by [`state_entries`](Self::state_entries).
    pub fn load_state<F>(&mut self, prefix: &str, t: u64, mut lookup: F) -> Result<()>
    where
        F: FnMut(&str) -> Option<Vec<f64>>,
    {
        self.t = t;
        for slot in &mut self.slots {
            for (field, dst) in [("m", &mut slot.m), ("v", &mut slot.v), ("slow", &mut slot.slow)]
            {
                let key = format!("{prefix}.{}.{field}", slot.name);
                let data = lookup(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if data.len() != dst.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state {key} has length {}, expected {}",
                        data.len(),
                        dst.len()
                    )));
                }
                *dst = data;
            }
        }
        Ok(())
    }
}
