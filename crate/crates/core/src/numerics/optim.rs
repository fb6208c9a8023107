//! AdamW with decoupled weight decay and an optional linear warmup.
//!
//! Per parameter θ with gradient g at step t (1-based):
//!
//! ```text
//! η_t = lr · min(1, t / warmup)          (linear_warmup; constant ignores warmup)
//! θ  ← θ · (1 − η_t · weight_decay)
//! m  ← β₁ m + (1 − β₁) g
//! v  ← β₂ v + (1 − β₂) g²
//! θ  ← θ − η_t · m̂ / (√v̂ + ε),   m̂ = m / (1 − β₁ᵗ),  v̂ = v / (1 − β₂ᵗ)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    LinearWarmup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            schedule: Schedule::Constant,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate used by the update with 1-based index `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::LinearWarmup if self.warmup_steps == 0 => self.learning_rate,
            Schedule::LinearWarmup => {
                let frac = (step as f64 / self.warmup_steps as f64).min(1.0);
                self.learning_rate * frac
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`OptimizerState::step`] will use.
    pub fn next_learning_rate(&self) -> f64 {
        self.config.learning_rate_at(self.step + 1)
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    ///
    /// Parameters absent from `grads` are left untouched (frozen). The step is
    /// rejected before any mutation if a gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    op: format!("gradient of `{name}`"),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = c.learning_rate_at(self.step);
        let decay = 1.0 - lr * c.weight_decay;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for (((theta, &gi), m1), m2) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *theta *= decay;
                *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * gi;
                *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * gi * gi;
                let m_hat = *m1 / bias1;
                let v_hat = *m2 / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
