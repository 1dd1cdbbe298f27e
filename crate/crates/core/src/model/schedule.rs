use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-5,
            min_lr: 5e-6,
            warmup_steps: 200,
            total_steps: 1525,
            weight_decay: 0.1,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return bad(format!("need 0 < min_lr ({}) <= peak_lr ({})", self.min_lr, self.peak_lr));
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("optimizer hyperparameters out of range".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> Result<f64, ModelError> {
    if step > cfg.total_steps {
        return Err(ModelError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step <= cfg.warmup_steps {
        return Ok(if cfg.warmup_steps == 0 {
            cfg.peak_lr
        } else {
            cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
        });
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * cosine)
}
