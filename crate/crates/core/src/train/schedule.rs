//! One-cycle learning-rate schedule with cosine phases.

use std::f64::consts::PI;

use crate::config::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
}

fn cosine_blend(from: f64, to: f64, t: f64) -> f64 {
    from + (to - from) * 0.5 * (1.0 - (PI * t.clamp(0.0, 1.0)).cos())
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        Schedule {
            total_steps,
            warmup_ratio: cfg.warmup_ratio,
            lr_init: cfg.lr_init,
            lr_peak: cfg.lr_peak,
            lr_final: cfg.lr_final,
        }
    }

    /// Step at which the peak is reached (fractional).
    pub fn warmup_steps(&self) -> f64 {
        self.warmup_ratio * self.total_steps as f64
    }

    /// Cosine ramp `lr_init → lr_peak` over the warmup, then cosine anneal
    /// `lr_peak → lr_final`; steps past the end hold `lr_final`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_init;
        }
        let s = step as f64;
        let w = self.warmup_steps();
        if s <= w {
            cosine_blend(self.lr_init, self.lr_peak, s / w)
        } else {
            cosine_blend(self.lr_peak, self.lr_final, (s - w) / (self.total_steps as f64 - w))
        }
    }
}
