//! Single-stage supernet training: smallest, biggest and random children per
//! step, inplace distillation from the biggest child on the same patches,
//! exponential learning-rate decay with a constant ending.

mod run;
mod sandwich;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RmsProp;

pub use run::{train, CurvePoint, CurveProbe, TrainOutcome, TrainRun};
pub use sandwich::{
    assign_resolutions, children_for_step, make_multires_batch, sandwich_gradients, sandwich_step,
    ChildReport, ChildRole, LossKind, StepReport, STEP_CSV_HEADER,
};

/// How random children pick a resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResolutionPolicy {
    /// Uniform over every resolution.
    UniformAll,
    /// Uniform over resolutions other than the smallest and largest (falls
    /// back to all when fewer than three exist).
    #[default]
    UniformRemaining,
}

/// Where students' soft targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// The biggest child is re-run on each student's resolution of the same
    /// patches.
    #[default]
    PerResolution,
    /// One set of max-resolution logits is reused for every student.
    MaxResolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_random: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval_epochs: f64,
    /// Fraction of the initial rate at which decay stops.
    pub lr_floor_fraction: f64,
    /// Hold the rate at the floor once reached; when false the decay never stops.
    pub constant_ending: bool,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub dropout_rate: f32,
    pub label_smoothing: f32,
    pub optimizer: RmsProp,
    pub resolution_policy: ResolutionPolicy,
    pub teacher: TeacherMode,
    pub augment: bool,
    pub global_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_random: 2,
            batch_size: 128,
            epochs: 30,
            lr_initial: 0.016,
            lr_decay_factor: 0.97,
            lr_decay_interval_epochs: 0.2,
            lr_floor_fraction: 0.05,
            constant_ending: true,
            warmup_fraction: 0.025,
            weight_decay: 1e-5,
            dropout_rate: 0.2,
            label_smoothing: 0.1,
            optimizer: RmsProp::default(),
            resolution_policy: ResolutionPolicy::UniformRemaining,
            teacher: TeacherMode::PerResolution,
            augment: true,
            global_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_floor_fraction > 0.0 && self.lr_floor_fraction < 1.0) {
            return bad("lr_floor_fraction must lie in (0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) || self.lr_initial < 0.0 {
            return bad("learning-rate constants out of range");
        }
        if self.lr_decay_interval_epochs <= 0.0 || !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("decay interval must be positive and warmup fraction in [0, 1)");
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = crate::searchspace::parse_toml(text, origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schedule for a run of `total_steps` with `steps_per_epoch`.
    pub fn schedule(&self, steps_per_epoch: usize, total_steps: u64) -> LrSchedule {
        LrSchedule {
            initial: self.lr_initial,
            decay: self.lr_decay_factor,
            interval_steps: ((self.lr_decay_interval_epochs * steps_per_epoch as f64).round()
                as u64)
                .max(1),
            floor: self
                .constant_ending
                .then_some(self.lr_initial * self.lr_floor_fraction),
            warmup_steps: (self.warmup_fraction * total_steps as f64).round() as u64,
        }
    }
}

/// Linear warmup, then `initial * decay^floor((step - W) / T)` clipped below
/// at `floor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub interval_steps: u64,
    pub floor: Option<f64>,
    pub warmup_steps: u64,
}

pub fn lr_at(s: &LrSchedule, step: u64) -> f64 {
    if step < s.warmup_steps {
        return s.initial * step as f64 / s.warmup_steps as f64;
    }
    let k = (step - s.warmup_steps) / s.interval_steps.max(1);
    let v = s.initial * s.decay.powi(k.min(i32::MAX as u64) as i32);
    match s.floor {
        Some(f) => v.max(f),
        None => v,
    }
}
