//! Coarse grid over global multipliers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{
    ensure_valid, parse_toml, read_text, ChildConfig, IntRange, SearchSpace, StageChoice,
};

/// Named stage-wise kernel patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedPattern {
    /// Smallest kernel in every stage.
    Min,
    /// Largest kernel in every stage.
    Max,
    /// Smallest kernel in even stages, largest in odd ones (zero-based).
    Alternating,
}

/// Kernel assignment per stage: a named pattern or one explicit kernel per
/// stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelPattern {
    Named(NamedPattern),
    Explicit(Vec<usize>),
}

impl KernelPattern {
    pub fn kernels(&self, space: &SearchSpace) -> Vec<usize> {
        match self {
            KernelPattern::Named(NamedPattern::Min) => {
                space.stages.iter().map(|s| s.min_kernel()).collect()
            }
            KernelPattern::Named(NamedPattern::Max) => {
                space.stages.iter().map(|s| s.max_kernel()).collect()
            }
            KernelPattern::Named(NamedPattern::Alternating) => space
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i % 2 == 0 {
                        s.min_kernel()
                    } else {
                        s.max_kernel()
                    }
                })
                .collect(),
            KernelPattern::Explicit(k) => k.clone(),
        }
    }
}

/// Cross product of resolutions, depth multipliers, width multipliers and
/// kernel patterns. Multipliers scale the largest value of each range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseGrid {
    pub resolutions: Vec<usize>,
    pub depth_multipliers: Vec<f64>,
    pub width_multipliers: Vec<f64>,
    pub kernel_patterns: Vec<KernelPattern>,
}

/// `round(hi * mult)` with halves rounded up, clamped to the range.
pub fn scaled_depth(range: IntRange, mult: f64) -> usize {
    let d = (range.hi as f64 * mult + 0.5).floor() as usize;
    d.clamp(range.lo, range.hi)
}

/// Channel grid point nearest to `hi * mult` (halves round up), clamped.
pub fn scaled_width(range: IntRange, step: usize, mult: f64) -> usize {
    let target = range.hi as f64 * mult;
    let steps = ((target - range.lo as f64) / step as f64 + 0.5)
        .floor()
        .max(0.0) as usize;
    (range.lo + steps * step).min(range.hi)
}

impl CoarseGrid {
    /// Repo defaults: trained resolutions, depth multipliers
    /// `{0.5, 0.7, 0.85, 1.0}`, widths `{0.75, 1.0}`, three kernel patterns.
    pub fn default_for(space: &SearchSpace) -> Self {
        Self {
            resolutions: space.resolutions.clone(),
            depth_multipliers: vec![0.5, 0.7, 0.85, 1.0],
            width_multipliers: vec![0.75, 1.0],
            kernel_patterns: vec![
                KernelPattern::Named(NamedPattern::Min),
                KernelPattern::Named(NamedPattern::Max),
                KernelPattern::Named(NamedPattern::Alternating),
            ],
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        parse_toml(text, origin)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
            * self.depth_multipliers.len()
            * self.width_multipliers.len()
            * self.kernel_patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the grid is non-empty and induces only valid configs.
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("coarse grid: {m}")));
        if self.is_empty() {
            return bad("every axis needs at least one value".into());
        }
        for &m in self.depth_multipliers.iter().chain(&self.width_multipliers) {
            if !(m.is_finite() && m > 0.0) {
                return bad(format!("multiplier {m} must be positive"));
            }
        }
        for p in &self.kernel_patterns {
            let k = p.kernels(space);
            if k.len() != space.stages.len() {
                return bad(format!(
                    "kernel pattern {k:?} needs {} entries",
                    space.stages.len()
                ));
            }
            for (s, (spec, kernel)) in space.stages.iter().zip(&k).enumerate() {
                if !spec.kernels.contains(kernel) {
                    return bad(format!("kernel {kernel} not allowed in stage {}", s + 1));
                }
            }
        }
        for cfg in self.configs(space) {
            ensure_valid(space, &cfg)?;
        }
        Ok(())
    }

    /// One config per grid point, resolution-major then depth, width, kernel.
    pub fn configs(&self, space: &SearchSpace) -> Vec<ChildConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &resolution in &self.resolutions {
            for &dm in &self.depth_multipliers {
                for &wm in &self.width_multipliers {
                    for pattern in &self.kernel_patterns {
                        out.push(self.point(space, resolution, dm, wm, &pattern.kernels(space)));
                    }
                }
            }
        }
        out
    }

    fn point(
        &self,
        space: &SearchSpace,
        resolution: usize,
        dm: f64,
        wm: f64,
        kernels: &[usize],
    ) -> ChildConfig {
        let step = space.channel_step;
        ChildConfig {
            resolution,
            stem_channels: scaled_width(space.stem.channels, step, wm),
            stages: space
                .stages
                .iter()
                .zip(kernels)
                .map(|(s, &k)| {
                    StageChoice::uniform(
                        scaled_depth(s.depth, dm),
                        scaled_width(s.channels, step, wm),
                        k,
                    )
                })
                .collect(),
            head_channels: scaled_width(space.head.channels, step, wm),
        }
    }
}
