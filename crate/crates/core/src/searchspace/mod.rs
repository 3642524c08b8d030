//! The elastic architecture space: stages, channel/depth/kernel/resolution
//! ranges, child configurations and their cost model.

mod cardinality;
mod config_string;
mod file;
mod flops;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;

pub use cardinality::{enumerate_configs, space_cardinality};
pub use file::{load_space, parse_space, space_hash};
pub use file::parse_toml;
pub(crate) use file::read_text;
pub use flops::{count_flops, param_count, FlopsReport};

/// Inclusive integer range, written `[lo, hi]` in space files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: usize) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl From<[usize; 2]> for IntRange {
    fn from([lo, hi]: [usize; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<IntRange> for [usize; 2] {
    fn from(r: IntRange) -> Self {
        [r.lo, r.hi]
    }
}

impl fmt::Display for IntRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

/// Plain convolution (stem or head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: IntRange,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

/// One stage of MBConv blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: IntRange,
    pub depth: IntRange,
    pub kernels: Vec<usize>,
    pub stride: usize,
    pub expansion: usize,
}

impl StageSpec {
    pub fn max_kernel(&self) -> usize {
        *self.kernels.last().expect("validated stage has kernels")
    }

    pub fn min_kernel(&self) -> usize {
        self.kernels[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub name: String,
    pub num_classes: usize,
    #[serde(default = "three")]
    pub input_channels: usize,
    pub channel_step: usize,
    pub resolutions: Vec<usize>,
    pub stem: ConvSpec,
    pub head: ConvSpec,
    pub stages: Vec<StageSpec>,
}

impl SearchSpace {
    /// Checks the structural invariants of the space itself.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("search space '{}': {m}", self.name)));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.channel_step == 0 {
            return bad("channel_step must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.resolutions.is_empty() {
            return bad("resolutions must not be empty".into());
        }
        if self.resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("resolutions must be strictly ascending".into());
        }
        let stride = self.network_stride();
        if self.resolutions[0] < stride {
            return bad(format!(
                "resolution {} is below the network stride {stride}",
                self.resolutions[0]
            ));
        }
        let check_range = |what: &str, r: IntRange| -> Result<()> {
            if r.lo == 0 || r.lo > r.hi || !(r.hi - r.lo).is_multiple_of(self.channel_step) {
                return Err(Error::Config(format!(
                    "search space '{}': {what} channel range {r} must satisfy 0 < lo <= hi with hi - lo divisible by {}",
                    self.name, self.channel_step
                )));
            }
            Ok(())
        };
        check_range("stem", self.stem.channels)?;
        check_range("head", self.head.channels)?;
        if self.stem.kernel.is_multiple_of(2) || !matches!(self.stem.stride, 1 | 2) {
            return bad("stem kernel must be odd and stride 1 or 2".into());
        }
        if self.head.kernel != 1 || self.head.stride != 1 {
            return bad("head must be a 1x1 stride-1 convolution".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            check_range(&format!("stage {}", i + 1), st.channels)?;
            if st.depth.lo == 0 || st.depth.lo > st.depth.hi {
                return bad(format!(
                    "stage {} depth range {} is invalid",
                    i + 1,
                    st.depth
                ));
            }
            if st.kernels.is_empty()
                || st.kernels.iter().any(|k| k % 2 == 0)
                || st.kernels.windows(2).any(|w| w[0] >= w[1])
            {
                return bad(format!(
                    "stage {} kernels must be non-empty, odd and strictly ascending",
                    i + 1
                ));
            }
            if !matches!(st.stride, 1 | 2) {
                return bad(format!("stage {} stride must be 1 or 2", i + 1));
            }
            if st.expansion == 0 {
                return bad(format!("stage {} expansion must be positive", i + 1));
            }
        }
        Ok(())
    }

    /// Product of the stem stride and every stage stride.
    pub fn network_stride(&self) -> usize {
        self.stem.stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Discretized channel choices of a range.
    pub fn channel_choices(&self, r: IntRange) -> impl Iterator<Item = usize> + Clone {
        (r.lo..=r.hi).step_by(self.channel_step)
    }

    pub fn channel_choice_count(&self, r: IntRange) -> usize {
        (r.hi - r.lo) / self.channel_step + 1
    }

    /// Channel range feeding stage `s` (the previous stage's range, or the stem's).
    pub fn stage_input_range(&self, s: usize) -> IntRange {
        if s == 0 {
            self.stem.channels
        } else {
            self.stages[s - 1].channels
        }
    }

    /// Whether the first block of stage `s` carries a 1x1 projection on its
    /// skip path. Pooling alone handles a stride change; the projection exists
    /// only when the stage changes the channel range.
    pub fn transition_has_projection(&self, s: usize) -> bool {
        self.stage_input_range(s) != self.stages[s].channels
    }

    /// Whether a resolution is accepted for children: either one of the
    /// trained resolutions, or an unseen one at least the network stride.
    pub fn resolution_allowed(&self, r: usize) -> bool {
        r >= self.network_stride()
    }

    fn channel_ok(&self, range: IntRange, v: usize) -> bool {
        range.contains(v) && (v - range.lo).is_multiple_of(self.channel_step)
    }
}

/// Per-layer choice inside a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerChoice {
    pub channels: usize,
    pub kernel: usize,
}

/// Active layers of one stage; depth is the number of layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StageChoice {
    pub layers: Vec<LayerChoice>,
}

impl StageChoice {
    pub fn uniform(depth: usize, channels: usize, kernel: usize) -> Self {
        Self {
            layers: vec![LayerChoice { channels, kernel }; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Output channels of the stage (its last active layer).
    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.channels).unwrap_or(0)
    }
}

/// One concrete architecture in a [`SearchSpace`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChildConfig {
    pub resolution: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageChoice>,
    pub head_channels: usize,
}

impl ChildConfig {
    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(StageChoice::depth).collect()
    }

    /// Input channels of stage `s` for this child.
    pub fn stage_input_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.stem_channels
        } else {
            self.stages[s - 1].out_channels()
        }
    }
}

/// One out-of-range field of a [`ChildConfig`]. Stage and layer indices are
/// zero-based; the `Display` form numbers stages from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    StageCount {
        expected: usize,
        found: usize,
    },
    Resolution {
        value: usize,
        min: usize,
    },
    StemChannels {
        value: usize,
        range: IntRange,
        step: usize,
    },
    Depth {
        stage: usize,
        value: usize,
        range: IntRange,
    },
    LayerChannels {
        stage: usize,
        layer: usize,
        value: usize,
        range: IntRange,
        step: usize,
    },
    LayerKernel {
        stage: usize,
        layer: usize,
        value: usize,
        allowed: Vec<usize>,
    },
    HeadChannels {
        value: usize,
        range: IntRange,
        step: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StageCount { expected, found } => {
                write!(f, "expected {expected} stages, found {found}")
            }
            Violation::Resolution { value, min } => {
                write!(f, "resolution {value} is below the network stride {min}")
            }
            Violation::StemChannels { value, range, step } => {
                write!(f, "stem channels {value} not in {range} with step {step}")
            }
            Violation::Depth {
                stage,
                value,
                range,
            } => {
                write!(f, "stage {} depth {value} outside {range}", stage + 1)
            }
            Violation::LayerChannels {
                stage,
                layer,
                value,
                range,
                step,
            } => write!(
                f,
                "stage {} layer {} channels {value} not in {range} with step {step}",
                stage + 1,
                layer + 1
            ),
            Violation::LayerKernel {
                stage,
                layer,
                value,
                allowed,
            } => write!(
                f,
                "stage {} layer {} kernel {value} not in {allowed:?}",
                stage + 1,
                layer + 1
            ),
            Violation::HeadChannels { value, range, step } => {
                write!(f, "head channels {value} not in {range} with step {step}")
            }
        }
    }
}

/// Lists every out-of-range field of `cfg`, stage-major then layer-minor.
/// An empty list means the config is valid. Unseen resolutions at or above
/// the network stride are accepted; see [`is_extrapolated`].
pub fn validate_config(space: &SearchSpace, cfg: &ChildConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if !space.resolution_allowed(cfg.resolution) {
        out.push(Violation::Resolution {
            value: cfg.resolution,
            min: space.network_stride(),
        });
    }
    if !space.channel_ok(space.stem.channels, cfg.stem_channels) {
        out.push(Violation::StemChannels {
            value: cfg.stem_channels,
            range: space.stem.channels,
            step: space.channel_step,
        });
    }
    if cfg.stages.len() != space.stages.len() {
        out.push(Violation::StageCount {
            expected: space.stages.len(),
            found: cfg.stages.len(),
        });
    }
    for (s, (spec, choice)) in space.stages.iter().zip(&cfg.stages).enumerate() {
        if !spec.depth.contains(choice.depth()) {
            out.push(Violation::Depth {
                stage: s,
                value: choice.depth(),
                range: spec.depth,
            });
        }
        for (l, layer) in choice.layers.iter().enumerate() {
            if !space.channel_ok(spec.channels, layer.channels) {
                out.push(Violation::LayerChannels {
                    stage: s,
                    layer: l,
                    value: layer.channels,
                    range: spec.channels,
                    step: space.channel_step,
                });
            }
            if !spec.kernels.contains(&layer.kernel) {
                out.push(Violation::LayerKernel {
                    stage: s,
                    layer: l,
                    value: layer.kernel,
                    allowed: spec.kernels.clone(),
                });
            }
        }
    }
    if !space.channel_ok(space.head.channels, cfg.head_channels) {
        out.push(Violation::HeadChannels {
            value: cfg.head_channels,
            range: space.head.channels,
            step: space.channel_step,
        });
    }
    out
}

/// Fails with the first violation, if any.
pub fn ensure_valid(space: &SearchSpace, cfg: &ChildConfig) -> Result<()> {
    match validate_config(space, cfg).into_iter().next() {
        Some(v) => Err(Error::Config(format!("{cfg}: {v}"))),
        None => Ok(()),
    }
}

/// True when the child's resolution is not one the supernet was trained on.
pub fn is_extrapolated(space: &SearchSpace, cfg: &ChildConfig) -> bool {
    !space.resolutions.contains(&cfg.resolution)
}

/// Lowest resolution, thinnest width, shallowest depth, smallest kernels.
pub fn smallest_config(space: &SearchSpace) -> ChildConfig {
    ChildConfig {
        resolution: space.resolutions[0],
        stem_channels: space.stem.channels.lo,
        stages: space
            .stages
            .iter()
            .map(|s| StageChoice::uniform(s.depth.lo, s.channels.lo, s.min_kernel()))
            .collect(),
        head_channels: space.head.channels.lo,
    }
}

/// Highest resolution, widest, deepest, largest kernels.
pub fn biggest_config(space: &SearchSpace) -> ChildConfig {
    ChildConfig {
        resolution: *space.resolutions.last().expect("validated space"),
        stem_channels: space.stem.channels.hi,
        stages: space
            .stages
            .iter()
            .map(|s| StageChoice::uniform(s.depth.hi, s.channels.hi, s.max_kernel()))
            .collect(),
        head_channels: space.head.channels.hi,
    }
}

// Sub-seed slots used by `sample_child`. Layers are numbered by their position
// in the biggest child so a layer keeps its slot whatever depth is sampled.
const SLOT_RESOLUTION: u64 = 0;
const SLOT_STEM: u64 = 1;
const SLOT_HEAD: u64 = 2;
const SLOT_DEPTH_BASE: u64 = 16;
const SLOT_LAYER_BASE: u64 = 1024;

fn pick<T: Copy>(seed: u64, items: &[T]) -> T {
    items[seed::rng(seed).random_range(0..items.len())]
}

/// Draws a child uniformly and independently per dimension. Every decision
/// uses its own stateless sub-seed `child_seed(seed, slot)`.
pub fn sample_child(space: &SearchSpace, seed: u64) -> ChildConfig {
    let sub = |slot: u64| seed::child_seed(seed, slot);
    let stem_choices: Vec<usize> = space.channel_choices(space.stem.channels).collect();
    let head_choices: Vec<usize> = space.channel_choices(space.head.channels).collect();
    let mut layer_slot = SLOT_LAYER_BASE;
    let stages = space
        .stages
        .iter()
        .enumerate()
        .map(|(s, spec)| {
            let depths: Vec<usize> = (spec.depth.lo..=spec.depth.hi).collect();
            let depth = pick(sub(SLOT_DEPTH_BASE + s as u64), &depths);
            let channels: Vec<usize> = space.channel_choices(spec.channels).collect();
            let mut layers = Vec::with_capacity(depth);
            for l in 0..spec.depth.hi {
                if l < depth {
                    let mut rng = seed::rng(sub(layer_slot));
                    layers.push(LayerChoice {
                        channels: channels[rng.random_range(0..channels.len())],
                        kernel: spec.kernels[rng.random_range(0..spec.kernels.len())],
                    });
                }
                layer_slot += 1;
            }
            StageChoice { layers }
        })
        .collect();
    ChildConfig {
        resolution: pick(sub(SLOT_RESOLUTION), &space.resolutions),
        stem_channels: pick(sub(SLOT_STEM), &stem_choices),
        stages,
        head_channels: pick(sub(SLOT_HEAD), &head_choices),
    }
}
