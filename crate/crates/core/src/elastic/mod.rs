//! The weight-shared supernet: one parameter store sized to the biggest
//! child, from which every child runs either by masking the full tensors or
//! by physically slicing them.
//!
//! Parameter names follow the layer ids of the cost model: `stem`,
//! `s{stage}.l{layer}.{expand|dw|project}`, `s{stage}.transition`, `head`,
//! `classifier`, with suffixes `.w`, `.b`, `.bn.gamma`, `.bn.beta`.

mod forward;
mod slice;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::searchspace::{biggest_config, ensure_valid, ChildConfig, SearchSpace};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

pub use forward::{
    child_forward, stage_transition, Activation, BnSource, ChildGraph, ExecMode, ForwardOptions,
};
pub use slice::{slice_tensor, slice_weights, ChildWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    DepthwiseWeight,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
}

impl ParamKind {
    /// Whether weight decay applies. Batch-norm parameters and biases are exempt.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight | ParamKind::DepthwiseWeight | ParamKind::FcWeight
        )
    }
}

/// Name, kind and shape of one parameter of a child (or of the supernet, when
/// the child is the biggest one).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Layer-final batch norm of a residual block (zero-initialized scale).
    pub residual_last: bool,
}

/// Every parameter `cfg` uses, in execution order.
pub fn param_layout(space: &SearchSpace, cfg: &ChildConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let conv =
        |out: &mut Vec<ParamSpec>, layer: &str, kind, shape: Vec<usize>, bn: bool, last: bool| {
            let c = shape[0];
            out.push(ParamSpec {
                name: format!("{layer}.w"),
                kind,
                shape,
                residual_last: false,
            });
            if bn {
                out.push(ParamSpec {
                    name: format!("{layer}.bn.gamma"),
                    kind: ParamKind::BnGamma,
                    shape: vec![c],
                    residual_last: last,
                });
                out.push(ParamSpec {
                    name: format!("{layer}.bn.beta"),
                    kind: ParamKind::BnBeta,
                    shape: vec![c],
                    residual_last: false,
                });
            }
        };
    let k = space.stem.kernel;
    let mut cin = cfg.stem_channels;
    conv(
        &mut out,
        "stem",
        ParamKind::ConvWeight,
        vec![cin, space.input_channels, k, k],
        true,
        false,
    );
    for (s, (spec, stage)) in space.stages.iter().zip(&cfg.stages).enumerate() {
        for (l, layer) in stage.layers.iter().enumerate() {
            let id = format!("s{}.l{l}", s + 1);
            let hidden = cin * spec.expansion;
            if spec.expansion != 1 {
                conv(
                    &mut out,
                    &format!("{id}.expand"),
                    ParamKind::ConvWeight,
                    vec![hidden, cin, 1, 1],
                    true,
                    false,
                );
            }
            let kk = layer.kernel;
            conv(
                &mut out,
                &format!("{id}.dw"),
                ParamKind::DepthwiseWeight,
                vec![hidden, 1, kk, kk],
                true,
                false,
            );
            conv(
                &mut out,
                &format!("{id}.project"),
                ParamKind::ConvWeight,
                vec![layer.channels, hidden, 1, 1],
                true,
                true,
            );
            if l == 0 && space.transition_has_projection(s) {
                conv(
                    &mut out,
                    &format!("s{}.transition", s + 1),
                    ParamKind::ConvWeight,
                    vec![layer.channels, cin, 1, 1],
                    false,
                    false,
                );
            }
            cin = layer.channels;
        }
    }
    let ch = cfg.head_channels;
    conv(
        &mut out,
        "head",
        ParamKind::ConvWeight,
        vec![ch, cin, 1, 1],
        true,
        false,
    );
    out.push(ParamSpec {
        name: "classifier.w".into(),
        kind: ParamKind::FcWeight,
        shape: vec![space.num_classes, ch],
        residual_last: false,
    });
    out.push(ParamSpec {
        name: "classifier.b".into(),
        kind: ParamKind::FcBias,
        shape: vec![space.num_classes],
        residual_last: false,
    });
    out
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnMoments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Running statistics keyed by batch-norm name (`{layer}.bn`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnTable {
    pub entries: BTreeMap<String, BnMoments>,
}

impl BnTable {
    /// Statistics for the first `channels` channels; channels beyond the
    /// stored width read as mean 0, variance 1.
    pub fn moments(&self, name: &str, channels: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let m = self
            .entries
            .get(name)
            .ok_or_else(|| Error::State(format!("no running statistics for {name}")))?;
        let take = |v: &[f32], fill: f32| {
            (0..channels)
                .map(|i| v.get(i).copied().unwrap_or(fill))
                .collect::<Vec<f32>>()
        };
        Ok((take(&m.mean, 0.0), take(&m.var, 1.0)))
    }

    /// Mean 0, variance 1 for every batch norm of `layout`.
    pub fn placeholder(layout: &[ParamSpec]) -> Self {
        let entries = layout
            .iter()
            .filter(|p| p.kind == ParamKind::BnGamma)
            .map(|p| {
                let name = p.name.trim_end_matches(".gamma").to_owned();
                (
                    name,
                    BnMoments {
                        mean: vec![0.0; p.shape[0]],
                        var: vec![1.0; p.shape[0]],
                    },
                )
            })
            .collect();
        Self { entries }
    }
}

/// Named tensors addressed by a stable index, used for both the supernet and
/// sliced children.
pub trait WeightSource {
    fn lookup(&self, name: &str) -> Option<(usize, &Tensor)>;
}

/// The shared weight store, every tensor sized to the biggest child.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetParams {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub tensors: Vec<Tensor>,
    /// Placeholder statistics. Training never accumulates them; a child is
    /// only usable after calibration.
    pub bn: BnTable,
    index: HashMap<String, usize>,
}

impl SupernetParams {
    pub fn from_parts(
        names: Vec<String>,
        kinds: Vec<ParamKind>,
        tensors: Vec<Tensor>,
        bn: BnTable,
    ) -> Result<Self> {
        if names.len() != kinds.len() || names.len() != tensors.len() {
            return Err(Error::Precondition(
                "parameter lists have different lengths".into(),
            ));
        }
        let index: HashMap<String, usize> = names.iter().cloned().zip(0..).collect();
        if index.len() != names.len() {
            return Err(Error::Precondition("duplicate parameter name".into()));
        }
        Ok(Self {
            names,
            kinds,
            tensors,
            bn,
            index,
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|k| k.decays()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Digest of every tensor, in order.
    pub fn checksum(&self) -> u64 {
        self.tensors
            .iter()
            .fold(0u64, |acc, t| seed::mix(acc, t.checksum()))
    }
}

impl WeightSource for SupernetParams {
    fn lookup(&self, name: &str) -> Option<(usize, &Tensor)> {
        self.index_of(name).map(|i| (i, &self.tensors[i]))
    }
}

/// He-initialized supernet. Conv and classifier weights are Gaussian with
/// variance `2 / fan_in` at full size, batch-norm scales are 1 except the last
/// one of every residual block, which is 0; shifts and biases are 0.
pub fn init_supernet(space: &SearchSpace, seed: u64) -> Result<SupernetParams> {
    space.validate()?;
    let big = biggest_config(space);
    ensure_valid(space, &big)?;
    let layout = param_layout(space, &big);
    let bn = BnTable::placeholder(&layout);
    let mut names = Vec::with_capacity(layout.len());
    let mut kinds = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for (i, p) in layout.into_iter().enumerate() {
        let t = match p.kind {
            ParamKind::ConvWeight | ParamKind::DepthwiseWeight | ParamKind::FcWeight => {
                let fan_in: usize = p.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt() as f32;
                let mut rng = seed::rng(seed::stream_seed(seed, Stream::Init, i as u64));
                Tensor::randn(&p.shape, std, &mut rng)
            }
            ParamKind::BnGamma => Tensor::full(&p.shape, if p.residual_last { 0.0 } else { 1.0 }),
            ParamKind::BnBeta | ParamKind::FcBias => Tensor::zeros(&p.shape),
        };
        names.push(p.name);
        kinds.push(p.kind);
        tensors.push(t);
    }
    SupernetParams::from_parts(names, kinds, tensors, bn)
}
