//! One forward builder for both execution modes.
//!
//! Masked mode runs the full-size tensors and zeroes inactive channels after
//! every batch norm, zeroes kernel rings outside the child's window, and
//! skips layers beyond the child's depth. Sliced mode runs the physically
//! smaller weights. Both produce the same logits.

use super::{param_layout, BnTable, WeightSource};
use crate::error::{Error, Result};
use crate::searchspace::{ensure_valid, ChildConfig, SearchSpace};
use crate::tensor::{BnMode, Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Masked,
    Sliced,
}

#[derive(Debug, Clone, Copy)]
pub enum BnSource<'a> {
    /// Batch statistics.
    Batch,
    /// Stored running statistics.
    Running(&'a BnTable),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Swish,
    Relu,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: ExecMode,
    pub bn: BnSource<'a>,
    /// Rate and seed of the dropout before the classifier.
    pub dropout: Option<(f32, u64)>,
    pub activation: Activation,
    /// Drop every residual branch, keeping only the skip paths.
    pub ablate_residual: bool,
    /// Keep what backward needs.
    pub record: bool,
}

impl<'a> ForwardOptions<'a> {
    /// Batch statistics, no dropout, swish, recording.
    pub fn new(mode: ExecMode) -> Self {
        Self {
            mode,
            bn: BnSource::Batch,
            dropout: None,
            activation: Activation::Swish,
            ablate_residual: false,
            record: true,
        }
    }

    /// Running statistics, forward only.
    pub fn eval(mode: ExecMode, stats: &'a BnTable) -> Self {
        Self {
            bn: BnSource::Running(stats),
            record: false,
            ..Self::new(mode)
        }
    }
}

/// A recorded child forward pass.
pub struct ChildGraph {
    pub graph: Graph,
    pub logits: NodeId,
}

impl ChildGraph {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }
}

/// Skip path of a stage's first block: 2x2 average pooling when the stage
/// downsamples, then the 1x1 projection if one is given.
pub fn stage_transition(
    g: &mut Graph,
    x: NodeId,
    projection: Option<NodeId>,
    stride: usize,
    name: &str,
) -> Result<NodeId> {
    let pooled = match stride {
        1 => x,
        2 => g.avgpool2(x, &format!("{name}.pool"))?,
        s => {
            return Err(Error::Precondition(format!(
                "{name}: unsupported transition stride {s}"
            )))
        }
    };
    match projection {
        Some(w) => g.conv2d(pooled, w, 1, name),
        None => Ok(pooled),
    }
}

struct Builder<'a, W> {
    g: Graph,
    src: &'a W,
    opts: &'a ForwardOptions<'a>,
}

impl<W: WeightSource> Builder<'_, W> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        let (i, t) = self
            .src
            .lookup(name)
            .ok_or_else(|| Error::State(format!("weight source has no parameter {name}")))?;
        Ok(self.g.param(i, t.clone(), name))
    }

    fn masked(&self) -> bool {
        self.opts.mode == ExecMode::Masked
    }

    fn conv(&mut self, x: NodeId, layer: &str, stride: usize) -> Result<NodeId> {
        let w = self.param(&format!("{layer}.w"))?;
        self.g.conv2d(x, w, stride, layer)
    }

    fn depthwise(&mut self, x: NodeId, layer: &str, k: usize, stride: usize) -> Result<NodeId> {
        let mut w = self.param(&format!("{layer}.w"))?;
        if self.masked() && self.g.value(w).shape()[3] > k {
            w = self.g.kernel_mask(w, k, &format!("{layer}.kmask"))?;
        }
        self.g.depthwise_conv2d(x, w, stride, layer)
    }

    /// Batch norm, then zero channels `active..` in masked mode.
    fn bn(&mut self, x: NodeId, layer: &str, active: usize) -> Result<NodeId> {
        let name = format!("{layer}.bn");
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let c = self.g.value(x).shape()[1];
        let y = match self.opts.bn {
            BnSource::Batch => self.g.batch_norm(x, gamma, beta, BnMode::Batch, &name)?,
            BnSource::Running(table) => {
                let (mean, var) = table.moments(&name, c)?;
                self.g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Running {
                        mean: &mean,
                        var: &var,
                    },
                    &name,
                )?
            }
        };
        self.mask(y, active, &format!("{layer}.mask"))
    }

    fn mask(&mut self, x: NodeId, active: usize, name: &str) -> Result<NodeId> {
        if active < self.g.value(x).shape()[1] {
            if !self.masked() {
                return Err(Error::dim(name, "sliced weights wider than the child"));
            }
            self.g.channel_mask(x, active, name)
        } else {
            Ok(x)
        }
    }

    fn act(&mut self, x: NodeId, layer: &str) -> NodeId {
        let name = format!("{layer}.act");
        match self.opts.activation {
            Activation::Swish => self.g.swish(x, &name),
            Activation::Relu => self.g.relu(x, &name),
        }
    }
}

/// Runs `cfg` on `input` (`N x C x r x r`, `r = cfg.resolution`).
///
/// In masked mode `weights` is the supernet; in sliced mode it must hold
/// exactly the child's shapes (see [`super::slice_weights`]).
pub fn child_forward<W: WeightSource>(
    space: &SearchSpace,
    weights: &W,
    cfg: &ChildConfig,
    input: &Tensor,
    opts: &ForwardOptions<'_>,
) -> Result<ChildGraph> {
    ensure_valid(space, cfg)?;
    let (_, c, h, w) = input.dims4("input")?;
    if h != cfg.resolution || w != cfg.resolution {
        return Err(Error::dim(
            "input",
            format!("batch is {h}x{w}, child resolution is {}", cfg.resolution),
        ));
    }
    if c != space.input_channels {
        return Err(Error::dim(
            "input",
            format!("{c} channels, space expects {}", space.input_channels),
        ));
    }
    if opts.mode == ExecMode::Sliced {
        for p in param_layout(space, cfg) {
            match weights.lookup(&p.name) {
                Some((_, t)) if t.shape() == p.shape.as_slice() => {}
                Some((_, t)) => {
                    return Err(Error::dim(
                        &p.name,
                        format!("sliced weight {:?}, child needs {:?}", t.shape(), p.shape),
                    ))
                }
                None => {
                    return Err(Error::State(format!(
                        "weight source has no parameter {}",
                        p.name
                    )))
                }
            }
        }
    }

    let mut b = Builder {
        g: if opts.record {
            Graph::new()
        } else {
            Graph::inference()
        },
        src: weights,
        opts,
    };
    let x0 = b.g.input(input.clone(), "input");
    let mut x = b.conv(x0, "stem", space.stem.stride)?;
    x = b.bn(x, "stem", cfg.stem_channels)?;
    x = b.act(x, "stem");
    let mut cin = cfg.stem_channels;

    for (s, (spec, stage)) in space.stages.iter().zip(&cfg.stages).enumerate() {
        for (l, layer) in stage.layers.iter().enumerate() {
            let id = format!("s{}.l{l}", s + 1);
            let stride = if l == 0 { spec.stride } else { 1 };
            let hidden = cin * spec.expansion;
            let cout = layer.channels;

            let mut h = x;
            if spec.expansion != 1 {
                let layer_id = format!("{id}.expand");
                h = b.conv(h, &layer_id, 1)?;
                h = b.bn(h, &layer_id, hidden)?;
                h = b.act(h, &layer_id);
            }
            let dw_id = format!("{id}.dw");
            h = b.depthwise(h, &dw_id, layer.kernel, stride)?;
            h = b.bn(h, &dw_id, hidden)?;
            h = b.act(h, &dw_id);
            let pj_id = format!("{id}.project");
            h = b.conv(h, &pj_id, 1)?;
            h = b.bn(h, &pj_id, cout)?;

            let mut skip = x;
            if l == 0 {
                let name = format!("s{}.transition", s + 1);
                let proj = if space.transition_has_projection(s) {
                    Some(b.param(&format!("{name}.w"))?)
                } else {
                    None
                };
                skip = stage_transition(&mut b.g, x, proj, spec.stride, &name)?;
            }
            if !b.masked() && b.g.value(skip).shape()[1] != cout {
                skip = b.g.channel_adapt(skip, cout, &format!("{id}.adapt"))?;
            }
            x = if opts.ablate_residual {
                skip
            } else {
                b.g.add(h, skip, &format!("{id}.add"))?
            };
            x = b.mask(x, cout, &format!("{id}.mask"))?;
            cin = cout;
        }
    }

    x = b.conv(x, "head", 1)?;
    x = b.bn(x, "head", cfg.head_channels)?;
    x = b.act(x, "head");
    x = b.g.global_avgpool(x, "pool")?;
    if let Some((rate, seed)) = opts.dropout {
        if rate > 0.0 {
            x = b.g.dropout(x, rate, seed, "dropout")?;
        }
    }
    let wc = b.param("classifier.w")?;
    let bc = b.param("classifier.b")?;
    let logits = b.g.linear(x, wc, Some(bc), "classifier")?;
    Ok(ChildGraph { graph: b.g, logits })
}
