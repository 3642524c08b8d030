//! Recording forward graph with exact reverse-mode gradients.
//!
//! Each op appends a node holding its output value and whatever it needs for
//! the backward pass. Nodes only reference earlier nodes, so the graph is a
//! DAG by construction and backward is a single reverse sweep.

use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Tensor, BN_EPS};
use crate::error::{Error, Result};
use crate::seed;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    DepthwiseConv2d,
    BatchNorm,
    Swish,
    Relu,
    AvgPool,
    GlobalAvgPool,
    FullyConnected,
    Add,
    Dropout,
    ChannelMask,
    ChannelAdapt,
    KernelMask,
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Statistics of the current batch (training, calibration).
    Batch,
    /// Stored running statistics (evaluation).
    Running { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel moments a batch-norm node observed in [`BnMode::Batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel (`N * H * W`).
    pub count: usize,
}

enum Op {
    Input,
    Param {
        index: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    Depthwise {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch: bool,
    },
    Swish {
        x: usize,
    },
    Relu {
        x: usize,
    },
    AvgPool2 {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f32>,
    },
    ChannelMask {
        x: usize,
        keep: usize,
    },
    ChannelAdapt {
        x: usize,
        to: usize,
    },
    KernelMask {
        w: usize,
        k: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param { .. } => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Depthwise { .. } => OpKind::DepthwiseConv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Swish { .. } => OpKind::Swish,
            Op::Relu { .. } => OpKind::Relu,
            Op::AvgPool2 { .. } => OpKind::AvgPool,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::FullyConnected,
            Op::Add { .. } => OpKind::Add,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::ChannelMask { .. } => OpKind::ChannelMask,
            Op::ChannelAdapt { .. } => OpKind::ChannelAdapt,
            Op::KernelMask { .. } => OpKind::KernelMask,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    name: String,
    requires_grad: bool,
}

/// Parameter gradients keyed by the parameter index given to [`Graph::param`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.grads.get(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add(&mut self, index: usize, g: Tensor) {
        match self.grads.get_mut(&index) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(index, g);
            }
        }
    }

    /// Element-wise sum with another set of gradients.
    pub fn accumulate(&mut self, other: Gradients) {
        for (k, g) in other.grads {
            self.add(k, g);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    bn_stats: Vec<BnStats>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that keeps what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            bn_stats: Vec::new(),
        }
    }

    /// Forward-only graph; [`Graph::backward`] on it is a state error.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            bn_stats: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Every node in execution order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Operands of a node in argument order.
    pub fn operands(&self, id: NodeId) -> Vec<NodeId> {
        let ids = match &self.nodes[id.0].op {
            Op::Input | Op::Param { .. } => vec![],
            Op::Conv2d { x, w, .. } | Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Add { a, b } => vec![*a, *b],
            Op::Swish { x }
            | Op::Relu { x }
            | Op::AvgPool2 { x }
            | Op::GlobalAvgPool { x }
            | Op::Dropout { x, .. }
            | Op::ChannelMask { x, .. }
            | Op::ChannelAdapt { x, .. } => vec![*x],
            Op::KernelMask { w, .. } => vec![*w],
        };
        ids.into_iter().map(NodeId).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Moments seen by every batch-statistics BN node, in execution order.
    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    fn push(&mut self, op: Op, value: Tensor, name: &str, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite output at node {name}");
        self.nodes.push(Node {
            op,
            value,
            name: name.to_owned(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn input(&mut self, t: Tensor, name: &str) -> NodeId {
        self.push(Op::Input, t, name, false)
    }

    /// Leaf for parameter `index`; its gradient is reported under that index.
    pub fn param(&mut self, index: usize, t: Tensor, name: &str) -> NodeId {
        self.push(Op::Param { index }, t, name, true)
    }

    fn conv_geom(
        &self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        depthwise: bool,
        name: &str,
    ) -> Result<ConvGeom> {
        let (n, cin, h, wd) = self.value(x).dims4(name)?;
        let ws = self.value(w).shape();
        let [cout, wcin, kh, kw] = *ws else {
            return Err(Error::dim(
                name,
                format!("conv weight must be rank 4, got {ws:?}"),
            ));
        };
        if kh != kw {
            return Err(Error::dim(name, format!("non-square kernel {kh}x{kw}")));
        }
        if depthwise {
            if wcin != 1 || cout != cin {
                return Err(Error::dim(
                    name,
                    format!("depthwise weight {ws:?} does not match {cin} input channels"),
                ));
            }
        } else if wcin != cin {
            return Err(Error::dim(
                name,
                format!("weight expects {wcin} input channels, input has {cin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim(name, "stride must be positive"));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
        })
    }

    /// Same-padded dense convolution without bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, name: &str) -> Result<NodeId> {
        let geom = self.conv_geom(x, w, stride, false, name)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let (ho, wo) = geom.out_hw();
        let t = Tensor::new(vec![geom.n, geom.cout, ho, wo], out)?;
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                geom,
            },
            t,
            name,
            rg,
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        name: &str,
    ) -> Result<NodeId> {
        let geom = self.conv_geom(x, w, stride, true, name)?;
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        let (ho, wo) = geom.out_hw();
        let t = Tensor::new(vec![geom.n, geom.cout, ho, wo], out)?;
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(
            Op::Depthwise {
                x: x.0,
                w: w.0,
                geom,
            },
            t,
            name,
            rg,
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_>,
        name: &str,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4(name)?;
        for (what, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::dim(
                    name,
                    format!(
                        "{what} shape {:?} does not match {c} channels",
                        self.value(id).shape()
                    ),
                ));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for bi in 0..n {
                        s += xv[(bi * c + ch) * hw..][..hw]
                            .iter()
                            .map(|&v| f64::from(v))
                            .sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for bi in 0..n {
                        ss += xv[(bi * c + ch) * hw..][..hw]
                            .iter()
                            .map(|&v| (f64::from(v) - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                (mean, var)
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(
                        name,
                        "running statistics do not match channel count",
                    ));
                }
                (
                    mean.iter().map(|&v| f64::from(v)).collect(),
                    var.iter().map(|&v| f64::from(v)).collect(),
                )
            }
        };
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v + f64::from(BN_EPS)).sqrt()) as f32)
            .collect();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let mu = mean[ch] as f32;
                let is = inv_std[ch];
                for i in off..off + hw {
                    let xh = (xv[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let batch = matches!(mode, BnMode::Batch);
        if batch {
            self.bn_stats.push(BnStats {
                name: name.to_owned(),
                mean,
                var,
                count: m,
            });
        }
        if !self.record {
            xhat = Vec::new();
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch,
            },
            t,
            name,
            rg,
        ))
    }

    fn unary(&mut self, x: NodeId, name: &str, op: Op, f: impl Fn(f32) -> f32) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| f(a)).collect(),
        };
        let rg = self.rg(&[x.0]);
        self.push(op, t, name, rg)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: NodeId, name: &str) -> NodeId {
        self.unary(x, name, Op::Swish { x: x.0 }, |a| a * kernels::sigmoid(a))
    }

    pub fn relu(&mut self, x: NodeId, name: &str) -> NodeId {
        self.unary(x, name, Op::Relu { x: x.0 }, |a| a.max(0.0))
    }

    /// 2x2 stride-2 average pooling, output `ceil(H/2) x ceil(W/2)`.
    pub fn avgpool2(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4(name)?;
        let out = kernels::avgpool2_forward(self.value(x).data(), n, c, h, w);
        let t = Tensor::new(vec![n, c, h.div_ceil(2), w.div_ceil(2)], out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::AvgPool2 { x: x.0 }, t, name, rg))
    }

    /// `N x C x H x W -> N x C`.
    pub fn global_avgpool(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4(name)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xv[p * hw..][..hw].iter().sum::<f32>() / hw as f32)
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::GlobalAvgPool { x: x.0 }, t, name, rg))
    }

    /// `x W^T + b` with `x: N x C_in`, `W: C_out x C_in`, `b: C_out`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        name: &str,
    ) -> Result<NodeId> {
        let [n, ci] = *self.value(x).shape() else {
            return Err(Error::dim(
                name,
                format!("expected N x C input, got {:?}", self.value(x).shape()),
            ));
        };
        let [co, wci] = *self.value(w).shape() else {
            return Err(Error::dim(name, "weight must be rank 2"));
        };
        if wci != ci {
            return Err(Error::dim(
                name,
                format!("weight expects {wci} inputs, got {ci}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::dim(name, "bias shape mismatch"));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; n * co];
        for i in 0..n {
            let xr = &xv[i * ci..][..ci];
            for o in 0..co {
                let bias = b.map_or(0.0, |b| self.value(b).data()[o]);
                out[i * co + o] = bias
                    + xr.iter()
                        .zip(&wv[o * ci..][..ci])
                        .map(|(a, w)| a * w)
                        .sum::<f32>();
            }
        }
        let t = Tensor::new(vec![n, co], out)?;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            t,
            name,
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                name,
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect(),
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, t, name, rg))
    }

    /// Inverted dropout: kept elements are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f32, seed: u64, name: &str) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Precondition(format!(
                "{name}: dropout rate {rate} not in [0, 1)"
            )));
        }
        let mut rng = seed::rng(seed);
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f32> = (0..v.numel())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Dropout { x: x.0, mask }, t, name, rg))
    }

    fn channel_layout(&self, x: NodeId, name: &str) -> Result<(usize, usize, usize)> {
        let s = self.value(x).shape();
        match *s {
            [n, c] => Ok((n, c, 1)),
            [n, c, h, w] => Ok((n, c, h * w)),
            _ => Err(Error::dim(name, format!("expected rank 2 or 4, got {s:?}"))),
        }
    }

    /// Zeroes channels `keep..C`.
    pub fn channel_mask(&mut self, x: NodeId, keep: usize, name: &str) -> Result<NodeId> {
        let (n, c, inner) = self.channel_layout(x, name)?;
        if keep > c {
            return Err(Error::dim(
                name,
                format!("cannot keep {keep} of {c} channels"),
            ));
        }
        let mut t = self.value(x).clone();
        for b in 0..n {
            t.data[(b * c + keep) * inner..(b + 1) * c * inner].fill(0.0);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::ChannelMask { x: x.0, keep }, t, name, rg))
    }

    /// Truncates or zero-pads the channel axis to `to` channels.
    pub fn channel_adapt(&mut self, x: NodeId, to: usize, name: &str) -> Result<NodeId> {
        let (n, c, inner) = self.channel_layout(x, name)?;
        let mut shape = self.value(x).shape().to_vec();
        shape[1] = to;
        let mut data = vec![0.0f32; n * to * inner];
        let m = c.min(to) * inner;
        let xv = self.value(x).data();
        for b in 0..n {
            data[b * to * inner..][..m].copy_from_slice(&xv[b * c * inner..][..m]);
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::ChannelAdapt { x: x.0, to }, t, name, rg))
    }

    /// Zeroes every tap outside the centred `k x k` window of a `K x K` kernel.
    pub fn kernel_mask(&mut self, w: NodeId, k: usize, name: &str) -> Result<NodeId> {
        let s = self.value(w).shape();
        let [_, _, kh, kw] = *s else {
            return Err(Error::dim(
                name,
                format!("kernel mask needs a rank-4 weight, got {s:?}"),
            ));
        };
        if kh != kw || k > kh || !(kh - k).is_multiple_of(2) {
            return Err(Error::dim(
                name,
                format!("cannot centre a {k}x{k} window in {kh}x{kw}"),
            ));
        }
        let mut t = self.value(w).clone();
        apply_kernel_mask(&mut t.data, kh, k);
        let rg = self.rg(&[w.0]);
        Ok(self.push(Op::KernelMask { w: w.0, k }, t, name, rg))
    }

    /// Exact reverse-mode gradients of `output` seeded with `output_grad`.
    pub fn backward(&self, output: NodeId, output_grad: &Tensor) -> Result<Gradients> {
        if !self.record {
            return Err(Error::State(
                "backward called on a forward-only graph".into(),
            ));
        }
        let Some(out_node) = self.nodes.get(output.0) else {
            return Err(Error::State(
                "backward called before forward produced the output node".into(),
            ));
        };
        if out_node.value.shape() != output_grad.shape() {
            return Err(Error::dim(
                &out_node.name,
                format!(
                    "output grad {:?} vs value {:?}",
                    output_grad.shape(),
                    out_node.value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(output_grad.data().to_vec());
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Vec<f32>>>, target: usize, d: Vec<f32>| {
                if !self.nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            };
            let needs = |t: usize| self.nodes[t].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param { index } => {
                    result.add(
                        *index,
                        Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        },
                    );
                }
                Op::Conv2d { x, w, geom } => {
                    let (gw, gx) = kernels::conv2d_backward(
                        self.nodes[*x].value.data(),
                        self.nodes[*w].value.data(),
                        &g,
                        geom,
                        needs(*x),
                    );
                    send(&mut grads, *w, gw);
                    if let Some(gx) = gx {
                        send(&mut grads, *x, gx);
                    }
                }
                Op::Depthwise { x, w, geom } => {
                    let (gw, gx) = kernels::depthwise_backward(
                        self.nodes[*x].value.data(),
                        self.nodes[*w].value.data(),
                        &g,
                        geom,
                        needs(*x),
                    );
                    send(&mut grads, *w, gw);
                    if let Some(gx) = gx {
                        send(&mut grads, *x, gx);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let (n, c, h, w) = node.value.dims4(&node.name)?;
                    let hw = h * w;
                    let m = (n * hw) as f32;
                    let gv = self.nodes[*gamma].value.data();
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for j in off..off + hw {
                                dgamma[ch] += g[j] * xhat[j];
                                dbeta[ch] += g[j];
                            }
                        }
                    }
                    if needs(*x) {
                        let mut dx = vec![0.0f32; g.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                let scale = gv[ch] * inv_std[ch];
                                if *batch {
                                    let k = scale / m;
                                    for j in off..off + hw {
                                        dx[j] = k * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                                    }
                                } else {
                                    for j in off..off + hw {
                                        dx[j] = scale * g[j];
                                    }
                                }
                            }
                        }
                        send(&mut grads, *x, dx);
                    }
                    send(&mut grads, *gamma, dgamma);
                    send(&mut grads, *beta, dbeta);
                }
                Op::Swish { x } => {
                    let xv = self.nodes[*x].value.data();
                    let d = xv
                        .iter()
                        .zip(&g)
                        .map(|(&a, &gy)| {
                            let s = kernels::sigmoid(a);
                            gy * (s + a * s * (1.0 - s))
                        })
                        .collect();
                    send(&mut grads, *x, d);
                }
                Op::Relu { x } => {
                    let xv = self.nodes[*x].value.data();
                    let d = xv
                        .iter()
                        .zip(&g)
                        .map(|(&a, &gy)| if a > 0.0 { gy } else { 0.0 })
                        .collect();
                    send(&mut grads, *x, d);
                }
                Op::AvgPool2 { x } => {
                    let (n, c, h, w) = self.nodes[*x].value.dims4(&node.name)?;
                    send(&mut grads, *x, kernels::avgpool2_backward(&g, n, c, h, w));
                }
                Op::GlobalAvgPool { x } => {
                    let (n, c, h, w) = self.nodes[*x].value.dims4(&node.name)?;
                    let hw = h * w;
                    let mut d = vec![0.0f32; n * c * hw];
                    for p in 0..n * c {
                        d[p * hw..][..hw].fill(g[p] / hw as f32);
                    }
                    send(&mut grads, *x, d);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.nodes[*x].value.data();
                    let wv = self.nodes[*w].value.data();
                    let [n, ci] = *self.nodes[*x].value.shape() else {
                        unreachable!()
                    };
                    let co = node.value.shape()[1];
                    let mut dw = vec![0.0f32; co * ci];
                    for i in 0..n {
                        for o in 0..co {
                            let go = g[i * co + o];
                            for (d, &a) in dw[o * ci..][..ci].iter_mut().zip(&xv[i * ci..][..ci]) {
                                *d += go * a;
                            }
                        }
                    }
                    if needs(*x) {
                        let mut dx = vec![0.0f32; n * ci];
                        for i in 0..n {
                            for o in 0..co {
                                let go = g[i * co + o];
                                for (d, &wt) in
                                    dx[i * ci..][..ci].iter_mut().zip(&wv[o * ci..][..ci])
                                {
                                    *d += go * wt;
                                }
                            }
                        }
                        send(&mut grads, *x, dx);
                    }
                    send(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0f32; co];
                        for i in 0..n {
                            for o in 0..co {
                                db[o] += g[i * co + o];
                            }
                        }
                        send(&mut grads, *b, db);
                    }
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Dropout { x, mask } => {
                    let d = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    send(&mut grads, *x, d);
                }
                Op::ChannelMask { x, keep } => {
                    let (n, c, inner) = self.channel_layout(NodeId(*x), &node.name)?;
                    let mut d = g;
                    for b in 0..n {
                        d[(b * c + keep) * inner..(b + 1) * c * inner].fill(0.0);
                    }
                    send(&mut grads, *x, d);
                }
                Op::ChannelAdapt { x, to } => {
                    let (n, c, inner) = self.channel_layout(NodeId(*x), &node.name)?;
                    let m = c.min(*to) * inner;
                    let mut d = vec![0.0f32; n * c * inner];
                    for b in 0..n {
                        d[b * c * inner..][..m].copy_from_slice(&g[b * to * inner..][..m]);
                    }
                    send(&mut grads, *x, d);
                }
                Op::KernelMask { w, k } => {
                    let kk = node.value.shape()[3];
                    let mut d = g;
                    apply_kernel_mask(&mut d, kk, *k);
                    send(&mut grads, *w, d);
                }
            }
        }
        Ok(result)
    }
}

/// Zeroes the border ring of every `kk x kk` plane outside the centred `k x k`.
fn apply_kernel_mask(data: &mut [f32], kk: usize, k: usize) {
    let off = (kk - k) / 2;
    for plane in data.chunks_mut(kk * kk) {
        for y in 0..kk {
            for x in 0..kk {
                let inside = (off..off + k).contains(&y) && (off..off + k).contains(&x);
                if !inside {
                    plane[y * kk + x] = 0.0;
                }
            }
        }
    }
}
