//! Multiply-accumulate cost model.
//!
//! * standard conv: `H_out * W_out * C_out * C_in * k^2`
//! * depthwise conv: `H_out * W_out * C * k^2`
//! * fully connected: `C_in * C_out`
//!
//! Spatial sizes follow same-padding, `ceil(input / stride)`. Batch norm,
//! activations, pooling and residual adds are not counted.

use super::{ensure_valid, ChildConfig, SearchSpace};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub total_madds: u64,
    pub per_layer: Vec<(String, u64)>,
}

impl FlopsReport {
    pub fn mmadds(&self) -> f64 {
        self.total_madds as f64 / 1e6
    }
}

#[inline]
fn out_size(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Visits every learnable layer of `cfg` in execution order with
/// `(id, madds, params)`.
fn walk(space: &SearchSpace, cfg: &ChildConfig, mut visit: impl FnMut(String, u64, u64)) {
    let m = |v: usize| v as u64;
    let k = space.stem.kernel;
    let mut hw = out_size(cfg.resolution, space.stem.stride);
    let mut cin = cfg.stem_channels;
    visit(
        "stem".into(),
        m(hw * hw * cin * space.input_channels * k * k),
        m(cin * space.input_channels * k * k + 2 * cin),
    );
    for (s, (spec, stage)) in space.stages.iter().zip(&cfg.stages).enumerate() {
        for (l, layer) in stage.layers.iter().enumerate() {
            let stride = if l == 0 { spec.stride } else { 1 };
            let hidden = cin * spec.expansion;
            let cout = layer.channels;
            let id = |part: &str| format!("s{}.l{}.{part}", s + 1, l);
            if spec.expansion != 1 {
                visit(
                    id("expand"),
                    m(hw * hw * hidden * cin),
                    m(hidden * cin + 2 * hidden),
                );
            }
            let ho = out_size(hw, stride);
            visit(
                id("dw"),
                m(ho * ho * hidden * layer.kernel * layer.kernel),
                m(hidden * layer.kernel * layer.kernel + 2 * hidden),
            );
            visit(
                id("project"),
                m(ho * ho * cout * hidden),
                m(cout * hidden + 2 * cout),
            );
            if l == 0 && space.transition_has_projection(s) {
                visit(
                    format!("s{}.transition", s + 1),
                    m(ho * ho * cout * cin),
                    m(cout * cin),
                );
            }
            hw = ho;
            cin = cout;
        }
    }
    let ch = cfg.head_channels;
    visit("head".into(), m(hw * hw * ch * cin), m(ch * cin + 2 * ch));
    visit(
        "classifier".into(),
        m(ch * space.num_classes),
        m(ch * space.num_classes + space.num_classes),
    );
}

/// Per-layer and total MAdds of a valid child.
pub fn count_flops(space: &SearchSpace, cfg: &ChildConfig) -> Result<FlopsReport> {
    ensure_valid(space, cfg)?;
    let mut per_layer = Vec::new();
    walk(space, cfg, |id, madds, _| per_layer.push((id, madds)));
    Ok(FlopsReport {
        total_madds: per_layer.iter().map(|(_, v)| v).sum(),
        per_layer,
    })
}

/// Learnable parameter count of a valid child: conv and classifier weights,
/// classifier bias, and batch-norm scale and shift. Running statistics are
/// not parameters.
pub fn param_count(space: &SearchSpace, cfg: &ChildConfig) -> Result<u64> {
    ensure_valid(space, cfg)?;
    let mut total = 0;
    walk(space, cfg, |_, _, p| total += p);
    Ok(total)
}
