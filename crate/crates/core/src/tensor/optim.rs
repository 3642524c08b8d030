//! RMSProp with momentum in the form used by common TF image-model recipes:
//! `ms = rho ms + (1 - rho) g^2`, `mom = mu mom + lr g / sqrt(ms + eps)`,
//! `w -= mom`.

use serde::{Deserialize, Serialize};

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub rho: f32,
    pub momentum: f32,
    pub eps: f32,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            rho: 0.9,
            momentum: 0.9,
            eps: 1e-3,
        }
    }
}

/// Per-parameter accumulators, index-aligned with the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub mean_square: Vec<Vec<f32>>,
    pub momentum: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            mean_square: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            momentum: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

impl RmsProp {
    /// One update. `decay_mask[i]` gates adding `weight_decay * w` to the
    /// gradient of parameter `i`; parameters without a gradient entry are
    /// treated as having a zero gradient. All gradients are checked before
    /// anything is written, so a numeric fault leaves `params` untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        params: &mut [Tensor],
        names: &[String],
        grads: &Gradients,
        state: &mut OptimizerState,
        lr: f32,
        weight_decay: f32,
        decay_mask: &[bool],
    ) -> Result<()> {
        if names.len() != params.len() || decay_mask.len() != params.len() {
            return Err(Error::Precondition(
                "optimizer inputs are not index-aligned".into(),
            ));
        }
        if state.mean_square.len() != params.len() {
            return Err(Error::State(
                "optimizer state does not match parameter list".into(),
            ));
        }
        for (i, g) in grads.iter() {
            let Some(p) = params.get(i) else {
                return Err(Error::Precondition(format!(
                    "gradient for unknown parameter {i}"
                )));
            };
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    &names[i],
                    format!("grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    location: names[i].clone(),
                    message: "non-finite gradient".into(),
                });
            }
        }
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(i).map(Tensor::data);
            let wd = if decay_mask[i] { weight_decay } else { 0.0 };
            if g.is_none() && wd == 0.0 && state.momentum[i].iter().all(|&m| m == 0.0) {
                continue;
            }
            let ms = &mut state.mean_square[i];
            let mom = &mut state.momentum[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]) + wd * *w;
                ms[j] = self.rho * ms[j] + (1.0 - self.rho) * gj * gj;
                mom[j] = self.momentum * mom[j] + lr * gj / (ms[j] + self.eps).sqrt();
                *w -= mom[j];
            }
        }
        state.step += 1;
        Ok(())
    }
}
