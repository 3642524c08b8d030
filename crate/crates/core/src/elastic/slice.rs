//! Physical extraction of a child's weights: lower-index channels, lower-index
//! layers, centred kernel windows. Slicing always copies.

use std::collections::HashMap;

use super::{param_layout, ParamKind, SupernetParams, WeightSource};
use crate::error::{Error, Result};
use crate::searchspace::{ensure_valid, ChildConfig, SearchSpace};
use crate::tensor::Tensor;

/// Copies the sub-tensor of `t` with shape `shape`. Leading axes take the
/// lowest indices; for rank-4 weights the two kernel axes take the centred
/// window.
pub fn slice_tensor(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let full = t.shape();
    if full.len() != shape.len() || shape.iter().zip(full).any(|(s, f)| s > f) {
        return Err(Error::dim(
            "slice",
            format!("cannot slice {full:?} to {shape:?}"),
        ));
    }
    let rank = full.len();
    let offsets: Vec<usize> = (0..rank)
        .map(|d| {
            if rank == 4 && d >= 2 {
                let gap = full[d] - shape[d];
                if !gap.is_multiple_of(2) {
                    return usize::MAX;
                }
                gap / 2
            } else {
                0
            }
        })
        .collect();
    if offsets.contains(&usize::MAX) {
        return Err(Error::dim(
            "slice",
            format!("no centred {shape:?} window in {full:?}"),
        ));
    }
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * full[d + 1];
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = (0..rank).map(|d| (idx[d] + offsets[d]) * strides[d]).sum();
        data.push(t.data()[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Materialized weights of one child, index-aligned names and tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildWeights {
    pub config: ChildConfig,
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ChildWeights {
    pub fn from_parts(
        config: ChildConfig,
        names: Vec<String>,
        kinds: Vec<ParamKind>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        if names.len() != kinds.len() || names.len() != tensors.len() {
            return Err(Error::Precondition(
                "child weight lists have different lengths".into(),
            ));
        }
        let index = names.iter().cloned().zip(0..).collect();
        Ok(Self {
            config,
            names,
            kinds,
            tensors,
            index,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }
}

impl WeightSource for ChildWeights {
    fn lookup(&self, name: &str) -> Option<(usize, &Tensor)> {
        self.index.get(name).map(|&i| (i, &self.tensors[i]))
    }
}

/// Copies out the weights of `cfg`.
pub fn slice_weights(
    space: &SearchSpace,
    params: &SupernetParams,
    cfg: &ChildConfig,
) -> Result<ChildWeights> {
    ensure_valid(space, cfg)?;
    let layout = param_layout(space, cfg);
    let mut names = Vec::with_capacity(layout.len());
    let mut kinds = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for p in layout {
        let full = params
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("supernet has no parameter {}", p.name)))?;
        tensors.push(slice_tensor(full, &p.shape)?);
        names.push(p.name);
        kinds.push(p.kind);
    }
    ChildWeights::from_parts(cfg.clone(), names, kinds, tensors)
}
