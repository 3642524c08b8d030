//! Batch-norm recalibration of a sliced child and its evaluation.
//!
//! Statistics are the exact moments over every calibration example,
//! aggregated across batches in f64, rather than an exponential average.

use crate::dataio::{resize_bicubic, ImageBatch};
use crate::elastic::{
    child_forward, slice_weights, BnMoments, BnTable, ChildWeights, ExecMode, ForwardOptions,
    SupernetParams,
};
use crate::error::{Error, Result};
use crate::searchspace::{ChildConfig, SearchSpace};
use crate::tensor::softmax_xent;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationMeta {
    pub batches: usize,
    pub examples: usize,
    pub dataset: String,
}

/// A deployable child: sliced weights plus its own running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedChild {
    pub config: ChildConfig,
    pub weights: ChildWeights,
    pub bn: BnTable,
    pub meta: CalibrationMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub examples: usize,
}

#[derive(Default)]
struct Accum {
    count: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Slices `cfg` out of `params` and computes its statistics over the first
/// `num_batches` of `batches` (resized to the child's resolution).
pub fn calibrate<'a>(
    space: &SearchSpace,
    params: &SupernetParams,
    cfg: &ChildConfig,
    batches: impl IntoIterator<Item = &'a ImageBatch>,
    num_batches: usize,
    dataset: &str,
) -> Result<CalibratedChild> {
    if num_batches == 0 {
        return Err(Error::Precondition(
            "calibration needs at least one batch".into(),
        ));
    }
    let weights = slice_weights(space, params, cfg)?;
    let mut acc: std::collections::BTreeMap<String, Accum> = Default::default();
    let mut used = 0;
    let mut examples = 0;
    let opts = ForwardOptions {
        record: false,
        ..ForwardOptions::new(ExecMode::Sliced)
    };
    for b in batches.into_iter().take(num_batches) {
        let x = resize_bicubic(&b.images, cfg.resolution);
        let out = child_forward(space, &weights, cfg, &x, &opts)?;
        for st in out.graph.bn_stats() {
            let a = acc.entry(st.name.clone()).or_default();
            if a.sum.is_empty() {
                a.sum = vec![0.0; st.mean.len()];
                a.sum_sq = vec![0.0; st.mean.len()];
            }
            let n = st.count as f64;
            a.count += n;
            for c in 0..st.mean.len() {
                a.sum[c] += n * st.mean[c];
                a.sum_sq[c] += n * (st.var[c] + st.mean[c] * st.mean[c]);
            }
        }
        used += 1;
        examples += b.len();
    }
    if used == 0 {
        return Err(Error::Precondition("calibration stream is empty".into()));
    }
    let entries = acc
        .into_iter()
        .map(|(name, a)| {
            let mean: Vec<f64> = a.sum.iter().map(|s| s / a.count).collect();
            let var = a
                .sum_sq
                .iter()
                .zip(&mean)
                .map(|(s, m)| ((s / a.count - m * m).max(0.0)) as f32)
                .collect();
            (
                name,
                BnMoments {
                    mean: mean.into_iter().map(|m| m as f32).collect(),
                    var,
                },
            )
        })
        .collect();
    Ok(CalibratedChild {
        config: cfg.clone(),
        weights,
        bn: BnTable { entries },
        meta: CalibrationMeta {
            batches: used,
            examples,
            dataset: dataset.to_owned(),
        },
    })
}

/// Top-1 accuracy and mean cross-entropy with running statistics.
pub fn evaluate<'a>(
    space: &SearchSpace,
    child: &CalibratedChild,
    batches: impl IntoIterator<Item = &'a ImageBatch>,
) -> Result<EvalResult> {
    let opts = ForwardOptions::eval(ExecMode::Sliced, &child.bn);
    let mut correct = 0usize;
    let mut n = 0usize;
    let mut loss = 0.0f64;
    for b in batches {
        if b.is_empty() {
            continue;
        }
        let x = resize_bicubic(&b.images, child.config.resolution);
        let out = child_forward(space, &child.weights, &child.config, &x, &opts)?;
        let logits = out.logits();
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&b.labels) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
            correct += usize::from(arg == label);
        }
        let (l, _) = softmax_xent(logits, &b.labels, 0.0)?;
        loss += f64::from(l) * b.len() as f64;
        n += b.len();
    }
    if n == 0 {
        return Err(Error::Precondition("evaluation stream is empty".into()));
    }
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
        examples: n,
    })
}
