//! One training step over the smallest, biggest and random children.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use super::{lr_at, LrSchedule, ResolutionPolicy, TeacherMode, TrainConfig};
use crate::dataio::{resize_bicubic, ImageBatch};
use crate::elastic::{child_forward, ExecMode, ForwardOptions, SupernetParams};
use crate::error::{Error, Result};
use crate::searchspace::{biggest_config, sample_child, smallest_config, ChildConfig, SearchSpace};
use crate::seed::{self, Stream};
use crate::tensor::{distill_loss, softmax_xent, Gradients, OptimizerState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChildRole {
    Biggest,
    Smallest,
    Random(usize),
}

impl fmt::Display for ChildRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChildRole::Biggest => f.write_str("biggest"),
            ChildRole::Smallest => f.write_str("smallest"),
            ChildRole::Random(i) => write!(f, "random{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    GroundTruth,
    Distill,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::GroundTruth => "ground-truth",
            LossKind::Distill => "distill",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChildReport {
    pub role: ChildRole,
    pub config: String,
    pub resolution: usize,
    pub loss_kind: LossKind,
    pub loss: f32,
}

/// Everything one step did; one row per child in the step CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub children: Vec<ChildReport>,
}

pub const STEP_CSV_HEADER: [&str; 8] = [
    "step",
    "role",
    "config",
    "resolution",
    "loss_kind",
    "loss",
    "lr",
    "grad_norm",
];

impl StepReport {
    pub fn records(&self) -> Vec<[String; 8]> {
        self.children
            .iter()
            .map(|c| {
                [
                    self.step.to_string(),
                    c.role.to_string(),
                    c.config.clone(),
                    c.resolution.to_string(),
                    c.loss_kind.to_string(),
                    c.loss.to_string(),
                    self.lr.to_string(),
                    self.grad_norm.to_string(),
                ]
            })
            .collect()
    }
}

/// Resolution per child: the smallest child gets the lowest, the biggest the
/// highest, random children draw per `policy` from a stream seeded by `seed`.
pub fn assign_resolutions(
    roles: &[ChildRole],
    resolutions: &[usize],
    seed: u64,
    policy: ResolutionPolicy,
) -> Vec<usize> {
    let lo = resolutions
        .iter()
        .copied()
        .min()
        .expect("at least one resolution");
    let hi = resolutions
        .iter()
        .copied()
        .max()
        .expect("at least one resolution");
    let pool: Vec<usize> = match policy {
        ResolutionPolicy::UniformRemaining if resolutions.len() > 2 => resolutions
            .iter()
            .copied()
            .filter(|&r| r != lo && r != hi)
            .collect(),
        _ => resolutions.to_vec(),
    };
    roles
        .iter()
        .map(|role| match role {
            ChildRole::Smallest => lo,
            ChildRole::Biggest => hi,
            ChildRole::Random(i) => {
                let mut rng = seed::rng(seed::mix(seed, *i as u64));
                pool[rng.random_range(0..pool.len())]
            }
        })
        .collect()
}

/// The same patches resized to every requested resolution.
pub fn make_multires_batch(images: &Tensor, resolutions: &[usize]) -> BTreeMap<usize, Tensor> {
    resolutions
        .iter()
        .map(|&r| (r, resize_bicubic(images, r)))
        .collect()
}

/// Children trained at `step`, biggest first, with resolutions assigned.
pub fn children_for_step(
    space: &SearchSpace,
    step: u64,
    cfg: &TrainConfig,
) -> Vec<(ChildRole, ChildConfig)> {
    let mut out = vec![
        (ChildRole::Biggest, biggest_config(space)),
        (ChildRole::Smallest, smallest_config(space)),
    ];
    let child_base = seed::stream_seed(cfg.global_seed, Stream::Children, step);
    for i in 0..cfg.n_random {
        out.push((
            ChildRole::Random(i),
            sample_child(space, seed::child_seed(child_base, i as u64)),
        ));
    }
    let roles: Vec<ChildRole> = out.iter().map(|(r, _)| *r).collect();
    let res = assign_resolutions(
        &roles,
        &space.resolutions,
        seed::stream_seed(cfg.global_seed, Stream::Resolution, step),
        cfg.resolution_policy,
    );
    for ((_, c), r) in out.iter_mut().zip(res) {
        c.resolution = r;
    }
    out
}

fn numeric(cfg: &ChildConfig, what: &str, loss: f32) -> Error {
    Error::Numeric {
        location: format!("child {cfg}"),
        message: format!("{what} loss is {loss}"),
    }
}

/// Summed gradients of all children of `step` on one batch at source
/// resolution, plus per-child reports.
pub fn sandwich_gradients(
    space: &SearchSpace,
    params: &SupernetParams,
    batch: &ImageBatch,
    step: u64,
    cfg: &TrainConfig,
) -> Result<(Gradients, Vec<ChildReport>)> {
    let children = children_for_step(space, step, cfg);
    let (_, big) = &children[0];
    let max_res = big.resolution;
    let needed: Vec<usize> = children
        .iter()
        .map(|(_, c)| c.resolution)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let multi = make_multires_batch(&batch.images, &needed);

    let dropout = (cfg.dropout_rate > 0.0).then(|| {
        (
            cfg.dropout_rate,
            seed::stream_seed(cfg.global_seed, Stream::Dropout, step),
        )
    });
    let opts = ForwardOptions {
        dropout,
        ..ForwardOptions::new(ExecMode::Masked)
    };
    let out = child_forward(space, params, big, &multi[&max_res], &opts)?;
    let (loss, g) = softmax_xent(out.logits(), &batch.labels, cfg.label_smoothing)?;
    if !loss.is_finite() {
        return Err(numeric(big, "ground-truth", loss));
    }
    let mut grads = out.graph.backward(out.logits, &g)?;
    let mut reports = vec![ChildReport {
        role: ChildRole::Biggest,
        config: big.to_string(),
        resolution: max_res,
        loss_kind: LossKind::GroundTruth,
        loss,
    }];

    let mut teachers: BTreeMap<usize, Tensor> = BTreeMap::new();
    if dropout.is_none() {
        teachers.insert(max_res, out.logits().clone());
    }
    drop(out);
    for (_, c) in &children[1..] {
        let r = match cfg.teacher {
            TeacherMode::PerResolution => c.resolution,
            TeacherMode::MaxResolution => max_res,
        };
        if let Entry::Vacant(slot) = teachers.entry(r) {
            let mut tcfg = big.clone();
            tcfg.resolution = r;
            let topts = ForwardOptions {
                record: false,
                ..ForwardOptions::new(ExecMode::Masked)
            };
            let t = child_forward(space, params, &tcfg, &multi[&r], &topts)?;
            slot.insert(t.logits().clone());
        }
    }

    let students: Vec<Result<(Gradients, ChildReport)>> = children[1..]
        .par_iter()
        .map(|(role, c)| {
            let teacher = match cfg.teacher {
                TeacherMode::PerResolution => &teachers[&c.resolution],
                TeacherMode::MaxResolution => &teachers[&max_res],
            };
            let out = child_forward(
                space,
                params,
                c,
                &multi[&c.resolution],
                &ForwardOptions::new(ExecMode::Masked),
            )?;
            let (loss, g) = distill_loss(teacher, out.logits())?;
            if !loss.is_finite() {
                return Err(numeric(c, "distillation", loss));
            }
            let grads = out.graph.backward(out.logits, &g)?;
            Ok((
                grads,
                ChildReport {
                    role: *role,
                    config: c.to_string(),
                    resolution: c.resolution,
                    loss_kind: LossKind::Distill,
                    loss,
                },
            ))
        })
        .collect();
    for s in students {
        let (g, r) = s?;
        grads.accumulate(g);
        reports.push(r);
    }
    Ok((grads, reports))
}

/// Gradients of every child, then one optimizer update. Weight decay covers
/// all decaying parameters once per step.
pub fn sandwich_step(
    space: &SearchSpace,
    params: &mut SupernetParams,
    opt: &mut OptimizerState,
    batch: &ImageBatch,
    step: u64,
    cfg: &TrainConfig,
    schedule: &LrSchedule,
) -> Result<StepReport> {
    let (grads, children) = sandwich_gradients(space, params, batch, step, cfg)?;
    let lr = lr_at(schedule, step);
    let grad_norm = grads.global_norm();
    let mask = params.decay_mask();
    cfg.optimizer.step(
        &mut params.tensors,
        &params.names,
        &grads,
        opt,
        lr as f32,
        cfg.weight_decay as f32,
        &mask,
    )?;
    Ok(StepReport {
        step,
        lr,
        grad_norm,
        children,
    })
}
