//! The training loop: a producer thread prepares batches ahead of the single
//! writer of the supernet; checkpoints, step reports and learning curves are
//! emitted at fixed cadences.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use super::sandwich::{sandwich_step, ChildRole, StepReport, STEP_CSV_HEADER};
use super::TrainConfig;
use crate::calibration::{calibrate, evaluate};
use crate::checkpoint::{checkpoint_path, Checkpoint, TrainingState};
use crate::dataio::{augment, Dataset, ImageBatch};
use crate::elastic::{init_supernet, SupernetParams};
use crate::error::{Error, Result};
use crate::searchspace::{biggest_config, smallest_config, SearchSpace};
use crate::seed::{self, Stream};
use crate::tensor::OptimizerState;

/// Periodic calibrate-and-evaluate of the smallest and biggest children.
#[derive(Debug, Clone, Copy)]
pub struct CurveProbe<'a> {
    pub calib: &'a [ImageBatch],
    pub eval: &'a [ImageBatch],
    pub every_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub role: ChildRole,
    pub accuracy: f64,
    pub loss: f64,
}

pub const CURVE_CSV_HEADER: [&str; 4] = ["step", "role", "accuracy", "loss"];

#[derive(Debug, Default)]
pub struct TrainRun<'a> {
    /// Where checkpoints, `steps.csv` and `curves.csv` go.
    pub out_dir: Option<&'a Path>,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Stop after this many total steps (the schedule still spans all epochs).
    pub max_steps: Option<u64>,
    pub resume: Option<TrainingState>,
    pub probe: Option<CurveProbe<'a>>,
    /// Keep step reports in memory.
    pub keep_reports: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: SupernetParams,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub total_steps: u64,
    pub reports: Vec<StepReport>,
    pub curves: Vec<CurvePoint>,
    pub checkpoints: Vec<PathBuf>,
}

fn csv_writer(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<std::fs::File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(exists)
        .write(true)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(header)
            .map_err(|e| Error::io(path, e.into()))?;
    }
    Ok(w)
}

/// Batch for `step`: epoch `step / spe` is a seeded permutation, batches are
/// consecutive slices of it, augmentation is seeded by the step.
fn batch_for(
    data: &Dataset,
    cfg: &TrainConfig,
    spe: u64,
    step: u64,
    order: &mut (u64, Vec<usize>),
) -> ImageBatch {
    let epoch = step / spe;
    if order.0 != epoch || order.1.is_empty() {
        *order = (
            epoch,
            data.order(Some(seed::stream_seed(
                cfg.global_seed,
                Stream::Shuffle,
                epoch,
            ))),
        );
    }
    let i = (step % spe) as usize * cfg.batch_size;
    let b = data.batch(&order.1[i..i + cfg.batch_size]);
    if cfg.augment {
        augment(
            &b,
            seed::stream_seed(cfg.global_seed, Stream::Augment, step),
        )
    } else {
        b
    }
}

fn probe_curves(
    space: &SearchSpace,
    params: &SupernetParams,
    probe: &CurveProbe<'_>,
    step: u64,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(2);
    for (role, cfg) in [
        (ChildRole::Smallest, smallest_config(space)),
        (ChildRole::Biggest, biggest_config(space)),
    ] {
        let child = calibrate(space, params, &cfg, probe.calib, probe.calib.len(), "probe")?;
        let r = evaluate(space, &child, probe.eval)?;
        out.push(CurvePoint {
            step,
            role,
            accuracy: r.accuracy,
            loss: r.loss,
        });
    }
    Ok(out)
}

/// Trains from scratch (or from `run.resume`) over shuffled epochs of `data`.
///
/// A numeric fault aborts with the error; checkpoints already written stay
/// on disk.
pub fn train(
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    run: TrainRun<'_>,
) -> Result<TrainOutcome> {
    space.validate()?;
    cfg.validate()?;
    if data.manifest.num_classes != space.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, space expects {}",
            data.manifest.num_classes, space.num_classes
        )));
    }
    let spe = (data.len() / cfg.batch_size) as u64;
    if spe == 0 {
        return Err(Error::Config(format!(
            "{} training examples cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let total = spe * cfg.epochs as u64;
    let end = run.max_steps.map_or(total, |m| m.min(total));
    let schedule = cfg.schedule(spe as usize, total);

    let (mut params, mut opt, start) = match run.resume {
        Some(st) => {
            if st.global_seed != cfg.global_seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint seed {} differs from configured seed {}",
                    st.global_seed, cfg.global_seed
                )));
            }
            let opt = st
                .optimizer
                .unwrap_or_else(|| OptimizerState::new(&st.params.tensors));
            (st.params, opt, st.step)
        }
        None => {
            let p = init_supernet(space, cfg.global_seed)?;
            let o = OptimizerState::new(&p.tensors);
            (p, o, 0)
        }
    };

    let resuming = start > 0;
    let mut steps_csv = match run.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some((
                csv_writer(&d.join("steps.csv"), &STEP_CSV_HEADER, resuming)?,
                d.join("steps.csv"),
            ))
        }
        None => None,
    };
    let mut curves_csv = match (run.out_dir, run.probe.is_some()) {
        (Some(d), true) => Some((
            csv_writer(&d.join("curves.csv"), &CURVE_CSV_HEADER, resuming)?,
            d.join("curves.csv"),
        )),
        _ => None,
    };

    let mut reports = Vec::new();
    let mut curves = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = start;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<(u64, ImageBatch)>(4);
        scope.spawn(move || {
            let mut order = (u64::MAX, Vec::new());
            for s in start..end {
                if tx
                    .send((s, batch_for(data, cfg, spe, s, &mut order)))
                    .is_err()
                {
                    break;
                }
            }
        });
        for (s, batch) in rx {
            debug_assert_eq!(s, step);
            let report = sandwich_step(space, &mut params, &mut opt, &batch, s, cfg, &schedule)?;
            step = s + 1;
            if let Some((w, path)) = steps_csv.as_mut() {
                for rec in report.records() {
                    w.write_record(&rec)
                        .map_err(|e| Error::io(&*path, e.into()))?;
                }
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            if run.keep_reports {
                reports.push(report);
            }
            if let Some(probe) = &run.probe {
                if probe.every_steps > 0 && (step % probe.every_steps == 0 || step == end) {
                    let pts = probe_curves(space, &params, probe, step)?;
                    if let Some((w, path)) = curves_csv.as_mut() {
                        for p in &pts {
                            w.write_record([
                                p.step.to_string(),
                                p.role.to_string(),
                                p.accuracy.to_string(),
                                p.loss.to_string(),
                            ])
                            .map_err(|e| Error::io(&*path, e.into()))?;
                        }
                        w.flush().map_err(|e| Error::io(&*path, e))?;
                    }
                    curves.extend(pts);
                }
            }
            if let Some(d) = run.out_dir {
                let due = run.checkpoint_every > 0 && step % run.checkpoint_every == 0;
                if due || step == end {
                    let path = checkpoint_path(d, step);
                    Checkpoint::from_supernet(space, &params, Some(&opt), step, cfg.global_seed)
                        .save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        Ok(())
    })?;

    Ok(TrainOutcome {
        params,
        optimizer: opt,
        step,
        total_steps: total,
        reports,
        curves,
        checkpoints,
    })
}
