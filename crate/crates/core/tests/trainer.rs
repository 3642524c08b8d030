mod common;

use supernet_core::checkpoint::Checkpoint;
use supernet_core::dataio::{synth_dataset, Dataset, SynthSpec};
use supernet_core::elastic::init_supernet;
use supernet_core::trainer::{lr_at, sandwich_gradients, train, TrainConfig, TrainRun};

fn corpus(dir: &std::path::Path, train: usize) -> Dataset {
    let spec = SynthSpec {
        train,
        val: 20,
        ..SynthSpec::default()
    };
    let m = synth_dataset(&spec, dir).unwrap();
    Dataset::load(&m, "train").unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 2,
        lr_initial: 0.004,
        ..TrainConfig::default()
    }
}

#[test]
fn aggregated_gradients_equal_sum_of_children() {
    let mut space = common::space("toy");
    space.resolutions = vec![32];
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 8);
    let batch = data.batch(&[0, 1, 2, 3, 4, 5]);
    let params = init_supernet(&space, 3).unwrap();
    let cfg = TrainConfig {
        n_random: 0,
        dropout_rate: 0.0,
        label_smoothing: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let (agg, reports) = sandwich_gradients(&space, &params, &batch, 0, &cfg).unwrap();
    assert_eq!(reports.len(), 2);
    let reference = common::independent_gradients(&space, &params, &batch);
    assert_eq!(agg.len(), reference.len());
    for (i, g) in reference.iter() {
        let a = agg.get(i).unwrap();
        for (&x, &y) in a.data().iter().zip(g.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(f32::MIN_POSITIVE);
            assert!(rel < 1e-5, "{}: {x} vs {y}", params.names[i]);
        }
    }
}

#[test]
fn ten_steps_are_deterministic() {
    let space = common::space("toy");
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 48);
    let cfg = small_config();
    let run = || {
        let out = tempfile::tempdir().unwrap();
        let o = train(
            &space,
            &data,
            &cfg,
            TrainRun {
                out_dir: Some(out.path()),
                max_steps: Some(10),
                ..Default::default()
            },
        )
        .unwrap();
        let bytes = std::fs::read(o.checkpoints.last().unwrap()).unwrap();
        let steps = std::fs::read_to_string(out.path().join("steps.csv")).unwrap();
        (o.params.checksum(), bytes, steps)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a.1 == b.1, "checkpoints differ");
    assert_eq!(a.2, b.2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let space = common::space("toy");
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 48);
    let cfg = small_config();
    let straight = train(
        &space,
        &data,
        &cfg,
        TrainRun {
            max_steps: Some(6),
            ..Default::default()
        },
    )
    .unwrap();

    let out = tempfile::tempdir().unwrap();
    let first = train(
        &space,
        &data,
        &cfg,
        TrainRun {
            out_dir: Some(out.path()),
            max_steps: Some(4),
            ..Default::default()
        },
    )
    .unwrap();
    let state = Checkpoint::load(first.checkpoints.last().unwrap())
        .unwrap()
        .to_training_state()
        .unwrap();
    assert_eq!(state.step, 4);
    let resumed = train(
        &space,
        &data,
        &cfg,
        TrainRun {
            out_dir: Some(out.path()),
            max_steps: Some(6),
            resume: Some(state),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.step, 6);
    assert_eq!(resumed.params, straight.params);
    let rows = std::fs::read_to_string(out.path().join("steps.csv")).unwrap();
    // header plus four children per step
    assert_eq!(rows.lines().count(), 1 + 6 * 4);
}

#[test]
fn biggest_child_loss_decreases() {
    let space = common::space("toy");
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 64);
    let cfg = TrainConfig {
        epochs: 12,
        augment: false,
        ..small_config()
    };
    let out = train(
        &space,
        &data,
        &cfg,
        TrainRun {
            keep_reports: true,
            ..Default::default()
        },
    )
    .unwrap();
    let big: Vec<f32> = out.reports.iter().map(|r| r.children[0].loss).collect();
    let head: f32 = big[..8].iter().sum::<f32>() / 8.0;
    let tail: f32 = big[big.len() - 8..].iter().sum::<f32>() / 8.0;
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
}

#[test]
fn step_reports_trace_the_schedule() {
    let space = common::space("toy");
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 32);
    let cfg = TrainConfig {
        epochs: 4,
        ..small_config()
    };
    let out = train(
        &space,
        &data,
        &cfg,
        TrainRun {
            keep_reports: true,
            ..Default::default()
        },
    )
    .unwrap();
    let schedule = cfg.schedule(2, 8);
    assert_eq!(out.reports.len(), 8);
    for r in &out.reports {
        assert_eq!(r.lr, lr_at(&schedule, r.step));
        assert!(r.grad_norm.is_finite() && r.grad_norm > 0.0);
    }
}

#[test]
fn class_count_mismatch_is_rejected() {
    let mut space = common::space("toy");
    space.num_classes = 7;
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 32);
    assert!(train(&space, &data, &small_config(), TrainRun::default()).is_err());
}
