mod common;

use supernet_core::checkpoint::TrainingState;
use supernet_core::dataio::{synth_dataset, Dataset, ImageBatch, SynthSpec};
use supernet_core::searchspace::{biggest_config, count_flops};
use supernet_core::selection::{
    coarse_to_fine, read_entries_csv, write_entries_csv, Budget, CoarseGrid, FineOptions, SearchOutcome,
    SupernetOracle,
};
use supernet_core::trainer::{train, TrainConfig, TrainRun};
use supernet_core::{SearchSpace, SupernetParams};

fn setup(dir: &std::path::Path) -> (SearchSpace, Dataset, TrainConfig) {
    let spec = SynthSpec { train: 96, val: 16, ..SynthSpec::default() };
    let m = synth_dataset(&spec, dir).unwrap();
    let cfg = TrainConfig { batch_size: 16, epochs: 2, lr_initial: 0.004, ..TrainConfig::default() };
    (common::space("toy"), Dataset::load(&m, "train").unwrap(), cfg)
}

fn budget() -> Budget {
    let sub = common::space("toy_sub");
    Budget::new(count_flops(&sub, &biggest_config(&sub)).unwrap().total_madds * 6 / 10).unwrap()
}

fn search(params: &SupernetParams, data: &Dataset) -> SearchOutcome {
    let space = common::space("toy");
    let sub = common::space("toy_sub");
    let calib: Vec<ImageBatch> = data.batches(16, Some(3), true).take(2).collect();
    let eval: Vec<ImageBatch> = data.take(48).batches(16, None, false).collect();
    let oracle = SupernetOracle { space: &space, params, calib: &calib, eval: &eval, calib_batches: 2, dataset: "train" };
    let grid = CoarseGrid::default_for(&sub);
    let fine = FineOptions { n_candidates: 12, ..FineOptions::default() };
    coarse_to_fine(&sub, &grid, budget(), &fine, &oracle).unwrap()
}

#[test]
fn selection_on_a_snapshot_ignores_concurrent_training() {
    let dir = tempfile::tempdir().unwrap();
    let (space, data, cfg) = setup(dir.path());
    let first = train(&space, &data, &cfg, TrainRun { max_steps: Some(3), ..Default::default() }).unwrap();
    let snapshot = first.params.clone();
    let state = TrainingState {
        params: first.params,
        optimizer: Some(first.optimizer),
        step: first.step,
        global_seed: cfg.global_seed,
        meta: Default::default(),
    };
    let (during, continued) = std::thread::scope(|s| {
        let trainer = s.spawn(|| train(&space, &data, &cfg, TrainRun { resume: Some(state), ..Default::default() }).unwrap());
        let outcome = search(&snapshot, &data);
        (outcome, trainer.join().unwrap())
    });
    assert!(continued.step > 3);
    assert_ne!(continued.params, snapshot);
    let after = search(&snapshot, &data);
    assert_eq!(during.best, after.best);
    assert_eq!(during.pareto, after.pareto);
    assert_eq!(during.all_entries(), after.all_entries());
}

#[test]
fn end_to_end_search_writes_a_readable_front() {
    let dir = tempfile::tempdir().unwrap();
    let (space, data, cfg) = setup(dir.path());
    let trained = train(&space, &data, &cfg, TrainRun::default()).unwrap();
    let outcome = search(&trained.params, &data);
    let budget = budget();
    assert!(budget.admits(outcome.best.madds));
    assert!(outcome.fine.iter().all(|e| budget.admits(e.madds)));
    assert!(outcome.all_entries().iter().all(|e| (0.0..=1.0).contains(&e.accuracy)));
    let path = dir.path().join("pareto.csv");
    write_entries_csv(&path, &outcome.pareto).unwrap();
    let back = read_entries_csv(&path).unwrap();
    assert_eq!(back.len(), outcome.pareto.len());
    for (a, b) in back.iter().zip(&outcome.pareto) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.madds, b.madds);
        assert!((a.accuracy - b.accuracy).abs() < 1e-6);
    }
    for w in outcome.pareto.windows(2) {
        let strictly_better = w[0].madds < w[1].madds && w[0].accuracy < w[1].accuracy;
        let tie = w[0].madds == w[1].madds && w[0].accuracy == w[1].accuracy;
        assert!(strictly_better || tie, "{:?}", w);
    }
}
