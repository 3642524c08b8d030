//! Coarse-to-fine architecture selection under a multiply-add budget.
//!
//! A coarse grid over global multipliers finds a skeleton; random one-step
//! mutations of that skeleton refine it. Every candidate is scored by an
//! [`AccuracyOracle`], normally batch-norm calibration plus evaluation of the
//! sliced child over a frozen supernet snapshot. Work items run on the rayon
//! pool; results are sorted, never kept in arrival order.

mod grid;
mod mutate;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, evaluate};
use crate::dataio::ImageBatch;
use crate::elastic::SupernetParams;
use crate::error::{Error, Result};
use crate::searchspace::{count_flops, ensure_valid, ChildConfig, SearchSpace};

pub use grid::{scaled_depth, scaled_width, CoarseGrid, KernelPattern, NamedPattern};
pub use mutate::{mutants, mutate, resolution_ladder};

pub const PARETO_CSV_HEADER: [&str; 4] = ["config", "madds", "accuracy", "provenance"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Coarse,
    Fine,
    Exhaustive,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Coarse => "coarse",
            Provenance::Fine => "fine",
            Provenance::Exhaustive => "exhaustive",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Provenance::Coarse),
            "fine" => Ok(Provenance::Fine),
            "exhaustive" => Ok(Provenance::Exhaustive),
            other => Err(Error::Config(format!("unknown provenance '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkEntry {
    pub config: ChildConfig,
    pub madds: u64,
    pub accuracy: f64,
    pub provenance: Provenance,
}

impl BenchmarkEntry {
    /// Scores `cfg` with `oracle`; `madds` comes from the cost model.
    pub fn measure(
        space: &SearchSpace,
        cfg: &ChildConfig,
        oracle: &dyn AccuracyOracle,
        provenance: Provenance,
    ) -> Result<Self> {
        let madds = count_flops(space, cfg)?.total_madds;
        let accuracy = oracle.accuracy(cfg)?;
        Ok(Self {
            config: cfg.clone(),
            madds,
            accuracy,
            provenance,
        })
    }
}

/// Preference order: higher accuracy, then fewer MAdds, then the smaller
/// config string. `Less` means `a` is preferred.
pub fn preference(a: &BenchmarkEntry, b: &BenchmarkEntry) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(a.madds.cmp(&b.madds))
        .then_with(|| a.config.to_string().cmp(&b.config.to_string()))
}

fn by_cost(a: &BenchmarkEntry, b: &BenchmarkEntry) -> Ordering {
    a.madds
        .cmp(&b.madds)
        .then_with(|| preference(a, b))
        .then(a.provenance.cmp(&b.provenance))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_madds: u64,
}

impl Budget {
    pub fn new(max_madds: u64) -> Result<Self> {
        if max_madds == 0 {
            return Err(Error::Precondition("budget must be positive".into()));
        }
        Ok(Self { max_madds })
    }

    pub fn admits(&self, madds: u64) -> bool {
        madds <= self.max_madds
    }
}

/// Scores a child config. Implementations must be pure functions of the
/// config so that selection output is independent of scheduling.
pub trait AccuracyOracle: Sync {
    fn accuracy(&self, cfg: &ChildConfig) -> Result<f64>;
}

impl<F: Fn(&ChildConfig) -> Result<f64> + Sync> AccuracyOracle for F {
    fn accuracy(&self, cfg: &ChildConfig) -> Result<f64> {
        self(cfg)
    }
}

/// Calibrates each child on `calib` and reports top-1 on `eval`, both drawn
/// from the training split.
pub struct SupernetOracle<'a> {
    pub space: &'a SearchSpace,
    pub params: &'a SupernetParams,
    pub calib: &'a [ImageBatch],
    pub eval: &'a [ImageBatch],
    pub calib_batches: usize,
    pub dataset: &'a str,
}

impl AccuracyOracle for SupernetOracle<'_> {
    fn accuracy(&self, cfg: &ChildConfig) -> Result<f64> {
        let child = calibrate(
            self.space,
            self.params,
            cfg,
            self.calib,
            self.calib_batches,
            self.dataset,
        )?;
        Ok(evaluate(self.space, &child, self.eval)?.accuracy)
    }
}

/// Memoizes another oracle by config.
pub struct CachedOracle<'a> {
    inner: &'a dyn AccuracyOracle,
    cache: std::sync::Mutex<BTreeMap<ChildConfig, f64>>,
}

impl<'a> CachedOracle<'a> {
    pub fn new(inner: &'a dyn AccuracyOracle) -> Self {
        Self {
            inner,
            cache: Default::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl AccuracyOracle for CachedOracle<'_> {
    fn accuracy(&self, cfg: &ChildConfig) -> Result<f64> {
        if let Some(&a) = self.cache.lock().expect("cache lock").get(cfg) {
            return Ok(a);
        }
        let a = self.inner.accuracy(cfg)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(cfg.clone(), a);
        Ok(a)
    }
}

/// Scores distinct configs in parallel; output sorted by cost.
fn measure_all(
    space: &SearchSpace,
    configs: Vec<ChildConfig>,
    oracle: &dyn AccuracyOracle,
    provenance: Provenance,
) -> Result<Vec<BenchmarkEntry>> {
    let mut entries = configs
        .par_iter()
        .map(|c| BenchmarkEntry::measure(space, c, oracle, provenance))
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(by_cost);
    Ok(entries)
}

/// Benchmarks every grid point, sorted by MAdds.
pub fn coarse_phase(
    space: &SearchSpace,
    grid: &CoarseGrid,
    oracle: &dyn AccuracyOracle,
) -> Result<Vec<BenchmarkEntry>> {
    grid.validate(space)?;
    measure_all(space, grid.configs(space), oracle, Provenance::Coarse)
}

/// Best entry within `budget` by [`preference`].
pub fn pick_skeleton(entries: &[BenchmarkEntry], budget: Budget) -> Result<BenchmarkEntry> {
    entries
        .iter()
        .filter(|e| budget.admits(e.madds))
        .min_by(|a, b| preference(a, b))
        .cloned()
        .ok_or_else(|| Error::BudgetInfeasible {
            budget: budget.max_madds,
            smallest: entries.iter().map(|e| e.madds).min().unwrap_or(0),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineOptions {
    pub n_candidates: usize,
    pub mutation_prob: f64,
    pub seed: u64,
}

impl Default for FineOptions {
    fn default() -> Self {
        Self {
            n_candidates: 64,
            mutation_prob: 0.3,
            seed: 0,
        }
    }
}

/// Scores the skeleton and the distinct in-budget mutants among
/// `n_candidates`, sorted by MAdds.
pub fn fine_phase(
    space: &SearchSpace,
    skeleton: &ChildConfig,
    budget: Budget,
    opts: &FineOptions,
    oracle: &dyn AccuracyOracle,
) -> Result<Vec<BenchmarkEntry>> {
    ensure_valid(space, skeleton)?;
    if !(0.0..=1.0).contains(&opts.mutation_prob) {
        return Err(Error::Precondition(format!(
            "mutation probability {} outside [0, 1]",
            opts.mutation_prob
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut pool = Vec::new();
    for cfg in std::iter::once(skeleton.clone()).chain(mutants(
        space,
        skeleton,
        opts.n_candidates,
        opts.mutation_prob,
        opts.seed,
    )) {
        ensure_valid(space, &cfg)?;
        if budget.admits(count_flops(space, &cfg)?.total_madds) && seen.insert(cfg.clone()) {
            pool.push(cfg);
        }
    }
    measure_all(space, pool, oracle, Provenance::Fine)
}

/// Entries not dominated by another with no more MAdds and no less
/// accuracy (one strictly), sorted by MAdds.
pub fn pareto_front(entries: &[BenchmarkEntry]) -> Vec<BenchmarkEntry> {
    let mut sorted: Vec<&BenchmarkEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| by_cost(a, b));
    let mut out = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let madds = sorted[i].madds;
        let group_end = sorted[i..]
            .iter()
            .position(|e| e.madds != madds)
            .map_or(sorted.len(), |p| i + p);
        let group = &sorted[i..group_end];
        let top = group[0].accuracy;
        if top > best_cheaper {
            out.extend(
                group
                    .iter()
                    .filter(|e| e.accuracy == top)
                    .map(|e| (*e).clone()),
            );
            best_cheaper = top;
        }
        i = group_end;
    }
    out
}

/// Everything a coarse-to-fine run produced.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub coarse: Vec<BenchmarkEntry>,
    pub skeleton: BenchmarkEntry,
    pub fine: Vec<BenchmarkEntry>,
    pub best: BenchmarkEntry,
    pub pareto: Vec<BenchmarkEntry>,
}

impl SearchOutcome {
    /// Coarse then fine entries.
    pub fn all_entries(&self) -> Vec<BenchmarkEntry> {
        self.coarse.iter().chain(&self.fine).cloned().collect()
    }
}

/// `coarse_phase`, `pick_skeleton`, `fine_phase`, then the best entry over
/// both phases and the Pareto front of all entries.
pub fn coarse_to_fine(
    space: &SearchSpace,
    grid: &CoarseGrid,
    budget: Budget,
    fine: &FineOptions,
    oracle: &dyn AccuracyOracle,
) -> Result<SearchOutcome> {
    let cached = CachedOracle::new(oracle);
    let coarse = coarse_phase(space, grid, &cached)?;
    let skeleton = pick_skeleton(&coarse, budget)?;
    let fine_entries = fine_phase(space, &skeleton.config, budget, fine, &cached)?;
    let all: Vec<BenchmarkEntry> = coarse.iter().chain(&fine_entries).cloned().collect();
    let best = pick_skeleton(&all, budget)?;
    Ok(SearchOutcome {
        pareto: pareto_front(&all),
        coarse,
        skeleton,
        fine: fine_entries,
        best,
    })
}

/// Scores every in-budget config of `configs`.
pub fn exhaustive_search(
    space: &SearchSpace,
    configs: &[ChildConfig],
    budget: Budget,
    oracle: &dyn AccuracyOracle,
) -> Result<Vec<BenchmarkEntry>> {
    let mut pool = Vec::new();
    for c in configs {
        if budget.admits(count_flops(space, c)?.total_madds) {
            pool.push(c.clone());
        }
    }
    measure_all(space, pool, oracle, Provenance::Exhaustive)
}

pub fn write_entries_csv(path: impl AsRef<Path>, entries: &[BenchmarkEntry]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(PARETO_CSV_HEADER).map_err(csv_err)?;
    for e in entries {
        w.write_record([
            e.config.to_string(),
            e.madds.to_string(),
            format!("{:.6}", e.accuracy),
            e.provenance.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_entries_csv(path: impl AsRef<Path>) -> Result<Vec<BenchmarkEntry>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.clone(),
        location: Some((line as usize, 1)),
        message,
    };
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec =
            rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(parse_err(
                line,
                format!("expected 4 fields, found {}", rec.len()),
            ));
        }
        let field = |i: usize| rec[i].trim();
        out.push(BenchmarkEntry {
            config: field(0)
                .parse()
                .map_err(|e: Error| parse_err(line, e.to_string()))?,
            madds: field(1)
                .parse()
                .map_err(|e| parse_err(line, format!("madds: {e}")))?,
            accuracy: field(2)
                .parse()
                .map_err(|e| parse_err(line, format!("accuracy: {e}")))?,
            provenance: field(3)
                .parse()
                .map_err(|e: Error| parse_err(line, e.to_string()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::fixtures::toy;
    use crate::searchspace::{enumerate_configs, smallest_config, validate_config};
    use proptest::prelude::*;

    fn entry(madds: u64, accuracy: f64, tag: usize) -> BenchmarkEntry {
        let mut config = smallest_config(&toy());
        config.resolution = 16 + tag;
        BenchmarkEntry {
            config,
            madds,
            accuracy,
            provenance: Provenance::Coarse,
        }
    }

    fn madds_oracle(space: &SearchSpace) -> impl Fn(&ChildConfig) -> Result<f64> + Sync + '_ {
        move |c: &ChildConfig| Ok(count_flops(space, c)?.total_madds as f64 / 1e7)
    }

    /// Deterministic pseudo-accuracy with no relation to cost.
    fn hash_oracle(c: &ChildConfig) -> Result<f64> {
        let h = crate::seed::splitmix64(
            crate::searchspace::space_hash(&toy()) ^ c.to_string().len() as u64,
        ) ^ c
            .to_string()
            .bytes()
            .fold(0u64, |a, b| a.wrapping_mul(131).wrapping_add(b as u64));
        Ok((crate::seed::splitmix64(h) % 10_000) as f64 / 10_000.0)
    }

    #[test]
    fn single_feasible_entry() {
        let e = vec![entry(100, 0.5, 0), entry(500, 0.9, 1)];
        assert_eq!(pick_skeleton(&e, Budget::new(200).unwrap()).unwrap(), e[0]);
    }

    #[test]
    fn tie_prefers_fewer_madds() {
        let e = vec![entry(250, 0.7, 0), entry(240, 0.7, 1)];
        assert_eq!(
            pick_skeleton(&e, Budget::new(300).unwrap()).unwrap().madds,
            240
        );
    }

    #[test]
    fn full_tie_prefers_smaller_string() {
        let e = vec![entry(240, 0.7, 4), entry(240, 0.7, 2)];
        let best = pick_skeleton(&e, Budget::new(300).unwrap()).unwrap();
        assert_eq!(best.config.resolution, 18);
    }

    #[test]
    fn infeasible_reports_smallest() {
        let e = vec![entry(250, 0.7, 0), entry(240, 0.7, 1)];
        match pick_skeleton(&e, Budget::new(10).unwrap()) {
            Err(Error::BudgetInfeasible {
                budget: 10,
                smallest: 240,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(Budget::new(0).is_err());
    }

    #[test]
    fn pareto_examples() {
        let one = vec![entry(100, 0.5, 0)];
        assert_eq!(pareto_front(&one), one);
        let two = vec![entry(100, 0.7, 0), entry(200, 0.6, 1)];
        assert_eq!(pareto_front(&two), vec![two[0].clone()]);
        let equal_cost = vec![entry(100, 0.7, 0), entry(100, 0.6, 1), entry(100, 0.7, 2)];
        assert_eq!(pareto_front(&equal_cost).len(), 2);
    }

    fn dominated(e: &BenchmarkEntry, by: &BenchmarkEntry) -> bool {
        by.madds <= e.madds
            && by.accuracy >= e.accuracy
            && (by.madds < e.madds || by.accuracy > e.accuracy)
    }

    proptest! {
        #[test]
        fn pareto_matches_definition(points in prop::collection::vec((1u64..20, 0u32..10), 1..30)) {
            let entries: Vec<_> = points.iter().enumerate().map(|(i, &(m, a))| entry(m, a as f64 / 10.0, i)).collect();
            let front = pareto_front(&entries);
            for e in &entries {
                let undominated = !entries.iter().any(|o| dominated(e, o));
                prop_assert_eq!(front.contains(e), undominated);
            }
            prop_assert!(front.windows(2).all(|w| w[0].madds <= w[1].madds));
            prop_assert_eq!(pareto_front(&front), front.clone());
        }
    }

    #[test]
    fn fine_p_zero_returns_skeleton_only() {
        let space = toy();
        let sk = smallest_config(&space);
        let opts = FineOptions {
            mutation_prob: 0.0,
            ..FineOptions::default()
        };
        let out = fine_phase(
            &space,
            &sk,
            Budget::new(u64::MAX).unwrap(),
            &opts,
            &madds_oracle(&space),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].config, sk);
    }

    #[test]
    fn fine_respects_budget_and_validity() {
        let space = toy();
        let sk = crate::searchspace::biggest_config(&space);
        let budget = Budget::new(count_flops(&space, &sk).unwrap().total_madds * 9 / 10).unwrap();
        let grid = CoarseGrid::default_for(&space);
        let coarse = coarse_phase(&space, &grid, &hash_oracle).unwrap();
        let skeleton = pick_skeleton(&coarse, budget).unwrap();
        let out = fine_phase(
            &space,
            &skeleton.config,
            budget,
            &FineOptions::default(),
            &hash_oracle,
        )
        .unwrap();
        assert!(out.iter().all(|e| e.madds <= budget.max_madds));
        assert!(out
            .iter()
            .all(|e| validate_config(&space, &e.config).is_empty()));
        assert!(out
            .iter()
            .all(|e| e.madds == count_flops(&space, &e.config).unwrap().total_madds));
    }

    #[test]
    fn monotone_oracle_lands_near_budget() {
        let space = toy();
        let oracle = madds_oracle(&space);
        let grid = CoarseGrid::default_for(&space);
        let coarse = coarse_phase(&space, &grid, &oracle).unwrap();
        let budget = Budget::new((coarse[0].madds + coarse.last().unwrap().madds) / 2).unwrap();
        let out = coarse_to_fine(&space, &grid, budget, &FineOptions::default(), &oracle).unwrap();
        // Largest single-step increase from the best config over every
        // one-step neighbour.
        let best = &out.best;
        let neighbours = mutants(&space, &best.config, 512, 0.3, 77);
        let max_step = neighbours
            .iter()
            .map(|c| {
                count_flops(&space, c)
                    .unwrap()
                    .total_madds
                    .saturating_sub(best.madds)
            })
            .max()
            .unwrap();
        assert!(best.madds <= budget.max_madds);
        assert!(
            budget.max_madds - best.madds <= max_step,
            "best {} budget {} step {max_step}",
            best.madds,
            budget.max_madds
        );
        let max_fine = out.fine.iter().map(|e| e.madds).max().unwrap();
        assert_eq!(best.madds, max_fine.max(out.skeleton.madds));
    }

    #[test]
    fn skeleton_matches_brute_force_argmax() {
        let space = toy();
        let all = enumerate_configs(&space, 1 << 20).unwrap();
        let budget = Budget::new(2_000_000).unwrap();
        let entries = exhaustive_search(&space, &all[..600], budget, &hash_oracle).unwrap();
        let picked = pick_skeleton(&entries, budget).unwrap();
        let brute = entries
            .iter()
            .filter(|e| e.madds <= budget.max_madds)
            .fold(None::<&BenchmarkEntry>, |best, e| match best {
                Some(b) if b.accuracy > e.accuracy => Some(b),
                Some(b)
                    if b.accuracy == e.accuracy
                        && (b.madds, b.config.to_string()) <= (e.madds, e.config.to_string()) =>
                {
                    Some(b)
                }
                _ => Some(e),
            })
            .unwrap();
        assert_eq!(&picked, brute);
    }

    #[test]
    fn output_independent_of_thread_count() {
        let space = toy();
        let grid = CoarseGrid::default_for(&space);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| coarse_phase(&space, &grid, &hash_oracle).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn csv_round_trip() {
        let space = toy();
        let grid = CoarseGrid::default_for(&space);
        let entries = coarse_phase(&space, &grid, &madds_oracle(&space)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pareto.csv");
        let mut rounded = entries.clone();
        for e in &mut rounded {
            e.accuracy = format!("{:.6}", e.accuracy).parse().unwrap();
        }
        write_entries_csv(&p, &entries).unwrap();
        assert_eq!(read_entries_csv(&p).unwrap(), rounded);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("config,madds,accuracy,provenance\n"));
    }
}
