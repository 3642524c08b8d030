//! `supernet`: train a weight-shared supernet, slice and calibrate children,
//! evaluate them, and search for the best child under a MAdds budget.
//!
//! Exit codes: 0 success, 2 usage or parse error, 3 infeasible budget,
//! 4 numeric fault, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use supernet_core::checkpoint::latest_checkpoint;
use supernet_core::dataio::{load_batches, synth_dataset, SynthSpec};
use supernet_core::searchspace::{
    count_flops, enumerate_configs, is_extrapolated, load_space, param_count, parse_toml, space_cardinality, space_hash,
    validate_config, ChildConfig,
};
use supernet_core::selection::{coarse_to_fine, write_entries_csv, Budget, CoarseGrid, FineOptions, SupernetOracle};
use supernet_core::trainer::CurveProbe;
use supernet_core::{calibrate, evaluate, Checkpoint, Dataset, DatasetManifest, Error, SearchSpace, TrainConfig, TrainRun};

#[derive(Parser)]
#[command(name = "supernet", version, about = "Weight-shared supernet training and architecture search")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Worker threads for calibration and selection (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supernet with the sandwich rule and inplace distillation.
    Train(TrainArgs),
    /// Slice a child out of a supernet checkpoint and calibrate its batch norm.
    #[command(alias = "calibrate")]
    Slice(SliceArgs),
    /// Evaluate a calibrated child.
    Evaluate(EvaluateArgs),
    /// Coarse-to-fine search for the best child within a MAdds budget.
    Search(SearchArgs),
    /// Per-layer multiply-accumulate counts of a child.
    Flops(FlopsArgs),
    /// Number of distinct children in a search space.
    Cardinality(CardinalityArgs),
    /// Write a synthetic blob dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Search-space file.
    #[arg(long)]
    space: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Training config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, steps.csv and curves.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, e.g. `--set optimizer.rho=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Stop after this many total steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Override `global_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from a checkpoint; without a value, the latest one in `--out`.
    #[arg(long, num_args = 0..=1, value_name = "CHECKPOINT")]
    resume: Option<Option<PathBuf>>,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Calibrate and evaluate the smallest and biggest children every N
    /// steps and append to curves.csv; 0 disables.
    #[arg(long, default_value_t = 0)]
    probe_every: u64,
    /// Calibration batches per probe.
    #[arg(long, default_value_t = 4)]
    probe_calib_batches: usize,
}

#[derive(Args)]
struct SliceArgs {
    /// Search-space file the checkpoint was trained on.
    #[arg(long)]
    space: PathBuf,
    /// Supernet checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Child config string, e.g. `r32-d2.2.2-c12.12.16.24.48-k3.5.5`.
    #[arg(long = "child")]
    child: String,
    /// Dataset manifest; calibration reads its training split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 25)]
    calib_batches: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Shuffle seed of the calibration stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for the calibrated child.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    space: PathBuf,
    /// Calibrated child file written by `slice`.
    #[arg(long = "child")]
    child: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

#[derive(Args)]
struct SearchArgs {
    /// Search-space file the checkpoint was trained on.
    #[arg(long)]
    space: PathBuf,
    /// Narrower space to search within (its children must be children of
    /// `--space`); defaults to `--space`.
    #[arg(long)]
    search_space: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// MAdds budget.
    #[arg(long)]
    budget: u64,
    /// Coarse grid file; defaults to the space's default grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Dataset manifest; calibration and scoring use its training split.
    #[arg(long)]
    data: PathBuf,
    /// Where to write pareto.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also write every scored entry here.
    #[arg(long)]
    all_out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    fine_candidates: usize,
    #[arg(long, default_value_t = 0.3)]
    mutation_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    calib_batches: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Training examples each child is scored on.
    #[arg(long, default_value_t = 1024)]
    eval_examples: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    space: PathBuf,
    /// Child config string.
    #[arg(long = "child")]
    child: String,
}

#[derive(Args)]
struct CardinalityArgs {
    #[arg(long)]
    space: PathBuf,
    /// Also enumerate the space (refused above this many children).
    #[arg(long, value_name = "LIMIT")]
    enumerate: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic dataset spec; omitted keys take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override a spec key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

/// Applies `a.b.c=value` overrides to a TOML table. Values parse as TOML and
/// fall back to bare strings.
fn apply_sets(table: &mut toml::Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let Some((key, raw)) = s.split_once('=') else {
            return Err(Error::Config(format!("override '{s}' is not KEY=VALUE")).into());
        };
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_owned()),
        };
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut cur = &mut *table;
        for p in parents {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
        }
        cur.insert(last.to_string(), value);
    }
    Ok(())
}

fn layered_text(file: Option<&Path>, sets: &[String]) -> Result<(String, String)> {
    let (text, origin) = match file {
        Some(p) => (read(p)?, p.display().to_string()),
        None => (String::new(), "<defaults>".to_owned()),
    };
    if sets.is_empty() {
        return Ok((text, origin));
    }
    let mut table: toml::Table = parse_toml(&text, &origin)?;
    apply_sets(&mut table, sets)?;
    Ok((toml::to_string(&table)?, origin))
}

fn parse_child(space: &SearchSpace, s: &str) -> Result<ChildConfig> {
    let cfg: ChildConfig = s.parse()?;
    if let Some(v) = validate_config(space, &cfg).into_iter().next() {
        return Err(Error::Config(format!("child '{s}': {v}")).into());
    }
    Ok(cfg)
}

fn load_supernet(space: &SearchSpace, path: &Path) -> Result<supernet_core::checkpoint::TrainingState> {
    let ck = Checkpoint::load(path)?;
    ck.verify_space(space)?;
    Ok(ck.to_training_state()?)
}

fn print(json: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(&value).expect("json serializes"));
    } else {
        println!("{}", text());
    }
}

fn cmd_train(a: &TrainArgs, json: bool) -> Result<()> {
    let space = load_space(&a.space)?;
    let (text, origin) = layered_text(a.config.as_deref(), &a.sets)?;
    let mut cfg = TrainConfig::parse(&text, &origin)?;
    if let Some(seed) = a.seed {
        cfg.global_seed = seed;
    }
    let manifest = DatasetManifest::load(&a.data)?;
    let train_set = Dataset::load(&manifest, "train")?;
    let resume = match &a.resume {
        None => None,
        Some(path) => {
            let path = match path {
                Some(p) => p.clone(),
                None => latest_checkpoint(&a.out).with_context(|| format!("no checkpoint to resume in {}", a.out.display()))?,
            };
            Some(load_supernet(&space, &path)?)
        }
    };
    let (calib, eval) = if a.probe_every > 0 {
        let calib = load_batches(&manifest, "train", cfg.batch_size, 0)?.into_iter().take(a.probe_calib_batches).collect();
        (calib, load_batches(&manifest, "val", cfg.batch_size, 0)?)
    } else {
        (Vec::new(), Vec::new())
    };
    let probe = (a.probe_every > 0).then_some(CurveProbe { calib: &calib, eval: &eval, every_steps: a.probe_every });
    let run = TrainRun {
        out_dir: Some(&a.out),
        checkpoint_every: a.checkpoint_every,
        max_steps: a.steps,
        resume,
        probe,
        keep_reports: false,
    };
    let out = match supernet_core::train(&space, &train_set, &cfg, run) {
        Ok(o) => o,
        Err(e) => {
            let last = latest_checkpoint(&a.out).map_or("none".to_owned(), |p| p.display().to_string());
            return Err(anyhow::Error::new(e).context(format!("training aborted; last checkpoint: {last}")));
        }
    };
    let last = out.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default();
    print(
        json,
        json!({ "steps": out.step, "total_steps": out.total_steps, "checkpoint": last }),
        || format!("trained {} of {} steps; final checkpoint {last}", out.step, out.total_steps),
    );
    Ok(())
}

fn cmd_slice(a: &SliceArgs, json: bool) -> Result<()> {
    let space = load_space(&a.space)?;
    let cfg = parse_child(&space, &a.child)?;
    let state = load_supernet(&space, &a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let batches = load_batches(&manifest, "train", a.batch_size, a.seed)?;
    let child = calibrate(&space, &state.params, &cfg, &batches, a.calib_batches, &manifest.name)?;
    let mut ck = Checkpoint::new(space_hash(&space), state.step, state.global_seed);
    ck.meta.insert("kind".into(), "child".into());
    ck.push_child(&child);
    ck.save(&a.out)?;
    let madds = count_flops(&space, &cfg)?.total_madds;
    let params = param_count(&space, &cfg)?;
    print(
        json,
        json!({
            "config": cfg.to_string(),
            "madds": madds,
            "params": params,
            "calibration_batches": child.meta.batches,
            "calibration_examples": child.meta.examples,
            "extrapolated": is_extrapolated(&space, &cfg),
            "out": a.out.display().to_string(),
        }),
        || {
            format!(
                "{cfg}: {madds} MAdds, {params} parameters, calibrated on {} examples -> {}",
                child.meta.examples,
                a.out.display()
            )
        },
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, json: bool) -> Result<()> {
    let space = load_space(&a.space)?;
    let ck = Checkpoint::load(&a.child)?;
    ck.verify_space(&space)?;
    let child = ck.child(0)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let batches = load_batches(&manifest, &a.split, a.batch_size, 0)?;
    let r = evaluate(&space, &child, &batches)?;
    print(
        json,
        json!({ "config": child.config.to_string(), "accuracy": r.accuracy, "loss": r.loss, "examples": r.examples }),
        || format!("{}: top-1 {:.4}, loss {:.4} on {} examples", child.config, r.accuracy, r.loss, r.examples),
    );
    Ok(())
}

fn cmd_search(a: &SearchArgs, json: bool) -> Result<()> {
    let space = load_space(&a.space)?;
    let search_space = match &a.search_space {
        Some(p) => load_space(p)?,
        None => space.clone(),
    };
    let grid = match &a.grid {
        Some(p) => CoarseGrid::load(p)?,
        None => CoarseGrid::default_for(&search_space),
    };
    let budget = Budget::new(a.budget)?;
    let state = load_supernet(&space, &a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let calib = load_batches(&manifest, "train", a.batch_size, a.seed)?;
    let eval: Vec<_> = Dataset::load(&manifest, "train")?.take(a.eval_examples).batches(a.batch_size, None, false).collect();
    let oracle = SupernetOracle {
        space: &space,
        params: &state.params,
        calib: &calib,
        eval: &eval,
        calib_batches: a.calib_batches,
        dataset: &manifest.name,
    };
    let fine = FineOptions { n_candidates: a.fine_candidates, mutation_prob: a.mutation_prob, seed: a.seed };
    let outcome = coarse_to_fine(&search_space, &grid, budget, &fine, &oracle)?;
    write_entries_csv(&a.out, &outcome.pareto)?;
    if let Some(p) = &a.all_out {
        write_entries_csv(p, &outcome.all_entries())?;
    }
    let best = &outcome.best;
    print(
        json,
        json!({
            "best": { "config": best.config.to_string(), "madds": best.madds, "accuracy": best.accuracy },
            "skeleton": outcome.skeleton.config.to_string(),
            "evaluated": outcome.coarse.len() + outcome.fine.len(),
            "pareto": a.out.display().to_string(),
        }),
        || {
            format!(
                "best {} ({} MAdds, accuracy {:.4}); skeleton {}; {} entries scored; front in {}",
                best.config,
                best.madds,
                best.accuracy,
                outcome.skeleton.config,
                outcome.coarse.len() + outcome.fine.len(),
                a.out.display()
            )
        },
    );
    Ok(())
}

fn cmd_flops(a: &FlopsArgs, json: bool) -> Result<()> {
    let space = load_space(&a.space)?;
    let cfg = parse_child(&space, &a.child)?;
    let r = count_flops(&space, &cfg)?;
    let params = param_count(&space, &cfg)?;
    let layers: Vec<_> = r.per_layer.iter().map(|(l, m)| json!({ "layer": l, "madds": m })).collect();
    print(
        json,
        json!({
            "config": cfg.to_string(),
            "total_madds": r.total_madds,
            "mmadds": r.mmadds(),
            "params": params,
            "extrapolated": is_extrapolated(&space, &cfg),
            "per_layer": layers,
        }),
        || {
            let mut s = String::new();
            for (l, m) in &r.per_layer {
                s.push_str(&format!("{l:<16} {m:>14}\n"));
            }
            s.push_str(&format!("{:<16} {:>14}  ({:.2} M, {params} parameters)", "total", r.total_madds, r.mmadds()));
            s
        },
    );
    Ok(())
}

fn cmd_cardinality(a: &CardinalityArgs, json: bool) -> Result<()> {
    let space = load_space(&a.space)?;
    let n = space_cardinality(&space);
    let enumerated = a.enumerate.map(|limit| enumerate_configs(&space, limit).map(|v| v.len())).transpose()?;
    print(
        json,
        json!({ "space": space.name, "cardinality": n.to_string(), "enumerated": enumerated }),
        || match enumerated {
            Some(e) => format!("{n} ({e} enumerated)"),
            None => n.to_string(),
        },
    );
    Ok(())
}

fn cmd_synth(a: &SynthArgs, json: bool) -> Result<()> {
    let (text, origin) = layered_text(a.spec.as_deref(), &a.sets)?;
    let spec: SynthSpec = parse_toml(&text, &origin)?;
    let m = synth_dataset(&spec, &a.out)?;
    let manifest = a.out.join("manifest.toml");
    print(
        json,
        json!({ "manifest": manifest.display().to_string(), "classes": m.num_classes, "train": spec.train, "val": spec.val }),
        || format!("wrote {} ({} train, {} val, {} classes)", manifest.display(), spec.train, spec.val, m.num_classes),
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let dispatch = || match &cli.command {
        Command::Train(a) => cmd_train(a, cli.json),
        Command::Slice(a) => cmd_slice(a, cli.json),
        Command::Evaluate(a) => cmd_evaluate(a, cli.json),
        Command::Search(a) => cmd_search(a, cli.json),
        Command::Flops(a) => cmd_flops(a, cli.json),
        Command::Cardinality(a) => cmd_cardinality(a, cli.json),
        Command::Synth(a) => cmd_synth(a, cli.json),
    };
    match cli.workers {
        Some(0) => bail!(Error::Config("--workers must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(dispatch),
        None => dispatch(),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Parse { .. }
                | Error::Config(_)
                | Error::Io { .. }
                | Error::Corrupt { .. }
                | Error::Checkpoint(_)
                | Error::Precondition(_) => 2,
                Error::BudgetInfeasible { .. } => 3,
                Error::Numeric { .. } => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<toml::ser::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
