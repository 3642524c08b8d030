use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn supernet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supernet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
    serde_json::from_slice(&o.stdout).expect("json output")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TOY: &str = "configs/spaces/toy.toml";

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = supernet(&["synth", "--out", p(&out), "--set", "train=64", "--set", "val=32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("manifest.toml")
}

fn train(dir: &Path, data: &Path, out: &str, extra: &[&str]) -> Output {
    let space = repo(TOY);
    let config = repo("configs/train/desk.toml");
    let out = dir.join(out);
    let mut args = vec![
        "train",
        "--space",
        p(&space),
        "--data",
        p(data),
        "--config",
        p(&config),
        "--out",
        p(&out),
        "--set",
        "batch_size=16",
        "--set",
        "epochs=1",
    ];
    args.extend_from_slice(extra);
    supernet(&args)
}

#[test]
fn missing_space_file_exits_2_and_names_the_path() {
    let o = supernet(&["flops", "--space", "/nonexistent/space.toml", "--child", "r16-d1.1.1-c8.8.12.16.32-k3.3.3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/space.toml"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&supernet(&["flops"])), 2);
    assert_eq!(code(&supernet(&["no-such-command"])), 2);
}

#[test]
fn flops_of_reference_child() {
    let o = supernet(&[
        "--json",
        "flops",
        "--space",
        p(&repo("configs/spaces/table1.toml")),
        "--child",
        "r256-d1.2.2.2.4.4.1-c32.16.24.48.88.128.216.352.1408-k3.3.5.3.5.5.3",
    ]);
    let v = json(&o);
    let mm = v["mmadds"].as_f64().unwrap();
    assert!((600.0..700.0).contains(&mm), "{mm}");
    assert_eq!(v["extrapolated"], true);
    let layers = v["per_layer"].as_array().unwrap();
    let sum: u64 = layers.iter().map(|l| l["madds"].as_u64().unwrap()).sum();
    assert_eq!(sum, v["total_madds"].as_u64().unwrap());
}

#[test]
fn invalid_child_string_exits_2_with_violation() {
    let o = supernet(&["flops", "--space", p(&repo(TOY)), "--child", "r16-d3.1.1-c8.8.12.16.32-k3.3.3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
}

#[test]
fn cardinality_matches_enumeration() {
    let v = json(&supernet(&["--json", "cardinality", "--space", p(&repo(TOY)), "--enumerate", "1000000"]));
    assert_eq!(v["cardinality"], "151200");
    assert_eq!(v["enumerated"], 151200);
    let v = json(&supernet(&["--json", "cardinality", "--space", p(&repo("configs/spaces/table1.toml"))]));
    assert!(v["cardinality"].as_str().unwrap().len() > 12);
    let o = supernet(&["cardinality", "--space", p(&repo(TOY))]);
    assert_eq!(stdout(&o).trim(), "151200");
}

#[test]
fn bad_override_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let o = train(dir.path(), &data, "run", &["--set", "no_such_key=1", "--steps", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn parse_errors_report_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nnum_classes = = 3\n").unwrap();
    let o = supernet(&["cardinality", "--space", p(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn train_slice_evaluate_search_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());

    let a = train(dir.path(), &data, "a", &["--steps", "3", "--seed", "7"]);
    let b = train(dir.path(), &data, "b", &["--steps", "3", "--seed", "7"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    let ca = std::fs::read(dir.path().join("a/ckpt-00000003.bin")).unwrap();
    let cb = std::fs::read(dir.path().join("b/ckpt-00000003.bin")).unwrap();
    assert!(ca == cb, "fixed-seed runs differ");
    let steps = std::fs::read_to_string(dir.path().join("a/steps.csv")).unwrap();
    assert!(steps.starts_with("step,role,config,resolution,loss_kind,loss,lr,grad_norm"));
    assert_eq!(steps.lines().count(), 1 + 3 * 4);

    // resume from the latest checkpoint and finish the epoch
    let r = train(dir.path(), &data, "a", &["--seed", "7", "--resume"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(dir.path().join("a/ckpt-00000004.bin").exists());

    let ckpt = dir.path().join("a/ckpt-00000004.bin");
    let biggest = "r32-d2.2.2-c12.12.16.24.48-k3.5.5";
    let child = dir.path().join("child.bin");
    let v = json(&supernet(&[
        "--json",
        "slice",
        "--space",
        p(&repo(TOY)),
        "--checkpoint",
        p(&ckpt),
        "--child",
        biggest,
        "--data",
        p(&data),
        "--calib-batches",
        "2",
        "--batch-size",
        "16",
        "--out",
        p(&child),
    ]));
    assert_eq!(v["config"], biggest);
    let params = v["params"].as_u64().unwrap();

    let e1 = json(&supernet(&["--json", "evaluate", "--space", p(&repo(TOY)), "--child", p(&child), "--data", p(&data)]));
    let e2 = json(&supernet(&["--json", "evaluate", "--space", p(&repo(TOY)), "--child", p(&child), "--data", p(&data)]));
    assert_eq!(e1, e2);
    assert_eq!(e1["examples"], 32);
    assert!(params > 0);

    let pareto = dir.path().join("pareto.csv");
    let search = |budget: &str| {
        supernet(&[
            "--json",
            "--workers",
            "2",
            "search",
            "--space",
            p(&repo(TOY)),
            "--search-space",
            p(&repo("configs/spaces/toy_sub.toml")),
            "--grid",
            p(&repo("configs/grids/toy_sub.toml")),
            "--checkpoint",
            p(&ckpt),
            "--budget",
            budget,
            "--data",
            p(&data),
            "--out",
            p(&pareto),
            "--fine-candidates",
            "8",
            "--calib-batches",
            "1",
            "--batch-size",
            "16",
            "--eval-examples",
            "32",
        ])
    };
    let o = search("1000");
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("smallest candidate needs"), "{}", stderr(&o));

    let v = json(&search("400000"));
    assert!(v["best"]["madds"].as_u64().unwrap() <= 400_000);
    let text = std::fs::read_to_string(&pareto).unwrap();
    assert!(text.starts_with("config,madds,accuracy,provenance"));
}

#[test]
fn space_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    assert_eq!(code(&train(dir.path(), &data, "a", &["--steps", "1"])), 0);
    let o = supernet(&[
        "slice",
        "--space",
        p(&repo("configs/spaces/toy_sub.toml")),
        "--checkpoint",
        p(&dir.path().join("a/ckpt-00000001.bin")),
        "--child",
        "r32-d2.2.2-c12.12.16.24.48-k3.5.3",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("c.bin")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("space hash mismatch"), "{}", stderr(&o));
}
