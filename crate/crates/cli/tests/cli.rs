use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn p2preg(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_p2preg")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = p2preg(args);
    assert!(out.status.success(), "p2preg {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its contents, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = "
[data.shapes]
train = 2
val = 1
test = 2

[data.pairs]
train = 2
val = 0
test = 3
";

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["generate", "--profile", "test", "--config", s(&cfg), "--seed", "3", "--out", s(out)]);
    }
    let snap = snapshot(&a);
    assert_eq!(snap, snapshot(&b));
    let names: Vec<_> = snap.iter().map(|(p, _)| p.display().to_string()).collect();
    for f in ["config.toml", "manifest.json", "ground_truth.json", "pairs/test_0002_reference.ply"] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }

    let c = dir.path().join("c");
    ok(&["generate", "--profile", "test", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("manifest.json")).unwrap(), fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let a = dir.path().join("a");
    ok(&["generate", "--profile", "test", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    let echoed = a.join("config.toml");
    let text = fs::read_to_string(&echoed).unwrap();
    assert!(text.contains("[train]") && text.contains("seed = 5"), "{text}");

    // the echo is a complete config: replaying it from another profile gives the same data
    let b = dir.path().join("b");
    ok(&["generate", "--profile", "paper", "--config", s(&echoed), "--out", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn icp_eval_closes_full_overlap_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("overlap.toml");
    fs::write(
        &cfg,
        "
[data]
crop = \"none\"
points = 256

[data.shapes]
train = 1
val = 1
test = 4

[data.pairs]
train = 0
val = 0
test = 16
",
    )
    .unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--profile", "test", "--config", s(&cfg), "--seed", "1", "--out", s(&data)]);
    let out = dir.path().join("eval");
    let table = ok(&[
        "eval",
        "--profile",
        "test",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data.join("manifest.json")),
        "--method",
        "icp",
        "--out",
        s(&out),
    ]);
    println!("{table}");
    for col in ["RMSE(R)", "MAE(R)", "RMSE(t)", "MAE(t)", "Error(R)", "Error(t)"] {
        assert!(table.contains(col), "missing column {col}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["count"], 16);
    let error_r = report["metrics"]["error_r"].as_f64().unwrap();
    assert!(error_r < 0.5, "mean Error_R {error_r}");
    assert!(out.join("config.toml").exists() && out.join("report.txt").exists());

    // same inputs, same report
    let again = dir.path().join("again");
    ok(&[
        "eval",
        "--profile",
        "test",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data.join("manifest.json")),
        "--method",
        "icp",
        "--out",
        s(&again),
    ]);
    assert_eq!(fs::read(out.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());

    let plots = dir.path().join("plots");
    ok(&["plot", "--out", s(&plots), s(&out.join("report.json"))]);
    assert!(fs::read_to_string(plots.join("error_r_vs_angle.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn icp_registers_a_cloud_onto_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--profile", "test", "--config", s(&cfg), "--out", s(&data)]);
    let cloud = data.join("pairs").join("test_0000_source.ply");
    let out = dir.path().join("reg");
    let printed = ok(&[
        "register",
        "--profile",
        "test",
        "--method",
        "icp",
        "--source",
        s(&cloud),
        "--reference",
        s(&cloud),
        "--out",
        s(&out),
    ]);
    assert!(printed.starts_with("quaternion (w, x, y, z): 1.000000"), "{printed}");
    let reg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("registration.json")).unwrap()).unwrap();
    let q: Vec<f64> = reg["quaternion_wxyz"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let t: Vec<f64> = reg["translation"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((q[0] - 1.0).abs() < 1e-6 && q[1..].iter().chain(&t).all(|v| v.abs() < 1e-6), "{q:?} {t:?}");
    assert!(out.join("aligned.ply").exists());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nmomentum = 0.9\n").unwrap();
    let out = p2preg(&["generate", "--profile", "test", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));

    let missing = p2preg(&[
        "eval",
        "--profile",
        "test",
        "--dataset",
        s(&dir.path().join("nope.json")),
        "--method",
        "icp",
        "--out",
        s(dir.path()),
    ]);
    assert!(!missing.status.success());
    assert!(!p2preg(&["train", "--profile", "nonsense", "--out", s(dir.path())]).status.success());
}

#[test]
fn learned_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    fs::write(&cfg, format!("{SMALL}\n[train]\nsteps = 12\nbatch_size = 2\ncheckpoint_every = 5\nlog_every = 5\n")).unwrap();
    let common = ["--profile", "test", "--config", s(&cfg), "--seed", "2"];
    let data = dir.path().join("data");
    ok(&[&["generate"], &common[..], &["--out", s(&data)]].concat());
    let manifest = data.join("manifest.json");

    let run = dir.path().join("run");
    ok(&[&["train"], &common[..], &["--dataset", s(&manifest), "--out", s(&run)]].concat());
    let ckpt = run.join("checkpoint.bin");
    for f in ["checkpoint.bin", "checkpoint.bin.json", "checkpoint-0000005.bin", "losses.tsv", "train.log", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("losses.tsv")).unwrap().lines().count(), 13);

    // resuming the finished run from step 5 reproduces the loss log
    let resumed = dir.path().join("resumed");
    ok(&[
        &["train"],
        &common[..],
        &["--dataset", s(&manifest), "--resume", s(&run.join("checkpoint-0000005.bin")), "--out", s(&resumed)],
    ]
    .concat());
    let tail = |p: &Path| fs::read_to_string(p).unwrap().lines().rev().take(7).map(String::from).collect::<Vec<_>>();
    assert_eq!(tail(&run.join("losses.tsv")), tail(&resumed.join("losses.tsv")));

    let eval = dir.path().join("eval");
    ok(&[&["eval"], &common[..], &["--dataset", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&eval)]].concat());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"]["count"], 3);

    let cloud = data.join("pairs").join("test_0001_source.ply");
    let reg = dir.path().join("reg");
    let printed = ok(&[
        &["register"],
        &common[..],
        &["--checkpoint", s(&ckpt), "--source", s(&cloud), "--reference", s(&cloud), "--out", s(&reg)],
    ]
    .concat());
    assert_eq!(printed.lines().filter(|l| l.starts_with("iteration ")).count(), 4);
    assert!(reg.join("aligned.ply").exists() && reg.join("registration.json").exists());

    let insp = dir.path().join("inspect");
    ok(&[
        &["inspect"],
        &common[..],
        &["--checkpoint", s(&ckpt), "--dataset", s(&manifest), "--pair", "1", "--plot", "--out", s(&insp)],
    ]
    .concat());
    let inspect: serde_json::Value = serde_json::from_str(&fs::read_to_string(insp.join("inspect.json")).unwrap()).unwrap();
    assert_eq!(inspect["iterations"].as_array().unwrap().len(), 4);

    let plots = dir.path().join("plots");
    ok(&["plot", "--out", s(&plots), s(&eval.join("report.json")), s(&insp.join("inspect.json"))]);
    assert!(plots.join("error_r_vs_angle.svg").exists());
    let overlays = fs::read_dir(plots.join("inspect")).unwrap().count();
    assert_eq!(overlays, 4 * 4, "one overlay per view and iteration");
}
