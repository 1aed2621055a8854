//! End-to-end runs of the `msbt` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn msbt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msbt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = msbt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: &[&str] = &[
    "--num-videos", "6", "--t-min", "5", "--t-max", "7", "--dims", "r:4,f:3,a:3", "--event-len-min", "2",
    "--event-len-max", "3",
];

fn synth(dir: &Path, seed: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", s(dir), "--seed", seed];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let printed = ok(&args);
    let manifest = PathBuf::from(printed.trim());
    assert!(manifest.exists(), "{printed}");
    manifest
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out), "--preset", "toy"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    synth(&a, "7", &[]);
    synth(&b, "7", &[]);
    synth(&c, "8", &[]);
    let ta = tree(&a);
    assert!(ta.len() > 6);
    assert_eq!(ta, tree(&b));
    assert_ne!(ta, tree(&c));
}

#[test]
fn train_eval_predict_flow() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth(&root.path().join("data"), "3", &[]);
    let run = root.path().join("run");
    train(&manifest, &run, &["--seed", "5", "--epochs", "2"]);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines.len(), 3, "{loss}");
    assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("seed = 5"));

    // Same seed, same bytes.
    let again = root.path().join("again");
    train(&manifest, &again, &["--seed", "5", "--epochs", "2"]);
    assert_eq!(fs::read(run.join("checkpoint.msbc")).unwrap(), fs::read(again.join("checkpoint.msbc")).unwrap());

    let ckpt = run.join("checkpoint.msbc");
    let eval_dir = root.path().join("eval");
    let printed = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&eval_dir)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, serde_json::from_str::<serde_json::Value>(&printed).unwrap());
    let ap = report["frame_ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    assert_eq!(report["num_videos"], 6);
    let csvs = report["score_csvs"].as_array().unwrap();
    assert_eq!(csvs.len(), 6);
    let first = fs::read_to_string(csvs[0].as_str().unwrap()).unwrap();
    assert!(first.starts_with("frame_index,score,label\n"));

    let scores = root.path().join("scores.csv");
    ok(&["predict", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&scores)]);
    let text = fs::read_to_string(&scores).unwrap();
    assert!(text.starts_with("video_id,snippet_index,score\n"));

    // A single video scored from its feature files matches its manifest rows.
    let data = manifest.parent().unwrap();
    let row = fs::read_to_string(&manifest).unwrap().lines().find(|l| !l.starts_with('#')).unwrap().to_string();
    let cols: Vec<&str> = row.split('\t').collect();
    let single = root.path().join("single.csv");
    ok(&[
        "predict", "--checkpoint", s(&ckpt), "--rgb", s(&data.join(cols[1])), "--flow", s(&data.join(cols[2])),
        "--audio", s(&data.join(cols[3])), "--out", s(&single),
    ]);
    let from_manifest: Vec<String> = text
        .lines()
        .filter(|l| l.starts_with(&format!("{},", cols[0])))
        .map(|l| l.splitn(2, ',').nth(1).unwrap().to_string())
        .collect();
    let from_files: Vec<String> =
        fs::read_to_string(&single).unwrap().lines().skip(1).map(|l| l.splitn(2, ',').nth(1).unwrap().to_string()).collect();
    assert!(!from_files.is_empty());
    assert_eq!(from_manifest, from_files);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth(&root.path().join("data"), "4", &[]);
    let cfg = root.path().join("cfg.txt");
    fs::write(&cfg, "# ablation\nlambda = 0.3\ntopk = 2\nepochs = 1\n").unwrap();
    let run = root.path().join("run");
    ok(&[
        "train", "--manifest", s(&manifest), "--out", s(&run), "--preset", "toy", "--config", s(&cfg), "--lambda", "0.5",
    ]);
    let written = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(written.contains("lambda = 0.5"), "{written}");
    assert!(written.contains("topk = 2"), "{written}");
    assert!(written.contains("epochs = 1"), "{written}");
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 2);
}

#[test]
fn gradcheck_toy_passes() {
    let out = ok(&["gradcheck", "--preset", "toy"]);
    assert!(out.contains("max relative error"), "{out}");
    assert!(out.contains("PASS"), "{out}");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let root = tempfile::tempdir().unwrap();
    let bad_flag = msbt(&["train", "--no-such-flag"]);
    assert!(!bad_flag.status.success());
    assert!(!bad_flag.stderr.is_empty());
    assert!(!msbt(&["frobnicate"]).status.success());
    assert!(!msbt(&[]).status.success());

    let missing = root.path().join("nope.tsv");
    let out = msbt(&["train", "--manifest", s(&missing), "--out", s(&root.path().join("x")), "--preset", "toy"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tsv"));

    let manifest = synth(&root.path().join("data"), "5", &[]);
    let bad_n1 = msbt(&[
        "train", "--manifest", s(&manifest), "--out", s(&root.path().join("y")), "--bottleneck-n1", "3",
        "--layers-msbt", "3",
    ]);
    assert!(!bad_n1.status.success());

    let run = root.path().join("run");
    train(&manifest, &run, &["--epochs", "1"]);
    let out = msbt(&[
        "eval", "--checkpoint", s(&run.join("checkpoint.msbc")), "--manifest", s(&manifest), "--out",
        s(&root.path().join("e")), "--modalities", "r,f,a",
    ]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let corrupt = root.path().join("corrupt.msbc");
    fs::write(&corrupt, b"MSBC garbage").unwrap();
    let out = msbt(&["eval", "--checkpoint", s(&corrupt), "--manifest", s(&manifest), "--out", s(&root.path().join("f"))]);
    assert!(!out.status.success());
}

#[test]
fn eval_reports_tcc_ablation_on_asynchronous_data() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth(&root.path().join("data"), "6", &["--async-min", "1", "--async-max", "1"]);
    let mut aps = Vec::new();
    for lambda in ["0.1", "0"] {
        let run = root.path().join(format!("run{lambda}"));
        train(&manifest, &run, &["--lambda", lambda, "--epochs", "3"]);
        let eval = root.path().join(format!("eval{lambda}"));
        let printed = ok(&[
            "eval", "--checkpoint", s(&run.join("checkpoint.msbc")), "--manifest", s(&manifest), "--out", s(&eval),
        ]);
        let v: serde_json::Value = serde_json::from_str(&printed).unwrap();
        aps.push(v["frame_ap"].as_f64().unwrap());
    }
    assert!(aps.iter().all(|ap| (0.0..=1.0).contains(ap)), "{aps:?}");
}
