use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use granedge::checkpoint;
use granedge::report::ReportFile;

const TINY: [&str; 6] =
    ["provider.grid_side=2", "stn.preset=toy", "epochs=2", "batch_size=2", "learning_rate=1e-3", "seed=3"];

fn granedge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_granedge")).args(args).env_remove("GRANEDGE_CACHE_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = granedge(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, annotators: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--count", &count.to_string(), "--side", "48", "--annotators", &annotators.to_string()]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    for kv in TINY.iter().chain(extra) {
        args.extend(["--set", kv]);
    }
    ok(&args);
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn synth_train_infer_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 2, 3);
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let files = names(&run);
    for f in ["config.cfg", "epoch_001.ckpt", "epoch_002.ckpt", "last.ckpt", "train.jsonl"] {
        assert!(files.contains(&f.to_string()), "{f} missing from {files:?}");
    }
    assert_eq!(granedge::run::read_log(&run.join("train.jsonl")).unwrap().len(), 2);

    let ckpt = run.join("last.ckpt");
    let images = data.join("images");
    let sweep = tmp.path().join("sweep");
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images), "--out", s(&sweep), "--candidates", "11"]);
    let got = names(&sweep);
    assert_eq!(got.len(), 22);
    let ids: Vec<String> = names(&images).iter().map(|n| n.trim_end_matches(".png").to_string()).collect();
    for id in &ids {
        for k in 0..11 {
            assert!(got.contains(&format!("{id}_a{k:02}.png")));
        }
    }

    let single = tmp.path().join("single");
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images.join(format!("{}.png", ids[0]))), "--out", s(&single), "--alpha", "0.3"]);
    assert_eq!(names(&single), vec![format!("{}_a03.png", ids[0])]);
    let fused = tmp.path().join("fused");
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images), "--out", s(&fused)]);
    assert_eq!(names(&fused), ids.iter().map(|i| format!("{i}.png")).collect::<Vec<_>>());

    let report = tmp.path().join("report.json");
    let csv = tmp.path().join("pr.csv");
    let gt = data.join("annotations");
    let stdout = ok(&[
        "evaluate", "--pred-dir", s(&sweep), "--gt-dir", s(&gt), "--candidates", "11", "--thresholds", "9", "--out", s(&report), "--pr-csv",
        s(&csv),
    ]);
    assert!(stdout.contains("ODS"));
    let r: ReportFile = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.candidates, 11);
    assert_eq!(r.images, ids);
    assert_eq!(r.report.thresholds.len(), 9);
    assert!((0.0..=1.0).contains(&r.report.ods_f) && r.report.ois_f >= r.report.ods_f - 1e-12);
    assert_eq!(r.report.selected.as_ref().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 10);

    let single_report = tmp.path().join("fused.json");
    ok(&["evaluate", "--pred-dir", s(&fused), "--gt-dir", s(&gt), "--out", s(&single_report)]);

    // A missing candidate file is an error, not a silent skip.
    fs::remove_file(sweep.join(format!("{}_a05.png", ids[1]))).unwrap();
    let out = granedge(&["evaluate", "--pred-dir", s(&sweep), "--gt-dir", s(&gt), "--candidates", "11", "--out", s(&report)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("a05"));
}

#[test]
fn build_labels_writes_every_level() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 2, 4);
    let out = tmp.path().join("labels");
    ok(&["build-labels", "--data", s(&data), "--out", s(&out), "--zeta", "0.3", "--seed", "1"]);
    for id in names(&out) {
        assert_eq!(
            names(&out.join(&id)),
            ["coarse.png", "consensus.png", "fine.png", "medium.png", "soft_consensus.png"].map(String::from).to_vec()
        );
    }
    assert_eq!(names(&out).len(), 2);
}

#[test]
fn inference_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 1, 2);
    let run = tmp.path().join("run");
    train(&data, &run, &["epochs=1"]);
    let ckpt = run.join("last.ckpt");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&data.join("images")), "--out", s(out), "--candidates", "3"]);
    }
    for n in names(&a) {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn ablations_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 2, 3);

    let soc = tmp.path().join("soc");
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&soc), "--soc-off"];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    ok(&args);
    let ckpt = soc.join("last.ckpt");
    let images = data.join("images");
    let out = granedge(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images), "--out", s(&tmp.path().join("x")), "--alpha", "0.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("granularity"));
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images), "--out", s(&tmp.path().join("y"))]);

    let lambda0 = tmp.path().join("lambda0");
    train(&data, &lambda0, &["lambda=0"]);
    let differ = tmp.path().join("differ");
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&differ), "--differ-off"];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    ok(&args);
    assert_eq!(fs::read(lambda0.join("train.jsonl")).unwrap(), fs::read(differ.join("train.jsonl")).unwrap());
}

#[test]
fn resume_continues_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 2, 3);
    let full = tmp.path().join("full");
    train(&data, &full, &[]);
    let part = tmp.path().join("part");
    train(&data, &part, &["epochs=1"]);
    let (a1, b1) = (checkpoint::load(&full.join("epoch_001.ckpt")).unwrap(), checkpoint::load(&part.join("epoch_001.ckpt")).unwrap());
    assert!(a1.stn.params().iter().zip(b1.stn.params().iter()).all(|(x, y)| x.2 == y.2));
    assert_eq!(a1.adam, b1.adam);

    let out = granedge(&["train", "--data", s(&data), "--out", s(&part), "--resume", s(&part.join("last.ckpt")), "--set", "stn.hidden=4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stn.hidden"));

    ok(&["train", "--data", s(&data), "--out", s(&part), "--resume", s(&part.join("last.ckpt")), "--set", "epochs=2"]);
    let a = checkpoint::load(&full.join("last.ckpt")).unwrap();
    let b = checkpoint::load(&part.join("last.ckpt")).unwrap();
    assert_eq!((a.epoch, a.step), (b.epoch, b.step));
    // The resumed run starts from f32-rounded weights, so it matches to
    // rounding rather than bit for bit.
    for ((_, name, x), (_, _, y)) in a.stn.params().iter().zip(b.stn.params().iter()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() <= 1e-5 * (1.0 + p.abs()), "{name}: {p} vs {q}");
        }
    }
    let la = granedge::run::read_log(&full.join("train.jsonl")).unwrap();
    let lb = granedge::run::read_log(&part.join("train.jsonl")).unwrap();
    assert_eq!(la.len(), lb.len());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!((x.step, x.epoch), (y.step, y.epoch));
        assert!((x.l_total - y.l_total).abs() <= 1e-6 * x.l_total.abs().max(1.0));
    }
}

#[test]
fn manifest_with_five_annotators() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 2, 5);
    let mut text = String::from("# five annotators per image\n@split train\n");
    for id in names(&data.join("images")) {
        let id = id.trim_end_matches(".png");
        let mut line = format!("images/{id}.png");
        for k in 0..5 {
            line.push_str(&format!("\tannotations/{id}/{k}.png"));
        }
        text.push_str(&line);
        text.push('\n');
    }
    let manifest = data.join("train.tsv");
    fs::write(&manifest, text).unwrap();
    let run = tmp.path().join("run");
    train(&manifest, &run, &["epochs=1", "zeta=0.3"]);
    assert!(run.join("last.ckpt").is_file());
    let labels = tmp.path().join("labels");
    ok(&["build-labels", "--data", s(&manifest), "--out", s(&labels)]);
    assert_eq!(names(&labels).len(), 2);

    fs::write(&manifest, "images/missing.png\tannotations/missing/0.png\n").unwrap();
    let out = granedge(&["build-labels", "--data", s(&manifest), "--out", s(&labels)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 1, 2);
    let out = granedge(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = granedge(&["evaluate", "--pred-dir", s(&data), "--gt-dir", s(&data), "--tolerance", "0.5", "--out", "r.json"]);
    assert!(!out.status.success());
}
