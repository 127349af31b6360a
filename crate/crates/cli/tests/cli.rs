use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctseg::pipeline::{split_cases, SplitSpec};
use ctseg::volgrid::read_svol_file;

fn ctseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctseg(args);
    assert!(
        out.status.success(),
        "ctseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ctseg(args).status.code().expect("exit code")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Small phantoms and a tiny network so a training run takes seconds.
const TINY: &str = "
[phantom]
shape = 16,32,32
bone_size = 6,10
seed = 3

[model]
levels = 1
base_channels = 2
convs_per_level = 1

[train]
lr = 0.000003
patch = 8,16,16
stride = 8,16,16
batch_size = 2
total_epochs = 2
iterations_per_epoch = 3
validation_interval = 3
validation_cases = 1
seed = 3

[split]
test_fraction = 0.25
seed = 3
";

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.ini");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantom_cardinality_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&["phantom", "--config", s(&cfg), "--cases", "5", "--seed", "7", "--out", s(out)]);
    }
    let svols = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svol"))
        .count();
    assert_eq!(svols, 10);
    for e in std::fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    assert_eq!(code(&["phantom", "--cases", "5"]), 2);
    assert_eq!(code(&["phantom", "--config", "/nonexistent/x.ini", "--out", s(&a)]), 3);
    assert_eq!(code(&["phantom", "--set", "train.bogus=1", "--out", s(&a)]), 2);
}

#[test]
fn train_infer_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["phantom", "--config", s(&cfg), "--cases", "8", "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--quiet"]);

    let ckpts: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt") || n.ends_with(".tmp"))
        .collect();
    assert_eq!(ckpts, ["best.ckpt"]);
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count() - 1, 6);
    assert!(std::fs::read_to_string(run.join("split.txt")).unwrap().contains("within split: true"));

    // a rerun with the saved effective config reproduces the history
    let run2 = tmp.path().join("run2");
    ok(&["train", "--config", s(&run.join("run.ini")), "--out", s(&run2), "--quiet"]);
    assert_eq!(std::fs::read(run2.join("history.csv")).unwrap(), history.as_bytes());
    assert_eq!(std::fs::read(run2.join("best.ckpt")).unwrap(), std::fs::read(run.join("best.ckpt")).unwrap());

    // oracle stub reproduces ground truth
    let pred = tmp.path().join("oracle.svol");
    let ct = data.join("ct_0.svol");
    let label = data.join("label_0.svol");
    ok(&["infer", "--config", s(&cfg), "--ct", s(&ct), "--oracle", s(&label), "--out", s(&pred)]);
    let gt = read_svol_file(&label).unwrap().into_labels().unwrap();
    assert_eq!(read_svol_file(&pred).unwrap().into_labels().unwrap(), gt);

    // model inference: shape and repeatability, plus overlays
    let ckpt = run.join("best.ckpt");
    let norm = run.join("norm_stats.txt");
    let p1 = tmp.path().join("p1.svol");
    let p2 = tmp.path().join("p2.svol");
    let overlays = tmp.path().join("overlays");
    for p in [&p1, &p2] {
        ok(&[
            "infer", "--config", s(&cfg), "--ct", s(&ct), "--checkpoint", s(&ckpt), "--norm", s(&norm), "--out", s(p),
            "--overlays", s(&overlays),
        ]);
    }
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(read_svol_file(&p1).unwrap().into_labels().unwrap().shape(), gt.shape());
    assert_eq!(std::fs::read_dir(&overlays).unwrap().count(), 4);
    assert_eq!(code(&["infer", "--ct", "/nonexistent.svol", "--checkpoint", s(&ckpt), "--norm", s(&norm), "--out", s(&p1)]), 3);

    let eval = tmp.path().join("eval");
    let tables = ok(&[
        "evaluate", "--config", s(&run.join("run.ini")), "--checkpoint", s(&ckpt), "--norm", s(&norm), "--out", s(&eval),
    ]);
    assert!(tables.contains("Dice score (%)"));
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count() - 1, 2);

    let curves = tmp.path().join("curves");
    let msg = ok(&["report", "--history", s(&run.join("history.csv")), "--out", s(&curves)]);
    assert!(msg.starts_with("2 validation points"), "{msg}");
    for f in ["dice_curve.csv", "loss_curve.csv", "dice_curve.svg", "loss_curve.svg"] {
        assert!(curves.join(f).exists(), "{f}");
    }
    let dice_rows = std::fs::read_to_string(curves.join("dice_curve.csv")).unwrap();
    assert_eq!(dice_rows.lines().count() - 1, 2);
}

#[test]
fn folds_rotate_validation_blocks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("folds.ini");
    std::fs::write(
        &cfg,
        TINY.replace("test_fraction = 0.25", "test_fraction = 0.2")
            .replace("total_epochs = 2", "total_epochs = 2\nswitch_epoch = 1")
            .replace("iterations_per_epoch = 3", "iterations_per_epoch = 1")
            .replace("validation_interval = 3", "validation_interval = 2"),
    )
    .unwrap();
    let data = tmp.path().join("data");
    ok(&["phantom", "--config", s(&cfg), "--cases", "50", "--out", s(&data)]);
    let mut validated = Vec::new();
    let mut tests = Vec::new();
    for fold in 0..5 {
        let run = tmp.path().join(format!("fold{fold}"));
        let f = fold.to_string();
        let out = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--fold", &f, "--out", s(&run), "--quiet"]);
        let ids = |prefix: &str| -> Vec<usize> {
            let line = out.lines().find(|l| l.starts_with(prefix)).unwrap();
            line.split(':').nth(1).unwrap().split_whitespace().map(|t| t.parse().unwrap()).collect()
        };
        assert_eq!((ids("train").len(), ids("validation").len(), ids("test").len()), (32, 8, 10));
        validated.extend(ids("validation"));
        tests.push(ids("test"));
    }
    assert!(tests.windows(2).all(|w| w[0] == w[1]));
    validated.sort_unstable();
    let mut non_test: Vec<usize> = (0..50).filter(|i| !tests[0].contains(i)).collect();
    non_test.sort_unstable();
    assert_eq!(validated, non_test);
    // the CLI split is the library split
    let lib = split_cases(&(0..50).collect::<Vec<_>>(), 3, 0, &SplitSpec::default()).unwrap();
    assert_eq!(lib.test, tests[0]);
}

#[test]
fn report_tables_from_published_values() {
    let out = ok(&["report", "--from-csv", s(&fixture("published_tables.csv"))]);
    let mean_of = |title: &str, class: &str| -> f64 {
        let block = out.split("\n\n").find(|b| b.starts_with(title)).unwrap();
        let line = block.lines().find(|l| l.starts_with(class)).unwrap();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    assert_eq!(mean_of("Dice score", "bone"), 94.5);
    assert_eq!(mean_of("Dice score", "nerve"), 90.5);
    assert_eq!(mean_of("IoU", "bone"), 89.7);
    assert_eq!(mean_of("IoU", "nerve"), 82.7);
    // the exact mean is 94.05, on the one-decimal rounding boundary
    assert!((mean_of("Pixel accuracy", "bone") - 94.05).abs() <= 0.05 + 1e-9);
    assert_eq!(mean_of("Pixel accuracy", "nerve"), 91.4);
}

#[test]
fn report_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.csv");
    std::fs::write(&empty, "iteration,epoch,loss,val_dice_bone,val_dice_nerve,checkpointed\n").unwrap();
    assert_eq!(code(&["report", "--history", s(&empty), "--out", s(tmp.path())]), 3);
    let bad = tmp.path().join("bad.csv");
    std::fs::write(
        &bad,
        "iteration,epoch,loss,val_dice_bone,val_dice_nerve,checkpointed\n1,0,2.5,,,0\n2,0,oops,,,0\n",
    )
    .unwrap();
    let out = ctseg(&["report", "--history", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert_eq!(code(&["report", "--from-csv", "/nonexistent.csv"]), 3);
    assert_eq!(code(&["report"]), 2);
}
