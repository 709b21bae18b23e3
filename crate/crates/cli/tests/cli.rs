use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gbh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbh")).args(args).output().expect("run gbh")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, train: usize, val: usize, size: u32) {
    let o = gbh(&[
        "synth",
        s(dir),
        "--train",
        &train.to_string(),
        "--val",
        &val.to_string(),
        "--size",
        &size.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_train_eval_detect_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let ck = tmp.path().join("ck/tiny.gbhw");
    synth(&data, 4, 2, 96);
    let common = [
        "--variant",
        "gbh",
        "--profile",
        "tiny",
        "--input_size",
        "96",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out_dir",
        s(&runs),
    ];
    let mut train = vec!["train"];
    train.extend(common);
    train.extend(["--epochs", "2", "--batch_size", "2", "--eval_every", "1", "--save_every", "1"]);
    let o = gbh(&train);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ck.is_file());
    let losses = fs::read_to_string(runs.join("losses.csv")).unwrap();
    let lines: Vec<&str> = losses.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,box,obj,cls,val_loss");
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    assert!(lines[3].starts_with("final,"), "{losses}");
    assert_eq!(fs::read_to_string(runs.join("train_pr.csv")).unwrap().lines().count(), 3);
    assert!(runs.join("val_report.csv").is_file());

    // resume continues the epoch count and appends to the loss log
    let mut resume = vec!["train"];
    resume.extend(common);
    resume.extend(["--epochs", "3", "--batch_size", "2", "--resume", s(&ck)]);
    let o = gbh(&resume);
    assert!(o.status.success(), "{}", stderr(&o));
    let losses = fs::read_to_string(runs.join("losses.csv")).unwrap();
    assert!(losses.lines().any(|l| l.starts_with("3,")), "{losses}");
    assert_eq!(losses.lines().filter(|l| l.starts_with("epoch")).count(), 1);

    let mut eval = vec!["eval"];
    eval.extend(common);
    let o = gbh(&eval);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("scratch"));
    let csv = fs::read_to_string(runs.join("eval_val.csv")).unwrap();
    assert!(csv.starts_with("class,AP,TP,FP,FN,P,R"));

    let ann = tmp.path().join("ann");
    let img = data.join("images/synth_0000.png");
    let o = gbh(&[
        "detect",
        "--checkpoint",
        s(&ck),
        "--conf",
        "0.001",
        "--annotate",
        s(&ann),
        s(&img),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("# time"));
    assert!(ann.join("synth_0000.det.png").is_file());
}

#[test]
fn eval_with_a_mismatched_variant_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ck = tmp.path().join("m.gbhw");
    synth(&data, 2, 1, 64);
    let base = ["--profile", "tiny", "--input_size", "64", "--data", s(&data), "--checkpoint", s(&ck)];
    let mut train = vec!["train", "--variant", "yolov5-1", "--epochs", "1", "--batch_size", "2"];
    train.extend(base);
    let runs = tmp.path().join("r");
    train.extend(["--out_dir", s(&runs)]);
    let o = gbh(&train);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut eval = vec!["eval", "--variant", "gbh", "--out_dir", s(tmp.path())];
    eval.extend(base);
    let o = gbh(&eval);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("yolov5-1") || stderr(&o).contains("variant"), "{}", stderr(&o));
}

#[test]
fn missing_paths_fail_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gbh(&["train", "--data", s(&tmp.path().join("nope")), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not exist"));
    let o = gbh(&["train", "--epochs", "zero"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gbh(&["eval", "--data", s(tmp.path()), "--checkpoint", s(&tmp.path().join("none.gbhw"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_empty_directory_is_an_empty_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    fs::create_dir(&raw).unwrap();
    let out = tmp.path().join("out");
    let o = gbh(&["preprocess", s(&raw), s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("splits/train.txt")).unwrap(), "");
}

#[test]
fn preprocess_reports_a_corrupt_image_and_keeps_the_rest() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    synth(&raw, 3, 0, 160);
    fs::write(raw.join("images/synth_0001.png"), b"garbage").unwrap();
    let out = tmp.path().join("out");
    let o = gbh(&["preprocess", s(&raw), s(&out), "--crop", "96"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("synth_0001"));
    let ids: Vec<String> = fs::read_dir(out.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(!ids.is_empty());
    assert!(ids.iter().all(|i| !i.starts_with("synth_0001")));
    assert!(ids.iter().any(|i| i.starts_with("synth_0000")));
}

#[test]
fn preprocess_split_keeps_crops_of_one_panel_together() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    synth(&raw, 6, 0, 200);
    let out = tmp.path().join("out");
    let o = gbh(&["preprocess", s(&raw), s(&out), "--crop", "64", "--train_fraction", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |f: &str| -> Vec<String> {
        fs::read_to_string(out.join("splits").join(f))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once("_c").unwrap().0.to_string())
            .collect()
    };
    let (train, val) = (read("train.txt"), read("val.txt"));
    assert!(!train.is_empty() && !val.is_empty());
    assert!(train.iter().all(|t| !val.contains(t)));
}

#[test]
fn detect_fails_only_when_every_image_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 0, 64);
    let ck = tmp.path().join("m.gbhw");
    let o = gbh(&[
        "train",
        "--profile",
        "tiny",
        "--input_size",
        "64",
        "--epochs",
        "1",
        "--batch_size",
        "2",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--out_dir",
        s(&tmp.path().join("r")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"nope").unwrap();
    let good = data.join("images/synth_0000.png");
    let o = gbh(&["detect", "--checkpoint", s(&ck), s(&bad), s(&good)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.png"));
    let o = gbh(&["detect", "--checkpoint", s(&ck), s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("b/bench.csv");
    let o = gbh(&[
        "bench",
        "--profile",
        "tiny",
        "--input_size",
        "64",
        "--reps",
        "1",
        "--variants",
        "yolov5-2,gbh",
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("yolov5-2,") && rows[2].starts_with("gbh,"));
    let params = |r: &str| r.split(',').nth(1).unwrap().parse::<usize>().unwrap();
    assert!(params(rows[2]) < params(rows[1]));
    assert_eq!(gbh(&["bench", "--variants", "resnet"]).status.code(), Some(2));
}

#[test]
fn param_count_prints_counts() {
    let o = gbh(&["param-count", "--variant", "gbh"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("gbh params "));
}
