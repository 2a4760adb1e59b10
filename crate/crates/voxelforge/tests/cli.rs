use std::fs;
use std::process::{Command, Output};

use tempfile::tempdir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_cases_is_an_empty_dataset() {
    let tmp = tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = run(&["synth", "--cases", "0", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).starts_with("error[dataset]: empty dataset"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn fold_out_of_range() {
    let tmp = tempdir().unwrap();
    let p = tmp.path().to_str().unwrap();
    let o = run(&["train", "--fold", "7", "--data", p, "--out", p]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[invalid-config]"), "{}", stderr(&o));
}

#[test]
fn full_scale_needs_acknowledgement() {
    let tmp = tempdir().unwrap();
    let p = tmp.path().to_str().unwrap();
    let o = run(&["train", "--preset", "full", "--data", p, "--out", p]);
    assert!(stderr(&o).contains("--i-know-this-takes-days"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint() {
    let tmp = tempdir().unwrap();
    let p = tmp.path().to_str().unwrap();
    let missing = tmp.path().join("nope.vxf");
    let o = run(&[
        "predict",
        "--checkpoints",
        missing.to_str().unwrap(),
        "--data",
        p,
        "--out",
        p,
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[io]"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["evaluate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));
}

#[test]
fn synth_then_self_evaluation() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("d");
    let o = run(&[
        "synth",
        "--cases",
        "2",
        "--out",
        data.to_str().unwrap(),
        "--extent",
        "32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = tmp.path().join("p");
    fs::create_dir(&pred).unwrap();
    for id in 0..2 {
        fs::copy(
            data.join(format!("case_{id:05}/segmentation.nii")),
            pred.join(format!("prediction_{id:05}.nii")),
        )
        .unwrap();
    }
    let report = tmp.path().join("report.txt");
    let o = run(&[
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(&report).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "Case | Kidney Dice | Tumor Dice | Composite Dice"
    );
    assert_eq!(table.lines().last().unwrap(), "mean | 100.00 | 100.00 | 100.00");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert!(json.is_object());
}
