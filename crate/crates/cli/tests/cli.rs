use std::path::Path;
use std::process::{Command, Output};

fn mgflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgflow"))
        .args(args)
        .output()
        .expect("spawn mgflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn desk() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/desk.json")
        .to_string_lossy()
        .into_owned()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&mgflow(&["--help"])), 0);
    assert_eq!(code(&mgflow(&["infer", "--no-such-flag"])), 1);
    assert_eq!(
        code(&mgflow(&["infer", "--scene-seed", "1", "--nms-iou", "1.5"])),
        1
    );
    assert_eq!(
        code(&mgflow(&["infer", "--scene", "/definitely/missing.json"])),
        2
    );
    assert_eq!(code(&mgflow(&["verify", "--suite", "bogus"])), 1);
    let bad = mgflow(&[
        "verify",
        "--suite",
        "gradients",
        "--instances",
        "1",
        "--inject-fault",
        "gradient",
    ]);
    assert_eq!(code(&bad), 3);
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(
        text.lines().any(|l| l.starts_with("FAIL gradients/add")),
        "{text}"
    );
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"seed\": 1,\n  \"sede\": 2\n}\n").unwrap();
    let o = mgflow(&["infer", "--config", cfg.to_str().unwrap(), "--scene-seed", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3:"));
}

#[test]
fn video_and_box_corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("video.json");
    let v = video.to_str().unwrap();
    assert!(
        mgflow(&["gen-data", "video", "--out", v, "--count", "12", "--extent", "128"])
            .status
            .success()
    );
    let o = mgflow(&[
        "infer",
        "--config",
        &desk(),
        "--video",
        v,
        "--no-timings",
        "--answer",
        "20,1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["frames"].as_array().unwrap().len(), 8);
    assert!(report["nll"].as_f64().unwrap() > 0.0);

    let boxes = dir.path().join("boxes");
    let b = boxes.to_str().unwrap();
    assert!(
        mgflow(&["gen-data", "boxes", "--out", b, "--count", "30", "--extent", "128"])
            .status
            .success()
    );
    let csv = dir.path().join("hist.csv");
    let o = mgflow(&["stats", b, "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let hist = std::fs::read_to_string(&csv).unwrap();
    let total: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 30);

    let first = boxes.join("boxes-00001.json");
    let o = mgflow(&[
        "infer",
        "--config",
        &desk(),
        "--boxes",
        first.to_str().unwrap(),
        "--no-timings",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
