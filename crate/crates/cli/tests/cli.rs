use std::path::Path;
use std::process::{Command, Output};

fn gcdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcdlab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn metric_values_match_library() {
    let o = gcdlab(&["metric", "--pred", "0,0,2,2", "--gt", "0,0,2,2", "--metric", "gcd"]);
    assert!(o.status.success());
    assert_eq!(json(&o)["value"], 1.0);

    let o = gcdlab(&["metric", "--pred", "0,0,2,2", "--gt", "1,0,2,2", "--metric", "gcd"]);
    let v = json(&o);
    assert_eq!(v["value"], (-0.5f64).exp());
    assert_eq!(v["distance"], 0.25);

    let o = gcdlab(&["metric", "--pred", "2,2,4,4", "--gt", "3,2,4,4", "--metric", "iou"]);
    let v = json(&o);
    assert_eq!(v["value"], 0.6);
    assert!(v.get("distance").is_none());

    let o = gcdlab(&["metric", "--pred", "0,0,2,2", "--gt", "1,0,2,2", "--metric", "nwd", "--nwd-c", "1"]);
    assert_eq!(json(&o)["value"], (-1f64).exp());
}

#[test]
fn metric_rejects_bad_boxes() {
    let o = gcdlab(&["metric", "--pred", "0,0,0,2", "--gt", "0,0,2,2"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("width"), "{err}");

    let o = gcdlab(&["metric", "--pred", "0,0,2", "--gt", "0,0,2,2"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gcdlab(&["metric", "--pred", "0,0,2,2", "--gt", "0,0,2,2", "--metric", "ciou"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gcdlab(&["metric", "--pred", "0,0,2,2", "--gt", "0,0,2,2", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gcdlab(&["metric", "--pred", "0,0,2,2", "--gt", "0,0,2,2", "--nwd-c", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let o = gcdlab(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("gradcheck"));
}

#[test]
fn sweep_csv() {
    let o = gcdlab(&["sweep", "--sizes", "4,32", "--offsets", "0,1", "--metrics", "iou,gcd", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "size,offset,iou,gcd");
    assert_eq!(lines[2], format!("4.0,1.0,0.6,{:?}", (-0.25f64).exp()));
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["sweep", "--format", "svg"],
        &["sweep", "--format", "json"],
        &["regress", "--init", "0,0,2,2", "--target", "1,0,2,2", "--steps", "50", "--format", "svg"],
        &["assign", "--seed", "9", "--metric", "nwd", "--format", "csv"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let paths: Vec<_> = (0..2).map(|k| dir.path().join(format!("{i}-{k}"))).collect();
        for p in &paths {
            let mut full: Vec<&str> = args.to_vec();
            full.extend(["--out", p.to_str().unwrap()]);
            assert!(gcdlab(&full).status.success(), "{args:?}");
        }
        let a = std::fs::read(&paths[0]).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(&paths[1]).unwrap(), "{args:?}");
    }
}

#[test]
fn regress_trace_and_config_file() {
    let o = gcdlab(&["regress", "--init", "0,0,2,2", "--target", "1,0,2,2", "--steps", "3", "--format", "csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 5);

    let o = gcdlab(&["regress", "--init", "0,0,2,2", "--target", "1,0,2,2", "--format", "json"]);
    let v = json(&o);
    assert_eq!(v["records"].as_array().unwrap().len(), 2001);
    assert!(v["final_error"].as_f64().unwrap() < 1e-3);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"init": {"cx": 0, "cy": 0, "w": 2, "h": 2}, "target": {"cx": 1, "cy": 0, "w": 2, "h": 2},
            "loss_kind": "wd", "learning_rate": 0.05, "steps": 10, "parametrization": "direct"}"#,
    )
    .unwrap();
    let o = gcdlab(&["regress", "--config", cfg.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 12);

    std::fs::write(&cfg, r#"{"init": {"cx": 0, "cy": 0, "w": 0, "h": 2}}"#).unwrap();
    let o = gcdlab(&["regress", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = gcdlab(&["regress", "--init", "0,0,2,2"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gcdlab(&["regress", "--init", "0,0,2,2", "--target", "1,0,2,2", "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_coco(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("coco.json");
    std::fs::write(
        &path,
        r#"{"images": [{"id": 1, "width": 32, "height": 32}],
            "annotations": [
              {"image_id": 1, "category_id": 1, "bbox": [2, 2, 4, 4]},
              {"image_id": 1, "category_id": 1, "bbox": [10, 10, 16, 16]}
            ]}"#,
    )
    .unwrap();
    path
}

#[test]
fn stats_on_two_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let coco = write_coco(dir.path());
    let o = gcdlab(&["stats", "--coco", coco.to_str().unwrap()]);
    assert!(o.status.success());
    let v = json(&o);
    assert_eq!(v["mean_size"], 10.0);
    assert_eq!(v["total"], 2);
    assert_eq!(v["buckets"][0]["count"], 1);
    assert_eq!(v["buckets"][2]["count"], 1);

    let o = gcdlab(&["stats", "--coco", coco.to_str().unwrap(), "--buckets", "8-16,2-8"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gcdlab(&["stats", "--coco", "/does/not/exist.json"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"images": [], "annotations": [{"image_id": 3, "category_id": 1, "bbox": [0,0,1,1]}]}"#).unwrap();
    let o = gcdlab(&["stats", "--coco", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown image id 3"));
}

#[test]
fn assign_on_coco_file() {
    let dir = tempfile::tempdir().unwrap();
    let coco = write_coco(dir.path());
    let o = gcdlab(&["assign", "--coco", coco.to_str().unwrap(), "--metric", "gcd", "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    // 4×4 grid cells × 1 scale × 3 ratios
    assert_eq!(v["num_anchors"], 48);
    assert_eq!(v["num_gts"], 2);
    let total = v["num_positive"].as_u64().unwrap() + v["num_negative"].as_u64().unwrap() + v["num_ignore"].as_u64().unwrap();
    assert_eq!(total, 48);

    let o = gcdlab(&["assign", "--pos", "0.2", "--neg", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gcdlab(&["assign", "--format", "svg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_fails_loudly() {
    let o = gcdlab(&["gradcheck", "--trials", "1000", "--seed", "7"]);
    assert!(o.status.success());
    let v = json(&o);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-5);
    assert_eq!(v["passed"], true);

    let o = gcdlab(&["gradcheck", "--trials", "20", "--seed", "7", "--tol", "0", "--abs-floor", "0"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("worst") && err.contains("pred"), "{err}");
}
