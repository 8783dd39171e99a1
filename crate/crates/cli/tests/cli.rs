use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn splatsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatsem"))
        .args(args)
        .env_remove("SPLATSEM_THREADS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_scene(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    json(&splatsem(&[
        "synth", "--out", p(&data), "--preset", "grid", "--objects", "2", "--gaussians", "300", "--views", "4",
        "--seed", "5",
    ]));
    data
}

#[test]
fn synth_distill_query_eval_edit() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scene(dir.path());
    let art = dir.path().join("art");

    let report = json(&splatsem(&["distill", "--data", p(&data), "--out", p(&art), "--dump-contributions"]));
    assert_eq!(report["clusters"].as_array().unwrap().len(), 2);
    assert_eq!(report["index_field_bytes_per_gaussian"], 2.0);
    assert!(report["hashes"]["scene.ply"].is_string());
    assert!(art.join("contributions/0.spcw").exists());

    let queries = data.join("queries_objects.json");
    let renders = dir.path().join("renders");
    let q = json(&splatsem(&[
        "query", "--artifacts", p(&art), "--queries", p(&queries), "--data", p(&data), "--render-dir", p(&renders),
    ]));
    let results = q["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["gaussian_count"], 300);
    assert!(results[0]["wall_time_us"].is_number());
    assert!(renders.join("object_0_0.png").exists());

    let out = dir.path().join("eval.json");
    let status = splatsem(&["eval", "--data", p(&data), "--artifacts", p(&art), "--queries", p(&queries), "--out", p(&out)]);
    assert!(status.status.success());
    let e: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(e["metrics"]["miou"], 1.0);
    assert!(e["config"]["thresholds"].is_object());

    let labels = data.join("queries_labels.json");
    let e = json(&splatsem(&["eval", "--data", p(&data), "--artifacts", p(&art), "--queries", p(&labels)]));
    assert_eq!(e["metrics"]["miou_3d"], 1.0);

    let same = dir.path().join("same.ply");
    json(&splatsem(&[
        "edit", "--scene", p(&data.join("scene.ply")), "--artifacts", p(&art), "--queries", p(&queries), "--query",
        "object_1", "--enlarge", "1", "--out", p(&same),
    ]));
    assert_eq!(std::fs::read(&same).unwrap(), std::fs::read(data.join("scene.ply")).unwrap());

    let d = json(&splatsem(&["dump", p(&art.join("clusters.spcl"))]));
    assert_eq!(d["magic"], "SPCL");
    assert_eq!(d["distinct_values"], 2);
}

#[test]
fn thresholds_flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scene(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"thresholds": {"contrib": 0.09, "noise": 450, "iou": 0.5, "feat": 0.8}}"#).unwrap();
    let r = json(&splatsem(&[
        "distill", "--data", p(&data), "--out", p(&dir.path().join("a")), "--config", p(&cfg), "--noise", "10",
    ]));
    assert_eq!(r["config"]["thresholds"]["contrib"], 0.09);
    assert_eq!(r["config"]["thresholds"]["noise"], 10);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"thresholds": {"contrib": 2.0, "noise": 1, "iou": 0.5, "feat": 0.5}}"#).unwrap();
    let out = splatsem(&["distill", "--data", p(dir.path()), "--out", p(&dir.path().join("a")), "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(splatsem(&["distill", "--bogus"]).status.code(), Some(2));

    let junk = dir.path().join("junk.spix");
    std::fs::write(&junk, b"NOPE").unwrap();
    assert_eq!(splatsem(&["dump", p(&junk)]).status.code(), Some(3));

    let truncated = dir.path().join("t.spix");
    std::fs::write(&truncated, b"SPIX\x05\x00\x00\x00\x01\x00").unwrap();
    assert_eq!(splatsem(&["dump", p(&truncated)]).status.code(), Some(3));
}
