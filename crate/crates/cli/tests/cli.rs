use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "world.n_images=400",
    "world.n_voxels=24",
    "train.epochs=2",
    "attribution.patch_ks=[0,4,8]",
    "stats.necessity_ks=[4,8]",
];

fn mine(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mine"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("MINE_OUT")
        .output()
        .expect("binary runs")
}

fn small(out: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    mine(out, &args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed:\n{}", stderr(&o));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn attribute_before_train_names_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    ok(small(dir.path(), "world-gen", &[]));
    let o = small(dir.path(), "attribute", &[]);
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    assert!(msg.contains("checkpoint.bin"), "{msg}");
    assert!(msg.contains("`train`"), "{msg}");
    assert!(!dir.path().join("attribute").exists());
}

#[test]
fn validation_lists_every_bad_path() {
    let dir = TempDir::new().unwrap();
    let o = mine(
        dir.path(),
        &["world-gen", "attribution.k_top=0", "counterfactual.q_lo=0.95"],
    );
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("attribution.k_top"), "{msg}");
    assert!(msg.contains("counterfactual.q_lo"), "{msg}");
    assert!(!dir.path().join("world").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let o = mine(dir.path(), &["world-gen", "train.epoch=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"world": {"n_images": 300, "n_voxels": 10}, "seed": 5}"#).unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_mine"))
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["world-gen", "world.n_voxels=12"])
        .output()
        .unwrap();
    ok(o);
    let w = json(&out.join("world/world.json"));
    assert_eq!(w["seed"], 5);
    assert_eq!(w["voxels"].as_array().unwrap().len(), 12);
    let responses = std::fs::read_to_string(out.join("world/responses.csv")).unwrap();
    assert_eq!(responses.lines().next(), Some("image_id,voxel_id,rep_index,response"));
    assert_eq!(w["config"]["n_images"], 300);
}

#[test]
fn seed_flag_reaches_every_stream() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(small(&a, "world-gen", &[]));
    ok(mine(&b, &[&["--seed", "99", "world-gen"][..], SMALL].concat()));
    let (wa, wb) = (json(&a.join("world/world.json")), json(&b.join("world/world.json")));
    assert_eq!(wb["seed"], 99);
    assert_ne!(wa["config_hash"], wb["config_hash"]);
    assert_ne!(
        std::fs::read(a.join("world/tokens.bin")).unwrap(),
        std::fs::read(b.join("world/tokens.bin")).unwrap()
    );
}

#[test]
fn current_stages_are_skipped_and_changes_are_detected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(small(d, "world-gen", &[]));
    ok(small(d, "train", &[]));
    let again = ok(small(d, "train", &[]));
    assert!(stderr(&again).contains("train: up to date"), "{}", stderr(&again));

    // A different training config makes the checkpoint stale for eval.
    let o = small(d, "eval", &["train.epochs=1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));

    // So does a modified upstream output.
    let tokens = d.join("world/tokens.bin");
    let mut bytes = std::fs::read(&tokens).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&tokens, bytes).unwrap();
    let o = small(d, "train", &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("world-gen"), "{}", stderr(&o));

    // Regenerating restores identical bytes, so the checkpoint is current again.
    let o = ok(small(d, "world-gen", &[]));
    assert!(stderr(&o).contains("world-gen: done"), "{}", stderr(&o));
    let o = ok(small(d, "train", &[]));
    assert!(stderr(&o).contains("train: up to date"), "{}", stderr(&o));
}

fn line_count(path: &Path) -> u64 {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count() as u64
}

#[test]
fn full_run_is_annotated_counted_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(small(&a, "run", &[]));
    ok(mine(&b, &[&["--workers", "2", "run"][..], SMALL].concat()));

    let report_a = std::fs::read(a.join("report/report.json")).unwrap();
    let report_b = std::fs::read(b.join("report/report.json")).unwrap();
    assert!(report_a == report_b, "reports differ between runs");
    for csv in ["activations.csv", "faithfulness.csv", "edit_deltas.csv", "reconstruction_errors.csv"] {
        assert_eq!(
            std::fs::read(a.join("report").join(csv)).unwrap(),
            std::fs::read(b.join("report").join(csv)).unwrap(),
            "{csv}"
        );
    }

    let report = json(&a.join("report/report.json"));
    let hash = report["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(report["seed"], 17);
    for entry in std::fs::read_dir(&a).unwrap() {
        let stage = entry.unwrap().path();
        for file in std::fs::read_dir(&stage).unwrap() {
            let p = file.unwrap().path();
            if p.extension().is_some_and(|e| e == "json") && p.file_name().unwrap() != "manifest.json" {
                let v = json(&p);
                assert_eq!(v["config_hash"].as_str(), Some(hash.as_str()), "{}", p.display());
                assert_eq!(v["seed"], 17, "{}", p.display());
            }
        }
        let m = json(&stage.join("manifest.json"));
        assert_eq!(m["config_hash"].as_str(), Some(hash.as_str()));
    }

    let counts = report["counts"].as_object().unwrap();
    assert!(!counts.is_empty());
    for (file, by_label) in counts {
        let total = by_label["total"].as_u64().unwrap();
        assert_eq!(total, line_count(&a.join(file)), "{file}");
        let parts: u64 = by_label
            .as_object()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.as_str() != "total")
            .map(|(_, v)| v.as_u64().unwrap())
            .sum();
        assert_eq!(parts, total, "{file}");
    }

    let tests = report["tests"].as_array().unwrap();
    let names: Vec<&str> = tests.iter().map(|t| t["name"].as_str().unwrap()).collect();
    for n in ["necessity_k4", "necessity_k8", "reconstruction", "discriminability", "edit_direction", "faithfulness", "profile"] {
        assert!(names.contains(&n), "missing test {n}: {names:?}");
    }

    // Rerunning everything reuses every stage.
    let o = ok(small(&a, "run", &[]));
    assert_eq!(stderr(&o).matches("up to date").count(), 12, "{}", stderr(&o));
}

#[test]
fn later_stages_refuse_ingested_data() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("src");
    ok(small(&src, "world-gen", &[]));
    let out = dir.path().join("ingest");
    let tokens = format!("data.tokens=\"{}\"", src.join("world/tokens.bin").display());
    let responses = format!("data.responses=\"{}\"", src.join("world/responses.csv").display());
    for stage in ["world-gen", "train", "eval", "attribute"] {
        ok(small(&out, stage, &[&tokens, &responses]));
    }
    assert_eq!(
        std::fs::read(src.join("world/tokens.bin")).unwrap(),
        std::fs::read(out.join("world/tokens.bin")).unwrap()
    );
    let o = small(&out, "decode", &[&tokens, &responses]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.tokens"), "{}", stderr(&o));
}
