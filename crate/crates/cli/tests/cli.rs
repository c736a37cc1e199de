use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_shrdlurn"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "datagen",
        "--seed",
        "2",
        "--out",
        p(&data),
        "--train",
        "300",
        "--val",
        "50",
        "--test",
        "50",
    ]);
    assert!(out.contains("300 / 50 / 50"), "{out}");

    let ckpt = dir.path().join("m.json");
    let out = run(&[
        "train",
        "--data",
        p(&data),
        "--arch",
        "bow2seq",
        "--hidden",
        "8",
        "--max-steps",
        "20",
        "--eval-every",
        "10",
        "--out",
        p(&ckpt),
    ]);
    assert!(out.contains("bow2seq"), "{out}");
    let out = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "test"]);
    assert!(out.contains("50 examples"), "{out}");

    let sessions = dir.path().join("rec.jsonl");
    let out = run(&[
        "sessions",
        "recovery",
        "--seed",
        "2",
        "--condition",
        "1",
        "--out",
        p(&sessions),
    ]);
    assert!(out.contains("wrote 7 sessions"), "{out}");
    let out = run(&[
        "adapt",
        "--ckpt",
        p(&ckpt),
        "--sessions",
        p(&sessions),
        "--k",
        "2",
        "--steps",
        "2",
    ]);
    assert_eq!(out.lines().count(), 7);

    let out = run(&[
        "analyze",
        "embeddings",
        "--ckpt",
        p(&ckpt),
        "--sessions",
        p(&sessions),
        "--k",
        "1",
        "--steps",
        "2",
    ]);
    assert!(out.lines().count() >= 2, "{out}");

    let dialects = dir.path().join("dialect.jsonl");
    run(&["sessions", "dialect", "--count", "4", "--out", p(&dialects)]);
    let report = dir.path().join("human.json");
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"optimizers":["adam"],"steps":[1],"l2":[0.0],"lr":[0.01],"selection":["greedy"]}"#,
    )
    .unwrap();
    let out = run(&[
        "bench",
        "human",
        "--ckpt",
        p(&ckpt),
        "--sessions",
        p(&dialects),
        "--validation",
        "1",
        "--grid",
        p(&grid),
        "--out",
        p(&report),
    ]);
    assert_eq!(
        out.lines()
            .filter(|l| l.contains("embeddings") || l.contains("encoder") || l.contains(" all"))
            .count(),
        6,
        "{out}"
    );
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 6);
}

#[test]
fn rejects_invalid_scope_pair() {
    let out = Command::new(env!("CARGO_BIN_EXE_shrdlurn"))
        .args([
            "adapt",
            "--ckpt",
            "missing.json",
            "--sessions",
            "x",
            "--reuse",
            "none",
            "--adapt",
            "embeddings",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
