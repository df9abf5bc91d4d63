//! End-to-end CLI exercise against the compiled binary: generate, split,
//! train, eval, report, and the documented exit codes.

use std::path::Path;
use std::process::Command;

fn hiptune() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hiptune"))
}

#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // generate
    let out = hiptune()
        .args(["generate", "--identities", "3", "--frames", "1", "--size", "32"])
        .args(["--seed", "11", "--out"])
        .arg(root.join("data"))
        .arg("--export-png")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("data/taxonomy.json").exists());
    assert!(root.join("data/manifest.txt").exists());
    assert!(root.join("data/samples/000000.bin").exists());
    assert!(root.join("data/samples/000000.png").exists());

    // split
    let out = hiptune()
        .args(["split", "--protocol", "p2", "--seed", "3", "--data"])
        .arg(root.join("data"))
        .arg("--out")
        .arg(root.join("splits/p2.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // train (tiny budget)
    let config = format!(
        r#"
[data]
dir = "{data}"
split = "{split}"

[training]
seed = 5
pretrain_epochs = 1
stage1_epochs = 1
stage2_epochs = 1
batch_size = 16

[output]
checkpoint = "{ckpt}"
loss_trace = "{trace}"
"#,
        data = root.join("data").display(),
        split = root.join("splits/p2.json").display(),
        ckpt = root.join("runs/ckpt.bin").display(),
        trace = root.join("runs/trace.tsv").display(),
    );
    std::fs::create_dir_all(root.join("runs")).unwrap();
    std::fs::write(root.join("run.toml"), config).unwrap();
    let out = hiptune()
        .args(["train", "--stage", "all", "--config"])
        .arg(root.join("run.toml"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("runs/ckpt.bin").exists());
    let trace = std::fs::read_to_string(root.join("runs/trace.tsv")).unwrap();
    assert!(trace.lines().any(|l| l.contains("stage2\ttotal")));

    // eval
    let out = hiptune()
        .args(["eval", "--comparator", "hiptune", "--checkpoint"])
        .arg(root.join("runs/ckpt.bin"))
        .arg("--split")
        .arg(root.join("splits/p2.json"))
        .arg("--data")
        .arg(root.join("data"))
        .arg("--out")
        .arg(root.join("reports/hiptune.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("hiptune"), "missing table row: {stdout}");

    // report over the stored JSON
    for format in ["text", "csv", "json"] {
        let out = hiptune()
            .args(["report", "--format", format, "--inputs"])
            .arg(root.join("reports/hiptune.json"))
            .output()
            .unwrap();
        assert!(out.status.success());
        assert!(!out.stdout.is_empty());
    }

    exit_code_cases(root);
}

fn exit_code_cases(root: &Path) {
    // Unknown protocol: configuration error -> 2.
    let out = hiptune()
        .args(["split", "--protocol", "p9", "--seed", "1", "--data"])
        .arg(root.join("data"))
        .arg("--out")
        .arg(root.join("splits/bad.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Config validation failure -> 2.
    std::fs::write(root.join("bad.toml"), "[model]\nimage_size = 33\n").unwrap();
    let out = hiptune()
        .args(["train", "--stage", "all", "--config"])
        .arg(root.join("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Runtime failure (missing checkpoint file) -> 1.
    let out = hiptune()
        .args(["eval", "--comparator", "hiptune", "--checkpoint"])
        .arg(root.join("missing.bin"))
        .arg("--split")
        .arg(root.join("splits/p2.json"))
        .arg("--data")
        .arg(root.join("data"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
