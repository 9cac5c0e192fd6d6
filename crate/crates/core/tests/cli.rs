use std::path::Path;
use std::process::{Command, Output};

fn dropnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dropnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn dropnet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn ingest_train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = dropnet(d, &["ingest", "--synthetic", "400", "--vocab-size", "300", "--out", "syn"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let vocab = std::fs::read_to_string(d.join("syn-vocab.txt")).unwrap();
    assert_eq!(vocab.lines().count(), 300);

    let train = [
        "train",
        "--data.train_images=syn-features.idx",
        "--data.train_labels=syn-labels.idx",
        "--data.test_images=syn-features.idx",
        "--data.test_labels=syn-labels.idx",
        "--net.layers=30,5",
        "--epochs=4",
        "--eval_every=2",
        "--optimizer.eps0=1",
        "--data.standardize=true",
        "--metrics.wallclock=false",
        "--output.metrics=runs/m.csv",
        "--output.checkpoint=runs/n.ckpt",
    ];
    let out = dropnet(d, &train);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("runs/m.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,lr,momentum,train_xent,train_err,test_err,wallclock_s");
    assert_eq!(rows.len(), 5);
    // test_err only on evaluated epochs
    assert_eq!(rows[1].split(',').nth(5), Some(""));
    assert_ne!(rows[2].split(',').nth(5), Some(""));

    let out = dropnet(
        d,
        &["eval", "--checkpoint", "runs/n.ckpt", "--images", "syn-features.idx", "--labels", "syn-labels.idx"],
    );
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("cases=400"));

    let out = dropnet(
        d,
        &["export-features", "--checkpoint", "runs/n.ckpt", "--tile", "15x20", "--out", "f.pgm"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read(d.join("f.pgm")).unwrap().starts_with(b"P5\n"));
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&dropnet(d, &["train", "--no.such.key=1"])), 2);
    assert_eq!(code(&dropnet(d, &["train", "--epochs=ten"])), 2);
    std::fs::write(d.join("bad.idx"), [0u8, 0, 8, 9, 0, 0, 0, 0]).unwrap();
    let out = dropnet(
        d,
        &["train", "--data.train_images=bad.idx", "--data.train_labels=bad.idx", "--net.layers=4,2"],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset 0"));
    assert_eq!(code(&dropnet(d, &["eval", "--checkpoint", "missing", "--images", "a", "--labels", "b"])), 3);
}

#[test]
fn oracle_commands_pass_and_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = dropnet(
        d,
        &[
            "oracle-check",
            "--equivalence-trials",
            "5",
            "--max-units",
            "6",
            "--logprob-trials",
            "20",
            "--regression-trials",
            "20",
            "--out",
            "o.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(d.join("o.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("pass")));
    assert_eq!(code(&dropnet(d, &["gradcheck", "--archs", "3"])), 0);
    assert_eq!(code(&dropnet(d, &["oracle-check", "--max-units", "40"])), 2);
}
