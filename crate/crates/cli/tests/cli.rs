use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY_EDGES: &str = "0 1\n1 2\n0 2\n3 4\n4 5\n3 5\n2 3\n";

fn permgnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permgnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = permgnn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn toy_dir() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    fs::write(path.join("edges.txt"), TOY_EDGES).unwrap();
    (dir, path)
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn split_is_byte_reproducible() {
    let (_t, d) = toy_dir();
    for out in ["a.tsv", "b.tsv"] {
        ok(
            &d,
            &[
                "split",
                "--edges",
                "edges.txt",
                "--ratios",
                "0.7",
                "0.1",
                "0.2",
                "--seed",
                "7",
                "--out",
                out,
            ],
        );
    }
    let a = fs::read(d.join("a.tsv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.tsv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("# seed 7"));
    assert!(text.lines().any(|l| l.starts_with("# config ")));
}

#[test]
fn one_bucket_matches_exhaustive_ranking() {
    let (_t, d) = toy_dir();
    ok(
        &d,
        &[
            "split",
            "--edges",
            "edges.txt",
            "--seed",
            "3",
            "--out",
            "split.tsv",
        ],
    );
    let emb: String = (0..6)
        .map(|i| {
            format!(
                "{i}\t{} {} {}\n",
                (i as f64 * 0.7).sin(),
                (i as f64 * 1.3).cos(),
                0.1 * i as f64
            )
        })
        .collect();
    fs::write(d.join("emb.txt"), emb).unwrap();
    let codes: String = (0..6)
        .map(|i| format!("{i}\t{}\n", "+".repeat(16)))
        .collect();
    fs::write(d.join("codes.txt"), codes).unwrap();
    let common = [
        "predict",
        "--edges",
        "edges.txt",
        "--split",
        "split.tsv",
        "--embeddings",
        "emb.txt",
    ];
    let mut none = common.to_vec();
    none.extend(["--hash", "none", "--out", "none.tsv"]);
    ok(&d, &none);
    let mut learned = common.to_vec();
    learned.extend([
        "--hash",
        "learned",
        "--codes",
        "codes.txt",
        "--J",
        "16",
        "--L",
        "1",
        "--out",
        "lsh.tsv",
    ]);
    ok(&d, &learned);
    let (a, b) = (
        data_lines(&d.join("none.tsv")),
        data_lines(&d.join("lsh.tsv")),
    );
    assert!(!a.is_empty());
    assert_eq!(a, b);
    for line in &a {
        assert_eq!(line.split('\t').count(), 4, "{line}");
    }
}

#[test]
fn toy_pipeline_recovers_held_out_edges() {
    let (_t, d) = toy_dir();
    ok(
        &d,
        &[
            "split",
            "--edges",
            "edges.txt",
            "--ratios",
            "0.6",
            "0.2",
            "0.2",
            "--seed",
            "7",
            "--out",
            "split.tsv",
        ],
    );
    let held_out = data_lines(&d.join("split.tsv"))
        .iter()
        .filter(|l| l.contains("\ttest\t") && l.ends_with("\tedge"))
        .count();
    assert!(held_out > 0);
    fs::write(
        d.join("run.cfg"),
        "optimizer = adam\nlr = 0.01\nmargin = 0.5\nbatch_queries = 0\nepochs_max = 200\npatience = 200\n",
    )
    .unwrap();
    ok(
        &d,
        &[
            "train",
            "--config",
            "run.cfg",
            "--edges",
            "edges.txt",
            "--split",
            "split.tsv",
            "--out",
            "model.bin",
            "--trace",
            "trace.csv",
        ],
    );
    assert!(fs::read_to_string(d.join("trace.csv"))
        .unwrap()
        .lines()
        .any(|l| l == "epoch,loss,val_auc,val_ap,seconds"));
    ok(
        &d,
        &[
            "embed",
            "--edges",
            "edges.txt",
            "--split",
            "split.tsv",
            "--model",
            "model.bin",
            "--out",
            "emb.txt",
        ],
    );
    ok(
        &d,
        &[
            "predict",
            "--edges",
            "edges.txt",
            "--split",
            "split.tsv",
            "--embeddings",
            "emb.txt",
            "--hash",
            "none",
            "--out",
            "pred.tsv",
        ],
    );
    for source in [["--embeddings", "emb.txt"], ["--predictions", "pred.tsv"]] {
        let mut args = vec![
            "evaluate",
            "--edges",
            "edges.txt",
            "--split",
            "split.tsv",
            "--out",
            "m.txt",
        ];
        args.extend(source);
        ok(&d, &args);
        let metrics = fs::read_to_string(d.join("m.txt")).unwrap();
        assert!(
            metrics.lines().any(|l| l == "map = 1"),
            "{source:?}: {metrics}"
        );
    }
}

#[test]
fn exit_codes_distinguish_usage_and_validation() {
    let (_t, d) = toy_dir();
    let unknown = permgnn(
        &d,
        &["split", "--edges", "edges.txt", "--out", "s.tsv", "--bogus"],
    );
    assert_eq!(unknown.status.code(), Some(2));
    let bad_ratios = permgnn(
        &d,
        &[
            "split",
            "--edges",
            "edges.txt",
            "--ratios",
            "0.5",
            "0.5",
            "0.5",
            "--out",
            "s.tsv",
        ],
    );
    assert_eq!(bad_ratios.status.code(), Some(1));
    let missing = permgnn(&d, &["split", "--edges", "nope.txt", "--out", "s.tsv"]);
    assert_eq!(missing.status.code(), Some(1));
    fs::write(d.join("bad.cfg"), "margin = -1\n").unwrap();
    let invalid = permgnn(
        &d,
        &[
            "split",
            "--config",
            "bad.cfg",
            "--edges",
            "edges.txt",
            "--out",
            "s.tsv",
        ],
    );
    assert_eq!(invalid.status.code(), Some(1));
}
