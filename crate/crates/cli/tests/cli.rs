use std::path::Path;
use std::process::{Command, Output};

fn hbrnorm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbrnorm"))
        .args(args)
        .current_dir(dir)
        .env("HBRNORM_JOBS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn simulate_fit_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("gen.toml"),
        "sites = 5\nrows_per_site = [40]\nunits = 2\n",
    )
    .unwrap();
    ok(&hbrnorm(
        &[
            "simulate",
            "--config",
            "gen.toml",
            "--seed",
            "3",
            "--out",
            "all.csv",
            "--schema-out",
            "schema.txt",
        ],
        d,
    ));

    // Every fourth row is held out.
    let text = std::fs::read_to_string(d.join("all.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let (mut train, mut test) = (vec![header], vec![header]);
    for (i, l) in lines.enumerate() {
        if i % 4 == 0 {
            test.push(l)
        } else {
            train.push(l)
        }
    }
    std::fs::write(d.join("train.csv"), train.join("\n")).unwrap();
    std::fs::write(d.join("test.csv"), test.join("\n")).unwrap();

    let fit = hbrnorm(
        &[
            "fit",
            "--data",
            "train.csv",
            "--schema",
            "schema.txt",
            "--strategy",
            "hbr",
            "--warmup",
            "500",
            "--draws",
            "500",
            "--seed",
            "1",
            "--out",
            "model.hbr",
        ],
        d,
    );
    ok(&fit);
    assert!(String::from_utf8_lossy(&fit.stderr).contains("seed: 1"));
    ok(&hbrnorm(
        &[
            "score",
            "--model",
            "model.hbr",
            "--data",
            "test.csv",
            "--schema",
            "schema.txt",
            "--out",
            "z.csv",
        ],
        d,
    ));

    let scores = std::fs::read_to_string(d.join("z.csv")).unwrap();
    let head: Vec<&str> = scores.lines().next().unwrap().split(',').collect();
    for unit in ["unit_000", "unit_001"] {
        for col in ["mean", "sd", "z", "p"] {
            assert!(
                head.contains(&format!("{unit}_{col}").as_str()),
                "missing {unit}_{col} in {head:?}"
            );
        }
    }
    assert_eq!(scores.lines().count(), test.len());

    // Same inputs and seed give the same bytes.
    ok(&hbrnorm(
        &[
            "fit",
            "--data",
            "train.csv",
            "--schema",
            "schema.txt",
            "--strategy",
            "hbr",
            "--warmup",
            "500",
            "--draws",
            "500",
            "--seed",
            "1",
            "--out",
            "again.hbr",
        ],
        d,
    ));
    assert_eq!(
        std::fs::read(d.join("model.hbr")).unwrap(),
        std::fs::read(d.join("again.hbr")).unwrap()
    );
}

#[test]
fn single_row_batch_is_a_degenerate_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("id,age,site,y\n");
    for i in 0..12 {
        csv += &format!("a{i},{},A,{}\n", 20 + i, 1.0 + 0.1 * i as f64);
    }
    csv += "b0,40,B,2.5\n";
    std::fs::write(d.join("data.csv"), csv).unwrap();
    std::fs::write(
        d.join("schema.txt"),
        "subject=id\ncovariates=age\nresponses=y\nbatches=site\n",
    )
    .unwrap();
    let out = hbrnorm(
        &[
            "fit",
            "--data",
            "data.csv",
            "--schema",
            "schema.txt",
            "--strategy",
            "nopool",
            "--warmup",
            "50",
            "--draws",
            "50",
            "--out",
            "m.hbr",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(12));
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error[12:degenerate-data]: "), "{err}");
    assert!(!d.join("m.hbr").exists());
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hbrnorm(
        &["distill", "--model", "nope.hbr", "--out", "p.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[10:io]: "));
}
