use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rsgn_core::checkpoint;
use rsgn_core::dataset::{load_mask, Manifest, Split};
use rsgn_core::model::param_count;
use rsgn_core::{ArchConfig, RsgnParams};

fn rsgn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsgn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        stderr(&o)
    );
    o
}

/// Small synthetic set: 6 images of 64×64.
fn small_data(dir: &Path) {
    ok(rsgn(
        &["synth", "--out", "data", "--n-images", "6", "--extent", "64"],
        dir,
    ));
}

const TINY: &[&str] = &[
    "--manifest",
    "data/manifest.tsv",
    "--c1",
    "4",
    "--c2",
    "8",
    "--c3",
    "8",
    "--ppm-out",
    "8",
    "--patch-size",
    "32",
    "--batch-size",
    "2",
    "--val-patches",
    "2",
    "--steps-per-epoch",
    "1",
    "--tile",
    "32",
    "--overlap",
    "8",
    "--n-pairs",
    "50",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn synth_default_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(rsgn(&["synth", "--out", "a"], tmp.path()));
    assert!(stdout(&o).contains("digest "));
    ok(rsgn(&["synth", "--out", "b"], tmp.path()));
    let m = Manifest::read(&tmp.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(m.records.len(), 20);
    assert_eq!(m.split(Split::Train).count(), 10);
    assert_eq!(m.split(Split::Test).count(), 10);
    for sub in [
        "manifest.tsv",
        "images/synth_000.ppm",
        "gt/synth_019.pgm",
        "fov/synth_007.pgm",
    ] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(sub)).unwrap(),
            fs::read(tmp.path().join("b").join(sub)).unwrap(),
            "{sub}"
        );
    }
    for r in &m.records {
        let gt = load_mask(&m.resolve(&r.gt)).unwrap();
        assert_eq!((gt.width(), gt.height()), (128, 128));
        let fraction = gt.count() as f64 / (128.0 * 128.0);
        assert!((0.02..=0.20).contains(&fraction), "{}: {fraction}", r.id);
    }
}

#[test]
fn oracle_evaluation_is_perfect_and_csv_is_well_formed() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    ok(rsgn(
        &[
            "eval",
            "--oracle",
            "--manifest",
            "data/manifest.tsv",
            "--out",
            "ev",
            "--n-pairs",
            "200",
        ],
        tmp.path(),
    ));
    let (header, rows) = read_csv(&tmp.path().join("ev/metrics.csv"));
    assert_eq!(header.join(","), "id,auc,se,sp,cor,inf,wrn,otsu_k,n_pairs,seed");
    assert_eq!(rows.len(), 3 + 1);
    for row in &rows {
        assert_eq!(row.len(), 10);
        assert_eq!(&row[1..7], ["1", "1", "1", "100", "0", "0"]);
    }
    assert_eq!(rows.last().unwrap()[0], "mean");
    let text = fs::read_to_string(tmp.path().join("ev/metrics.csv")).unwrap();
    assert!(text.starts_with("id,auc,se,sp,cor,inf,wrn,otsu_k,n_pairs,seed\n"));
    let test_ids: Vec<String> = Manifest::read(&tmp.path().join("data/manifest.tsv"))
        .unwrap()
        .split(Split::Test)
        .map(|r| r.id.clone())
        .collect();
    assert_eq!(rows[..3].iter().map(|r| r[0].clone()).collect::<Vec<_>>(), test_ids);
    for id in &test_ids {
        assert!(tmp.path().join(format!("ev/maps/{id}.pgm")).is_file());
        assert!(tmp.path().join(format!("ev/masks/{id}.pgm")).is_file());
    }
}

#[test]
fn zero_epochs_writes_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    let args = with(
        &[
            "train",
            "--out",
            "t",
            "--stage1-epochs",
            "0",
            "--stage2-epochs",
            "0",
            "--seed",
            "11",
        ],
        TINY,
    );
    ok(rsgn(&args, tmp.path()));
    let params = checkpoint::load(&tmp.path().join("t/model.rsgn")).unwrap();
    let arch = ArchConfig {
        in_channels: 4,
        widths: [4, 8, 8],
        ppm_out: 8,
        semantics_guided: true,
    };
    assert_eq!(params, RsgnParams::init(&arch, 11).unwrap());
    assert_eq!(fs::read_to_string(tmp.path().join("t/train.log")).unwrap(), "");
}

#[test]
fn train_then_eval_and_infer() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    let mut args = vec!["train", "--out", "run", "--stage1-epochs", "2", "--stage2-epochs", "1"];
    args.extend(TINY);
    let o = ok(rsgn(&args, tmp.path()));
    let log = fs::read_to_string(tmp.path().join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().last().unwrap().starts_with("3\t2\t3\t"));
    assert!(stdout(&o).contains(&log));

    let mut args = vec!["eval", "--out", "run"];
    args.extend(TINY);
    ok(rsgn(&args, tmp.path()));
    let (_, rows) = read_csv(&tmp.path().join("run/metrics.csv"));
    let (images, mean) = rows.split_at(rows.len() - 1);
    for col in [1, 2, 3, 4, 5, 6, 8] {
        let values: Vec<f64> = images
            .iter()
            .filter(|r| !r[col].is_empty())
            .map(|r| r[col].parse().unwrap())
            .collect();
        let expected = values.iter().sum::<f64>() / values.len() as f64;
        let got: f64 = mean[0][col].parse().unwrap();
        assert!(
            (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            "column {col}: {got} vs {expected}"
        );
    }
    for (i, r) in images.iter().enumerate() {
        assert_eq!(r[9], (7u64 ^ i as u64).to_string());
    }

    let mut args = vec![
        "infer",
        "--out",
        "single",
        "--checkpoint",
        "run/model.rsgn",
        "--image",
        "data/images/synth_001.ppm",
    ];
    args.extend(&TINY[2..]);
    ok(rsgn(&args, tmp.path()));
    assert!(tmp.path().join("single/synth_001_prob.pgm").is_file());
    assert!(tmp.path().join("single/synth_001_seg.pgm").is_file());

    // a configuration naming another architecture is refused
    let mut args = vec!["eval", "--out", "run", "--manifest", "data/manifest.tsv", "--c1", "8"];
    args.extend(&TINY[4..]);
    let o = rsgn(&args, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c1"), "{}", stderr(&o));
}

#[test]
fn ablation_grid_has_four_distinct_legs() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    let mut args = vec![
        "ablate",
        "--out",
        "abl",
        "--stage1-epochs",
        "1",
        "--stage2-epochs",
        "1",
        "--ablate-seeds",
        "3",
    ];
    args.extend(TINY);
    let o = ok(rsgn(&args, tmp.path()));
    for leg in ["baseline", "method-a", "method-b", "method-c"] {
        assert!(
            tmp.path().join(format!("abl/{leg}/seed-3/metrics.csv")).is_file(),
            "{leg}"
        );
        assert!(stdout(&o).contains(leg));
    }
    let (header, rows) = read_csv(&tmp.path().join("abl/ablation.csv"));
    assert_eq!(header[..4], ["leg", "semantics_guided", "iterations", "param_count"]);
    let legs: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(legs, ["baseline", "method-a", "method-b", "method-c"]);
    let count = |i: usize| rows[i][3].parse::<usize>().unwrap();
    assert!(count(0) < count(1));
    assert_eq!(count(1), count(3));
    assert_eq!(count(0), count(2));
    assert_eq!(
        rows.iter().map(|r| r[2].as_str()).collect::<Vec<_>>(),
        ["1", "1", "3", "3"]
    );
    let arch = |g| ArchConfig {
        in_channels: 4,
        widths: [4, 8, 8],
        ppm_out: 8,
        semantics_guided: g,
    };
    assert_eq!(count(0), param_count(&arch(false)));
    assert_eq!(count(3), param_count(&arch(true)));
}

#[test]
fn gradcheck_reports_every_op_once_and_catches_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(rsgn(&["gradcheck"], tmp.path()));
    let text = stdout(&o);
    for op in rsgn_core::autodiff::OpKind::DIFFERENTIABLE {
        let lines = text
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(op.name()))
            .count();
        assert_eq!(lines, 1, "{}", op.name());
    }
    assert!(text.lines().any(|l| l.starts_with("network ") && l.ends_with("PASS")));
    assert!(!text.contains("FAIL"));

    let o = rsgn(&["gradcheck", "--fault", "conv_transpose2d"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("conv_transpose2d"));
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("conv_transpose2d") && l.ends_with("FAIL")));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rsgn(&["train", "--manifest", "missing/manifest.tsv"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing/manifest.tsv"));

    fs::write(tmp.path().join("bad.cfg"), "c1 = 8\nlearning_rate = 1\n").unwrap();
    let o = rsgn(&["train", "--config", "bad.cfg"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    small_data(tmp.path());
    let o = rsgn(
        &["train", "--patch-size", "30", "--manifest", "data/manifest.tsv"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("patch"));

    let o = rsgn(&["train"], tmp.path());
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_rsgn"))
        .args(["synth", "--out", "s"])
        .env("RSGN_THREADS", "zero")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    fs::write(
        tmp.path().join("run.cfg"),
        "manifest = data/manifest.tsv\nstage1_epochs = 5\nstage2_epochs = 0\nout = t\n",
    )
    .unwrap();
    let mut args = vec!["train", "--config", "run.cfg", "--stage1-epochs", "1"];
    args.extend(&TINY[2..]);
    ok(rsgn(&args, tmp.path()));
    assert_eq!(
        fs::read_to_string(tmp.path().join("t/train.log"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    let resolved = fs::read_to_string(tmp.path().join("t/run.cfg")).unwrap();
    assert!(resolved.contains("stage1_epochs = 1\n"));
    assert!(resolved.starts_with("# digest "));
}
