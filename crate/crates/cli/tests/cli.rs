use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cram_core::losses::LossReport;

const SMALL: &[&str] = &[
    "--glimpses",
    "2",
    "--glimpse-size",
    "8",
    "--hidden",
    "32",
    "--z-dim",
    "16",
    "--gv-dim",
    "16",
    "--mlp-dim",
    "16",
    "--filters",
    "4",
    "--cls-hidden",
    "16",
    "--gen-channels",
    "16",
    "--disc-channels",
    "4",
    "--disc-hidden",
    "8",
    "--batch-size",
    "4",
    "--eval-interval",
    "3",
    "--lr",
    "1e-3",
];

fn cram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cram"))
        .args(args)
        .env_remove("CRAM_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\n{}{}",
        o.status.code(),
        stdout(&o),
        stderr(&o)
    );
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, task: &str, n: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("{task}-{n}-{seed}.crd"));
    let (n, seed) = (n.to_string(), seed.to_string());
    ok(cram(&[
        "gen",
        "--task",
        task,
        "--n",
        &n,
        "--canvas",
        "16",
        "--seed",
        &seed,
        "-o",
        s(&path),
    ]));
    path
}

fn train(data: &Path, out: &Path, task: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--task",
        task,
        "--data",
        s(data),
        "--out",
        s(out),
        "--seed",
        "3",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    cram(&args)
}

fn records(log: &Path) -> Vec<LossReport> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect()
}

#[test]
fn gen_is_deterministic_and_reports_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.crd");
    let b = dir.path().join("b.crd");
    for p in [&a, &b] {
        let out = ok(cram(&[
            "gen",
            "--task",
            "inpainting",
            "--n",
            "16",
            "--seed",
            "4",
            "-o",
            s(p),
        ]));
        assert!(out.contains("wrote 16 inpainting samples"), "{out}");
        assert!(out.contains("mask side 8 (64 of 1024 pixels)"), "{out}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.crd");
    ok(cram(&[
        "gen",
        "--task",
        "inpainting",
        "--n",
        "16",
        "--seed",
        "5",
        "-o",
        s(&c),
    ]));
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cram(&["gen", "--task", "bogus", "-o", s(&dir.path().join("x.crd"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(cram(&["train", "--nope"]).status.code(), Some(2));
    let data = gen(dir.path(), "classification", 8, 1);
    let o = train(&data, &dir.path().join("run"), "classification", &["--lr", "-1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_writes_log_checkpoint_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    for task in ["classification", "inpainting"] {
        let data = gen(dir.path(), task, 12, 1);
        let run = dir.path().join(task);
        let out = ok(train(&data, &run, task, &["--steps", "6"]));
        let summary = out.lines().last().unwrap();
        assert!(summary.starts_with("summary steps=6 best_step="), "{out}");
        assert!(summary.contains(if task == "classification" {
            "best_acc="
        } else {
            "best_masked_l1="
        }));
        assert_eq!(out.lines().filter(|l| l.starts_with("eval step=")).count(), 2, "{out}");
        let recs = records(&run.join("metrics.log"));
        assert_eq!(
            recs.iter().map(|r| r.step).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
        assert!(run.join("model.ckpt").is_file());

        let again = dir.path().join(format!("{task}-again"));
        ok(train(&data, &again, task, &["--steps", "6"]));
        assert_eq!(
            fs::read(run.join("metrics.log")).unwrap(),
            fs::read(again.join("metrics.log")).unwrap()
        );
    }
}

#[test]
fn epochs_set_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "classification", 10, 1);
    let run = dir.path().join("run");
    let out = ok(train(&data, &run, "classification", &["--epochs", "2"]));
    assert!(out.contains("summary steps=6 "), "{out}");
    assert_eq!(records(&run.join("metrics.log")).len(), 6);
}

#[test]
fn resume_continues_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "inpainting", 12, 1);
    let straight = dir.path().join("straight");
    ok(train(&data, &straight, "inpainting", &["--steps", "6"]));

    let split = dir.path().join("split");
    ok(train(&data, &split, "inpainting", &["--steps", "3"]));
    let ckpt = split.join("model.ckpt");
    let out = ok(train(
        &data,
        &split,
        "inpainting",
        &["--steps", "6", "--resume", s(&ckpt)],
    ));
    assert!(out.contains("from step 3 to 6"), "{out}");
    assert_eq!(
        fs::read_to_string(straight.join("metrics.log")).unwrap(),
        fs::read_to_string(split.join("metrics.log")).unwrap()
    );
    assert_eq!(
        fs::read(straight.join("model.ckpt")).unwrap(),
        fs::read(split.join("model.ckpt")).unwrap()
    );
}

#[test]
fn non_finite_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "classification", 12, 1);
    let run = dir.path().join("run");
    let o = train(&data, &run, "classification", &["--steps", "9", "--poison-step", "4"]);
    assert_eq!(o.status.code(), Some(4), "{}{}", stdout(&o), stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("last healthy step 3"), "{err}");
    assert!(err.contains("model.ckpt"), "{err}");
    let recs = records(&run.join("metrics.log"));
    assert_eq!(recs.len(), 4);
    assert!(recs.iter().all(|r| r.total.is_finite()));
}

#[test]
fn check_lists_every_case_and_passes() {
    let o = cram(&["check", "--seeds", "2"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}{}", stderr(&o));
    let cases = out.lines().filter(|l| l.contains("max_rel_err=")).count();
    assert_eq!(cases, cram_core::verify::registry().len());
    assert!(out.lines().any(|l| l.starts_with("property ")));
    assert!(out.lines().last().unwrap().ends_with(": 0 failing"), "{out}");
}

#[test]
fn check_fails_on_a_broken_backward() {
    let o = cram(&["check", "--seeds", "1", "--fault", "tanh"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    let verdict = |name: &str| {
        let line = out.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap();
        line.rsplit(' ').next().unwrap().to_string()
    };
    assert_eq!(verdict("tanh"), "FAIL", "{out}");
    for untouched in ["log", "softmax_cross_entropy", "bilinear_sample", "recon_loss"] {
        assert_eq!(verdict(untouched), "PASS", "{out}");
    }
    assert!(stderr(&o).contains("tanh"));
}

#[test]
fn render_writes_ordered_panels() {
    let dir = tempfile::tempdir().unwrap();
    for task in ["inpainting", "classification"] {
        let data = gen(dir.path(), task, 8, 1);
        let run = dir.path().join(task);
        ok(train(&data, &run, task, &["--steps", "3"]));
        let pics = run.join("pics");
        ok(cram(&[
            "render",
            "--checkpoint",
            s(&run.join("model.ckpt")),
            "--data",
            s(&data),
            "-o",
            s(&pics),
            "--count",
            "2",
        ]));
        let mut names: Vec<String> = fs::read_dir(&pics)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        let expected: Vec<&str> = if task == "inpainting" {
            vec![
                "sample000_1_truth.pgm",
                "sample000_2_input.pgm",
                "sample000_3_generated.pgm",
                "sample000_4_composite.pgm",
                "sample001_1_truth.pgm",
                "sample001_2_input.pgm",
                "sample001_3_generated.pgm",
                "sample001_4_composite.pgm",
            ]
        } else {
            vec!["sample000_overlay.ppm", "sample001_overlay.ppm"]
        };
        assert_eq!(names, expected);
    }
    let data = gen(dir.path(), "classification", 8, 1);
    let o = cram(&[
        "render",
        "--checkpoint",
        s(&dir.path().join("missing.ckpt")),
        "--data",
        s(&data),
        "-o",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn report_summarizes_and_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "classification", 12, 1);
    let run = dir.path().join("run");
    ok(train(&data, &run, "classification", &["--steps", "6"]));
    let log = run.join("metrics.log");
    let out = ok(cram(&["report", s(&log)]));
    assert!(out.starts_with("records 6 (steps 0..5)"), "{out}");
    assert!(out.contains("best acc "), "{out}");

    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str("not a record\n");
    let bad = dir.path().join("bad.log");
    fs::write(&bad, text).unwrap();
    let o = cram(&["report", s(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad.log:7"), "{}", stderr(&o));
}

#[test]
fn config_file_and_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "task = inpainting\nn = 6\ncanvas = 16\nseed = 11\n").unwrap();
    let from_file = dir.path().join("file.crd");
    ok(cram(&["--config", s(&cfg), "gen", "-o", s(&from_file)]));
    let explicit = gen(dir.path(), "inpainting", 6, 11);
    assert_eq!(fs::read(&from_file).unwrap(), fs::read(&explicit).unwrap());

    let flag = dir.path().join("flag.crd");
    ok(cram(&["--config", s(&cfg), "gen", "--seed", "12", "-o", s(&flag)]));
    assert_eq!(
        fs::read(&flag).unwrap(),
        fs::read(gen(dir.path(), "inpainting", 6, 12)).unwrap()
    );

    let env = dir.path().join("env.crd");
    let o = Command::new(env!("CARGO_BIN_EXE_cram"))
        .args([
            "gen",
            "--task",
            "inpainting",
            "--n",
            "6",
            "--canvas",
            "16",
            "-o",
            s(&env),
        ])
        .env("CRAM_SEED", "12")
        .output()
        .unwrap();
    ok(o);
    assert_eq!(fs::read(&env).unwrap(), fs::read(&flag).unwrap());

    let typo = dir.path().join("typo.cfg");
    fs::write(&typo, "task = inpainting\nsede = 1\n").unwrap();
    assert_eq!(
        cram(&["--config", s(&typo), "gen", "-o", s(&env)]).status.code(),
        Some(2)
    );
}

#[test]
fn mismatched_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "inpainting", 8, 1);
    let o = train(&data, &dir.path().join("run"), "classification", &["--steps", "2"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let junk = dir.path().join("junk.crd");
    fs::write(&junk, b"not a dataset").unwrap();
    let o = train(&junk, &dir.path().join("run"), "inpainting", &["--steps", "2"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
