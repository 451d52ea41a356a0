use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tcfnet::arch::Topology;
use tcfnet::eval::{read_csv, write_csv, CurveRecord, ResultRecord, Strategy};
use tcfnet::sim::load_dataset;

fn tcfnet() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tcfnet"));
    c.env_remove("TCFNET_DATA_DIR").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tcfnet");
    assert!(
        out.status.success(),
        "tcfnet failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// A two-subject, two-session, two-run dataset shared by the slower tests.
fn small_dataset() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep().join("data");
        run(tcfnet()
            .args([
                "generate",
                "--subjects",
                "2",
                "--sessions",
                "2",
                "--runs",
                "2",
                "--out",
            ])
            .arg(&dir));
        dir
    })
}

fn config_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .map(str::to_string)
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = tcfnet().arg("generate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    let first = err.lines().next().unwrap();
    assert!(
        first.starts_with("error[usage]:") && first.contains("--out"),
        "{err}"
    );
    assert!(err.contains("Usage:"), "{err}");
}

#[test]
fn runtime_errors_are_one_line() {
    let out = tcfnet()
        .args([
            "train",
            "--arch",
            "resnet",
            "--out",
            "/tmp/unused-tcfnet-out",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[") && err.contains("resnet"), "{err}");
    for t in Topology::ALL {
        assert!(err.contains(t.name()), "{err}");
    }

    let out = tcfnet()
        .args(["train", "--out", "/tmp/unused-tcfnet-out"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("TCFNET_DATA_DIR"));

    let out = tcfnet()
        .args(["stats", "--results", "/nonexistent/results.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/results.csv"));
}

#[test]
fn generate_defaults_and_seed_determinism() {
    let root = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let dir = root.path().join(name);
        run(tcfnet()
            .args([
                "generate",
                "--sessions",
                "1",
                "--runs",
                "1",
                "--seed",
                seed,
                "--out",
            ])
            .arg(&dir));
        load_dataset(&dir).unwrap().manifest
    };
    let a = gen("a", "42");
    let b = gen("b", "42");
    let c = gen("c", "43");
    // Nine subjects unless told otherwise.
    assert_eq!(a.runs.len(), 9);
    assert_eq!(a.dataset_hash, b.dataset_hash);
    assert_ne!(a.dataset_hash, c.dataset_hash);

    let echo = std::fs::read_to_string(root.path().join("a/generate.config")).unwrap();
    assert_eq!(config_value(&echo, "subjects").as_deref(), Some("9"));
    assert_eq!(config_value(&echo, "sessions").as_deref(), Some("1"));
    assert_eq!(config_value(&echo, "snr").as_deref(), Some("high"));
    assert_eq!(config_value(&echo, "config_hash"), Some(a.config_hash));
}

#[test]
fn train_layers_config_file_flags_and_data_env() {
    let data = small_dataset();
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# quick run\narch = lenet\nmax-epochs = 1\nlr = 0.002\nbatch = 32\n",
    )
    .unwrap();
    let out_dir = root.path().join("ckpt");

    let train = || {
        run(tcfnet()
            .env("TCFNET_DATA_DIR", data)
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .args(["--max-epochs", "2", "--out"])
            .arg(&out_dir))
    };
    let first = train();
    let text = stdout(&first);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("lenet s0")).count(),
        4,
        "{text}"
    );

    let echo = std::fs::read_to_string(out_dir.join("train.config")).unwrap();
    assert_eq!(config_value(&echo, "max_epochs").as_deref(), Some("2"));
    assert_eq!(config_value(&echo, "lr").as_deref(), Some("0.002"));
    assert_eq!(config_value(&echo, "batch").as_deref(), Some("32"));
    assert_eq!(config_value(&echo, "patience").as_deref(), Some("20"));
    assert_eq!(
        config_value(&echo, "data").as_deref(),
        Some(data.to_str().unwrap())
    );
    let hash = config_value(&echo, "config_hash").unwrap();
    assert!(text.contains(&format!("config_hash={hash}")));

    // One checkpoint and history per fold, no leftover trainer state.
    let mut ckpts = Vec::new();
    for k in 1..=2 {
        let base = out_dir.join(format!("lenet/session/s01-session{k}"));
        assert!(base.with_extension("history.json").exists());
        ckpts.push(std::fs::read(base.with_extension("tcfn")).unwrap());
    }
    let leftovers: Vec<_> = walk(&out_dir)
        .into_iter()
        .filter(|p| p.to_string_lossy().contains("state"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
    assert!(out_dir.join("plan.json").exists());

    // A second run finds complete folds and leaves them untouched.
    train();
    for (k, before) in ckpts.iter().enumerate() {
        let after = std::fs::read(out_dir.join(format!("lenet/session/s01-session{}.tcfn", k + 1)))
            .unwrap();
        assert_eq!(&after, before);
    }

    // An unknown key in the file names the valid ones.
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = tcfnet()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate") && stderr(&out).contains("max_epochs"));

    // Evaluate picks the plan back up; results go next to the checkpoints.
    let ev = run(tcfnet()
        .args(["evaluate", "--max-blocks", "5", "--data"])
        .arg(data)
        .arg("--checkpoints")
        .arg(&out_dir));
    assert!(stdout(&ev).contains("wrote 4 results"));
    let results: Vec<ResultRecord> = read_csv(&out_dir.join("results.csv")).unwrap();
    assert_eq!(results.len(), 4);
    assert!(results
        .iter()
        .all(|r| r.topology == "lenet" && r.strategy == Strategy::Session));
    let curves: Vec<CurveRecord> = read_csv(&out_dir.join("curves.csv")).unwrap();
    assert_eq!(curves.len(), 4 * 5);
    assert!(curves.iter().all(|c| (1..=5).contains(&c.blocks)));
    assert!(out_dir.join("evaluate.config").exists());
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn oracle_reaches_full_accuracy_after_one_block() {
    let data = small_dataset();
    let out_dir = tempfile::tempdir().unwrap();
    run(tcfnet()
        .args([
            "evaluate",
            "--checkpoints",
            "oracle",
            "--strategy",
            "both",
            "--data",
        ])
        .arg(data)
        .arg("--out")
        .arg(out_dir.path()));
    let results: Vec<ResultRecord> = read_csv(&out_dir.path().join("results.csv")).unwrap();
    // Four session folds plus two held-out-subject folds.
    assert_eq!(results.len(), 6);
    assert!(results
        .iter()
        .all(|r| r.topology == "oracle" && r.accuracy == 100.0));
    let curves: Vec<CurveRecord> = read_csv(&out_dir.path().join("curves.csv")).unwrap();
    let first: Vec<&CurveRecord> = curves.iter().filter(|c| c.blocks == 1).collect();
    assert_eq!(first.len(), 6);
    for c in first {
        assert_eq!(c.accuracy, 100.0);
        assert_eq!(c.time_s, 2.4);
        assert!((c.bitrate - 64.62).abs() < 0.01, "{}", c.bitrate);
    }
}

fn synthetic(t: Topology, subject: u32, acc: f64) -> ResultRecord {
    ResultRecord {
        topology: t.name().to_string(),
        strategy: Strategy::Session,
        subject,
        fold: format!("s{:02}-session1", subject + 1),
        accuracy: acc,
        cross_entropy: 0.3,
        test_epochs: 720,
        config_hash: "h".into(),
        seed: 42,
    }
}

#[test]
fn compare_and_stats_on_nine_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for s in 0..9 {
        let base = 80.0 + s as f64;
        records.push(synthetic(Topology::LeNet, s, base));
        records.push(synthetic(
            Topology::LeNetFnb,
            s,
            base + 1.0 + 0.5 * s as f64,
        ));
    }
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_csv(&a, &records[..10]).unwrap();
    write_csv(&b, &records[10..]).unwrap();

    let stats = stdout(&run(tcfnet().arg("stats").arg("--results").arg(&a).arg(&b)));
    let row = stats
        .lines()
        .find(|l| l.contains("wilcoxon") && l.contains("lenet vs lenet-fnb"))
        .unwrap();
    // All nine differences positive: W = 0, exact two-sided p = 2/512.
    assert!(row.contains(",0.0,9,0.00390625,"), "{row}");

    let out = dir.path().join("reports/compare.csv");
    run(tcfnet()
        .arg("compare")
        .arg("--results")
        .arg(&a)
        .arg(&b)
        .arg("--out")
        .arg(&out));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().filter(|r| r.starts_with("session,")).count(), 6);
    assert_eq!(rows.iter().filter(|r| r.contains("incomplete")).count(), 10);

    // The same result twice is refused.
    let out = tcfnet()
        .arg("compare")
        .arg("--results")
        .arg(&a)
        .arg(&a)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("duplicate"));
}
