use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dpadmm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpadmm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Two-pixel "images" from four well-separated classes.
fn write_idx(dir: &Path, prefix: &str, count: usize, shift: usize) -> (PathBuf, PathBuf) {
    let mut images = 0x0000_0803u32.to_be_bytes().to_vec();
    for v in [count as u32, 1, 2] {
        images.extend(v.to_be_bytes());
    }
    let mut labels = 0x0000_0801u32.to_be_bytes().to_vec();
    labels.extend((count as u32).to_be_bytes());
    for i in 0..count {
        let class = (i + shift) % 4;
        let jitter = ((i * 37) % 50) as u8;
        let (a, b) = match class {
            0 => (20 + jitter, 20 + jitter),
            1 => (200 + jitter, 20 + jitter),
            2 => (20 + jitter, 200 + jitter),
            _ => (200 + jitter, 200 + jitter),
        };
        images.extend([a, b]);
        labels.push(class as u8);
    }
    let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

fn experiment_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 200, 0);
    write_idx(dir.path(), "test", 40, 1);
    fs::write(
        dir.path().join("exp.cfg"),
        "# small ObjT run\n\
         algorithm = ObjT\n\
         T = 250\n\
         eps_bar = 0.5\n\
         P = 4\n\
         beta = 0.001\n\
         log_every = 100\n\
         bias_column = true\n\
         train.images = train-images-idx3-ubyte\n\
         train.labels = train-labels-idx1-ubyte\n\
         test.images = test-images-idx3-ubyte\n\
         test.labels = test-labels-idx1-ubyte\n",
    )
    .unwrap();
    dir
}

#[test]
fn run_writes_metrics_and_metadata() {
    let dir = experiment_dir();
    let out = dpadmm(
        &["run", "--config", "exp.cfg", "--out", "results"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("results/metrics_seed0.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    // ceil(250 / 100) rows plus the header.
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("250,"));
    let meta = fs::read_to_string(dir.path().join("results/run_seed0.meta")).unwrap();
    assert!(meta.contains("algorithm = ObjT"));
    assert!(meta.contains("# composed_eps = 125"));
    assert!(meta.contains("# wall_time_s = "));
}

#[test]
fn flags_override_the_config_file() {
    let dir = experiment_dir();
    let out = dpadmm(
        &[
            "run",
            "--config",
            "exp.cfg",
            "--T",
            "30",
            "--log_every",
            "10",
            "--eps_bar",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let metrics = fs::read_to_string(dir.path().join("metrics_seed0.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let meta = fs::read_to_string(dir.path().join("run_seed0.meta")).unwrap();
    assert!(meta.contains("eps_bar = 2.0"));
    assert!(meta.contains("T = 30"));
}

#[test]
fn zero_rounds_give_a_header_only_file() {
    let dir = experiment_dir();
    let out = dpadmm(&["run", "--config", "exp.cfg", "--T", "0"], dir.path());
    assert_eq!(code(&out), 0);
    let metrics = fs::read_to_string(dir.path().join("metrics_seed0.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn repeat_runs_consecutive_seeds_reproducibly() {
    let dir = experiment_dir();
    let out = dpadmm(
        &[
            "run", "--config", "exp.cfg", "--T", "40", "--repeat", "3", "--seed", "7", "--out", "r",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let read = |p: &str| fs::read_to_string(dir.path().join(p)).unwrap();
    let runs: Vec<String> = (7..10)
        .map(|s| read(&format!("r/metrics_seed{s}.csv")))
        .collect();
    assert_ne!(runs[0], runs[1]);

    // The metadata file alone reproduces the run byte for byte, from any
    // working directory.
    let elsewhere = tempfile::tempdir().unwrap();
    let meta = dir.path().join("r/run_seed8.meta");
    let again = dpadmm(
        &["run", "--config", meta.to_str().unwrap(), "--out", "copy"],
        elsewhere.path(),
    );
    assert_eq!(
        code(&again),
        0,
        "{}",
        String::from_utf8_lossy(&again.stderr)
    );
    let copy = fs::read_to_string(elsewhere.path().join("copy/metrics_seed8.csv")).unwrap();
    assert_eq!(copy, runs[1]);
}

#[test]
fn partition_then_run_from_tables() {
    let dir = experiment_dir();
    let out = dpadmm(
        &[
            "partition",
            "--config",
            "exp.cfg",
            "--P",
            "3",
            "--out",
            "parts",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tables: Vec<_> = fs::read_dir(dir.path().join("parts")).unwrap().collect();
    assert_eq!(tables.len(), 3);
    let out = dpadmm(
        &[
            "run",
            "--algorithm",
            "ObjP",
            "--agents.dir",
            "parts",
            "--T",
            "20",
            "--log_every",
            "5",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(dir.path().join("metrics_seed0.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}

#[test]
fn exit_codes_separate_config_data_and_numeric_failures() {
    let dir = experiment_dir();
    let unknown = dpadmm(
        &["run", "--config", "exp.cfg", "--mechanism", "gaussian"],
        dir.path(),
    );
    assert_eq!(code(&unknown), 1);
    fs::write(
        dir.path().join("bad.cfg"),
        "algorithm = ObjT\nlearning_rate = 3\n",
    )
    .unwrap();
    assert_eq!(
        code(&dpadmm(&["run", "--config", "bad.cfg"], dir.path())),
        1
    );
    assert_eq!(code(&dpadmm(&["run", "--bogus"], dir.path())), 1);

    let missing = dpadmm(
        &[
            "run",
            "--config",
            "exp.cfg",
            "--train.images",
            "nope-idx3-ubyte",
        ],
        dir.path(),
    );
    assert_eq!(code(&missing), 2);
    fs::write(
        dir.path().join("train-labels-idx1-ubyte"),
        [0u8, 0, 8, 1, 0, 0, 0, 9],
    )
    .unwrap();
    assert_eq!(
        code(&dpadmm(&["run", "--config", "exp.cfg"], dir.path())),
        2
    );

    let dir = experiment_dir();
    let blowup = dpadmm(
        &[
            "run",
            "--config",
            "exp.cfg",
            "--algorithm",
            "ObjP",
            "--rho.c1",
            "1e-300",
            "--rho.c2",
            "0",
            "--eps_bar",
            "2.2250738585072014e-308",
            "--box.B",
            "inf",
        ],
        dir.path(),
    );
    assert_eq!(
        code(&blowup),
        3,
        "{}",
        String::from_utf8_lossy(&blowup.stderr)
    );
}

#[test]
fn audit_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run_with = |samples: &str, extra: &[&str]| {
        let mut args = vec!["audit", "--samples", samples, "--seed", "3"];
        args.extend_from_slice(extra);
        dpadmm(&args, dir.path())
    };
    let run = |extra: &[&str]| run_with("300000", extra);
    let calibrated = run(&[]);
    assert_eq!(code(&calibrated), 0, "{}", stdout(&calibrated));
    assert!(stdout(&calibrated).contains("verdict = ok"));
    let halved = run(&["--noise_scale", "0.5"]);
    assert_eq!(code(&halved), 5, "{}", stdout(&halved));
    let same = run(&["--identical", "--histogram", "hist.csv"]);
    assert_eq!(code(&same), 0);
    let eps: f64 = stdout(&same)
        .lines()
        .find_map(|l| l.strip_prefix("eps_measured = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(eps < 0.3, "{eps}");
    assert_eq!(
        fs::read_to_string(dir.path().join("hist.csv"))
            .unwrap()
            .lines()
            .count(),
        61
    );
    let few = run_with("50", &[]);
    assert_eq!(code(&few), 4);
    assert_eq!(code(&run(&["--algorithm", "OutP"])), 1);
}

#[test]
fn sensitivity_check_and_its_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dpadmm(&["sensitivity-check", "--instances", "120"], dir.path());
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("instances = 120"));
    assert_eq!(
        code(&dpadmm(
            &["sensitivity-check", "--max_rows", "1"],
            dir.path()
        )),
        0
    );
    assert_ne!(
        code(&dpadmm(
            &["sensitivity-check", "--negative_control"],
            dir.path()
        )),
        0
    );
}

#[test]
fn compose_prints_the_linear_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpadmm(&["compose", "--eps_bar", "0.05", "--T", "2e4"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("composed_eps = 1000"));
}
