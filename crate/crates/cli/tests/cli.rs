use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robust-sgld"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ROBUST_SGLD_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trace_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["iter", "v_delta", "test_mse", "elapsed_s"]);
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

fn lookup(report: &str, key: &str) -> Option<f64> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .map(|v| v.split_whitespace().next().unwrap().parse().unwrap())
}

#[test]
fn single_iteration_writes_one_record_beyond_the_start() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-robust", "--set", "n_iter=1", "--set", "record_every=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = trace_rows(&dir.path().join("trace_robust-2_1.csv"));
    let iters: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(iters, ["0", "1"]);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().is_ok()));
    let theta = std::fs::read_to_string(dir.path().join("theta_robust-2_1.txt")).unwrap();
    assert_eq!(theta.lines().count(), 5);
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["train-robust", "--eta2", "1", "--seed", "3", "--set", "n_iter=200", "--set", "record_every=20"];
    for d in [&a, &b] {
        let o = run(d.path(), &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["trace_robust-1_3.csv", "theta_robust-1_3.txt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn default_configuration_writes_2501_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-vanilla"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(trace_rows(&dir.path().join("trace_vanilla_1.csv")).len(), 2501);
    let o = run(dir.path(), &["train-robust", "--no-v-delta"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = trace_rows(&dir.path().join("trace_robust-2_1.csv"));
    assert_eq!(rows.len(), 2501);
    assert_eq!(rows.last().unwrap()[0], "25000");
}

#[test]
fn unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-vanilla", "--set", "learning_rate=0.1"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("learning_rate"));
    for key in ["eta2_list", "n_iter", "record_every", "snap_samples"] {
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn config_file_and_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "n_iter = 30\nrecord_every = 10\neta2_list = [0.5]\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = run(dir.path(), &["--config", cfg, "train-robust", "--no-v-delta"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(trace_rows(&dir.path().join("trace_robust-0.5_1.csv")).len(), 4);
    let o = run(dir.path(), &["--config", cfg, "--set", "n_iter=10", "train-vanilla"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(trace_rows(&dir.path().join("trace_vanilla_1.csv")).len(), 2);

    std::fs::write(dir.path().join("bad.toml"), "n_iter = \"many\"\n").unwrap();
    let bad = dir.path().join("bad.toml");
    let o = run(dir.path(), &["--config", bad.to_str().unwrap(), "train-vanilla"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn constants_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["constants", "--eta2", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read_to_string(dir.path().join("constants.txt")).unwrap();
    assert_eq!(lookup(&first, "a"), Some(5e-4));
    assert!(lookup(&first, "b").unwrap() > 0.0);
    let lm = lookup(&first, "lambda_max_delta").unwrap();
    assert!(lm > 0.0 && lm <= 1.0 / 5e-4);
    assert!(first.lines().all(|l| l.contains('=')));

    let o = run(dir.path(), &["constants", "--eta2", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("constants.txt")).unwrap(), first);

    let o = run(dir.path(), &["constants"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--eta2"));

    let o = run(dir.path(), &["constants", "--eta2", "2", "--radius", "none"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("C4"));
}

#[test]
fn params_report_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["params", "--epsilon", "0.1", "--eta2", "2"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("step size lambda") && err.contains("iteration count n"), "{err}");
    assert!(err.contains("C2") && err.contains("C1") && err.contains("c_delta_beta"));

    let o = run(dir.path(), &["params", "--epsilon", "0", "--eta2", "2"]);
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["params", "--epsilon", "-0.5", "--eta2", "2"]);
    assert_eq!(code(&o), 2);

    let ext = ["--c-delta-beta", "1", "--c1", "1", "--c2", "1"];
    let mut args = vec!["params", "--epsilon", "0.1", "--eta2", "2"];
    args.extend(ext);
    let o = run(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("params.txt")).unwrap();
    assert_eq!(stdout(&o), text);
    let beta_line = text.lines().find(|l| l.starts_with("beta=")).unwrap();
    assert!(beta_line.contains("100 (d+1) / eps^2"));
    // 100 * 5 / 0.1^2
    assert!(lookup(&text, "beta").unwrap() > 50_000.0 * (1.0 - 1e-12));
    for k in ["ell", "jj", "delta", "lambda", "n"] {
        assert!(lookup(&text, k).is_some(), "{k}");
    }
}

#[test]
fn verify_single_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--suite", "duality"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().next().unwrap().starts_with("PASS duality"));
    assert!(out.contains("1/1 suites passed"));
    for other in ["sandwich", "dissipativity", "gradient", "quadrature"] {
        assert!(!out.contains(other));
    }
    let o = run(dir.path(), &["verify", "--suite", "nonsense"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_gradient_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--suite", "gradient", "--corrupt-gradient", "1e-4"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL gradient"));
    assert!(stderr(&o).contains("gradient"));
}

#[test]
fn eval_reads_saved_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-robust", "--set", "n_iter=5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let theta = dir.path().join("theta_robust-2_1.txt");
    let o = run(dir.path(), &["eval", "--theta", theta.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows = trace_rows(&dir.path().join("trace_robust-2_1.csv"));
    let last = rows.last().unwrap();
    assert_eq!(lookup(&out, "test_mse"), Some(last[2].parse().unwrap()));
    assert_eq!(lookup(&out, "v_delta"), Some(last[1].parse().unwrap()));

    let star = dir.path().join("star.txt");
    std::fs::write(&star, "-0.5\n0.5\n0.1\n-0.2\n").unwrap();
    let o = run(dir.path(), &["eval", "--theta", star.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(lookup(&out, "test_mse"), lookup(&out, "reference"));
    assert!(!out.contains("v_delta"));

    std::fs::write(&star, "1 2").unwrap();
    let o = run(dir.path(), &["eval", "--theta", star.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
