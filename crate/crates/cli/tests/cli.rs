use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ebsde-lab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn last_lambda(o: &Output) -> f64 {
    let out = stdout(o);
    let last = out.lines().last().expect("output");
    last.strip_prefix("lambda = ").expect("lambda line").parse().unwrap()
}

fn solve(cfg: &str, out: &Path) -> Output {
    run(&["solve", "--config", config(cfg).to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn validate_exit_codes() {
    let ok = run(&["validate", "--config", config("ou_cos.toml").to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));

    let bad = run(&["validate", "--config", config("anti_dissipative.toml").to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("worst_slack"));

    let missing = run(&["validate", "--config", "/no/such/config.toml"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn malformed_config_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[model]\nkind = \"ornstein-uhlenbeck\"\nnoise = [1\n").unwrap();
    let o = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["solve"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn constant_cost_prints_exact_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let o = solve("constant.toml", dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last().unwrap(), "lambda = 3.0");

    let oracle = run(&["oracle", "--config", config("constant.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&oracle), 0);
    assert_eq!(stdout(&oracle).lines().last().unwrap(), "lambda = 3.0");
}

#[test]
fn solve_is_accurate_and_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = solve("ou_cos.toml", a.path());
    let ob = solve("ou_cos.toml", b.path());
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    let lambda = last_lambda(&oa);
    assert!((lambda - 0.778800783).abs() < 0.02 * 0.778800783, "{lambda}");
    for name in ["lambda.csv", "schedule_record.csv", "vbar.csv", "diagnostics.csv", "solution.json"] {
        let fa = fs::read(a.path().join(name)).unwrap();
        let fb = fs::read(b.path().join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical runs");
    }
    let header = fs::read_to_string(a.path().join("vbar.csv")).unwrap();
    assert!(header.starts_with("# ebsde-lab v"), "{header}");
    assert!(!a.path().join(".ebsde-lab.lock").exists());
    assert_eq!(code(&ob), 0);
}

#[test]
fn seed_flag_overrides_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("ou_cos.toml");
    let oa = run(&["solve", "--config", cfg.to_str().unwrap(), "--out", a.path().to_str().unwrap(), "--seed", "5"]);
    let ob = run(&["solve", "--config", cfg.to_str().unwrap(), "--out", b.path().to_str().unwrap(), "--seed", "6", "--threads", "1"]);
    assert_eq!(code(&oa), 0);
    assert_eq!(code(&ob), 0);
    assert_ne!(last_lambda(&oa), last_lambda(&ob));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".ebsde-lab.lock"), "1").unwrap();
    let o = solve("constant.toml", dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn verify_passes_then_catches_corrupted_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("ou_cos.toml");
    assert_eq!(code(&solve("ou_cos.toml", dir.path())), 0);
    let args = ["verify", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    let ok = run(&args);
    assert_eq!(code(&ok), 0, "{}\n{}", stdout(&ok), stderr(&ok));

    let path = dir.path().join("lambda.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[2].split(',').map(String::from).collect();
    let lambda: f64 = fields[0].parse().unwrap();
    fields[0] = format!("{:?}", lambda + 0.1);
    lines[2] = fields.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let bad = run(&args);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("ebsde-residual"), "{}", stderr(&bad));

    let missing = run(&["verify", "--config", cfg.to_str().unwrap(), "--out", "/no/such/solution"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn oracle_matches_gaussian_integral_and_rejects_2d() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["oracle", "--config", config("ou_cos.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lambda = last_lambda(&o);
    assert!((lambda - 0.778800783).abs() < 0.005 * 0.778800783, "{lambda}");
    assert!(fs::read_to_string(dir.path().join("oracle.csv")).unwrap().contains("x,v,dv,policy"));

    let two = run(&["oracle", "--config", config("ou_2d.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&two), 2);
    assert!(stderr(&two).contains("oracle is 1-D only"));
}
