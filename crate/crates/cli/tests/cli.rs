use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
eps_list = [0.1, 0.03, 0.01]
n_paths = 200
macro_steps = 10
limit_steps = 100
seed = 7

[system]
name = "periodic_ou"
c = 1.0

[cloud]
n_particles = 500

[poisson.solver]
n_paths = 500
"#;

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn run(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_slowfast"))
        .arg("--config")
        .arg(cfg)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn strong_sweep_output_does_not_depend_on_threads() {
    let (dir, cfg) = setup(SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = run(&cfg, &a, &["--threads", "1", "strong-sweep"]);
    run(&cfg, &b, &["--threads", "2", "strong-sweep"]);
    assert_eq!(read(a.join("strong.csv")), read(b.join("strong.csv")));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("strong") && stdout.contains("strong.csv"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_str(&read(a.join("strong_summary.json"))).unwrap();
    let other: serde_json::Value = serde_json::from_str(&read(b.join("strong_summary.json"))).unwrap();
    assert_eq!(summary["run_id"], other["run_id"]);
    assert_eq!(summary["config"]["seed"], 7);
}

#[test]
fn seed_override_changes_the_paths() {
    let (dir, cfg) = setup(SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&cfg, &a, &["simulate", "--eps", "0.1"]);
    run(&cfg, &b, &["--seed", "8", "simulate", "--eps", "0.1"]);
    let (sa, sb) = (read(a.join("simulate.csv")), read(b.join("simulate.csv")));
    assert!(sa.starts_with("t,x0,y_eps0,y_bar0\n"), "{sa}");
    assert_ne!(sa, sb);
    let first: Vec<f64> = sa
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(first[0], 0.0);
    assert_eq!(first[2], first[3]);
}

#[test]
fn weak_and_fluctuation_sweeps_write_their_tables() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("o");
    run(&cfg, &out, &["weak-sweep"]);
    run(&cfg, &out, &["fluctuation-sweep"]);
    assert!(read(out.join("weak_variance.csv")).lines().count() == 4);
    assert!(read(out.join("fluctuation.csv")).starts_with("eps,q,error,stderr,n_paths,censored\n"));
}

#[test]
fn poisson_and_kappa_subcommands() {
    let (dir, cfg) = setup(SMALL);
    let out = dir.path().join("o");
    let o = run(&cfg, &out, &["poisson"]);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("phi = "));
    let s: serde_json::Value = serde_json::from_str(&read(out.join("poisson_summary.json"))).unwrap();
    assert_eq!(s["result"]["oracle"][0], 1.5);
    run(&cfg, &out, &["kappa-curves"]);
    let k = read(out.join("kappa.csv"));
    assert!(k.starts_with("T,kappa1,kappa1_stderr,kappa2,kappa2_stderr\n"));
    assert_eq!(k.lines().count(), 6);
}

#[test]
fn invalid_configuration_is_reported() {
    let (dir, cfg) = setup("eps_list = [0.1, 0.2]\n");
    let o = Command::new(env!("CARGO_BIN_EXE_slowfast"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .arg("strong-sweep")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("eps_list"));
}
