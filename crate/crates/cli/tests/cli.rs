use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hitgeo"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn unknown_flag_exits_2() {
    let o = run(&["run", "--bogus"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["run", "--out", out, "--override", "train.gamma=1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn report_without_runs_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("verify.csv");
    let o = run(&[
        "verify",
        "--chains",
        "5",
        "--max-states",
        "15",
        "--mc-episodes",
        "20000",
        "--bound-trials",
        "3",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")));
}

#[test]
fn gen_env_and_collect_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_state.toml");
    let env = dir.path().join("env.json");
    let data = dir.path().join("data.hgd");
    let o = run(&[
        "gen-env",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        env.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(env).unwrap().contains("\"n_states\""));
    let o = run(&[
        "collect",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(fs::read(data).unwrap().starts_with(b"HITGEO-DS"));
}

#[test]
fn two_state_run_completes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_state.toml");
    let t0 = Instant::now();
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t0.elapsed() < Duration::from_secs(30));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("planner,n_seeds,mean,std,median"));
    assert_eq!(report.lines().count(), 5);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("asym_graph"));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_state.toml");
    let mut ckpts = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        ckpts.push(fs::read(out.join("seed_0/ckpt_policy.hgc")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn deleted_eval_resumes_without_retraining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_state.toml");
    let args = [
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    assert_eq!(code(&run(&args)), 0);
    let seed = dir.path().join("seed_0");
    let eval = fs::read(seed.join("eval.csv")).unwrap();
    let ckpt_time = fs::metadata(seed.join("ckpt_policy.hgc"))
        .unwrap()
        .modified()
        .unwrap();
    fs::remove_file(seed.join("eval.csv")).unwrap();
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(fs::read(seed.join("eval.csv")).unwrap(), eval);
    assert_eq!(
        fs::metadata(seed.join("ckpt_policy.hgc"))
            .unwrap()
            .modified()
            .unwrap(),
        ckpt_time
    );
    let timing = fs::read_to_string(seed.join("timing.json")).unwrap();
    assert!(timing.contains("\"phases_ms\": {}"), "{timing}");
}

#[test]
fn changed_training_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_state.toml");
    let base = [
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    assert_eq!(code(&run(&base)), 0);
    let mut args = base.to_vec();
    args.extend(["--override", "train.lr=0.01"]);
    assert_eq!(code(&run(&args)), 2);
}

#[test]
fn plan_dumps_edge_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_state.toml");
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out
        ])),
        0
    );
    let o = run(&[
        "plan",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
        "--planner",
        "asym_graph",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = String::from_utf8_lossy(&o.stdout)
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(fs::read_to_string(first).unwrap().lines().count() >= 2);
}
