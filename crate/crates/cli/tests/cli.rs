use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ensemble(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensemble"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, steps: usize, samples: usize) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
[system]
bounds = [[-2.0, 2.0]]
horizon = 1.0
a = [["0", "-b"], ["b", "0"]]
b = [["1", "0"], ["0", "1"]]
g = [["0.1"], ["0.2"]]
x0 = ["1", "0"]
xf = ["0", "0"]
noise = {{ kind = "brownian" }}

[grids]
steps = {steps}
samples = {samples}

[simulation]
scheme = "em"
h = 0.01
trials = 20
seed = 4

[outputs]
directory = "{}"
plot = false
"#,
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn lists_every_preset() {
    let out = ensemble(&["example", "list"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "bm-oscillator",
        "poisson-oscillator",
        "scalar-tv",
        "quantum-transport",
    ] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn overdetermined_grid_exits_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 4, 5);
    let out = ensemble(&["synthesize", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("synthesis::OverdeterminedGrid"), "{err}");
    assert!(err.contains("n*P <= m*N"), "{err}");
}

#[test]
fn single_trial_requires_no_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 100, 5);
    let cfg = cfg.to_str().unwrap();
    let out = ensemble(&["simulate", "--config", cfg, "--trials", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .contains("stats::InsufficientTrials"));
    let out = ensemble(&["simulate", "--config", cfg, "--trials", "1", "--no-stats"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("out/terminals.csv").exists());
}

#[test]
fn run_meta_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 100, 5);
    let out = ensemble(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let first = dir.path().join("out");
    let meta = fs::read_to_string(first.join("run_meta.toml")).unwrap();
    assert!(meta.contains("[results]"));

    let replay = dir.path().join("replay");
    let out = ensemble(&[
        "simulate",
        "--config",
        first.join("run_meta.toml").to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in ["control.csv", "terminals.csv", "stats.csv"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(replay.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn simulate_accepts_a_written_control() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 100, 5);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(ensemble(&["synthesize", "--config", cfg]).status.code(), Some(0));
    let control = dir.path().join("control.csv");
    fs::copy(dir.path().join("out/control.csv"), &control).unwrap();
    let out = ensemble(&[
        "simulate",
        "--config",
        cfg,
        "--control",
        control.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("J1 ="));

    fs::write(&control, "t,u1\n0.5,1.0\n").unwrap();
    let out = ensemble(&[
        "simulate",
        "--config",
        cfg,
        "--control",
        control.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ensemble_cli::RunConfig::load(&path).unwrap();
        let res = ensemble_cli::pipeline::resolve(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(res.tgrid.steps() > 0 && !res.pgrid.is_empty());
        seen += 1;
    }
    assert!(seen >= 5);
}
