use std::path::Path;
use std::process::{Command, Output};

fn dfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--steps", "1500", "--episodes", "2", "--quiet", "--deterministic"];
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    args.extend_from_slice(extra);
    dfp(&args)
}

#[test]
fn train_then_eval_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--scenario", "G3", "--goal", "0.5,0.5,1", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final evaluation on G3 (2 episodes)"));
    for f in ["config.txt", "report.csv", "model.dfp", "model.dfp.cfg", "eval.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let config = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
    for line in ["setting=G3", "seed=9", "actors=1", "execution=sequential", "episodes=2"] {
        assert!(config.lines().any(|l| l == line), "{line} missing from\n{config}");
    }

    let model = dir.path().join("model.dfp");
    let eval_dir = dir.path().join("eval");
    let o = dfp(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--goal",
        "1,1,-1",
        "--episodes",
        "3",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("3 episodes on G3"));
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn deterministic_runs_repeat_exactly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train(a.path(), &["--scenario", "G1"]).status.success());
    assert!(train(b.path(), &["--scenario", "G1"]).status.success());
    for f in ["report.csv", "model.dfp"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_entries_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    std::fs::write(&cfg, "# a comment\nsetting=G2\nsteps=99999999\nlr=0.0005\n").unwrap();
    let out = dir.path().join("out");
    let o = train(&out, &["--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.lines().any(|l| l == "setting=G2"));
    assert!(config.lines().any(|l| l == "steps=1500"));
    assert!(config.lines().any(|l| l == "lr=0.0005"));
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let o = dfp(&["train", "--scenario", "G9", "--steps", "10"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown scenario"));

    let o = dfp(&["train", "--scenario", "G1", "--goal", "1,2", "--steps", "10"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("goal has 2 weights"));

    let o = dfp(&["eval", "--model", "/nonexistent/model.dfp"]);
    assert!(!o.status.success());

    let o = dfp(&["calibrate", "--scenario", "G3", "--episodes", "5", "--quiet"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("frags"));
}
