use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifecourse")).args(args).current_dir(dir).output().unwrap()
}

fn config(iterations: usize) -> String {
    format!(
        "seed = 5\n[paths]\ndata = \"sim/data.csv\"\noutput = \"out\"\n[sampler]\nsuperchains = 2\nsubchains = 2\niterations = {iterations}\nwarmup = 1\ninit = \"prior-draw\"\n"
    )
}

#[test]
fn pool_prints_hand_example() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("e.csv"), "point,variance\n1,0.5\n2,0.5\n3,0.5\n").unwrap();
    let out = run(dir.path(), &["pool", "--estimates", "e.csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("T = 1.8333333333333333"), "{text}");
    assert!(text.contains("point = 2\n"));

    std::fs::write(dir.path().join("one.csv"), "point,variance\n1,0.5\n").unwrap();
    assert_eq!(run(dir.path(), &["pool", "--estimates", "one.csv"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["fit", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["simulate", "--output", "x"]).status.code(), Some(2));
    // missing data file and unknown key both fail closed
    std::fs::write(dir.path().join("run.toml"), config(2)).unwrap();
    assert_eq!(run(dir.path(), &["fit", "--config", "run.toml"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), format!("{}colour = \"red\"\n", config(2))).unwrap();
    assert_eq!(run(dir.path(), &["fit", "--config", "bad.toml"]).status.code(), Some(2));
}

#[test]
fn short_fit_trips_convergence_gate() {
    let dir = tempfile::tempdir().unwrap();
    let sim = run(dir.path(), &["simulate", "--seed", "1", "--participants", "8", "--output", "sim"]);
    assert_eq!(sim.status.code(), Some(0));
    std::fs::write(dir.path().join("run.toml"), config(2)).unwrap();
    let fit = run(dir.path(), &["fit", "--config", "run.toml"]);
    assert_eq!(fit.status.code(), Some(1), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(dir.path().join("out/draws_full.csv").is_file());
    assert!(dir.path().join("out/rhat_full.csv").is_file());
}

#[test]
fn malformed_data_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("sim")).unwrap();
    std::fs::write(
        dir.path().join("sim/data.csv"),
        "cohort,participant,sex,age,race_black,edu_hs,edu_hsplus,birth_year,rf_1,rf_2,rf_3\n1,1,F,30,0,1,0,1960,1,2,3\n1,1,F,x,0,1,0,1960,1,2,3\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("run.toml"), config(4)).unwrap();
    let out = run(dir.path(), &["fit", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}
