use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn demo_system() -> String {
    configs().join("demo_system.toml").display().to_string()
}

fn tdlcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdlcal"))
        .args(args)
        .env_remove("TDLCAL_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tdlcal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sys = demo_system();

    let model = ok(&["model", "--system", &sys, "--tdl", "1"]);
    assert!(model.starts_with("physical_index,sample_position_ps\n"));
    assert_eq!(model.lines().count(), 12 * 8 + 1);

    let raw = d.join("raw.csv");
    ok(&[
        "density",
        "--system",
        &sys,
        "--shots",
        "100000",
        "--out",
        p(&raw),
    ]);
    assert!(fs::read_to_string(&raw)
        .unwrap()
        .starts_with("# total_shots=100000\n"));

    let mut states = Vec::new();
    for tdl in 0..2 {
        for g in 0..3 {
            let s = d.join(format!("t{tdl}g{g}.state"));
            let (t, g) = (tdl.to_string(), g.to_string());
            let log = ok(&[
                "por",
                "--system",
                &sys,
                "--tdl",
                &t,
                "--group",
                &g,
                "--shots",
                "100000",
                "--seed",
                "3",
                "--state-out",
                p(&s),
                "--dot",
                p(&d.join("dags.dot")),
            ]);
            assert!(log.contains("round 2 tapped 1.0000"), "{log}");
            states.push(s);
        }
    }
    assert!(fs::read_to_string(d.join("dags.dot"))
        .unwrap()
        .starts_with("digraph cell"));

    let group = ok(&[
        "density",
        "--system",
        &sys,
        "--state",
        p(&states[0]),
        "--shots",
        "100000",
    ]);
    assert!(group.contains("tapped"));

    let merged = d.join("merged.csv");
    let mut args = vec![
        "iti",
        "--system",
        &sys,
        "--shots",
        "100000",
        "--out",
        p(&merged),
        "--state",
    ];
    args.extend(states.iter().map(|s| p(s)));
    let log = ok(&args);
    assert!(log.contains(" 0 new missing codes"), "{log}");

    let table = d.join("calibration.csv");
    ok(&[
        "calibrate",
        "--system",
        &sys,
        "--merged",
        p(&merged),
        "--shots",
        "10000000",
        "--out",
        p(&table),
    ]);

    let metrics = ok(&["metrics", "--density", p(&raw), "--csv"]);
    assert!(metrics.starts_with("metric,uncalibrated\n"), "{metrics}");

    let ti = ok(&[
        "ti",
        "--system",
        &sys,
        "--merged",
        p(&merged),
        "--calibration",
        p(&table),
        "--delays",
        "25:375:50",
        "--reps",
        "2",
        "--pairs",
        "200",
    ]);
    assert!(ti.starts_with("# rms_ps="), "{ti}");
    assert_eq!(ti.lines().filter(|l| !l.starts_with('#')).count(), 1 + 8);
}

#[test]
fn por_resume_continues_the_same_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sys = demo_system();
    let common = [
        "--system",
        sys.as_str(),
        "--tdl",
        "1",
        "--group",
        "2",
        "--shots",
        "50000",
        "--seed",
        "4",
    ];

    let both = d.join("both.state");
    let mut args = vec!["por", "--iterations", "2", "--state-out", p(&both)];
    args.extend(common);
    ok(&args);

    let first = d.join("first.state");
    let mut args = vec!["por", "--iterations", "1", "--state-out", p(&first)];
    args.extend(common);
    ok(&args);
    let second = d.join("second.state");
    let mut args = vec![
        "por",
        "--iterations",
        "1",
        "--resume",
        p(&first),
        "--state-out",
        p(&second),
    ];
    args.extend(common);
    ok(&args);

    assert_eq!(fs::read(&both).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn full_demo_writes_to_env_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = configs().join("demo.toml");
    let start = Instant::now();
    let res = Command::new(env!("CARGO_BIN_EXE_tdlcal"))
        .args(["full", "--config", p(&cfg)])
        .env("TDLCAL_OUT", &out)
        .output()
        .unwrap();
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(start.elapsed() < Duration::from_secs(10));
    let report = String::from_utf8(res.stdout).unwrap();
    assert!(out.join("report.txt").is_file());
    assert_eq!(report, fs::read_to_string(out.join("report.txt")).unwrap());

    let again = Command::new(env!("CARGO_BIN_EXE_tdlcal"))
        .arg("report")
        .env("TDLCAL_OUT", &out)
        .output()
        .unwrap();
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), report);

    let table = ok(&[
        "metrics",
        "--density",
        p(&out.join("metrics/eval_density.csv")),
        "--calibration",
        p(&out.join("calib/calibration.csv")),
    ]);
    assert!(table.contains("calibrated"), "{table}");

    let resumed = Command::new(env!("CARGO_BIN_EXE_tdlcal"))
        .args(["full", "--config", p(&cfg), "--resume"])
        .env("TDLCAL_OUT", &out)
        .output()
        .unwrap();
    assert!(resumed.status.success());
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("ran 0 of 8 stages"));
}

#[test]
fn full_overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("demo.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["full", "--config", p(&cfg), "--out", p(&a)]);
    ok(&[
        "full",
        "--config",
        p(&cfg),
        "--out",
        p(&b),
        "--seed",
        "8",
        "--shots",
        "50000",
        "--threshold-ps",
        "0.3",
    ]);
    let snap = fs::read_to_string(b.join("pipeline.toml")).unwrap();
    assert!(
        snap.contains("seed = 8")
            && snap.contains("shots = 50000")
            && snap.contains("iti_threshold_ps = 0.3"),
        "{snap}"
    );
    assert_ne!(
        fs::read(a.join("iti/merged.csv")).unwrap(),
        fs::read(b.join("iti/merged.csv")).unwrap()
    );
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(
        tdlcal(&["model", "--system", p(&missing)]).status.code(),
        Some(2)
    );
    assert_eq!(
        tdlcal(&["full", "--config", p(&missing)]).status.code(),
        Some(2)
    );
    assert_eq!(
        tdlcal(&["model", "--system", &demo_system(), "--tdl", "5"])
            .status
            .code(),
        Some(2)
    );
    let bad = tdlcal(&[
        "por",
        "--system",
        &demo_system(),
        "--ansatz",
        "sideways",
        "--state-out",
        p(&dir.path().join("s")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(tdlcal(&["report", p(&missing)]).status.code(), Some(2));
    let sweep = tdlcal(&[
        "ti",
        "--system",
        &demo_system(),
        "--merged",
        p(&missing),
        "--calibration",
        p(&missing),
    ]);
    assert_eq!(sweep.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.starts_with("error: "), "{msg}");
}

#[test]
fn stage_errors_exit_with_stage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sys = demo_system();
    let s = d.join("s.state");
    ok(&[
        "por",
        "--system",
        &sys,
        "--shots",
        "20000",
        "--state-out",
        p(&s),
    ]);
    // A threshold above every bin drops them all.
    let res = tdlcal(&[
        "iti",
        "--system",
        &sys,
        "--state",
        p(&s),
        "--threshold-ps",
        "1000",
        "--out",
        p(&d.join("m.csv")),
    ]);
    assert_eq!(
        res.status.code(),
        Some(13),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );

    // Output into a path that cannot be a directory fails the model stage.
    let blocker = d.join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = configs().join("demo.toml");
    let res = tdlcal(&[
        "full",
        "--config",
        p(&cfg),
        "--out",
        p(&blocker.join("out")),
    ]);
    assert_eq!(
        res.status.code(),
        Some(10),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
}
