use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_codeepneat"));
    c.env_remove("CODEEPNEAT_OUT").env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_demo(out: &Path, extra: &[&str]) -> String {
    let mut cmd = bin();
    cmd.args(["run", "--preset", "surrogate-demo", "--seed", "7", "--generations", "4", "--workers", "2", "--out"])
        .arg(out)
        .args(extra);
    ok(cmd.output().unwrap())
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    run_demo(&dir.path().join("a"), &[]);
    run_demo(&dir.path().join("b"), &[]);
    for f in ["checkpoint_latest.json", "checkpoints/gen_0002.json", "fitness.csv", "best.json", "records/gen_0003.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn interrupted_then_resumed_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let whole = dir.path().join("whole");
    let split = dir.path().join("split");
    run_demo(&whole, &[]);
    let stdout = run_demo(&split, &["--stop-after", "2"]);
    assert!(stdout.contains("stopped early"));
    ok(bin()
        .arg("resume")
        .arg(split.join("checkpoints/gen_0002.json"))
        .output()
        .unwrap());
    for f in ["checkpoint_latest.json", "fitness.csv", "best.dot"] {
        assert_eq!(
            std::fs::read(whole.join(f)).unwrap(),
            std::fs::read(split.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn inspect_queries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    run_demo(&out, &[]);
    let latest = out.join("checkpoint_latest.json");

    let line = ok(bin().arg("inspect").arg(&latest).args(["record", "3"]).output().unwrap());
    let jsonl = std::fs::read_to_string(out.join("records/gen_0003.jsonl")).unwrap();
    assert_eq!(line.trim_end(), jsonl.lines().nth(3).unwrap());

    let species = ok(bin().arg("inspect").arg(&latest).arg("species").output().unwrap());
    for (label, size) in [("blueprints", 30), ("modules", 30)] {
        let header = species.lines().find(|l| l.starts_with(label)).unwrap();
        assert!(header.ends_with(&format!("{size} members")), "{header}");
        let section: usize = species
            .lines()
            .skip_while(|l| !l.starts_with(label))
            .skip(1)
            .take_while(|l| l.starts_with("  "))
            .map(|l| l.split(": ").nth(1).unwrap().split(' ').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(section, size, "{label}");
    }

    let fresh = ok(bin().arg("inspect").arg(out.join("checkpoints/gen_0000.json")).arg("best").output().unwrap());
    assert!(fresh.contains("depth 1"), "{fresh}");
    assert!(fresh.contains("digraph"));

    let missing = bin().arg("inspect").arg(&latest).args(["record", "999"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));
}

#[test]
fn export_matches_best_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    run_demo(&out, &[]);
    let exported = dir.path().join("x.json");
    ok(bin()
        .arg("export")
        .arg(out.join("checkpoint_latest.json"))
        .args(["--format", "json", "--output"])
        .arg(&exported)
        .output()
        .unwrap());
    assert_eq!(std::fs::read(&exported).unwrap(), std::fs::read(out.join("best.json")).unwrap());
    let dot = ok(bin()
        .arg("export")
        .arg(out.join("checkpoint_latest.json"))
        .args(["--format", "dot"])
        .output()
        .unwrap());
    assert_eq!(dot, std::fs::read_to_string(out.join("best.dot")).unwrap());
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env");
    ok(bin()
        .env("CODEEPNEAT_OUT", &out)
        .args(["run", "--preset", "surrogate-demo", "--seed", "1", "--generations", "1", "--in-process"])
        .output()
        .unwrap());
    assert!(out.join("checkpoint_latest.json").exists());
}

#[test]
fn config_errors_exit_1_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "preset = \"surrogate-demo\"\nseed = 1\n[blueprint_rates]\nadd_edge = 2.0\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blueprint_rates.add_edge"));

    std::fs::write(&cfg, "preset = \"surrogate-demo\"\ngenerations = 3\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let out = bin().args(["run", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--preset", "surrogate-demo", "--seed", "1", "--listen", "256.1.1.1:1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin().args(["inspect", "/nonexistent/ckpt.json", "best"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn remote_worker_serves_master_and_exits_cleanly() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let dir = tempfile::tempdir().unwrap();
    let master = bin()
        .args(["run", "--preset", "surrogate-demo", "--seed", "3", "--generations", "2", "--listen", &addr, "--out"])
        .arg(dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let worker = bin()
        .args(["worker", "--connect", &addr])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let m = ok(master.wait_with_output().unwrap());
    assert!(m.contains("generations: 2"));
    let w = worker.wait_with_output().unwrap();
    assert_eq!(w.status.code(), Some(0), "{}", String::from_utf8_lossy(&w.stderr));
}
