use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_onionmail"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/testdata/scenarios")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn carrier_scenario_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let path = scenario("carrier.scn");
    let out = run(&[
        "run",
        path.to_str().unwrap(),
        "--log",
        &p("log"),
        "--metrics",
        &p("metrics"),
        "--dump-mailboxes",
        &p("mail"),
        "--dump-ledgers",
        &p("ledgers"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(p("log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains(" assert ")).count(), 3);
    assert!(log
        .lines()
        .all(|l| !l.contains(" assert ") || l.ends_with("outcome=pass")));
    let metrics = fs::read_to_string(p("metrics")).unwrap();
    assert!(metrics.contains("assertions.fail=0\n"));
    let mail = fs::read_to_string(p("mail")).unwrap();
    assert!(mail.contains("meet at noon"), "{mail}");
}

#[test]
fn outputs_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let m = dir.path().join(format!("m{i}"));
        let l = dir.path().join(format!("l{i}"));
        let out = run(&[
            "run",
            scenario("ledger_ring.scn").to_str().unwrap(),
            "--metrics",
            m.to_str().unwrap(),
            "--dump-ledgers",
            l.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        runs.push((out.stdout, fs::read(m).unwrap(), fs::read(l).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn failing_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("direct.scn"))
        .unwrap()
        .replace("at=1 ", "at=2 ");
    let f = dir.path().join("bad.scn");
    fs::write(&f, text).unwrap();
    let out = run(&["run", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("outcome=fail"));
}

#[test]
fn parse_errors_exit_two_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.scn");
    fs::write(&f, "NODE alice\n\nSEND 0 alice a1 -> bob.b1 body=\"x\"\n").unwrap();
    for cmd in ["run", "check"] {
        let out = run(&[cmd, f.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    }
}

#[test]
fn check_accepts_every_bundled_scenario() {
    let dir = scenario("");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = run(&["check", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", path.display());
    }
}

#[test]
fn demo_keys_prints_frozen_values() {
    let out = run(&["demo-keys", "--seed", "17"]);
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.contains("address=user@2ejwqprbyjfl.onion\n"));
    assert!(s.contains("mail-fingerprint=5g3q8tkeebhh\n"));
}

#[test]
fn seed_flag_is_accepted() {
    let out = run(&["run", scenario("direct.scn").to_str().unwrap(), "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0));
}
