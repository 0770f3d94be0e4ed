mod common;

use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use common::*;
use meta_attack_lab::run::RESULTS_FILE;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meta-attack"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes_and_lists_every_check() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 22 + 1, "{text}");
    assert!(lines.last().unwrap().starts_with("22 checks"));
    assert!(lines.last().unwrap().ends_with("0 failed"));
}

#[test]
fn a_corrupted_backward_pass_is_caught_by_name() {
    let o = run(&["gradcheck", "--fault", "matmul"]);
    assert!(!o.status.success());
    let text = stdout(&o);
    let failing: Vec<&str> = text.lines().filter(|l| l.contains("FAIL")).collect();
    assert!(failing.iter().any(|l| l.contains("matmul")), "{text}");

    let o = run(&["gradcheck", "--fault", "nosuchop"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nosuchop"));
}

#[test]
fn bad_inputs_exit_with_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "not,a,results,file\n").unwrap();
    let out = dir.path().join("r");
    let o = run(&["report", "--input", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv:1:"));

    let missing = dir.path().join("nope.json");
    let o = run(&["metatrain", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn report_prints_a_summary_table() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixtures().join("results-small.csv");
    let o = run(&["report", "--input", input.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("random_noise"));
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn killed_attack_process_resumes_to_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_json();
    v["evaluation"]["episodes"] = 40.into();
    v["grid"][0]["steps"] = 20.into();
    let config = write_config(&v, dir.path());
    let cfg = config.to_str().unwrap();
    let train_dir = dir.path().join("train");
    let o = run(&["metatrain", "--config", cfg, "--out", train_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let ck = train_dir.join("checkpoint.mpar");
    let ck = ck.to_str().unwrap();

    let full = dir.path().join("full");
    assert!(run(&["attack", "--config", cfg, "--checkpoint", ck, "--out", full.to_str().unwrap()]).status.success());
    let expected = std::fs::read(full.join(RESULTS_FILE)).unwrap();

    let part = dir.path().join("part");
    let results = part.join(RESULTS_FILE);
    let mut child = bin()
        .args(["attack", "--config", cfg, "--checkpoint", ck, "--out", part.to_str().unwrap()])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    loop {
        let lines = std::fs::read(&results).map(|b| b.iter().filter(|&&c| c == b'\n').count()).unwrap_or(0);
        if lines > 1 + 12 * 3 || start.elapsed() > Duration::from_secs(60) {
            break;
        }
        if child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    child.wait().unwrap();
    let partial = std::fs::read(&results).unwrap();
    assert!(partial.len() < expected.len(), "process finished before it could be interrupted");

    let o = run(&["attack", "--config", cfg, "--checkpoint", ck, "--out", part.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("resumed"));
    assert_eq!(std::fs::read(&results).unwrap(), expected);
}
