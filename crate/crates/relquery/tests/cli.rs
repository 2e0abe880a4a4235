mod common;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use relquery::cli::SuspendedSession;
use relquery::dataio::{read_run_record, RunRecord};

use common::tiny_config;

fn relquery(dir: &Path, args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_relquery"))
        .args(["--config", dir.join("config.json").to_str().unwrap(), "--out-dir", dir.to_str().unwrap()])
        .args(args)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), serde_json::to_vec(&tiny_config(5)).unwrap()).unwrap();
    dir
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = setup();
    let d = dir.path();

    // Missing checkpoints are reported by model.
    let out = relquery(d, &["experiment"], "");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bayesian-clean"));

    ok(relquery(d, &["gen-data"], ""));
    for f in ["images-idx3-ubyte", "metadata.csv", "dataset.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(d.join("data/metadata.csv")).unwrap();
    assert!(header.starts_with("id,area,length,thickness,slant,width,height\n"));

    let trained = ok(relquery(d, &["train"], ""));
    assert_eq!(trained.lines().filter(|l| l.contains("satisfaction")).count(), 6);
    assert!(d.join("models/unsupervised-noisy.json").exists());
    let metrics = std::fs::read_to_string(d.join("models/bayesian-clean.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,recon,kl,triplet,total"));
    assert_eq!(metrics.lines().count(), 1 + 2);

    let eval = ok(relquery(d, &["eval", "--data", d.join("data").to_str().unwrap()], ""));
    assert!(eval.contains("traditional-noisy"));
    assert!(d.join("eval.csv").exists());

    ok(relquery(d, &["experiment", "--k-sweep", "1,10"], ""));
    let sweep = std::fs::read_to_string(d.join("experiment/k_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("objective,noise,k,median,q1,q3"));
    assert_eq!(sweep.lines().count(), 1 + 6 * 2);
    let csv = std::fs::read_to_string(d.join("experiment/experiment.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12 * 2 * 4);
    assert!(d.join("experiment/summary.csv").exists());
    let record = read_run_record(&d.join("experiment/runs/bayesian-clean-btrm-trial01.json")).unwrap();
    assert_eq!(record.queries.len(), 4);

    // A synthetic localize for trial 1 reproduces the experiment's run record.
    ok(relquery(d, &["localize", "--model", "bayesian-clean", "--response", "btrm", "--trial", "1"], ""));
    let single: RunRecord = read_run_record(&d.join("localize/run.json")).unwrap();
    assert_eq!(single, record);
    assert!(d.join("localize/final.pgm").exists());

    // Same seed, fresh directory: identical experiment table.
    let other = setup();
    ok(relquery(other.path(), &["train"], ""));
    ok(relquery(other.path(), &["experiment"], ""));
    assert_eq!(std::fs::read_to_string(other.path().join("experiment/experiment.csv")).unwrap(), csv);
}

#[test]
fn interactive_session_suspends_and_resumes() {
    let dir = setup();
    let d = dir.path();
    ok(relquery(d, &["train", "--model", "unsupervised-clean"], ""));

    // Two answers (one invalid line in between), then stdin closes.
    let out = ok(relquery(d, &["localize", "--model", "unsupervised-clean", "--interactive"], "a\nmaybe\nb\n"));
    assert!(out.contains("query 1 of 4"));
    assert!(out.contains("please answer a or b"));
    assert!(out.contains("resume with --resume"));
    let path = d.join("localize/suspended.json");
    let suspended: SuspendedSession = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(suspended.state.records.len(), 2);

    let out = ok(relquery(d, &["localize", "--resume", path.to_str().unwrap()], "a\na\n"));
    assert!(out.contains("query 3 of 4"));
    assert!(!out.contains("query 2 of 4"));
    let record = read_run_record(&d.join("localize/run.json")).unwrap();
    let choices: Vec<_> = record.queries.iter().map(|q| serde_json::to_string(&q.choice).unwrap()).collect();
    assert_eq!(choices, ["\"a\"", "\"b\"", "\"a\"", "\"a\""]);

    // The same answers in one sitting give the same record.
    let out = ok(relquery(d, &["localize", "--model", "unsupervised-clean", "--interactive"], "a\nb\na\na\n"));
    assert!(out.contains("finished 4 queries"));
    assert_eq!(read_run_record(&d.join("localize/run.json")).unwrap(), record);
}
