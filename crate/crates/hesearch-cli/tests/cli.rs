//! End-to-end CLI behaviors: determinism of generated artifacts and
//! result records, precondition surfacing, and key-enforcement output.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hesearch(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hesearch"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("stdout is JSON lines"))
        .collect()
}

#[test]
fn gen_is_byte_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen", "--out", "a.bin", "--k", "64", "--km", "3", "--ell", "16", "--seed", "9"];
    assert!(hesearch(&args, dir.path()).status.success());
    let again =
        ["gen", "--out", "b.bin", "--k", "64", "--km", "3", "--ell", "16", "--seed", "9"];
    assert!(hesearch(&again, dir.path()).status.success());
    assert_eq!(
        fs::read(dir.path().join("a.bin")).unwrap(),
        fs::read(dir.path().join("b.bin")).unwrap(),
        "same seed must produce identical bytes"
    );

    let bad = hesearch(
        &["gen", "--out", "c.bin", "--k", "4", "--km", "9", "--ell", "16", "--seed", "1"],
        dir.path(),
    );
    assert!(!bad.status.success(), "Km > K must be rejected");
}

#[test]
fn enroll_summarizes_and_rejects_odd_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let gen =
        ["gen", "--out", "d.bin", "--k", "32", "--km", "1", "--ell", "16", "--seed", "3"];
    assert!(hesearch(&gen, dir.path()).status.success());

    let enroll = hesearch(
        &["enroll", "--dataset", "d.bin", "--db", "db", "--layout", "pre-rotated",
          "--num-slots", "32", "--n1", "4", "--max-level", "12"],
        dir.path(),
    );
    assert!(enroll.status.success());
    let record = &stdout_lines(&enroll)[0];
    assert_eq!(record["layout"], "pre-rotated");
    assert_eq!(record["pre_rotation"], 1, "header must record the enroll-time pre-rotation");
    assert_eq!(record["diagonal_files"], 16);
    assert_eq!(record["groups"], 1);

    // Replicated layout with a single (odd) block per ciphertext fails.
    let odd = hesearch(
        &["enroll", "--dataset", "d.bin", "--db", "db2", "--layout", "replicated",
          "--num-slots", "16", "--n1", "4"],
        dir.path(),
    );
    assert!(!odd.status.success());
    assert!(
        String::from_utf8_lossy(&odd.stderr).contains("even number of blocks"),
        "stderr: {}",
        String::from_utf8_lossy(&odd.stderr)
    );
}

#[test]
fn query_records_are_deterministic_and_enforcement_names_offset() {
    let dir = tempfile::tempdir().unwrap();
    let setup = [
        vec!["gen", "--out", "d.bin", "--k", "32", "--km", "2", "--ell", "16", "--seed", "5"],
        vec!["enroll", "--dataset", "d.bin", "--db", "db", "--layout", "pre-rotated",
             "--num-slots", "32", "--n1", "4", "--max-level", "12"],
    ];
    for args in &setup {
        assert!(hesearch(args, dir.path()).status.success());
    }

    let query = ["query", "--db", "db", "--dataset", "d.bin", "--scenario", "membership",
                 "--engine", "grouped-bsgs", "--degree", "63"];
    let first = hesearch(&query, dir.path());
    assert!(first.status.success());
    let second = hesearch(&query, dir.path());
    assert_eq!(first.stdout, second.stdout, "records must be byte-identical across runs");
    let record = &stdout_lines(&first)[0];
    assert_eq!(record["pass"], true);
    assert_eq!(record["decoded"]["count"], 2);

    // Under-provisioned keys fail naming the first absent giant offset.
    let starved = hesearch(
        &["query", "--db", "db", "--dataset", "d.bin", "--scenario", "membership",
          "--engine", "grouped-bsgs", "--degree", "63", "--keys", "baby-only"],
        dir.path(),
    );
    assert!(!starved.status.success());
    let stderr = String::from_utf8_lossy(&starved.stderr);
    assert!(
        stderr.contains("missing rotation key for offset 4"),
        "stderr was: {stderr}"
    );
}

#[test]
fn index_query_through_sender_layout() {
    let dir = tempfile::tempdir().unwrap();
    let setup = [
        vec!["gen", "--out", "d.bin", "--k", "32", "--km", "2", "--ell", "16", "--seed", "21"],
        vec!["enroll", "--dataset", "d.bin", "--db", "db", "--layout", "replicated",
             "--num-slots", "64", "--n1", "5", "--max-level", "13"],
    ];
    for args in &setup {
        assert!(hesearch(args, dir.path()).status.success());
    }
    let out = hesearch(
        &["query", "--db", "db", "--dataset", "d.bin", "--scenario", "index",
          "--engine", "sender", "--degree", "63"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let record = &stdout_lines(&out)[0];
    assert_eq!(record["pass"], true);

    // An engine/layout mismatch is refused up front.
    let mismatch = hesearch(
        &["query", "--db", "db", "--dataset", "d.bin", "--scenario", "index",
          "--engine", "hydia"],
        dir.path(),
    );
    assert!(!mismatch.status.success());
}

#[test]
fn ordered_id_logs_two_gamma_queries() {
    let dir = tempfile::tempdir().unwrap();
    let setup = [
        vec!["gen", "--out", "batch.bin", "--k", "64", "--ell", "64", "--seed", "7",
             "--gamma", "2"],
        vec!["enroll", "--dataset", "batch.bin", "--db", "db", "--layout", "flat",
             "--num-slots", "64", "--n1", "8", "--max-level", "13"],
    ];
    for args in &setup {
        assert!(hesearch(args, dir.path()).status.success());
    }
    let out = hesearch(
        &["query", "--db", "db", "--dataset", "batch.bin", "--scenario", "ordered-id",
          "--engine", "bsgs-diagonal"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let record = &stdout_lines(&out)[0];
    assert_eq!(record["decoded"]["queries_issued"], 4);
    assert_eq!(record["pass"], true);
}

#[test]
fn bench_trials_reuse_serialized_material() {
    let dir = tempfile::tempdir().unwrap();
    let gen = ["gen", "--out", "d.bin", "--k", "32", "--km", "2", "--ell", "16", "--seed", "11"];
    assert!(hesearch(&gen, dir.path()).status.success());
    let out = hesearch(
        &["bench", "--dataset", "d.bin", "--db", "db", "--trials", "3",
          "--num-slots", "32", "--n1", "4", "--degree", "63"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 4, "3 trial rows plus a summary");
    assert_eq!(lines[0]["includes_enrollment"], true);
    assert!(lines[0]["ledger_trial"]["encryptions"].as_u64().unwrap() > 1);
    for row in &lines[1..3] {
        assert_eq!(row["includes_enrollment"], false);
        assert_eq!(row["pass"], true);
        // Deserializing trials never re-encrypt the database; the only
        // encryption is the query itself.
        assert_eq!(row["ledger_trial"]["encryptions"], 1);
    }
    assert_eq!(lines[3]["command"], "bench-summary");
    assert_eq!(lines[3]["query_ledgers_stable"], true);
    assert_eq!(lines[3]["pass"], true);
}

#[test]
fn costs_commands_emit_expected_values() {
    let dir = tempfile::tempdir().unwrap();
    let keys = hesearch(
        &["costs", "keys", "--engine", "bsgs-diagonal", "--ell", "512", "--n1", "23"],
        dir.path(),
    );
    assert!(keys.status.success());
    assert_eq!(stdout_lines(&keys)[0]["count"], 44);

    let pool = hesearch(
        &["costs", "stream-pool", "--sms", "132", "--free-bytes", "99999999999"],
        dir.path(),
    );
    assert_eq!(stdout_lines(&pool)[0]["pool_size"], 32);

    let predict = hesearch(
        &["costs", "predict", "--engine", "grouped-bsgs", "--ell", "512", "--n1", "23",
          "--groups", "64"],
        dir.path(),
    );
    assert_eq!(stdout_lines(&predict)[0]["prediction"]["rotations"], 1430);

    let reconcile = hesearch(&["costs", "reconcile", "--engine", "sender", "--ell", "8",
                               "--n1", "3", "--groups", "2", "--num-slots", "32"], dir.path());
    assert!(reconcile.status.success());
    assert_eq!(stdout_lines(&reconcile)[0]["pass"], true);
}
