//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fed-augmix"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    let text = format!(
        "dataset.source = synth\n\
         dataset.count = 60\n\
         dataset.side = 8\n\
         dataset.classes = 4\n\
         federation.clients = 3\n\
         federation.participation = 1.0\n\
         federation.rounds = 1\n\
         federation.eta = 0.05\n\
         federation.batch_size = 4\n\
         federation.deterministic = true\n\
         model.layer_sizes = 64,8,4\n\
         augmix.max_chain_len = 1\n\
         attack.iterations = 2\n\
         attack.batch_size = 2\n\
         attack.local_epochs_observed = 1\n\
         experiment.severities = 0,2\n\
         experiment.stages = untrained\n\
         experiment.attacks_per_cell = 1\n\
         experiment.out_dir = {}\n",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_exits_zero_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("out");

    for args in [
        vec!["train"],
        vec!["attack"],
        vec!["report"],
        vec!["partition-inspect"],
    ] {
        let run = bin()
            .arg("--config")
            .arg(&cfg)
            .args(&args)
            .output()
            .unwrap();
        assert!(
            run.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&run.stderr)
        );
    }
    assert!(out.join("s0/round_log.csv").exists());
    assert!(out.join("s2/model_untrained.famb").exists());
    assert!(out.join("report/defense_report.csv").exists());
    assert!(out.join("report/tradeoff.csv").exists());
}

#[test]
fn bad_config_key_fails_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.cfg");
    std::fs::write(&path, "mystery.key = 1\n").unwrap();
    let run = bin().arg("--config").arg(&path).arg("train").output().unwrap();
    assert!(!run.status.success());
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("mystery.key"), "stderr: {err}");
    assert_eq!(err.lines().count(), 1, "diagnostic should be one line: {err}");
}

#[test]
fn attack_with_partial_cell_flags_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["attack", "--severity", "2"])
        .output()
        .unwrap();
    assert!(!run.status.success());
}

#[test]
fn out_flag_overrides_the_config_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let alt = tmp.path().join("elsewhere");
    let run = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&alt)
        .arg("train")
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(alt.join("s0/round_log.csv").exists());
}

#[test]
fn partition_inspect_prints_a_csv_header() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("partition-inspect")
        .output()
        .unwrap();
    assert!(run.status.success());
    let text = String::from_utf8_lossy(&run.stdout);
    assert!(text.starts_with("client,total,train,test,class0"));
}
