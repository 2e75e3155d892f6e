use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn srppo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srppo"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn shipped_configs_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = srppo(&["validate", "--config", path.to_str().unwrap()], tmp.path());
            assert!(out.status.success(), "{}: {}", path.display(), text(&out.stderr));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn invalid_config_exits_nonzero_naming_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "stages = [\"pretrain\", \"ppo\"]\n").unwrap();
    let out = srppo(&["validate", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("`ppo` requires `sft`"), "{}", text(&out.stderr));

    std::fs::write(&cfg, "seeds = 3\n").unwrap();
    let out = srppo(&["validate", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("seeds"));
}

#[test]
fn validate_prints_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("minimal.toml");
    let out = srppo(&["validate", "--config", cfg.to_str().unwrap(), "--print"], tmp.path());
    assert!(out.status.success());
    let printed = text(&out.stdout);
    assert!(printed.contains("clip_epsilon = 0.2"));
    assert!(printed.contains("vocab_size = 4"));
}

#[test]
fn run_report_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("minimal.toml");
    let cfg = cfg.to_str().unwrap();
    for (dir, seed) in [("a", "1"), ("b", "2")] {
        let out = srppo(
            &["run", "--config", cfg, "--out", dir, "--seed", seed, "--stages", "pretrain,sft,ppo,eval"],
            tmp.path(),
        );
        assert!(out.status.success(), "{}", text(&out.stderr));
        let stdout = text(&out.stdout);
        assert!(stdout.contains("4 stages completed"), "{stdout}");
        assert!(stdout.contains("srppo,"));
        assert!(tmp.path().join(dir).join("report/summary.csv").exists());
        assert!(!tmp.path().join(dir).join("sft_extended").exists());
    }
    let written = std::fs::read_to_string(tmp.path().join("a/config.toml")).unwrap();
    assert!(written.contains("seed = 1"));

    let again = srppo(&["run", "--config", cfg, "--out", "a"], tmp.path());
    assert!(!again.status.success());
    assert!(text(&again.stderr).contains("already holds a run"));

    let rep = srppo(&["report", "a"], tmp.path());
    assert!(rep.status.success());
    assert!(text(&rep.stdout).lines().any(|l| l.ends_with(".svg")));

    let cmp = srppo(&["compare", "a", "b", "--out", "table.csv"], tmp.path());
    assert!(cmp.status.success(), "{}", text(&cmp.stderr));
    let table = std::fs::read_to_string(tmp.path().join("table.csv")).unwrap();
    assert!(table.starts_with("run,method,"));
    assert_eq!(table.lines().count(), 1 + 2 * 3);

    let single = srppo(&["compare", "a"], tmp.path());
    assert!(!single.status.success());
}

#[test]
fn unknown_stage_is_rejected_by_the_parser() {
    let tmp = tempfile::tempdir().unwrap();
    let out = srppo(&["run", "--stages", "pretrain,finetune"], tmp.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("unknown stage `finetune`"));
}

#[test]
fn report_without_a_run_lists_expected_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = srppo(&["report", "."], tmp.path());
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("missing artifacts") && err.contains("manifest.json"), "{err}");
}
