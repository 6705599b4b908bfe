use std::path::Path;
use std::process::{Command, Output};

fn reprompt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reprompt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn demo_shows_layout_bearing_prompt() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-data", "sft", "train"] {
        ok(&reprompt(dir.path(), &[stage, "--out", "out"]));
    }
    let text = ok(&reprompt(
        dir.path(),
        &["demo", "--out", "out", "--prompt", "a photo of a dog above a cow"],
    ));
    let line = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .map(str::trim)
            .unwrap_or_else(|| panic!("no {key} line in\n{text}"))
            .to_string()
    };
    let prompt = line("enhanced prompt:");
    assert!(prompt.split(' ').any(|w| w.starts_with("at-")), "{prompt}");
    assert!(line("output:").starts_with("<reason>"));
    assert!(text.contains("\"well_formed\": true"));
    assert!(text.contains("scene:\n|"));
}

#[test]
fn train_with_zero_steps_writes_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["data.per_category.single_object=20", "sft.epochs=1"];
    for stage in ["gen-data", "sft"] {
        let mut args = vec![stage, "--out", "out"];
        args.extend(small);
        ok(&reprompt(dir.path(), &args));
    }
    ok(&reprompt(dir.path(), &["train", "--out", "out", "grpo.steps=0"]));
    let log = std::fs::read(dir.path().join("out/train_log.jsonl")).unwrap();
    assert!(log.is_empty());
    assert!(dir.path().join("out/rl.ckpt.json").is_file());
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    ok(&reprompt(dir.path(), &["gen-data", "--out", "out"]));
    let out = reprompt(dir.path(), &["eval", "--out", "out"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!dir.path().join("out/eval_reports.jsonl").exists());
    assert!(!dir.path().join("out/eval_compare.json").exists());
}

#[test]
fn config_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| reprompt(dir.path(), args).status.code();
    assert_eq!(code(&["gen-data", "--config", "absent.toml"]), Some(3));
    std::fs::write(dir.path().join("bad.toml"), "[grpo]\nsteps = \"many\"\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", "bad.toml"]), Some(2));
    assert_eq!(code(&["gen-data", "grpo.unknown=1"]), Some(2));
    assert_eq!(code(&["demo", "--prompt", "a photo of", "--out", "x"]), Some(2));
}

#[test]
fn effective_config_is_echoed_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    ok(&reprompt(
        dir.path(),
        &["gen-data", "--out", "a", "--seed", "4", "data.per_category.colors=40"],
    ));
    let first = std::fs::read(dir.path().join("a/dataset.jsonl")).unwrap();
    std::fs::copy(dir.path().join("a/config.toml"), dir.path().join("echo.toml")).unwrap();
    ok(&reprompt(dir.path(), &["gen-data", "--config", "echo.toml", "--out", "b"]));
    let second = std::fs::read(dir.path().join("b/dataset.jsonl")).unwrap();
    assert_eq!(first, second);
    let echoed = std::fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(echoed.contains("seed = 4"));
}
