use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relsynth::corpus::EvalGroup;
use relsynth::evaluation::{random_guess_monte_carlo, MonteCarloReport};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic").join(name)
}

fn relsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relsynth"))
        .args(args)
        .env_remove("REPAL_MODEL")
        .env_remove("REPAL_API_KEY")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_errors() {
    assert_eq!(code(&relsynth(&["--help"])), 0);
    assert_eq!(code(&relsynth(&["frobnicate"])), 1);
    assert_eq!(code(&relsynth(&["loop", "run"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let slots = dir.path().join("slots.json");
    fs::write(&slots, "{}").unwrap();
    assert_eq!(code(&relsynth(&["prompts", "render", "--kind", "no-such-kind", "--slots", s(&slots)])), 1);

    let defs = data("definitions.jsonl");
    let unknown = relsynth(&[
        "synthesize", "init", "--definitions", s(&defs), "--relation", "P0", "--out", s(dir.path()), "--dry-run",
    ]);
    assert_eq!(code(&unknown), 1, "{}", String::from_utf8_lossy(&unknown.stderr));

    let missing = dir.path().join("missing-run");
    let out = relsynth(&["loop", "resume", "--run", s(&missing), "--corpus", s(&data("corpus.jsonl"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dry_run_writes_prompts_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("init");
    let defs = data("definitions.jsonl");
    let relation = relsynth::synthetic::definitions()[0].id().to_string();
    let res = relsynth(&[
        "synthesize", "init", "--definitions", s(&defs), "--relation", &relation, "--out", s(&out), "--dry-run",
        "--llm", "mock",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let entries: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(entries, vec!["prompts".to_string()]);
    let mut prompts: Vec<String> =
        fs::read_dir(out.join("prompts")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    prompts.sort();
    assert_eq!(prompts, ["seed-brief.txt", "seed-implicit.txt", "seed-medium.txt"]);
}

#[test]
fn random_baseline_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("random.json");
    let group_path = data("group.json");
    let res = relsynth(&[
        "eval", "baseline", "--kind", "random", "--group", s(&group_path), "--trials", "200", "--seed", "5", "--out",
        s(&report),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let got: MonteCarloReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let group: EvalGroup = serde_json::from_str(&fs::read_to_string(&group_path).unwrap()).unwrap();
    assert_eq!(got, random_guess_monte_carlo(&group, 200, 5).unwrap());
}

#[test]
fn loop_report_and_evaluation_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let relation = relsynth::synthetic::definitions()[1].id().to_string();
    let res = relsynth(&[
        "loop", "run", "--definitions", s(&data("definitions.jsonl")), "--relations", &relation, "--corpus",
        s(&data("corpus.jsonl")), "--config", s(&data("config.json")), "--run", s(&run), "--llm", "mock",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let report = relsynth(&["report", "--run", s(&run), "--json"]);
    assert_eq!(code(&report), 0);
    let summary: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert!(summary.to_string().contains(&relation));

    let preds = dir.path().join("preds.jsonl");
    let res = relsynth(&["eval", "predict", "--run", s(&run), "--group", s(&data("group.json")), "--out", s(&preds)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(fs::read_to_string(&preds).unwrap().lines().count() > 0);
}
