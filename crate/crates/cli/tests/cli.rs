use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fnftg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fnftg")).args(args).output().expect("spawn fnftg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

fn synth(dir: &TempDir, task: &str, name: &str) -> PathBuf {
    let out = dir.path().join(name);
    let o = fnftg(&["synth", "--task", task, "--n", "64", "--seed", "7", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn train_quick(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", "2"];
    args.extend_from_slice(extra);
    fnftg(&args)
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "structure-determined", "a");
    let b = synth(&dir, "structure-determined", "b");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }

    let text = synth(&dir, "text-determined", "text");
    let o = fnftg(&["stats", "--data", s(&text), "--regime", "transfer"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&o);
    assert_eq!(report["entities"], 64);
    assert_eq!(report["relations"], 1);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere");
    let o = fnftg(&["stats", "--data", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));

    let o = fnftg(&["synth", "--task", "text-determined", "--n", "4", "--out", s(&dir.path().join("tiny"))]);
    assert_eq!(o.status.code(), Some(2));

    let data = synth(&dir, "structure-determined", "data");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n[ablation]\nuse_rij = false\nuse_edges = true\n").unwrap();
    let o = fnftg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("learning_rate") && err.contains("ablation.use_edges"), "{err}");
}

#[test]
fn gradcheck_reports_every_op_and_names_an_injected_fault() {
    let o = fnftg(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&o);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["max_relative_error"].is_number()));

    let o = fnftg(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("softmax"), "{}", stderr(&o));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "structure-determined", "data");
    let run = dir.path().join("run");
    let o = train_quick(&data, &run, &["--preset", "synthetic-tg-half"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!fs::read_to_string(run.join("metrics.jsonl")).unwrap().is_empty());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["configuration"], "FnF-TG");

    let ckpt = run.join("checkpoint");
    let o = fnftg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mrr = json(&o)["optimistic"]["mean"]["mrr"].as_f64().unwrap();
    assert!(mrr > 0.0 && mrr <= 1.0);
    assert!(ckpt.join("ranks_test.csv").exists());

    let o = fnftg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--candidates-cap", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&o)["capped"], true);

    // The text task has one relation, the checkpoint was trained with two.
    let text = synth(&dir, "text-determined", "text");
    let o = fnftg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&text)]);
    assert_eq!(o.status.code(), Some(2));

    // Re-launching from the manifest alone reproduces the metrics.
    let again = dir.path().join("again");
    let o = fnftg(&["train", "--from-manifest", s(&run.join("run_manifest.json")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), fs::read(again.join("metrics.jsonl")).unwrap());
}

#[test]
fn manifest_names_the_ablation_row() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "structure-determined", "data");
    let cfg = dir.path().join("t.toml");
    fs::write(&cfg, "batch_size = 8\nbase_lr = 0.001\n[ablation]\nuse_subgraphs = false\n").unwrap();
    let run = dir.path().join("run");
    let o = train_quick(&data, &run, &["--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["configuration"], "- S(h_TT), S(t_TT)");
}

#[test]
fn transfer_evaluation_of_overlapping_splits_warns() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("dyn");
    fs::create_dir_all(&data).unwrap();
    let ents: String = (0..6).map(|i| format!("e{i}\tthing number {i}\n")).collect();
    fs::write(data.join("entity2text.tsv"), ents).unwrap();
    fs::write(data.join("relation2text.tsv"), "r0\tnext to\n").unwrap();
    fs::write(data.join("train.tsv"), "e0\tr0\te1\ne1\tr0\te2\ne2\tr0\te3\ne3\tr0\te4\n").unwrap();
    fs::write(data.join("valid.tsv"), "e4\tr0\te5\n").unwrap();
    fs::write(data.join("test.tsv"), "e0\tr0\te5\n").unwrap();
    let run = dir.path().join("run");
    let o = train_quick(&data, &run, &["--preset", "synthetic-tg-half"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fnftg(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&data), "--regime", "transfer"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("transfer regime"), "{}", stderr(&o));
}
