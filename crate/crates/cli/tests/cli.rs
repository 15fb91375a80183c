use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_agcgan");

const TINY: &str = r#"{
  "train": {
    "generator": {"base_width": 4, "embed_dim": 8, "head_width": 2},
    "discriminator": {"base_width": 4},
    "predictor": {"base_width": 4},
    "feature": {"base_width": 4},
    "pretrain": {"steps": 4, "finetune_steps": 2,
                 "source": {"auxiliary": {"identities": 6, "samples_per_identity": 1}}}
  }
}"#;

fn agc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("run agcgan")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = agc(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn help_matches_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let snaps = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let commands = ["", "gen-data", "pretrain-attr", "train", "eval", "predict-attrs", "export-embeddings"];
    for cmd in commands {
        let mut args: Vec<&str> = vec![];
        if !cmd.is_empty() {
            args.push(cmd);
        }
        args.push("--help");
        let text = ok(dir.path(), &args);
        let name = if cmd.is_empty() { "help.txt".to_string() } else { format!("help_{cmd}.txt") };
        let path = snaps.join(name);
        if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
            fs::write(&path, &text).unwrap();
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
        assert_eq!(text, want, "help for {cmd:?} changed");
    }
}

#[test]
fn help_lists_global_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["train", "--help"]);
    for flag in ["--seed", "--config", "--out", "--threads", "--ablation", "--steps", "--data", "--predictor"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    assert!(text.contains("[default: out]"));
    assert!(text.contains("[default: full]"));
}

#[test]
fn gen_data_writes_the_requested_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--identities", "10", "--per-id", "4", "--seed", "7", "--size", "32"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/dataset.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["identities"], 10);
    assert_eq!(m["samples"], 40);
    assert!(dir.path().join("out/gen-data.config.json").exists());
}

#[test]
fn cpl_e_training_logs_only_its_terms() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(p, &["gen-data", "--identities", "4", "--per-id", "2", "--size", "32"]);
    ok(p, &["--config", "tiny.json", "train", "--ablation", "cpl-e", "--steps", "2"]);
    let csv = fs::read_to_string(p.join("out/loss_history.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,loss_cpl,loss_e,total");
    assert_eq!(csv.lines().count(), 3);
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("out/train.config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["ablation"], "cpl-e");
    assert_eq!(snap["train"]["steps"], 2);
    // File values survive where no flag overrides them.
    assert_eq!(snap["train"]["generator"]["base_width"], 4);
}

#[test]
fn missing_checkpoint_is_a_one_line_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = agc(dir.path(), &["eval", "--checkpoint", "missing.agck"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=io msg="), "{err}");
    assert!(err.contains("missing.agck"));
}

#[test]
fn usage_errors_are_distinct_and_name_the_item() {
    let dir = tempfile::tempdir().unwrap();
    let o = agc(dir.path(), &["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: kind=usage msg="));
    assert!(stderr(&o).contains("--bogus"));
    let o = agc(dir.path(), &["train", "--ablation", "everything"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("everything"));
    fs::write(dir.path().join("bad.json"), "{\"train\": {\"nonsense\": 1}}").unwrap();
    let o = agc(dir.path(), &["--config", "bad.json", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=malformed msg="), "{}", stderr(&o));
    assert!(stderr(&o).contains("nonsense"));
}

#[test]
fn checkpoint_dataset_mismatch_is_reported() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(p, &["gen-data", "--identities", "4", "--per-id", "2", "--size", "32"]);
    ok(p, &["--config", "tiny.json", "train", "--ablation", "cpl-e", "--steps", "1"]);
    ok(p, &["--out", "big", "gen-data", "--identities", "4", "--per-id", "2", "--size", "64"]);
    let o = agc(p, &["eval", "--checkpoint", "out/checkpoint_000001.agck", "--data", "big/dataset.agcd"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=mismatch msg="), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint_000001.agck"));
}

/// Runs the whole pipeline in `out` and returns every CSV it wrote, by name.
pub fn pipeline(dir: &Path, out: &str) -> Vec<(String, Vec<u8>)> {
    let run = |args: &[&str]| {
        let mut full = vec!["--out", out, "--seed", "5", "--threads", "1", "--config", "tiny.json"];
        full.extend_from_slice(args);
        ok(dir, &full);
    };
    let ckpt = format!("{out}/checkpoint_000003.agck");
    run(&["gen-data", "--identities", "4", "--per-id", "2", "--size", "32"]);
    run(&["train", "--steps", "3"]);
    run(&["eval", "--checkpoint", &ckpt]);
    run(&["predict-attrs", "--checkpoint", &ckpt]);
    run(&["export-embeddings", "--checkpoint", &ckpt]);
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join(out))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "txt"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn identical_invocations_give_identical_outputs() {
    let dir = tiny_dir();
    let a = pipeline(dir.path(), "a");
    let b = pipeline(dir.path(), "b");
    assert_eq!(a.len(), 7, "{:?}", a.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(a, b);
}
