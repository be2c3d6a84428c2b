use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY_DATA: [&str; 8] = [
    "data.train.count=4",
    "data.train.action=4",
    "data.train.transition=4",
    "data.train.frameqa=4",
    "data.test.count=2",
    "data.test.action=2",
    "data.test.transition=2",
    "data.test.frameqa=2",
];

const TINY_MODEL: [&str; 4] =
    ["model.hidden=4", "model.embed_dim=4", "model.attention_hidden=4", "data.difficulty.steps=6"];

fn stvqa(dir: &Path, args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stvqa"));
    cmd.current_dir(dir).env_remove("STVQA_OUT").args(args);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny(extra: &[&'static str]) -> Vec<&'static str> {
    TINY_DATA.iter().chain(TINY_MODEL.iter()).chain(extra).copied().collect()
}

fn generate(dir: &Path, name: &str) {
    ok(&stvqa(dir, &["generate", "--seed", "3", "--out", name], &tiny(&[])));
}

#[test]
fn generate_writes_parseable_manifests_and_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&stvqa(tmp.path(), &["generate", "--seed", "3", "--out", "d"], &tiny(&[])));
    for name in ["train.jsonl", "test.jsonl", "corpus.jsonl"] {
        assert!(stdout.contains(name));
    }
    let train = fs::read_to_string(tmp.path().join("d/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 16);
    for line in train.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(tmp.path().join("d").join(v["features"].as_str().unwrap()).exists());
    }
    let config = fs::read_to_string(tmp.path().join("d/config.toml")).unwrap();
    assert!(config.contains("seed = 3"));
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "a");
    generate(tmp.path(), "b");
    for name in ["train.jsonl", "test.jsonl", "corpus.jsonl"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap()
        );
    }
    let blob = |d: &str| {
        let mut files: Vec<_> =
            fs::read_dir(tmp.path().join(d).join("features")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(blob("a"), blob("b"));
}

#[test]
fn zero_items_give_empty_valid_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let sets = [
        "data.train.count=0",
        "data.train.action=0",
        "data.train.transition=0",
        "data.train.frameqa=0",
        "data.test.count=0",
        "data.test.action=0",
        "data.test.transition=0",
        "data.test.frameqa=0",
    ];
    ok(&stvqa(tmp.path(), &["generate", "--out", "z"], &sets));
    assert_eq!(fs::read_to_string(tmp.path().join("z/train.jsonl")).unwrap(), "");
    assert_eq!(fs::read_to_string(tmp.path().join("z/test.jsonl")).unwrap(), "");
}

#[test]
fn outputs_are_never_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "d");
    let again = stvqa(tmp.path(), &["generate", "--seed", "3", "--out", "d"], &tiny(&[]));
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("not empty"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stvqa"))
        .current_dir(tmp.path())
        .env("STVQA_OUT", tmp.path().join("root"))
        .args(["generate", "--seed", "8"])
        .args(tiny(&[]).iter().flat_map(|s| ["--set", s]))
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("root/generate-seed8/train.jsonl").exists());
}

#[test]
fn ten_step_training_is_quick_and_resumes_the_step_counter() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "d");
    let started = Instant::now();
    let sets = tiny(&["dataset=\"d\"", "train.steps=10", "train.batch_size=4"]);
    ok(&stvqa(tmp.path(), &["train", "--variant", "concat", "--out", "t1"], &sets));
    assert!(started.elapsed() < Duration::from_secs(30));
    let curve = fs::read_to_string(tmp.path().join("t1/loss.txt")).unwrap();
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 10);

    let sets = tiny(&["dataset=\"d\"", "train.steps=5", "train.batch_size=4", "train.resume=\"t1/model.ckpt\""]);
    let stdout = ok(&stvqa(tmp.path(), &["train", "--variant", "concat", "--out", "t2"], &sets));
    assert!(stdout.contains("to step 15"), "{stdout}");
    let curve = fs::read_to_string(tmp.path().join("t2/loss.txt")).unwrap();
    let steps: Vec<&str> = curve.lines().skip(1).map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(steps, ["10", "11", "12", "13", "14"]);
}

#[test]
fn identical_runs_give_identical_curves_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let sets = tiny(&["train.steps=4", "train.batch_size=4", "model.dropout=0.3"]);
    for out in ["r1", "r2"] {
        ok(&stvqa(tmp.path(), &["train", "--variant", "temporal", "--seed", "2", "--out", out], &sets));
    }
    for name in ["loss.txt", "model.ckpt"] {
        assert_eq!(
            fs::read(tmp.path().join("r1").join(name)).unwrap(),
            fs::read(tmp.path().join("r2").join(name)).unwrap()
        );
    }
}

#[test]
fn invalid_variant_is_a_usage_error_listing_the_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stvqa(tmp.path(), &["train", "--variant", "lstm"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for v in ["text", "resnet", "c3d", "concat", "spatial", "temporal", "spatial-temporal"] {
        assert!(err.contains(v), "{err}");
    }
}

#[test]
fn gradcheck_passes_and_names_each_block_once() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&stvqa(tmp.path(), &["gradcheck", "--variant", "temporal", "--out", "g"], &[]));
    assert!(!stdout.contains("FAIL"), "{stdout}");
    let report = fs::read_to_string(tmp.path().join("g/gradcheck.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    let fields: Vec<&str> = v["blocks"].as_array().unwrap().iter().map(|b| b["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["video", "text", "embedding", "temporal", "temporal_proj", "choice", "count", "word"]);
}

#[test]
fn corrupted_adjoint_is_reported_as_failing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stvqa(tmp.path(), &["gradcheck", "--variant", "text", "--out", "g"], &["gradcheck.corrupt=tanh"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradient check failed for text/"));
}

#[test]
fn eval_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "d");
    ok(&stvqa(tmp.path(), &["train", "--out", "t"], &tiny(&["dataset=\"d\"", "train.steps=3"])));
    let sets = tiny(&["dataset=\"d\"", "eval.checkpoint=\"t/model.ckpt\""]);
    let a = ok(&stvqa(tmp.path(), &["eval", "--out", "e1"], &sets));
    let b = ok(&stvqa(tmp.path(), &["eval", "--out", "e2"], &sets));
    assert_eq!(a, b);
    for name in ["predictions.jsonl", "metrics.jsonl"] {
        assert_eq!(
            fs::read(tmp.path().join("e1").join(name)).unwrap(),
            fs::read(tmp.path().join("e2").join(name)).unwrap()
        );
    }
}

#[test]
fn missing_manifest_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stvqa(tmp.path(), &["train", "--out", "t"], &["dataset=\"nowhere\""]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/train.jsonl"));
}

#[test]
fn report_tabulates_seven_variants_by_four_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "d");
    let sets = tiny(&[
        "dataset=\"d\"",
        "train.steps=1",
        "train.finetune_steps=1",
        "train.batch_size=2",
        "report.seeds=[1, 2]",
    ]);
    let table = ok(&stvqa(tmp.path(), &["report", "--out", "r"], &sets));
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("ST-VQA")).collect();
    assert_eq!(rows.len(), 7, "{table}");
    for row in rows {
        assert_eq!(row.matches('±').count(), 4, "{row}");
    }
    assert_eq!(fs::read_dir(tmp.path().join("r/checkpoints")).unwrap().count(), 7 * 4 * 2);

    // Reloading the saved checkpoints reproduces the table.
    let mut sets = sets.clone();
    sets.push("report.checkpoints=\"r/checkpoints\"");
    let again = ok(&stvqa(tmp.path(), &["report", "--out", "r2"], &sets));
    assert_eq!(again, table);
}
