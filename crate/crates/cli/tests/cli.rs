use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attnpool::datasets::Dataset;
use attnpool::experiment::ExperimentConfig;
use attnpool::training::WeakLabels;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnpool"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// 50 training graphs, 10 per other split.
fn small_colors(dir: &Path) -> PathBuf {
    let cfg = write(&dir.join("gen.json"), r#"{"n_train":50,"n_val":10,"n_test":10,"seed":3}"#);
    let data = dir.join("data");
    ok(&["gen", "--task", "colors", "--out", p(&data), "--config", p(&cfg)]);
    data
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = run(&["gen", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--task"));
    assert!(out.stdout.is_empty());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn gen_is_deterministic_and_guards_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_colors(dir.path());
    let again = dir.path().join("again");
    let cfg = dir.path().join("gen.json");
    ok(&["gen", "--task", "colors", "--out", p(&again), "--config", p(&cfg)]);
    for split in ["train", "val", "test-orig", "test-large", "test-largec"] {
        let f = format!("{split}.jsonl");
        assert_eq!(fs::read(data.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap(), "{f}");
    }
    let out = run(&["gen", "--task", "colors", "--out", p(&data), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&["gen", "--task", "colors", "--out", p(&data), "--config", p(&cfg), "--seed", "4", "--force"]);
    assert_eq!(Dataset::load(&data).unwrap().info.seed, 4);
}

#[test]
fn train_occlude_weak_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_colors(d);

    let global =
        write(&d.join("g.json"), r#"{"task":"colors","model":"gin","pooling":"none","epochs":2,"occlusion_limit":3}"#);
    ok(&["train", "--config", p(&global), "--data", p(&data), "--out", p(&d.join("g")), "-q"]);
    let seed_dir = d.join("g/seed_0");
    for f in ["config.json", "checkpoint.json", "history.csv", "report.json", "report.csv"] {
        assert!(seed_dir.join(f).is_file(), "{f}");
    }
    let history = fs::read_to_string(seed_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_loss,val_acc,lr"));

    let weak = d.join("weak.jsonl");
    let ckpt = seed_dir.join("checkpoint.json");
    ok(&["occlude", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "train", "--out", p(&weak)]);
    let text = fs::read_to_string(&weak).unwrap();
    assert_eq!(text.lines().count(), 50);
    let labels = WeakLabels::load(&weak).unwrap();
    for a in &labels.alphas {
        assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let weak2 = d.join("weak2.jsonl");
    ok(&["occlude", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&weak2), "--jobs", "3"]);
    assert_eq!(fs::read(&weak).unwrap(), fs::read(&weak2).unwrap());

    let cfg = format!(
        r#"{{"task":"colors","model":"gin","pooling":"threshold","supervision":"weak","alpha_tilde":0.05,"epochs":2,"weak_labels":"{}","seeds":[0,1]}}"#,
        p(&weak)
    );
    let ws = write(&d.join("w.json"), &cfg);
    ok(&["train", "--config", p(&ws), "--data", p(&data), "--out", p(&d.join("w")), "-q", "--jobs", "2"]);
    let pooled_ckpt = d.join("w/seed_1/checkpoint.json");
    let out = run(&["occlude", "--ckpt", p(&pooled_ckpt), "--data", p(&data), "--out", p(&d.join("bad.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));

    let csv = d.join("eval.csv");
    ok(&["eval", "--ckpt", p(&pooled_ckpt), "--data", p(&data), "--out", p(&csv)]);
    let rows = attnpool::eval::read_csv(&csv).unwrap();
    assert!(rows.iter().any(|r| r.model == "gin-threshold-weaksup" && r.metric == "attn_auc"));
    assert!(rows.iter().all(|r| r.std == 0.0 && r.n_seeds == 1));

    let agg = d.join("agg.csv");
    ok(&["report", "--runs", p(&d.join("w")), "--out", p(&agg)]);
    let rows = attnpool::eval::read_csv(&agg).unwrap();
    assert!(rows.iter().all(|r| r.n_seeds == 2));

    let single = d.join("single.csv");
    ok(&["report", "--runs", p(&d.join("g")), "--out", p(&single)]);
    assert!(attnpool::eval::read_csv(&single).unwrap().iter().all(|r| r.std == 0.0));

    let empty = d.join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(&["report", "--runs", p(&empty), "--out", p(&d.join("x.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs found"));
}

#[test]
fn train_rejects_mismatches_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_colors(d);
    let cases = [
        r#"{"task":"triangles","model":"gin","pooling":"none"}"#,
        r#"{"task":"colors","model":"gin","pooling":"threshold","supervision":"gt"}"#,
        r#"{"task":"colors","model":"gin","pooling":"none","alpha_tilde":0.1}"#,
        r#"{"task":"colors","model":"gin","pooling":"none","epochz":3}"#,
    ];
    for (i, cfg) in cases.iter().enumerate() {
        let path = write(&d.join(format!("bad{i}.json")), cfg);
        let out = run(&["train", "--config", p(&path), "--data", p(&data), "--out", p(&d.join("r"))]);
        assert_eq!(out.status.code(), Some(1), "{cfg}");
        assert!(!d.join("r").exists(), "{cfg} trained before failing");
    }

    // A global-pool checkpoint evaluated against a dataset of the other task.
    let tri_cfg =
        write(&d.join("tri.json"), r#"{"n_train":20,"n_val":5,"n_test":5,"attempts_per_graph":10000,"seed":1}"#);
    let tri = d.join("tri");
    ok(&["gen", "--task", "triangles", "--out", p(&tri), "--config", p(&tri_cfg)]);
    let g = write(&d.join("g.json"), r#"{"task":"colors","model":"gin","pooling":"none","epochs":1}"#);
    ok(&["train", "--config", p(&g), "--data", p(&data), "--out", p(&d.join("g")), "-q"]);
    let ckpt = d.join("g/seed_0/checkpoint.json");
    let out = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&tri), "--out", p(&d.join("e.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn triangles_supervision_requires_gt() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(&d.join("tri.json"), r#"{"n_train":20,"n_val":5,"n_test":5,"seed":2}"#);
    let data = d.join("tri");
    ok(&["gen", "--task", "triangles", "--out", p(&data), "--config", p(&cfg)]);
    let exp = write(
        &d.join("e.json"),
        r#"{"task":"triangles","model":"gin","pooling":"topk","supervision":"gt","ratio":0.97,"epochs":1,"filters":[8,8,8],"mlp_hidden":8}"#,
    );
    ok(&["train", "--config", p(&exp), "--data", p(&data), "--out", p(&d.join("r")), "-q"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("r/seed_0/report.json")).unwrap()).unwrap();
    assert_eq!(report["auc_source"], "attention");
}

#[test]
fn selfcheck_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("summary.json");
    ok(&["selfcheck", "--out", p(&out)]);
    let s: attnpool::checks::Summary = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(s.passed);
    assert!(s.checks.len() > 30);
}

#[test]
fn recipes_resolve() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
    let mut count = 0;
    for task in ["colors", "triangles"] {
        for entry in fs::read_dir(root.join(task)).unwrap() {
            let path = entry.unwrap().path();
            let exp: ExperimentConfig = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
            let width = if task == "colors" { 4 } else { 11 };
            exp.model_config(width).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            exp.train_config(0).unwrap();
            let stem = path.file_stem().unwrap().to_str().unwrap();
            assert_eq!(exp.tag(), stem, "{}", path.display());
            count += 1;
        }
    }
    assert_eq!(count, 28);
}
