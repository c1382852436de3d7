use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const QUICK: &str = "[train]\nlearning_rate = 0.01\nepochs = 15\naccumulation_steps = 1\npatience = 15\n\n[head]\nwidth = 64\ndropout = 0.1\n\n[encoder]\ndim = 256\n";

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn taxonomy_file() -> PathBuf {
    data_dir().join("ons2020_synthetic.csv")
}

fn occlass(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occlass")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = occlass(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Ingests the bundled corpus into `dir/data` and writes the quick config.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("quick.toml"), QUICK).unwrap();
    let corpus = data_dir().join("ads200.jsonl");
    ok(dir.path(), &["--seed", "5", "ingest", "--corpus", corpus.to_str().unwrap(), "--taxonomy", taxonomy_file().to_str().unwrap(), "--out", "data"]);
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {last}"))
}

#[test]
fn full_pipeline_topk_is_monotone_at_every_level() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["--seed", "5", "--threads", "1", "--config", "quick.toml", "train", "--data", "data", "--all-levels", "--out", "m.model"]);
    ok(d, &["predict", "--model", "m.model", "--data", "data", "--postprocess", "weighted_avg", "--out", "p.jsonl"]);
    ok(d, &["evaluate", "--predictions", "p.jsonl", "--data", "data", "--out", "eval"]);
    let report = read_json(&d.join("eval/report.json"));
    let levels = report["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 4);
    for l in levels {
        let (t1, t5, t10) = (l["top1"].as_f64().unwrap(), l["top5"].as_f64().unwrap(), l["top10"].as_f64().unwrap());
        assert!(t1 <= t5 && t5 <= t10, "{l}");
    }
    assert!(levels[0]["top1"].as_f64().unwrap() >= 90.0);
    for k in 1..=4 {
        assert!(d.join(format!("eval/confusion_level{k}.csv")).is_file());
    }
    let levels_csv = std::fs::read_to_string(d.join("eval/levels.csv")).unwrap();
    assert!(levels_csv.starts_with("level,classes,macro_f1,top1,top5,top10\n"));
}

#[test]
fn pruning_flag_is_traced_at_the_requested_level_only() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["--config", "quick.toml", "--threads", "1", "train", "--data", "data", "--all-levels", "--epochs", "3", "--out", "m.model"]);
    ok(d, &["predict", "--model", "m.model", "--data", "data", "--postprocess", "joint_prob", "--prune-levels", "1", "--out", "p.jsonl"]);
    let text = std::fs::read_to_string(d.join("p.jsonl")).unwrap();
    let mut lines = text.lines();
    let header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["format"], "occ-predictions");
    let mut n = 0;
    for line in lines {
        let r: Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["trace"]["pruned_levels"], serde_json::json!([1]));
        assert_eq!(r["trace"]["postprocess"], "joint_prob");
        n += 1;
    }
    assert_eq!(n, 20);
}

#[test]
fn leaf_model_report_lists_the_full_412_leaf_space() {
    let dir = prepared();
    let d = dir.path();
    let tax = taxonomy_file();
    let tax = tax.to_str().unwrap();
    ok(d, &["--config", "quick.toml", "--threads", "1", "train", "--data", "data", "--taxonomy", tax, "--feature", "title", "--level", "4", "--out", "leaf.model"]);
    ok(d, &["predict", "--model", "leaf.model", "--data", "data", "--taxonomy", tax, "--out", "p.jsonl"]);
    ok(d, &["evaluate", "--predictions", "p.jsonl", "--data", "data", "--taxonomy", tax, "--out", "eval"]);
    let report = read_json(&d.join("eval/report.json"));
    let classes: Vec<u64> = report["levels"].as_array().unwrap().iter().map(|l| l["classes"].as_u64().unwrap()).collect();
    assert_eq!(classes, vec![9, 31, 122, 412]);
    let confusion = std::fs::read_to_string(d.join("eval/confusion_level4.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 413);
}

#[test]
fn single_threaded_runs_are_byte_identical() {
    let run = || {
        let dir = prepared();
        let d = dir.path();
        ok(d, &["--seed", "11", "--threads", "1", "--config", "quick.toml", "train", "--data", "data", "--all-levels", "--out", "m.model"]);
        ok(d, &["--threads", "1", "predict", "--model", "m.model", "--data", "data", "--postprocess", "joint_prob", "--out", "p.jsonl"]);
        ok(d, &["--threads", "1", "evaluate", "--predictions", "p.jsonl", "--data", "data", "--out", "eval"]);
        ["m.model", "m.model.report.json", "p.jsonl", "eval/report.json", "eval/levels.csv", "data/train.jsonl"]
            .map(|f| std::fs::read(d.join(f)).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let dir = prepared();
    let d = dir.path();
    let inputs = ["data/train.jsonl", "data/test.jsonl", "data/taxonomy.csv", "quick.toml"];
    let before: Vec<Vec<u8>> = inputs.iter().map(|f| std::fs::read(d.join(f)).unwrap()).collect();
    ok(d, &["--config", "quick.toml", "train", "--data", "data", "--flat", "--epochs", "2", "--out", "m.model"]);
    ok(d, &["predict", "--model", "m.model", "--data", "data", "--out", "p.jsonl"]);
    let after: Vec<Vec<u8>> = inputs.iter().map(|f| std::fs::read(d.join(f)).unwrap()).collect();
    assert_eq!(before, after);
    let out = occlass(d, &["predict", "--model", "m.model", "--data", "data", "--out", "data/test.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["flag"], "--out");
    let manifest = read_json(&d.join("m.model.manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn usage_errors_name_the_flag() {
    let dir = prepared();
    let out = occlass(dir.path(), &["train", "--data", "data", "--flat"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["error"], "usage");
    assert!(e["flag"].as_str().unwrap().contains("--out"));

    let out = occlass(dir.path(), &["predict", "--model", "missing.model", "--data", "data", "--out", "p.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["flag"], "--model");

    let out = occlass(dir.path(), &["--threads", "0", "stats", "--data", "data"]);
    assert_eq!(error_line(&out)["flag"], "--threads");
}

#[test]
fn data_errors_point_at_file_and_line() {
    let dir = prepared();
    let d = dir.path();
    std::fs::write(d.join("bad.csv"), "code,parent,level,title\n1,ROOT,1,Managers\n11,1,two,Directors\n").unwrap();
    let out = occlass(d, &["ingest", "--corpus", "data/train.jsonl", "--taxonomy", "bad.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_line(&out);
    assert_eq!(e["error"], "data");
    assert_eq!(e["file"], "bad.csv");
    assert_eq!(e["line"], 3);

    std::fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 0.1\nbogus = 1\n").unwrap();
    let out = occlass(d, &["--config", "bad.toml", "stats", "--data", "data"]);
    let e = error_line(&out);
    assert_eq!(e["file"], "bad.toml");
    assert_eq!(e["line"], 3);
}

#[test]
fn lcpn_routes_and_ensembles_fuse() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["--config", "quick.toml", "--threads", "1", "train", "--data", "data", "--lcpn", "--out", "lcpn.model"]);
    ok(d, &["--config", "quick.toml", "--threads", "1", "train", "--data", "data", "--flat", "--feature", "skills", "--out", "skills.model"]);
    ok(d, &["predict", "--model", "lcpn.model", "--data", "data", "--lcpn-threshold", "0.5", "--out", "routed.jsonl"]);
    let text = std::fs::read_to_string(d.join("routed.jsonl")).unwrap();
    let first: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    let route = first["trace"]["route"].as_array().unwrap();
    assert_eq!(route.first().unwrap()["level"], 1);

    std::fs::write(d.join("ens.toml"), "[[member]]\nmodel = \"lcpn.model\"\nweight = 0.5\n\n[[member]]\nmodel = \"skills.model\"\nweight = 0.5\n").unwrap();
    ok(d, &["ensemble", "--spec", "ens.toml", "--data", "data", "--out", "ens.jsonl"]);
    let text = std::fs::read_to_string(d.join("ens.jsonl")).unwrap();
    let first: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(first["trace"]["postprocess"], "ensemble");
    let total: f64 = first["top10"].as_array().unwrap().iter().map(|p| p[1].as_f64().unwrap()).sum();
    assert!(total <= 1.0 + 1e-9);

    let out = occlass(d, &["predict", "--model", "lcpn.model", "--model", "skills.model", "--weights", "1", "--data", "data", "--out", "x.jsonl"]);
    assert_eq!(error_line(&out)["flag"], "--weights");
}

#[test]
fn tuning_resumes_from_its_log() {
    let dir = prepared();
    let d = dir.path();
    std::fs::write(d.join("space.toml"), "[[param]]\nname = \"learning_rate\"\nkind = \"log_uniform\"\nlow = 0.001\nhigh = 0.1\n\n[[param]]\nname = \"epochs\"\nkind = \"quantized\"\nlow = 1\nhigh = 3\nstep = 1\n").unwrap();
    let tune = |budget: &str, study: &str| {
        ok(d, &["--seed", "2", "--config", "quick.toml", "tune", "--data", "data", "--level", "1", "--space", "space.toml", "--budget", budget, "--folds", "2", "--study", study, "--out", "best.toml"])
    };
    tune("2", "resumed.log");
    tune("4", "resumed.log");
    tune("4", "straight.log");
    assert_eq!(
        configs(&std::fs::read_to_string(d.join("resumed.log")).unwrap()),
        configs(&std::fs::read_to_string(d.join("straight.log")).unwrap())
    );
    let best: toml::Value = toml::from_str(&std::fs::read_to_string(d.join("best.toml")).unwrap()).unwrap();
    let epochs = best["train"]["epochs"].as_integer().unwrap();
    assert!((1..=3).contains(&epochs));
}

fn configs(log: &str) -> Vec<Value> {
    log.lines().skip(1).map(|l| serde_json::from_str::<Value>(l).unwrap()["config"].clone()).collect()
}

#[test]
fn stats_prints_a_length_table() {
    let dir = prepared();
    let out = ok(dir.path(), &["stats", "--data", "data", "--field", "description", "--bucket", "16"]);
    assert!(out.lines().next().unwrap().starts_with("bucket_start"));
    assert!(out.contains("documents,180"));
}
