use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use l3prune::model::{self, TokenBatch};
use l3prune::profiler::L3Selection;
use l3prune::prune::{prune_layers, PruneSpec};
use l3prune_cli::manifest::RunManifest;
use l3prune_cli::{resolve_train_config, Cli};

fn l3p(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l3prune"))
        .current_dir(dir)
        .env_remove("L3P_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = l3p(dir, args);
    assert!(
        out.status.success(),
        "l3prune {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

fn setup(dir: &Path, layers: &str) {
    ok(dir, &["init", "--layers", layers, "--out", "base"]);
    ok(dir, &["synth", "--tuples", "256", "--out", "data"]);
}

#[test]
fn profile_is_deterministic_and_selection_valid() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    setup(d, "6");
    for out in ["p1", "p2"] {
        ok(d, &["--seed", "4", "profile", "--model", "base/model.l3p", "--data", "data/train.jsonl", "--samples", "48", "--out", out]);
    }
    assert_eq!(read(d, "p1/layer_loss.csv"), read(d, "p2/layer_loss.csv"));
    assert_eq!(read(d, "p1/layer_loss.csv").lines().count(), 1 + 6);
    let sel = L3Selection::parse(&read(d, "p1/selection.txt")).unwrap();
    assert!(sel.small_layer <= 3 && 3 < sel.large_layer && sel.midpoint == 3);
    let svg = read(d, "p1/layer_loss.svg");
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let markers = doc.descendants().filter(|n| n.attribute("class") == Some("marker")).count();
    assert_eq!(markers, 2);
}

#[test]
fn prune_flags() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["init", "--layers", "32", "--d-model", "8", "--d-ff", "8", "--out", "deep"]);
    ok(d, &["prune", "--model", "deep/model.l3p", "--percent", "0.5", "--out", "half"]);
    let half = model::load(d.join("half/model.l3p")).unwrap();
    assert_eq!(half.n_layers(), 16);
    assert!(read(d, "half/prune_report.csv").contains("0.5,32,16,"));

    let full = model::load(d.join("deep/model.l3p")).unwrap();
    let (in_memory, _) = prune_layers(&full, &PruneSpec::percent(0.5)).unwrap();
    let batch = TokenBatch::new(&[vec![20u32, 30, 40], vec![50]]).unwrap();
    assert_eq!(half.forward_all(&batch).unwrap(), in_memory.forward_all(&batch).unwrap());

    std::fs::write(d.join("sel.txt"), "small_layer=5\nlarge_layer=25\nmidpoint=16\n").unwrap();
    ok(d, &["prune", "--model", "deep/model.l3p", "--from-selection", "small", "--selection", "sel.txt", "--out", "small"]);
    assert_eq!(model::load(d.join("small/model.l3p")).unwrap().n_layers(), 5);

    let both = l3p(d, &["prune", "--model", "deep/model.l3p", "--percent", "0.5", "--layers", "3", "--out", "x"]);
    assert_eq!(both.status.code(), Some(2));
    let none = l3p(d, &["prune", "--model", "deep/model.l3p", "--out", "x"]);
    assert_eq!(none.status.code(), Some(2));
    let bad_p = l3p(d, &["prune", "--model", "deep/model.l3p", "--percent", "1.5", "--out", "x"]);
    assert_eq!(bad_p.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_p.stderr).contains("fraction"));
}

#[test]
fn train_presets_and_curve() {
    let paper = Cli::try_parse_from(["l3prune", "train", "--model", "m", "--data", "d", "--preset", "paper", "--out", "o"]).unwrap();
    let l3prune_cli::Command::Train(args) = paper.command else {
        panic!("expected train")
    };
    let c = resolve_train_config(&args, 0);
    assert_eq!((c.steps, c.batch_size, c.lr, c.warmup_steps, c.lora_rank), (1000, 64, 2e-4, 300, 16));

    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    setup(d, "2");
    ok(d, &["train", "--model", "base/model.l3p", "--data", "data/train.jsonl", "--steps", "7", "--warmup", "2", "--out", "trained"]);
    assert_eq!(read(d, "trained/train_curve.csv").lines().count(), 1 + 7);
    let manifest = RunManifest::load(&d.join("trained")).unwrap();
    assert_eq!(manifest.config["preset"], "desk");
    assert_eq!(manifest.config["steps"], 7);
    assert_eq!(manifest.config["lora_rank"], 4);
    assert_eq!(manifest.inputs.len(), 3);
    let merged = model::load(d.join("trained/model.l3p")).unwrap();
    assert_eq!(merged.n_layers(), 2);

    let diverged = l3p(d, &["train", "--model", "base/model.l3p", "--data", "data/train.jsonl", "--steps", "5", "--warmup", "0", "--lr", "1e300", "--out", "nan"]);
    assert_eq!(diverged.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("at step"));
}

#[test]
fn report_over_prune_sweep() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["init", "--layers", "10", "--out", "base"]);
    ok(d, &["synth", "--tuples", "16", "--out", "data"]);
    let mut runs = Vec::new();
    for i in 1..=9 {
        let p = format!("0.{i}");
        let (pruned, eval) = (format!("pruned-{i}"), format!("eval-{i}0"));
        ok(d, &["prune", "--model", "base/model.l3p", "--percent", &p, "--out", &pruned]);
        ok(d, &["eval", "--model", &format!("{pruned}/model.l3p"), "--suite", "data/suite.json", "--out", &eval]);
        runs.push(eval);
    }
    let mut args = vec!["report", "--out", "report", "--runs"];
    args.extend(runs.iter().map(String::as_str));
    ok(d, &args);
    let csv = read(d, "report/score_vs_params.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    let params: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(rows[0][0], "eval-90");

    let svg = read(d, "report/score_vs_params.svg");
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let points: Vec<(f64, f64)> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("point"))
        .map(|n| (n.attribute("data-x").unwrap().parse().unwrap(), n.attribute("data-y").unwrap().parse().unwrap()))
        .collect();
    assert_eq!(points.len(), rows.len());
    for (r, (x, y)) in rows.iter().zip(&points) {
        assert_eq!(r[2].parse::<f64>().unwrap(), *x);
        assert!((r[3].parse::<f64>().unwrap() - y).abs() < 1e-4);
    }
    let table = read(d, "report/variants.txt");
    assert!(table.contains("1 (-8)"), "{table}");
}

#[test]
fn manifest_precedes_outputs_and_vocab_mismatch_fails() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["init", "--vocab-size", "100", "--out", "base"]);
    ok(d, &["synth", "--out", "data"]);
    let out = l3p(d, &["eval", "--model", "base/model.l3p", "--suite", "data/suite.json", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
    assert!(d.join("ev/manifest.json").exists());
    assert!(!d.join("ev/eval_report.csv").exists());
    let entries = std::fs::read_dir(d.join("ev")).unwrap().count();
    assert_eq!(entries, 1);
}

#[test]
fn seed_falls_back_to_env() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let out = Command::new(env!("CARGO_BIN_EXE_l3prune"))
        .current_dir(d)
        .env("L3P_SEED", "9")
        .args(["init", "--layers", "1", "--out", "m"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(RunManifest::load(&d.join("m")).unwrap().seed, 9);
    assert_eq!(model::load(d.join("m/model.l3p")).unwrap().config.seed, 9);
}
