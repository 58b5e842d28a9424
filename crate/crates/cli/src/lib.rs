//! The `l3prune` command line: init → synth → profile → prune → train → eval → report.
//!
//! Every command writes `manifest.json` into its output directory before any
//! other file, then its CSV artifacts and their SVG renderings.

pub mod manifest;
pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use l3prune::adapt::{attach_lora, train, TrainConfig};
use l3prune::data::{load_jsonl, synth_generate, write_jsonl, ContrastiveTuple, SynthSpec, Vocab};
use l3prune::eval::{evaluate, variants_table, EvalReport, EvalSuite, TableColumn};
use l3prune::model::{self, ModelConfig, Transformer};
use l3prune::profiler::{l3prune_select, profile, L3Selection, ProfileConfig, DEFAULT_BATCH_SIZE, DEFAULT_SAMPLE_COUNT};
use l3prune::prune::{prune_layers, PruneReport, PruneSpec};
use l3prune::{Error, Result};
use serde_json::json;

use manifest::RunManifest;
use svg::{Chart, Marker, Series};

pub const MODEL_FILE: &str = "model.l3p";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const DATA_FILE: &str = "train.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SUITE_FILE: &str = "suite.json";
pub const LAYER_LOSS_CSV: &str = "layer_loss.csv";
pub const LAYER_LOSS_SVG: &str = "layer_loss.svg";
pub const SELECTION_FILE: &str = "selection.txt";
pub const PRUNE_REPORT_CSV: &str = "prune_report.csv";
pub const TRAIN_CURVE_CSV: &str = "train_curve.csv";
pub const TRAIN_CURVE_SVG: &str = "train_curve.svg";
pub const EVAL_REPORT_CSV: &str = "eval_report.csv";
pub const SCORE_CSV: &str = "score_vs_params.csv";
pub const SCORE_SVG: &str = "score_vs_params.svg";
pub const VARIANTS_FILE: &str = "variants.txt";

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "l3prune", version, about = "Layer-pruned text encoders from decoder-only transformers")]
pub struct Cli {
    /// Global seed; falls back to L3P_SEED, then 0.
    #[arg(long, global = true, env = "L3P_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialised checkpoint.
    Init(InitArgs),
    /// Generate a synthetic training set, vocabulary and evaluation suite.
    Synth(SynthArgs),
    /// Per-layer contrastive loss profile and two-minima prune selection.
    Profile(ProfileArgs),
    /// Drop trailing layers.
    Prune(PruneArgs),
    /// Contrastive finetuning with low-rank adapters; writes the merged model.
    Train(TrainArgs),
    /// Score a checkpoint on an evaluation suite.
    Eval(EvalArgs),
    /// Join several eval runs into a score-vs-params table and plot.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// key=value model config; overrides the individual flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 32)]
    pub max_seq_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 128)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 12)]
    pub topics: usize,
    #[arg(long, default_value_t = 2048)]
    pub tuples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to vocab.txt next to the data file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_COUNT)]
    pub samples: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = l3prune::objective::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Small,
    Large,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("how").required(true).args(["percent", "layers", "from_selection"])))]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Fraction of layers to remove, in [0, 1).
    #[arg(long)]
    pub percent: Option<f64>,
    /// Number of layers to keep.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Use one side of a profile selection.
    #[arg(long, value_enum, requires = "selection")]
    pub from_selection: Option<Side>,
    /// selection.txt written by `profile`.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of `eval` runs; each is named after its directory.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Run whose scores the deltas are taken against; defaults to the largest model.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for bad arguments, 4 for numeric failure, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_numeric() => EXIT_NUMERIC,
        Error::Config(_) | Error::Prune(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Init(a) => cmd_init(&a, seed),
        Command::Synth(a) => cmd_synth(&a, seed),
        Command::Profile(a) => cmd_profile(&a, seed),
        Command::Prune(a) => cmd_prune(&a, seed),
        Command::Train(a) => cmd_train(&a, seed),
        Command::Eval(a) => cmd_eval(&a, seed),
        Command::Report(a) => cmd_report(&a, seed),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn vocab_path(data: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| data.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))
}

fn load_dataset(model: &Transformer, data: &Path, vocab: &Path) -> Result<Vec<ContrastiveTuple>> {
    let vocab = Vocab::load(vocab)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Data(format!(
            "vocabulary has {} tokens, model has {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    load_jsonl(data, &vocab)
}

pub fn cmd_init(a: &InitArgs, seed: u64) -> Result<()> {
    let config = match &a.config {
        Some(p) => ModelConfig {
            seed,
            ..ModelConfig::from_text(&read_text(p)?)?
        },
        None => ModelConfig {
            vocab_size: a.vocab_size,
            d_model: a.d_model,
            n_layers: a.layers,
            n_heads: a.heads,
            d_ff: a.d_ff,
            max_seq_len: a.max_seq_len,
            seed,
        },
    };
    config.validate()?;
    let model_path = a.out.join(MODEL_FILE);
    let cfg_path = a.out.join(MODEL_CONFIG_FILE);
    let mut m = RunManifest::new("init", seed, json!({
            "vocab_size": config.vocab_size,
            "d_model": config.d_model,
            "n_layers": config.n_layers,
            "n_heads": config.n_heads,
            "d_ff": config.d_ff,
            "max_seq_len": config.max_seq_len,
        }))
        .output(&model_path)
        .output(&cfg_path);
    if let Some(p) = &a.config {
        m = m.config_path(p).input(p)?;
    }
    m.write(&a.out)?;
    let model = Transformer::init(config)?;
    model::save(&model, &model_path)?;
    write(&cfg_path, model.config.to_text())?;
    println!("{}: {} layers, {} params", model_path.display(), model.n_layers(), model.count_params());
    m.finish(&a.out)
}

pub fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let spec = SynthSpec::new(a.vocab_size, a.topics, a.tuples, a.noise, seed);
    spec.validate()?;
    let suite = EvalSuite::synthetic(a.vocab_size, a.topics, seed.wrapping_add(1));
    suite.validate()?;
    let (data_path, vocab_path, suite_path) = (a.out.join(DATA_FILE), a.out.join(VOCAB_FILE), a.out.join(SUITE_FILE));
    let mut m = RunManifest::new(
        "synth",
        seed,
        json!({
            "vocab_size": a.vocab_size,
            "topics": a.topics,
            "tuples": a.tuples,
            "noise": a.noise,
            "suite_seed": suite.seed,
        }),
    )
    .output(&data_path)
    .output(&vocab_path)
    .output(&suite_path);
    m.write(&a.out)?;
    let vocab = Vocab::synthetic(a.vocab_size);
    let tuples = synth_generate(&spec)?;
    write(&vocab_path, vocab.to_text())?;
    write_jsonl(&data_path, &tuples, &vocab)?;
    write(&suite_path, suite.to_json() + "\n")?;
    println!("{} tuples -> {}", tuples.len(), data_path.display());
    m.finish(&a.out)
}

pub fn layer_loss_chart(losses: &[f64], selection: Option<&L3Selection>) -> Chart {
    let points: Vec<(f64, f64)> = losses.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect();
    let markers = selection
        .map(|s| {
            [(s.small_layer, "small"), (s.large_layer, "large")]
                .into_iter()
                .map(|(layer, name)| Marker {
                    x: layer as f64,
                    y: losses[layer - 1],
                    label: format!("{name} ({layer})"),
                })
                .collect()
        })
        .unwrap_or_default();
    Chart {
        title: "Contrastive loss of each layer's pooled output".into(),
        x_label: "layer".into(),
        y_label: "loss".into(),
        series: vec![Series {
            name: "loss".into(),
            points,
        }],
        markers,
        point_labels: Vec::new(),
    }
}

pub fn cmd_profile(a: &ProfileArgs, seed: u64) -> Result<()> {
    let vocab = vocab_path(&a.data, &a.vocab);
    let (csv, sel_path, svg_path) = (a.out.join(LAYER_LOSS_CSV), a.out.join(SELECTION_FILE), a.out.join(LAYER_LOSS_SVG));
    let config = ProfileConfig {
        sample_count: a.samples,
        seed,
        batch_size: a.batch_size,
        temperature: a.temperature,
    };
    let mut m = RunManifest::new(
        "profile",
        seed,
        json!({ "samples": a.samples, "batch_size": a.batch_size, "temperature": a.temperature }),
    )
    .input(&a.model)?
    .input(&a.data)?
    .input(&vocab)?
    .output(&csv)
    .output(&sel_path)
    .output(&svg_path);
    m.write(&a.out)?;
    let model = model::load(&a.model)?;
    let dataset = load_dataset(&model, &a.data, &vocab)?;
    let prof = profile(&model, &dataset, &config)?;
    write(&csv, prof.to_csv())?;
    let selection = l3prune_select(&prof)?;
    write(&sel_path, selection.to_text())?;
    write(&svg_path, layer_loss_chart(&prof.losses, Some(&selection)).render())?;
    println!("{selection}");
    m.finish(&a.out)
}

pub fn cmd_prune(a: &PruneArgs, seed: u64) -> Result<()> {
    let (model_path, csv) = (a.out.join(MODEL_FILE), a.out.join(PRUNE_REPORT_CSV));
    let mut m = RunManifest::new(
        "prune",
        seed,
        json!({
            "percent": a.percent,
            "layers": a.layers,
            "from_selection": a.from_selection.map(|s| format!("{s:?}").to_lowercase()),
        }),
    )
    .input(&a.model)?;
    if let Some(p) = &a.selection {
        m = m.input(p)?;
    }
    m = m.output(&model_path).output(&csv);
    m.write(&a.out)?;
    let model = model::load(&a.model)?;
    let spec = match (a.percent, a.layers, a.from_selection) {
        (Some(p), None, None) => PruneSpec::percent(p),
        (None, Some(k), None) => PruneSpec::layers(k),
        (None, None, Some(side)) => {
            let path = a
                .selection
                .as_ref()
                .ok_or_else(|| Error::Config("--from-selection needs --selection".into()))?;
            let sel = L3Selection::parse(&read_text(path)?)?;
            if sel.midpoint != model.n_layers() / 2 || sel.large_layer > model.n_layers() {
                return Err(Error::Selection(format!(
                    "selection {sel} does not fit a {}-layer model",
                    model.n_layers()
                )));
            }
            match side {
                Side::Small => PruneSpec::layers(sel.small_layer).with_provenance("l3prune-small"),
                Side::Large => PruneSpec::layers(sel.large_layer).with_provenance("l3prune-large"),
            }
        }
        _ => return Err(Error::Config("give exactly one of --percent, --layers, --from-selection".into())),
    };
    let (pruned, report) = prune_layers(&model, &spec)?;
    model::save(&pruned, &model_path)?;
    write(&csv, PruneReport::to_csv(std::slice::from_ref(&report)))?;
    println!("{report}");
    m.finish(&a.out)
}

pub fn resolve_train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    let mut c = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    };
    c.seed = seed;
    if let Some(v) = a.steps {
        c.steps = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.warmup {
        c.warmup_steps = v;
    }
    if let Some(v) = a.rank {
        c.lora_rank = v;
    }
    if let Some(v) = a.alpha {
        c.lora_alpha = v;
    }
    if let Some(v) = a.temperature {
        c.temperature = v;
    }
    c
}

pub fn cmd_train(a: &TrainArgs, seed: u64) -> Result<()> {
    let config = resolve_train_config(a, seed);
    config.validate()?;
    let vocab = vocab_path(&a.data, &a.vocab);
    let (model_path, csv, svg_path) = (a.out.join(MODEL_FILE), a.out.join(TRAIN_CURVE_CSV), a.out.join(TRAIN_CURVE_SVG));
    let mut m = RunManifest::new(
        "train",
        seed,
        json!({
            "preset": format!("{:?}", a.preset).to_lowercase(),
            "steps": config.steps,
            "batch_size": config.batch_size,
            "lr": config.lr,
            "warmup_steps": config.warmup_steps,
            "lora_rank": config.lora_rank,
            "lora_alpha": config.lora_alpha,
            "temperature": config.temperature,
        }),
    )
    .input(&a.model)?
    .input(&a.data)?
    .input(&vocab)?
    .output(&model_path)
    .output(&csv)
    .output(&svg_path);
    m.write(&a.out)?;
    let model = model::load(&a.model)?;
    let dataset = load_dataset(&model, &a.data, &vocab)?;
    let adapted = attach_lora(&model, &config.lora())?;
    let (mut trained, curve) = train(adapted, &dataset, &config)?;
    let merged = trained.merge()?;
    model::save(&merged, &model_path)?;
    write(&csv, curve.to_csv())?;
    let chart = Chart {
        title: "Training loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        series: vec![Series {
            name: "loss".into(),
            points: curve.points.iter().map(|p| (p.step as f64, p.loss)).collect(),
        }],
        ..Default::default()
    };
    write(&svg_path, chart.render())?;
    println!(
        "{} steps, loss {:.4} -> {:.4}, {:.1}s",
        curve.points.len(),
        curve.points.first().map_or(f64::NAN, |p| p.loss),
        curve.points.last().map_or(f64::NAN, |p| p.loss),
        curve.total_ms() / 1000.0
    );
    m.finish(&a.out)
}

pub fn cmd_eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let csv = a.out.join(EVAL_REPORT_CSV);
    let mut m = RunManifest::new("eval", seed, json!({}))
        .config_path(&a.suite)
        .input(&a.model)?
        .input(&a.suite)?
        .output(&csv);
    m.write(&a.out)?;
    let model = model::load(&a.model)?;
    let suite = EvalSuite::load(&a.suite)?;
    let report = evaluate(&model, &suite)?;
    write(&csv, report.to_csv())?;
    for (task, v) in &report.per_task {
        println!("{task:<20} {:6.2}", 100.0 * v);
    }
    println!("{:<20} {:6.2}", "aggregate", report.score());
    m.finish(&a.out)
}

/// One joined run of `report`.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub name: String,
    pub report: EvalReport,
    /// Training wall time of the evaluated checkpoint, if it came from `train`.
    pub train_ms: Option<f64>,
}

/// Follows the eval manifest back to the model's directory for its training curve.
fn train_time_of(run: &Path) -> Result<Option<f64>> {
    let manifest = RunManifest::load(run)?;
    let Some(model) = manifest.inputs.iter().find(|i| i.path.ends_with(".l3p")) else {
        return Ok(None);
    };
    let curve = Path::new(&model.path).parent().unwrap_or(Path::new(".")).join(TRAIN_CURVE_CSV);
    if !curve.exists() {
        return Ok(None);
    }
    let text = read_text(&curve)?;
    let last = text.lines().skip(1).filter(|l| !l.trim().is_empty()).last();
    Ok(last.and_then(|l| l.rsplit(',').next()).and_then(|v| v.trim().parse().ok()))
}

pub fn load_runs(runs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Data(format!("two runs named {name:?}")));
        }
        let report = EvalReport::from_csv(&read_text(&dir.join(EVAL_REPORT_CSV))?)?;
        out.push(RunSummary {
            name,
            report,
            train_ms: train_time_of(dir)?,
        });
    }
    out.sort_by(|a, b| {
        a.report
            .model_params
            .cmp(&b.report.model_params)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(out)
}

pub fn score_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from("run,layers,params,score\n");
    for r in runs {
        s.push_str(&format!(
            "{},{},{},{:.4}\n",
            r.name,
            r.report.layers,
            r.report.model_params,
            r.report.score()
        ));
    }
    s
}

pub fn cmd_report(a: &ReportArgs, seed: u64) -> Result<()> {
    let (csv, svg_path, table_path) = (a.out.join(SCORE_CSV), a.out.join(SCORE_SVG), a.out.join(VARIANTS_FILE));
    let mut m = RunManifest::new("report", seed, json!({ "baseline": a.baseline }));
    for r in &a.runs {
        m = m.input(&r.join(EVAL_REPORT_CSV))?;
    }
    m = m.output(&csv).output(&svg_path).output(&table_path);
    m.write(&a.out)?;
    let runs = load_runs(&a.runs)?;
    write(&csv, score_csv(&runs))?;
    let chart = Chart {
        title: "Score vs parameters".into(),
        x_label: "parameters".into(),
        y_label: "score".into(),
        series: vec![Series {
            name: "score".into(),
            points: runs
                .iter()
                .map(|r| (r.report.model_params as f64, r.report.score()))
                .collect(),
        }],
        markers: Vec::new(),
        point_labels: runs.iter().enumerate().map(|(i, r)| ((0, i), r.name.clone())).collect(),
    };
    write(&svg_path, chart.render())?;
    let baseline = match &a.baseline {
        Some(b) => b.clone(),
        None => runs.last().expect("at least one run").name.clone(),
    };
    let columns: Vec<TableColumn<'_>> = runs
        .iter()
        .rev()
        .map(|r| TableColumn {
            name: r.name.clone(),
            report: &r.report,
            train_ms: r.train_ms,
        })
        .collect();
    let table = variants_table(&columns, &baseline)?;
    write(&table_path, &table)?;
    print!("{table}");
    m.finish(&a.out)
}
