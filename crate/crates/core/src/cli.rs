//! Command-line front end. Machine-readable JSON lines go to stdout, the
//! first of them the effective configuration; human tables and logs go to
//! stderr.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::ablation::{run_ablation, Axis};
use crate::checkpoint::{load_model, save_model};
use crate::data_io::{
    export_embeddings, generate_synthetic, load_edges, load_nodes, load_themes, validate_taxonomy,
    ExportFormat, SyntheticSpec, Taxonomy,
};
use crate::error::{Result, SetnError};
use crate::evaluator::{evaluate_map, theme_metric};
use crate::graph::GnnKind;
use crate::params::Module;
use crate::text_encoder::{Pooling, TrainPolicy, Vocab};
use crate::trainer::{build_model, embed_stocks, split_dataset, train_with, Dataset, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_KS: [usize; 3] = [5, 10, 50];
const DEFAULT_MIN_THEME: usize = 16;

#[derive(Parser, Debug)]
#[command(name = "setn", version, about = "Stock embeddings from business text and company graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Related-company MAP@K on the test split
    EvalMap(EvalArgs),
    /// Thematic-fund metric on the test split
    EvalTheme(EvalArgs),
    /// Export embeddings for every stock
    Embed(EmbedArgs),
    /// Train and score one model per ablation cell
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// JSON config; flags take precedence over its keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Taxonomy JSON replacing the built-in TSE table
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    themes: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GraphArg {
    Directed,
    Undirected,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderArg {
    All,
    Last,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GnnArg {
    Gcn,
    Gat,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Cls,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Tsv,
    Binary,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    gnn: Option<GnnArg>,
    #[arg(long, value_enum)]
    residual: Option<OnOff>,
    #[arg(long, value_enum)]
    graph: Option<GraphArg>,
    #[arg(long = "encoder-train", value_enum)]
    encoder_train: Option<EncoderArg>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON generator settings; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "text-signal")]
    text_signal: Option<f64>,
    #[arg(long = "graph-signal")]
    graph_signal: Option<f64>,
    #[arg(long = "direction-signal")]
    direction_signal: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated cutoffs
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Smallest in-universe theme kept
    #[arg(long = "min-theme-size")]
    min_theme_size: Option<usize>,
    /// Count the query among its own retrieved stocks
    #[arg(long = "include-self")]
    include_self: bool,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated: graph_type, encoder_policy, gnn_kind, residual
    #[arg(long, value_delimiter = ',')]
    axes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
}

/// Keys a config file may carry besides the training settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub themes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_theme_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_self: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<ExportFormat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<String>>,
}

const PATH_KEYS: [&str; 12] = [
    "nodes",
    "edges",
    "vocab",
    "taxonomy",
    "themes",
    "out",
    "model",
    "k",
    "min_theme_size",
    "include_self",
    "format",
    "axes",
];

/// Splits a config document into run paths and training settings; unknown
/// keys are rejected.
pub fn parse_config(text: &str) -> Result<(RunPaths, TrainConfig)> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| SetnError::Parameter(format!("config: {e}")))?;
    let Value::Object(all) = value else {
        return Err(SetnError::Parameter("config must be a JSON object".into()));
    };
    let (paths, rest): (Map<String, Value>, Map<String, Value>) =
        all.into_iter().partition(|(k, _)| PATH_KEYS.contains(&k.as_str()));
    let paths: RunPaths = serde_json::from_value(Value::Object(paths))
        .map_err(|e| SetnError::Parameter(format!("config: {e}")))?;
    let train: TrainConfig = serde_json::from_value(Value::Object(rest))
        .map_err(|e| SetnError::Parameter(format!("config: {e}")))?;
    Ok((paths, train))
}

fn read_config(path: Option<&Path>) -> Result<(RunPaths, TrainConfig)> {
    match path {
        Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| SetnError::io(p, e))?),
        None => Ok((RunPaths::default(), TrainConfig::default())),
    }
}

fn merge_data(paths: &mut RunPaths, data: &DataArgs) {
    let pick = |flag: &Option<PathBuf>, slot: &mut Option<PathBuf>| {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    };
    pick(&data.nodes, &mut paths.nodes);
    pick(&data.edges, &mut paths.edges);
    pick(&data.vocab, &mut paths.vocab);
    pick(&data.taxonomy, &mut paths.taxonomy);
    pick(&data.themes, &mut paths.themes);
}

fn merge_model(config: &mut TrainConfig, m: &ModelArgs) {
    if let Some(s) = m.seed {
        config.seed = s;
    }
    if let Some(g) = m.gnn {
        config.gnn = match g {
            GnnArg::Gcn => GnnKind::Gcn,
            GnnArg::Gat => GnnKind::Gat,
            GnnArg::None => GnnKind::None,
        };
    }
    if let Some(r) = m.residual {
        config.residual = matches!(r, OnOff::On);
    }
    if let Some(g) = m.graph {
        config.directed = matches!(g, GraphArg::Directed);
    }
    if let Some(e) = m.encoder_train {
        config.encoder_train = match e {
            EncoderArg::All => TrainPolicy::All,
            EncoderArg::Last => TrainPolicy::LastBlockOnly,
            EncoderArg::None => TrainPolicy::None,
        };
    }
    if let Some(p) = m.pooling {
        config.pooling = match p {
            PoolingArg::Cls => Pooling::Cls,
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Max => Pooling::Max,
        };
    }
    if let Some(e) = m.epochs {
        config.epochs = e;
    }
}

fn required<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    slot.as_deref()
        .ok_or_else(|| SetnError::Parameter(format!("missing --{flag} (or \"{flag}\" in the config)")))
}

fn emit(out: &mut impl Write, value: &Value) {
    let _ = writeln!(out, "{value}");
}

fn echo_config(out: &mut impl Write, command: &str, paths: &RunPaths, train: Option<&TrainConfig>) {
    let mut cfg = json!({ "command": command, "paths": paths });
    if let Some(t) = train {
        cfg["train"] = serde_json::to_value(t).expect("config serializes");
    }
    emit(out, &json!({ "effective_config": cfg }));
}

/// Loads nodes, edges, vocabulary and taxonomy, rejecting records whose
/// industry and sector disagree.
pub fn load_dataset(paths: &RunPaths, max_tokens: usize) -> Result<Dataset> {
    let taxonomy = match &paths.taxonomy {
        Some(p) => Taxonomy::load(p)?,
        None => Taxonomy::tse(),
    };
    let records = load_nodes(required(&paths.nodes, "nodes")?, &taxonomy)?;
    let violations = validate_taxonomy(&records, &taxonomy);
    if let Some(v) = violations.first() {
        return Err(SetnError::Data(format!(
            "{} taxonomy violations; first: {} labeled {:?} but {:?} belongs to {:?}",
            violations.len(),
            v.ticker,
            v.sector,
            v.industry,
            v.expected_sector
        )));
    }
    let graph = load_edges(required(&paths.edges, "edges")?, records.len())?;
    let vocab = Vocab::load(required(&paths.vocab, "vocab")?)?;
    Dataset::new(records, graph, taxonomy, &vocab, max_tokens)
}

fn exit_code(e: &SetnError) -> i32 {
    match e {
        SetnError::Parameter(_) | SetnError::KindMismatch { .. } => EXIT_USAGE,
        SetnError::Ablation { source, .. } => exit_code(source),
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit code.
pub fn run<I, T>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train_cmd(a, out, err),
        Command::EvalMap(a) => eval_map(a, out, err),
        Command::EvalTheme(a) => eval_theme(a, out, err),
        Command::Embed(a) => embed(a, out),
        Command::Ablate(a) => ablate(a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn synth(a: SynthArgs, out: &mut impl Write) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| SetnError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| SetnError::Parameter(format!("config: {e}")))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(v) = a.text_signal {
        spec.text_signal = v;
    }
    if let Some(v) = a.graph_signal {
        spec.graph_signal = v;
    }
    if let Some(v) = a.direction_signal {
        spec.direction_signal = v;
    }
    emit(out, &json!({ "effective_config": { "command": "synth", "out": a.out, "spec": spec } }));
    let ds = generate_synthetic(&spec)?;
    ds.write_dir(&a.out)?;
    emit(
        out,
        &json!({
            "dataset": a.out,
            "stocks": ds.records.len(),
            "edges": ds.graph.edge_count(),
            "themes": ds.themes.len(),
            "vocab": ds.vocab.len(),
        }),
    );
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let (mut paths, mut config) = read_config(a.data.config.as_deref())?;
    merge_data(&mut paths, &a.data);
    merge_model(&mut config, &a.model);
    if a.out.is_some() {
        paths.out.clone_from(&a.out);
    }
    config.validate()?;
    echo_config(out, "train", &paths, Some(&config));
    let ckpt = required(&paths.out, "out")?.to_path_buf();
    let data = load_dataset(&paths, config.max_tokens)?;
    let ids: Vec<usize> = (0..data.len()).collect();
    let split = split_dataset(&ids, config.split, config.seed)?;
    let mut model = build_model(&data, &config)?;
    let _ = writeln!(
        err,
        "training {} stocks ({} train / {} validation / {} test), {} parameters",
        data.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        model.parameter_count()
    );
    let _ = writeln!(err, "{:>5}  {:>10}  {:>12}  {:>12}", "epoch", "loss", "val@5 sec", "val@5 ind");
    train_with(&mut model, &data, &split, &config, |log| {
        emit(out, &serde_json::to_value(log).expect("log serializes"));
        let _ = writeln!(
            err,
            "{:>5}  {:>10.4}  {:>12.4}  {:>12.4}",
            log.epoch, log.mean_loss, log.validation_map5_sector, log.validation_map5_industry
        );
    })?;
    save_model(&model, &config, &ckpt)?;
    emit(
        out,
        &json!({ "checkpoint": ckpt, "parameters": model.parameter_count(), "parameter_hash": format!("{:016x}", model.parameter_hash()) }),
    );
    Ok(())
}

struct Loaded {
    paths: RunPaths,
    config: TrainConfig,
    model: crate::model::SetnModel,
    data: Dataset,
}

fn load_for_eval(data_args: &DataArgs, model_flag: &Option<PathBuf>, command: &str, out: &mut impl Write) -> Result<Loaded> {
    let (mut paths, _) = read_config(data_args.config.as_deref())?;
    merge_data(&mut paths, data_args);
    if model_flag.is_some() {
        paths.model.clone_from(model_flag);
    }
    let (model, config) = load_model(required(&paths.model, "model")?, None)?;
    echo_config(out, command, &paths, Some(&config));
    let data = load_dataset(&paths, config.max_tokens)?;
    if data.vocab_size != model.config.vocab_size {
        return Err(SetnError::Data(format!(
            "vocabulary has {} ids, checkpoint expects {}",
            data.vocab_size, model.config.vocab_size
        )));
    }
    Ok(Loaded {
        paths,
        config,
        model,
        data,
    })
}

fn test_embeddings(l: &Loaded) -> Result<(crate::evaluator::EmbeddingMatrix, Vec<usize>)> {
    let ids: Vec<usize> = (0..l.data.len()).collect();
    let split = split_dataset(&ids, l.config.split, l.config.seed)?;
    let graph = l.data.message_graph(l.config.directed);
    let e = embed_stocks(&l.model, &l.data, &graph, l.config.neighborhood, &split.test)?;
    Ok((e, split.test))
}

fn eval_map(a: EvalArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let l = load_for_eval(&a.data, &a.model, "eval-map", out)?;
    let ks = a.k.clone().or_else(|| l.paths.k.clone()).unwrap_or_else(|| DEFAULT_KS.to_vec());
    let (e, test) = test_embeddings(&l)?;
    let report = evaluate_map(&e, &l.data.sector_labels(&test), &l.data.industry_labels(&test), &ks)?;
    let _ = writeln!(err, "{:<10} {:>5} {:>8}", "taxonomy", "K", "MAP");
    for (name, values) in [("topix17", &report.sector), ("topix33", &report.industry)] {
        for (&k, &v) in report.ks.iter().zip(values) {
            emit(out, &json!({ "taxonomy": name, "k": k, "map": v }));
            let _ = writeln!(err, "{name:<10} {k:>5} {v:>8.4}");
        }
    }
    Ok(())
}

fn eval_theme(a: EvalArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let l = load_for_eval(&a.data, &a.model, "eval-theme", out)?;
    let min = a
        .min_theme_size
        .or(l.paths.min_theme_size)
        .unwrap_or(DEFAULT_MIN_THEME);
    let include_self = a.include_self || l.paths.include_self.unwrap_or(false);
    let (e, _) = test_embeddings(&l)?;
    let universe: HashSet<String> = e.ids().iter().cloned().collect();
    let (themes, stats) = load_themes(required(&l.paths.themes, "themes")?, &universe, min)?;
    let report = theme_metric(&e, &themes, include_self)?;
    let _ = writeln!(err, "{:<24} {:>5} {:>8} {:>8}", "theme", "size", "score", "random");
    for s in &report.per_theme {
        emit(out, &serde_json::to_value(s).expect("score serializes"));
        let _ = writeln!(err, "{:<24} {:>5} {:>8.4} {:>8.4}", s.theme, s.size, s.value, s.random_guess);
    }
    emit(
        out,
        &json!({
            "theme": "overall",
            "themes": report.per_theme.len(),
            "dropped": stats.dropped,
            "value": report.overall,
            "random_guess": report.random_guess,
        }),
    );
    let _ = writeln!(
        err,
        "{:<24} {:>5} {:>8.4} {:>8.4}",
        "overall",
        report.per_theme.len(),
        report.overall,
        report.random_guess
    );
    Ok(())
}

fn embed(a: EmbedArgs, out: &mut impl Write) -> Result<()> {
    let l = load_for_eval(&a.data, &a.model, "embed", out)?;
    let target = a.out.clone().or_else(|| l.paths.out.clone());
    let target = required(&target, "out")?.to_path_buf();
    let format = match a.format {
        Some(FormatArg::Tsv) => ExportFormat::Tsv,
        Some(FormatArg::Binary) => ExportFormat::Binary,
        None => l.paths.format.unwrap_or(ExportFormat::Tsv),
    };
    let ids: Vec<usize> = (0..l.data.len()).collect();
    let graph = l.data.message_graph(l.config.directed);
    let e = embed_stocks(&l.model, &l.data, &graph, l.config.neighborhood, &ids)?;
    export_embeddings(&e, &target, format)?;
    emit(out, &json!({ "embeddings": target, "count": e.len(), "dim": e.dim(), "format": format }));
    Ok(())
}

fn ablate(a: AblateArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let (mut paths, mut config) = read_config(a.data.config.as_deref())?;
    merge_data(&mut paths, &a.data);
    merge_model(&mut config, &a.model);
    if a.axes.is_some() {
        paths.axes.clone_from(&a.axes);
    }
    if a.k.is_some() {
        paths.k.clone_from(&a.k);
    }
    config.validate()?;
    echo_config(out, "ablate", &paths, Some(&config));
    let axes = paths
        .axes
        .as_ref()
        .ok_or_else(|| SetnError::Parameter("missing --axes".into()))?
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<Axis>>>()?;
    let ks = paths.k.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
    let data = load_dataset(&paths, config.max_tokens)?;
    let rows = run_ablation(&data, &config, &axes, &ks)?;

    let header: Vec<String> = axes.iter().map(|a| a.name().to_string()).collect();
    let mut line = header.iter().map(|h| format!("{h:<16}")).collect::<String>();
    for k in &ks {
        line.push_str(&format!(" {:>9} {:>9}", format!("T17@{k}"), format!("T33@{k}")));
    }
    let _ = writeln!(err, "{line}");
    for row in &rows {
        emit(
            out,
            &json!({
                "settings": row.settings,
                "k": row.map.ks,
                "topix17": row.map.sector,
                "topix33": row.map.industry,
            }),
        );
        let mut line = header
            .iter()
            .map(|h| format!("{:<16}", row.settings[h]))
            .collect::<String>();
        for i in 0..ks.len() {
            line.push_str(&format!(" {:>9.4} {:>9.4}", row.map.sector[i], row.map.industry[i]));
        }
        let _ = writeln!(err, "{line}");
    }
    Ok(())
}
