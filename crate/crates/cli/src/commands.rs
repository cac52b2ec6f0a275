//! Subcommand arguments and implementations. Each command validates its
//! inputs first (failures there are usage errors) and only then starts
//! work (failures from there on are runtime errors).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};

use protosim_client::Client;
use protosim_core::analytics::{
    compare_report, write_report, ReportMode, SpecificityLabel, SpecificityOptions,
    DEFAULT_MIN_OCCURRENCES, DEFAULT_THRESHOLD,
};
use protosim_core::api::{ExamplesQuery, PrototypeQuery, PrototypeSort};
use protosim_core::backbone::load_pretrained;
use protosim_core::checkpoint::{file_hash, resolve, write_atomic, Checkpoint};
use protosim_core::config::{read_kv, KeyValueConfig};
use protosim_core::data::{check_unique_ids, DatasetDescriptor};
use protosim_core::image_ops::ImageTensor;
use protosim_core::index::{
    index_dataset, records_file_name, IndexManifest, IndexStore, IndexedDataset, Rank, TokenKind,
    INDEX_FORMAT,
};
use protosim_core::probe::{
    evaluate, extract_features, stratified_split, train_probe, zero_prototype_ablation,
    AblationReport, FeatureSet, LabeledImages, ProbeConfig, ProbeResults,
};
use protosim_core::synthetic::{write_planted_comparison, PlantedOptions};
use protosim_core::training::{self, TrainConfig, TRAIN_LOG_FILE};
use protosim_core::viz::{attention_map, png_bytes, render_overlay};
use protosim_service::{AppState, ServeConfig};

pub const PROBE_FILE: &str = "probe.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<protosim_core::Error> for Failure {
    fn from(e: protosim_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Invalid-argument errors from the library are the caller's fault;
/// anything else is a runtime failure.
fn classify(e: protosim_core::Error) -> Failure {
    match e {
        protosim_core::Error::InvalidArgument(m) => Failure::Usage(m),
        e => e.into(),
    }
}

fn parse_datasets(specs: &[String]) -> Result<Vec<DatasetDescriptor>, Failure> {
    let datasets = specs
        .iter()
        .map(|s| DatasetDescriptor::parse(s).map_err(usage))
        .collect::<Result<Vec<_>, _>>()?;
    check_unique_ids(&datasets).map_err(usage)?;
    for d in &datasets {
        if d.list_images().map_err(usage)?.is_empty() {
            return Err(usage(format!(
                "dataset `{}` has no images under {}",
                d.dataset_id,
                d.root.display()
            )));
        }
    }
    Ok(datasets)
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, Failure> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

/// Defaults, then the config file, then `flags`, then `--set` pairs.
fn build_config<C: KeyValueConfig + Default>(
    file: Option<&Path>,
    flags: Vec<(&str, Option<String>)>,
    sets: &[String],
) -> Result<C, Failure> {
    let mut cfg = C::default();
    if let Some(path) = file {
        if !path.is_file() {
            return Err(usage(format!("config file {} not found", path.display())));
        }
        cfg.apply(&read_kv(path).map_err(usage)?).map_err(usage)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(usage)?;
        }
    }
    cfg.apply(&parse_sets(sets)?).map_err(usage)?;
    Ok(cfg)
}

fn require_file(path: &Path, what: &str) -> Result<PathBuf, Failure> {
    let path = resolve(path);
    if !path.is_file() {
        return Err(usage(format!("{what} {} not found", path.display())));
    }
    Ok(path)
}

/// Loads a checkpoint together with its content hash.
fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String), Failure> {
    let path = require_file(path, "checkpoint")?;
    let hash = file_hash(&path)?;
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ckpt, hash))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).context("serializing output")?
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Datasets as ID=PATH, comma separated or repeated.
    #[arg(long, alias = "dataset", value_name = "ID=PATH", required = true, value_delimiter = ',')]
    datasets: Vec<String>,
    /// Flat key=value training configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for the checkpoint and training log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    soft_epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    num_prototypes: Option<usize>,
    #[arg(long)]
    local_crops: Option<usize>,
    /// Backbone weight descriptor, e.g. `toy-vit-s8-d64,seed=0` or `deit-s:weights.safetensors`.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg: TrainConfig = build_config(
        a.config.as_deref(),
        vec![
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("soft_epochs", a.soft_epochs.map(|v| v.to_string())),
            ("learning_rate", a.learning_rate.map(|v| v.to_string())),
            ("batch_size", a.batch_size.map(|v| v.to_string())),
            ("num_prototypes", a.num_prototypes.map(|v| v.to_string())),
            ("local_crops", a.local_crops.map(|v| v.to_string())),
            ("backbone", a.backbone),
            ("seed", a.seed.map(|v| v.to_string())),
        ],
        &a.set,
    )?;
    cfg.validate().map_err(usage)?;
    let datasets = parse_datasets(&a.datasets)?;
    let backbone = load_pretrained(&cfg.backbone).map_err(classify)?;
    println!(
        "training K={} for {} epochs ({} soft) on {}",
        cfg.num_prototypes,
        cfg.epochs,
        cfg.soft_epochs,
        datasets
            .iter()
            .map(|d| d.dataset_id.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    let outcome = training::train(&datasets, cfg, &backbone, Some(&a.out), |e| {
        println!(
            "epoch {:>3}  loss {:.5}  avg-cos {:.5}  {:?}",
            e.epoch, e.loss, e.avg_cosine_sim, e.mode
        );
    })?;
    if let Some(p) = outcome.checkpoint_path {
        println!("checkpoint: {}", p.display());
        println!("log: {}", a.out.join(TRAIN_LOG_FILE).display());
    }
    Ok(())
}

// ---------------------------------------------------------------- index

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Datasets as ID=PATH, comma separated or repeated.
    #[arg(long, alias = "datasets", value_name = "ID=PATH", required = true, value_delimiter = ',')]
    dataset: Vec<String>,
    /// Output index directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Images per forward pass.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

pub fn index(a: IndexArgs) -> Result<(), Failure> {
    let datasets = parse_datasets(&a.dataset)?;
    let ckpt_path = require_file(&a.checkpoint, "checkpoint")?;
    let (ckpt, hash) = load_checkpoint(&ckpt_path)?;
    let model = ckpt.model()?;
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for d in datasets {
        eprintln!("indexing {}", d.dataset_id);
        let run = index_dataset(&model, &d, a.batch_size, |done, total| {
            eprintln!("{done}/{total}");
        })?;
        for (id, reason) in &run.skipped {
            eprintln!("warning: skipped {}/{id}: {reason}", d.dataset_id);
        }
        entries.push(IndexedDataset {
            images: run.records.len(),
            skipped: run.skipped.len(),
            records_file: records_file_name(&d.dataset_id),
            descriptor: d,
        });
        records.extend(run.records);
    }
    let manifest = IndexManifest {
        format: INDEX_FORMAT.to_string(),
        num_prototypes: model.num_prototypes(),
        num_patches: model.num_patches(),
        grid: model.spec.patch.grid(),
        checkpoint: std::fs::canonicalize(&ckpt_path).unwrap_or(ckpt_path),
        checkpoint_hash: hash,
        datasets: entries,
    };
    let store = IndexStore::save(&a.out, &manifest, &records)?;
    println!(
        "indexed {} images from {} dataset(s) into {}",
        store.index.total_images(),
        store.manifest.datasets.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Index directory.
    #[arg(long)]
    index: PathBuf,
    /// Checkpoint the index was built with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// A prototype is dataset-specific when one dataset's share exceeds this.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Prototypes with fewer occurrences are labelled insufficient-data.
    #[arg(long, default_value_t = DEFAULT_MIN_OCCURRENCES)]
    min_occurrences: u64,
    /// Which tokens count as occurrences: class, patch or any.
    #[arg(long, default_value = "any")]
    token_kind: TokenKind,
    /// Exemplars stored per prototype.
    #[arg(long, default_value_t = 12)]
    top_k: usize,
    /// Report output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

pub fn compare(a: CompareArgs) -> Result<(), Failure> {
    let opts = SpecificityOptions {
        threshold: a.threshold,
        min_occurrences: a.min_occurrences,
        token_kind: a.token_kind,
    };
    opts.validate().map_err(usage)?;
    if !a.index.join(protosim_core::index::MANIFEST_FILE).is_file() {
        return Err(usage(format!("{} is not an index directory", a.index.display())));
    }
    let (ckpt, hash) = load_checkpoint(&a.checkpoint)?;
    let store = IndexStore::load(&a.index, true)?;
    if store.manifest.checkpoint_hash != hash {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "index was built with checkpoint {} but {} hashes to {hash}",
            store.manifest.checkpoint_hash,
            a.checkpoint.display()
        )));
    }
    let report = compare_report(&store, &ckpt.model()?.bank()?, &opts, a.top_k)?;
    if report.mode == ReportMode::Summary {
        eprintln!(
            "warning: the index holds a single dataset; writing a summary report without specificity labels"
        );
    }
    write_report(&report, &store, &a.out)?;
    let c = &report.counts;
    for (d, n) in &c.specific {
        println!("specific-to:{d}\t{n}");
    }
    println!("shared\t{}", c.shared);
    println!("insufficient-data\t{}", c.insufficient_data);
    println!("unused\t{}", c.unused);
    println!(
        "mean pairwise cosine similarity\t{:.6}",
        report.diversity.mean_cosine_similarity
    );
    println!("report: {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- probe

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset as ID=PATH.
    #[arg(long, value_name = "ID=PATH")]
    dataset: String,
    /// Labels CSV (`image_id,label`); defaults to labels.csv in the dataset root.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Flat key=value probe configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Images per forward pass during feature extraction.
    #[arg(long, default_value_t = 64)]
    extract_batch: usize,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn labeled_dataset(spec: &str, labels: Option<PathBuf>) -> Result<DatasetDescriptor, Failure> {
    let mut d = parse_datasets(&[spec.to_string()])?.remove(0);
    if let Some(l) = labels {
        if !l.is_file() {
            return Err(usage(format!("labels file {} not found", l.display())));
        }
        d.labels = Some(l);
    }
    if d.labels.is_none() {
        return Err(usage(format!(
            "dataset `{}` has no {}; pass --labels",
            d.dataset_id,
            protosim_core::data::LABELS_FILE
        )));
    }
    Ok(d)
}

pub fn probe(a: ProbeArgs) -> Result<(), Failure> {
    let cfg: ProbeConfig = build_config(
        a.config.as_deref(),
        vec![
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("learning_rate", a.learning_rate.map(|v| v.to_string())),
            ("val_fraction", a.val_fraction.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
        ],
        &a.set,
    )?;
    cfg.validate().map_err(usage)?;
    let dataset = labeled_dataset(&a.dataset, a.labels)?;
    let (ckpt, hash) = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model()?;
    let data = LabeledImages::load(&dataset)?;
    let features = extract_features(&model, &data, &[], false, a.extract_batch)?;
    let split = stratified_split(&features.labels, cfg.val_fraction, cfg.seed);
    let probe = train_probe(&features, &split, &cfg)?;
    let eval = evaluate(&probe, &features, &split.val);
    println!("overall accuracy\t{:.4}", eval.overall_accuracy);
    for c in &eval.per_class {
        println!("{}\t{:.4}\t({}/{})", c.class, c.accuracy, c.correct, c.total);
    }
    let results = ProbeResults {
        dataset,
        checkpoint_hash: hash,
        config: cfg,
        overall_accuracy: eval.overall_accuracy,
        per_class: eval.per_class,
        ablation: None,
        split,
        probe,
    };
    write_json(&a.out.join(PROBE_FILE), &results)?;
    println!("probe: {}", a.out.join(PROBE_FILE).display());
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Checkpoint the probe was trained on.
    #[arg(long)]
    checkpoint: PathBuf,
    /// probe.json, or the directory holding it.
    #[arg(long)]
    probe: PathBuf,
    /// `top:N` (the N classes most concentrated on one prototype), `all`,
    /// or a comma-separated class list.
    #[arg(long, default_value = "top:100")]
    classes: String,
    /// Exclude zeroed prototypes from assignment instead of only zeroing
    /// their embedding.
    #[arg(long)]
    reroute: bool,
    /// Images per forward pass.
    #[arg(long, default_value_t = 64)]
    extract_batch: usize,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Which classes to ablate.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassSelection {
    Top(usize),
    All,
    Named(Vec<String>),
}

impl std::str::FromStr for ClassSelection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(Self::All);
        }
        if let Some(n) = s.strip_prefix("top:") {
            return match n.parse() {
                Ok(n) if n > 0 => Ok(Self::Top(n)),
                _ => Err(format!("--classes top:N needs a positive N, got `{n}`")),
            };
        }
        let names: Vec<String> = s
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        if names.is_empty() {
            return Err("--classes is empty".into());
        }
        Ok(Self::Named(names))
    }
}

/// Dominant class-token prototype of each class over `indices`, with the
/// share of the class's images it takes; strongest first, ties by name.
fn class_prototypes(features: &FeatureSet, indices: &[usize]) -> Vec<(String, usize, f64)> {
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for &i in indices {
        *counts
            .entry(features.labels[i].as_str())
            .or_default()
            .entry(features.class_prototypes[i])
            .or_default() += 1;
    }
    let mut out: Vec<(String, usize, f64)> = counts
        .into_iter()
        .map(|(c, m)| {
            let total: usize = m.values().sum();
            let (p, n) = m
                .iter()
                .fold((usize::MAX, 0), |b, (&p, &n)| if n > b.1 { (p, n) } else { b });
            (c.to_string(), p, n as f64 / total as f64)
        })
        .collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationOutput {
    probe: PathBuf,
    checkpoint_hash: String,
    classes: String,
    report: AblationReport,
}

pub fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let selection: ClassSelection = a.classes.parse().map_err(usage)?;
    let probe_path = if a.probe.is_dir() {
        a.probe.join(PROBE_FILE)
    } else {
        a.probe.clone()
    };
    let probe_path = require_file(&probe_path, "probe results")?;
    let text = std::fs::read_to_string(&probe_path).context("reading probe results")?;
    let results: ProbeResults = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", probe_path.display()))?;
    let (ckpt, hash) = load_checkpoint(&a.checkpoint)?;
    if hash != results.checkpoint_hash {
        return Err(usage(format!(
            "probe was trained on checkpoint {} but {} hashes to {hash}",
            results.checkpoint_hash,
            a.checkpoint.display()
        )));
    }
    if let ClassSelection::Named(names) = &selection {
        for n in names {
            if !results.probe.classes.contains(n) {
                return Err(usage(format!("the probe has no class `{n}`")));
            }
        }
    }
    let model = ckpt.model()?;
    let data = LabeledImages::load(&results.dataset)?;
    let baseline = extract_features(&model, &data, &[], false, a.extract_batch)?;
    if baseline.image_ids.len() != results.split.train.len() + results.split.val.len() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "the labeled images of `{}` changed since the probe was trained",
            results.dataset.dataset_id
        )));
    }
    let ranked = class_prototypes(&baseline, &results.split.train);
    let class_map: BTreeMap<String, usize> = match &selection {
        ClassSelection::Top(n) => ranked.iter().take(*n).map(|(c, p, _)| (c.clone(), *p)).collect(),
        ClassSelection::All => ranked.iter().map(|(c, p, _)| (c.clone(), *p)).collect(),
        ClassSelection::Named(names) => ranked
            .iter()
            .filter(|(c, _, _)| names.contains(c))
            .map(|(c, p, _)| (c.clone(), *p))
            .collect(),
    };
    let report = zero_prototype_ablation(
        &model,
        &data,
        &results.probe,
        &baseline,
        &results.split,
        &class_map,
        a.reroute,
        a.extract_batch,
    )?;
    println!("class\tprototype\tbefore\tafter\tdelta\tmax-untouched-change");
    for e in &report.entries {
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            e.class, e.prototype, e.before, e.after, e.delta, e.max_untouched_change
        );
    }
    println!("mean delta\t{:.4}", report.mean_delta);
    let out = AblationOutput {
        probe: probe_path,
        checkpoint_hash: hash,
        classes: a.classes,
        report,
    };
    write_json(&a.out.join(ABLATION_FILE), &out)?;
    println!("ablation: {}", a.out.join(ABLATION_FILE).display());
    Ok(())
}

// ---------------------------------------------------------------- viz

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to overlay.
    #[arg(long)]
    image: PathBuf,
    /// Prototype id.
    #[arg(long)]
    prototype: usize,
    /// Output PNG; the raw grid is written next to it as JSON.
    #[arg(long, value_name = "FILE.png")]
    out: PathBuf,
}

pub fn viz(a: VizArgs) -> Result<(), Failure> {
    if !a.image.is_file() {
        return Err(usage(format!("image {} not found", a.image.display())));
    }
    let (ckpt, _) = load_checkpoint(&a.checkpoint)?;
    if a.prototype >= ckpt.spec.num_prototypes {
        return Err(usage(format!(
            "prototype {} out of range (K = {})",
            a.prototype, ckpt.spec.num_prototypes
        )));
    }
    let model = ckpt.model()?;
    let image = ImageTensor::load(&a.image)?;
    let grid = attention_map(&model, &image, a.prototype)?;
    let overlay = render_overlay(&image, &grid)?;
    write_atomic(&a.out, &png_bytes(&overlay)?)?;
    let json = a.out.with_extension("json");
    write_json(&json, &grid)?;
    let (r, c) = grid.argmax();
    println!("peak at patch ({r}, {c}) = {:.4}", grid.values[r][c]);
    println!("overlay: {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- serve

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Index directory.
    #[arg(long)]
    index: PathBuf,
    /// Checkpoint the index and report were built with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report directory or report.json.
    #[arg(long)]
    report: PathBuf,
    /// Listen address; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Static UI directory served at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
    /// Overlay cache directory (default: $PROTOSIM_CACHE_DIR or a temp dir).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

pub fn serve(a: ServeArgs, workers: Option<usize>) -> Result<(), Failure> {
    require_file(&a.checkpoint, "checkpoint")?;
    if !a.index.is_dir() {
        return Err(usage(format!("index directory {} not found", a.index.display())));
    }
    if !a.report.exists() {
        return Err(usage(format!("report {} not found", a.report.display())));
    }
    if let Some(ui) = &a.ui {
        if !ui.is_dir() {
            return Err(usage(format!("UI directory {} not found", ui.display())));
        }
    }
    let state = AppState::load(&ServeConfig {
        index_dir: a.index,
        checkpoint: resolve(&a.checkpoint),
        report: a.report,
        cache_dir: a.cache_dir,
    })
    .map_err(|e| Failure::Runtime(e.into()))?;
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = workers {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().context("starting the async runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        protosim_service::serve(listener, Arc::new(state), a.ui, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("serving")?;
        anyhow::Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------- query

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Service root URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    #[command(subcommand)]
    target: QueryTarget,
}

#[derive(Debug, Subcommand)]
pub enum QueryTarget {
    /// Datasets, K, N, thresholds and format versions.
    Manifest,
    /// Filtered, sorted and paged prototype statistics.
    Prototypes {
        /// specific-to:ID, shared or insufficient-data.
        #[arg(long)]
        label: Option<SpecificityLabel>,
        #[arg(long)]
        token_kind: Option<TokenKind>,
        #[arg(long)]
        min_occurrences: Option<u64>,
        #[arg(long)]
        threshold: Option<f64>,
        /// id, occurrences, class_proportion or specificity.
        #[arg(long)]
        sort: Option<PrototypeSort>,
        #[arg(long)]
        offset: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Statistics of one prototype.
    Prototype { id: usize },
    /// Top images of one prototype.
    Examples {
        id: usize,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// count or affinity.
        #[arg(long)]
        rank: Option<Rank>,
        #[arg(long)]
        token_kind: Option<TokenKind>,
    },
    /// Download an attention overlay PNG.
    Attention {
        id: usize,
        image_id: String,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, value_name = "FILE.png")]
        out: PathBuf,
    },
    /// The full comparison report.
    Report,
}

pub fn query(a: QueryArgs) -> Result<(), Failure> {
    let client = Client::new(&a.url);
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    rt.block_on(async move {
        match a.target {
            QueryTarget::Manifest => print_json(&client.manifest().await.map_err(anyhow::Error::from)?),
            QueryTarget::Prototypes {
                label,
                token_kind,
                min_occurrences,
                threshold,
                sort,
                offset,
                limit,
            } => {
                let q = PrototypeQuery {
                    label,
                    token_kind,
                    min_occurrences,
                    threshold,
                    sort,
                    offset,
                    limit,
                };
                print_json(&client.prototypes(&q).await.map_err(anyhow::Error::from)?)
            }
            QueryTarget::Prototype { id } => {
                print_json(&client.prototype(id).await.map_err(anyhow::Error::from)?)
            }
            QueryTarget::Examples {
                id,
                dataset,
                k,
                rank,
                token_kind,
            } => {
                let q = ExamplesQuery {
                    dataset,
                    k,
                    rank,
                    token_kind,
                };
                print_json(&client.examples(id, &q).await.map_err(anyhow::Error::from)?)
            }
            QueryTarget::Attention {
                id,
                image_id,
                dataset,
                out,
            } => {
                let png = client
                    .attention_png(id, dataset.as_deref(), &image_id)
                    .await
                    .map_err(anyhow::Error::from)?;
                write_atomic(&out, &png)?;
                println!("overlay: {}", out.display());
                Ok(())
            }
            QueryTarget::Report => print_json(&client.report().await.map_err(anyhow::Error::from)?),
        }
    })
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output root; one directory per dataset plus truth.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Dataset ids.
    #[arg(long, value_delimiter = ',', default_value = "A,B")]
    datasets: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    images_per_dataset: usize,
    /// Concepts that appear in only one dataset, per dataset.
    #[arg(long, default_value_t = 4)]
    specific_per_dataset: usize,
    /// Concepts that appear in every dataset.
    #[arg(long, default_value_t = 4)]
    shared: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Per-pixel noise standard deviation.
    #[arg(long, default_value_t = 0.03)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let total = a.datasets.len() * a.specific_per_dataset + a.shared;
    if total == 0 || total > 30 {
        return Err(usage(format!(
            "between 1 and 30 concepts are supported, asked for {total}"
        )));
    }
    if a.images_per_dataset == 0 || a.size < 4 {
        return Err(usage("need at least one image per dataset of at least 4 pixels"));
    }
    let opts = PlantedOptions {
        dataset_ids: a.datasets,
        images_per_dataset: a.images_per_dataset,
        specific_per_dataset: a.specific_per_dataset,
        shared: a.shared,
        size: a.size,
        noise: a.noise,
        seed: a.seed,
    };
    let truth = write_planted_comparison(&a.out, &opts).map_err(classify)?;
    write_json(&a.out.join(TRUTH_FILE), &truth)?;
    for d in &truth.datasets {
        println!("{}={}", d.dataset_id, d.root.display());
    }
    Ok(())
}
