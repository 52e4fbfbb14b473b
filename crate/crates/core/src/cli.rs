//! Command-line driver: `prepare` builds splits, edge caches and (optionally)
//! synthetic corpora; `experiment` trains and evaluates few-shot episodes;
//! `report` renders tables, plots and overlays from finished runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_split_manifest, dataset_name, edge_cache_dir, generate_synthetic_dataset, load_sample, load_target, manifest_path, CellStyle,
    Role, Sample, SourceCorpus, SplitManifest, SyntheticConfig,
};
use crate::edgemaps::{load_edge_map, precompute_edge_targets, save_edge_map, CannyConfig};
use crate::error::{Error, Result};
use crate::eval::{aggregate_results, evaluate_episodes, sample_episodes, EpisodeResult, MetricsReport, DEFAULT_SELECTIONS, DEFAULT_SHOTS};
use crate::model::{checkpoint, ArchConfig, ModelParameters};
use crate::report::{render_comparison_table, render_error_overlay, render_shot_curves};
use crate::training::{FinetuneConfig, MethodRegistry, TrainConfig, UNLABELLED_FRACTIONS};
use crate::util::{hash_json, read_json, write_atomic, write_json};

/// Sizes of the generated desk-scale corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSetup {
    pub images_per_source: usize,
    pub target_images: usize,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        SyntheticSetup {
            images_per_source: 20,
            target_images: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sources: Vec<PathBuf>,
    pub target: Option<PathBuf>,
    pub labelled_fraction: f64,
    pub seeds: Vec<u64>,
    /// Images are resized to `image_size × image_size`.
    pub image_size: usize,
    pub arch: ArchConfig,
    pub canny: CannyConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub shots: Vec<usize>,
    pub selections: usize,
    /// Where `--synthetic` writes generated corpora.
    pub data_dir: PathBuf,
    pub synthetic: SyntheticSetup,
    /// Root of the run directories.
    pub out: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sources: Vec::new(),
            target: None,
            labelled_fraction: 0.1,
            seeds: vec![0],
            image_size: 64,
            arch: ArchConfig::default(),
            canny: CannyConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            shots: DEFAULT_SHOTS.to_vec(),
            selections: DEFAULT_SELECTIONS,
            data_dir: PathBuf::from("data"),
            synthetic: SyntheticSetup::default(),
            out: PathBuf::from("runs"),
            workers: 1,
        }
    }
}

/// Source and target styles of the synthetic benchmark.
pub const SYNTHETIC_SOURCES: [(&str, CellStyle); 2] = [("fluorescent", CellStyle::Fluorescent), ("textured", CellStyle::Textured)];
pub const SYNTHETIC_TARGET: (&str, CellStyle) = ("inverted", CellStyle::Inverted);

impl ExperimentConfig {
    /// Point sources and target at the generated synthetic corpora.
    pub fn use_synthetic(&mut self) {
        self.sources = SYNTHETIC_SOURCES.iter().map(|(n, _)| self.data_dir.join(n)).collect();
        self.target = Some(self.data_dir.join(SYNTHETIC_TARGET.0));
    }

    pub fn target_root(&self) -> Result<&Path> {
        self.target
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("target: no target dataset configured".into()))
    }

    /// Field-level checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sources.is_empty() {
            return bad("sources: at least one source dataset is required".into());
        }
        self.target_root()?;
        if !(self.labelled_fraction > 0.0 && self.labelled_fraction <= 1.0) {
            return bad(format!("labelled_fraction must be in (0, 1], got {}", self.labelled_fraction));
        }
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.arch.size_divisor()) {
            return bad(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                self.arch.size_divisor()
            ));
        }
        if self.shots.is_empty() || self.shots.iter().any(|&k| !(1..=10).contains(&k)) {
            return bad(format!("shots must be non-empty values in 1..=10, got {:?}", self.shots));
        }
        if self.selections == 0 {
            return bad("selections must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.arch.validate()?;
        self.canny.validate()?;
        self.finetune.validate()?;
        if self.train.method != "grid" {
            self.train.validate()?;
        }
        Ok(())
    }

    /// Check that every dataset directory exists.
    pub fn validate_paths(&self) -> Result<()> {
        for root in self.sources.iter().chain(self.target.iter()) {
            for sub in ["images", "masks"] {
                let p = root.join(sub);
                if !p.is_dir() {
                    return Err(Error::Missing(format!("directory {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "edgeseg", version, about = "Edge-map self-supervision for few-shot cell segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write split manifests and edge caches (and generate synthetic corpora).
    Prepare(CommonArgs),
    /// Train a model and evaluate few-shot episodes.
    Experiment(CommonArgs),
    /// Render comparison tables, shot curves and error overlays.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use (and for `prepare`, generate) the synthetic desk-scale corpora.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training method, or `grid` for every method and unlabelled fraction.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub unlabelled_fraction: Option<f64>,
    /// Comma-separated shot counts, e.g. `1,3,5,7,10`.
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Root directory for run outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories; defaults to every run under `--runs`.
    pub run_dirs: Vec<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Directory for report artifacts; defaults to `<runs>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Load the config file (if any) and apply flag overrides.
pub fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(p) if !p.is_file() => return Err(Error::Missing(format!("config file {} does not exist", p.display()))),
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Json { path, source } => Error::InvalidConfig(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if args.synthetic {
        cfg.use_synthetic();
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(m) = &args.method {
        cfg.train.method = m.clone();
    }
    if let Some(f) = args.unlabelled_fraction {
        cfg.train.unlabelled_fraction = f;
    }
    if let Some(shots) = &args.shots {
        cfg.shots = shots.clone();
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if cfg.train.method != "grid" {
        cfg.train.method = MethodRegistry::default().canonical(&cfg.train.method)?.to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_prepare(cfg: &ExperimentConfig, synthetic: bool) -> Result<()> {
    let seed = cfg.seeds[0];
    if synthetic {
        let n_src = cfg.synthetic.images_per_source;
        for (i, (name, style)) in SYNTHETIC_SOURCES.iter().enumerate() {
            let sc = SyntheticConfig::preset(*style, n_src, cfg.image_size, seed.wrapping_add(i as u64));
            generate_synthetic_dataset(&sc, &cfg.data_dir.join(name))?;
        }
        let (name, style) = SYNTHETIC_TARGET;
        let tc = SyntheticConfig::preset(style, cfg.synthetic.target_images, cfg.image_size, seed.wrapping_add(100));
        generate_synthetic_dataset(&tc, &cfg.data_dir.join(name))?;
    }
    cfg.validate_paths()?;
    let size = (cfg.image_size, cfg.image_size);
    let fractions: Vec<f64> = if cfg.train.method == "grid" {
        UNLABELLED_FRACTIONS[1..].to_vec()
    } else {
        vec![cfg.train.unlabelled_fraction]
    };
    let max_fraction = fractions.iter().cloned().fold(0.0, f64::max);
    for root in &cfg.sources {
        let manifest = build_split_manifest(root, cfg.labelled_fraction, seed)?;
        if max_fraction > 0.0 {
            // subsets are nested, so the largest one covers every smaller fraction
            let subset = SplitManifest {
                unlabelled_ids: manifest.unlabelled_subset(max_fraction),
                ..manifest.clone()
            };
            let n = precompute_edge_targets(&subset, root, &cfg.canny, &edge_cache_dir(root), size)?;
            eprintln!("{}: {} labelled, {} edge maps written", manifest.dataset_name, manifest.labelled_ids.len(), n);
        }
    }
    let target = build_split_manifest(cfg.target_root()?, 1.0, seed)?;
    eprintln!("{}: {} target images", target.dataset_name, target.total());
    Ok(())
}

/// The fully resolved configuration of one training run.
fn run_config(cfg: &ExperimentConfig, method: &str, fraction: f64, seed: u64) -> ExperimentConfig {
    let mut rc = cfg.clone();
    rc.seeds = vec![seed];
    rc.train.method = method.to_string();
    rc.train.unlabelled_fraction = fraction;
    rc.train.seed = seed;
    rc.finetune.seed = seed;
    rc
}

/// Hash of everything that influences results (not output location or parallelism).
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out = PathBuf::new();
    c.workers = 1;
    hash_json(&c)
}

/// (method, unlabelled fraction) pairs an experiment covers.
fn experiment_grid(cfg: &ExperimentConfig) -> Vec<(String, f64)> {
    if cfg.train.method != "grid" {
        return vec![(cfg.train.method.clone(), cfg.train.unlabelled_fraction)];
    }
    let registry = MethodRegistry::default();
    let mut grid = Vec::new();
    for name in registry.names() {
        if registry.get(name).expect("listed").uses_unlabelled() {
            grid.extend(UNLABELLED_FRACTIONS[1..].iter().map(|&f| (name.to_string(), f)));
        } else {
            grid.push((name.to_string(), 0.0));
        }
    }
    grid
}

const RESULTS_FILE: &str = "results.csv";
const PREDICTIONS_DIR: &str = "predictions";

fn read_results(path: &Path) -> Result<Vec<EpisodeResult>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>().map_err(Error::from)
}

fn write_results(path: &Path, rows: &[EpisodeResult]) -> Result<()> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| (&a.target, a.shot, a.selection).cmp(&(&b.target, b.shot, b.selection)));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Train (or reload) one run and evaluate every episode not yet in its results file.
pub fn run_one(rc: &ExperimentConfig) -> Result<PathBuf> {
    let registry = MethodRegistry::default();
    let method = registry.get(&rc.train.method)?;
    let hash = config_hash(rc);
    let run_dir = rc.out.join(&hash);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_json(&run_dir.join("config.json"), rc)?;
    let size = (rc.image_size, rc.image_size);

    let target_root = rc.target_root()?;
    let target_manifest = manifest_path(target_root);
    if !target_manifest.is_file() {
        return Err(Error::Missing(format!(
            "no split manifest at {}; run `prepare` first",
            target_manifest.display()
        )));
    }
    let corpus = SourceCorpus::open(&rc.sources, rc.train.unlabelled_fraction)?;

    let ckpt_path = run_dir.join("checkpoint.bin");
    let model: ModelParameters = match checkpoint::load_checkpoint(&ckpt_path) {
        Ok(c) if c.config_hash == hash => c.params,
        _ => {
            let canny = method.needs_edge_targets().then_some(&rc.canny);
            let data = corpus.load(size, canny)?;
            let init = ModelParameters::init(&rc.arch, rc.train.seed, method.needs_rotation_head())?;
            let (model, mut history) = method.train(init, &data, &rc.train)?;
            checkpoint::save_checkpoint(&ckpt_path, &model, &hash)?;
            history.checkpoint = Some(ckpt_path.clone());
            history.write_csv(&run_dir.join("history.csv"))?;
            model
        }
    };

    let target_name = dataset_name(target_root);
    let samples: BTreeMap<String, Sample> = load_target(target_root, size)?
        .into_iter()
        .map(|s| (s.id.clone(), s))
        .collect();
    let ids: Vec<String> = samples.keys().cloned().collect();
    let episodes = sample_episodes(&target_name, &ids, &rc.shots, rc.selections, rc.seeds[0])?;

    let results_path = run_dir.join(RESULTS_FILE);
    let mut rows = read_results(&results_path)?;
    let done: BTreeSet<(String, usize, usize)> = rows.iter().map(|r| (r.target.clone(), r.shot, r.selection)).collect();
    let pending: Vec<_> = episodes
        .into_iter()
        .filter(|e| !done.contains(&(e.target_name.clone(), e.shot_count, e.selection_index)))
        .collect();
    let pred_dir = run_dir.join(PREDICTIONS_DIR);
    for chunk in pending.chunks(rc.workers.max(1)) {
        let outcomes = evaluate_episodes(&model, chunk, &samples, &rc.finetune, rc.workers)?;
        for (e, o) in chunk.iter().zip(outcomes) {
            if e.selection_index == 0 {
                // keep one query prediction per shot count for error overlays
                let (qid, mask) = &o.predictions[0];
                let dir = pred_dir.join(&e.target_name);
                fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
                save_edge_map(&dir.join(format!("{}shot_{qid}.png", e.shot_count)), mask)?;
            }
            rows.push(EpisodeResult {
                method: rc.train.method.clone(),
                target: e.target_name.clone(),
                shot: e.shot_count,
                selection: e.selection_index,
                iou: o.mean_iou,
            });
        }
        write_results(&results_path, &rows)?;
    }
    write_results(&results_path, &rows)?;
    let report = aggregate_results(&rows, rc.selections, rc.labelled_fraction, rc.train.unlabelled_fraction)?;
    write_json(&run_dir.join("summary.json"), &report)?;
    Ok(run_dir)
}

pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        for (method, fraction) in experiment_grid(cfg) {
            let rc = run_config(cfg, &method, fraction, seed);
            rc.train.validate()?;
            let dir = run_one(&rc)?;
            eprintln!("{method} (unlabelled {fraction}, seed {seed}): {}", dir.display());
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

struct CompletedRun {
    dir: PathBuf,
    config: ExperimentConfig,
    report: MetricsReport,
}

fn load_run(dir: &Path) -> Result<CompletedRun> {
    let config: ExperimentConfig = read_json(&dir.join("config.json"))?;
    let rows = read_results(&dir.join(RESULTS_FILE))?;
    let report = aggregate_results(&rows, config.selections, config.labelled_fraction, config.train.unlabelled_fraction)?;
    Ok(CompletedRun {
        dir: dir.to_path_buf(),
        config,
        report,
    })
}

pub fn cmd_report(args: &ReportArgs) -> Result<PathBuf> {
    let mut dirs = args.run_dirs.clone();
    if dirs.is_empty() && args.runs.is_dir() {
        let entries = fs::read_dir(&args.runs).map_err(|e| Error::io(&args.runs, e))?;
        for entry in entries {
            let p = entry.map_err(|e| Error::io(&args.runs, e))?.path();
            if p.join(RESULTS_FILE).is_file() {
                dirs.push(p);
            }
        }
    }
    dirs.sort();
    let mut runs = Vec::new();
    for d in &dirs {
        match load_run(d) {
            Ok(r) => runs.push(r),
            Err(e) => eprintln!("skipping {}: {e}", d.display()),
        }
    }
    if runs.is_empty() {
        return Err(Error::Missing(format!(
            "no completed runs found (looked in {})",
            if args.run_dirs.is_empty() { args.runs.display().to_string() } else { "the given directories".into() }
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| args.runs.join("report"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    render_comparison_table(&reports, &out.join("comparison.md"))?;
    let targets: BTreeSet<String> = reports.iter().flat_map(|r| r.targets()).collect();
    for t in &targets {
        let with_target: Vec<MetricsReport> = reports.iter().filter(|r| r.targets().contains(t)).cloned().collect();
        render_shot_curves(&with_target, t, &out.join(format!("curves_{t}.png")))?;
    }
    for run in &runs {
        let pred_dir = run.dir.join(PREDICTIONS_DIR);
        if !pred_dir.is_dir() {
            continue;
        }
        let target_root = run.config.target_root()?;
        let target_name = dataset_name(target_root);
        let dir = pred_dir.join(&target_name);
        if !dir.is_dir() {
            continue;
        }
        let size = (run.config.image_size, run.config.image_size);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        let run_hash = run.dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for f in files {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let Some((shot, qid)) = stem.split_once("shot_") else {
                continue;
            };
            let pred = load_edge_map(&f)?;
            let gt = load_sample(qid, Role::Target, target_root, size)?;
            let overlay = render_error_overlay(&pred, gt.mask()?)?;
            let name = format!(
                "overlay_{}_{}_{target_name}_{shot}shot_{qid}.png",
                run.report.method,
                &run_hash[..run_hash.len().min(8)]
            );
            overlay.save(&out.join(name))?;
        }
    }
    Ok(out)
}

/// Entry point shared by the binary and tests; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Prepare(a) => resolve_config(&a).and_then(|c| cmd_prepare(&c, a.synthetic)),
        Command::Experiment(a) => resolve_config(&a).and_then(|c| cmd_experiment(&c).map(|_| ())),
        Command::Report(a) => cmd_report(&a).map(|out| eprintln!("report written to {}", out.display())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
