//! Run configuration and the stage commands behind the CLI.
//!
//! Every stage reads only files written by earlier stages under the output
//! directory:
//!
//! ```text
//! manifest.json  folds.json  size_<s>/...            prepare
//! search/results.csv  search/best.json               search
//! reduce/heatmap.{csv,svg}  reduce/params.csv
//! reduce/grid.json  reduce/model.mpipe               reduce
//! package/model.mpipe  package/model_uint8.mpipe
//! package/labels.txt  package/metadata.json          package
//! simulate/gap_report.{csv,json}                     simulate
//! report.md  report.json                             report
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, GeneratorId};
use crate::dataset::{self, DatasetError, DatasetManifest, FoldPlan, SizeVariant};
use crate::deploy::{
    labels_path_for, package, read_labels, verify_label_order, DeployError, DeployableModel,
    LabelOrderReport, ModelMetadata, Provenance,
};
use crate::device_sim::{compare_paths, DeviceSimError, FrameGeometry, GapReport, TestItem};
use crate::image_ops::{read_image, ImageBuffer};
use crate::nn::{self, param_count, train, write_log_csv, ArchitectureSpec, NnError, TrainConfig, PRESET_IDS};
use crate::rng::derive_seed;
use crate::search::{
    self, cell_seed, emit_heatmap, fold_seed, reduce_parameters, select_best, write_results_csv,
    CVResult, ConfigKey, ReductionGrid, ReductionSettings, Samples, SearchError,
};

pub const MIN_SIZE: usize = 8;
pub const MAX_SIZE: usize = 1024;
/// Environment variable supplying the default output directory.
pub const OUT_ENV: &str = "MOBILEPIPE_OUT";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path} not found; run the `{stage}` stage first")]
    MissingStage { path: PathBuf, stage: &'static str },
    #[error("search failed: {0}")]
    Search(#[source] SearchError),
    #[error("reduction failed: {0}")]
    Reduce(#[source] SearchError),
    #[error("packaging failed: {0}")]
    Package(#[source] DeployError),
    #[error("label order mismatch: {0}")]
    LabelOrder(String),
    #[error("simulation failed: {0}")]
    Simulate(#[source] DeviceSimError),
    #[error("{path} accuracy {accuracy:.4} is below the deploy threshold {threshold:.4}")]
    DeployGate {
        path: &'static str,
        accuracy: f64,
        threshold: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    /// 0 ok, 2 input, 3 search, 4 reduce, 5 package, 6 deploy gate.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Dataset(_)
            | PipelineError::MissingStage { .. }
            | PipelineError::Io { .. } => 2,
            PipelineError::Search(_) => 3,
            PipelineError::Reduce(_) => 4,
            PipelineError::Package(_) | PipelineError::LabelOrder(_) => 5,
            PipelineError::Simulate(DeviceSimError::LabelOrderMismatch { .. }) => 5,
            PipelineError::Simulate(_) => 2,
            PipelineError::DeployGate { .. } => 6,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
        }
    }
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

/// One JSON document describing a run. Command-line flags override fields
/// after the file is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub sizes: Vec<usize>,
    pub k: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub generators: Vec<GeneratorId>,
    pub archs: Vec<String>,
    pub train: TrainSettings,
    pub reduction: ReductionSettings,
    pub quantize: bool,
    pub skip_augmentation: bool,
    pub skip_reduction: bool,
    pub skip_generators: bool,
    /// Minimum gallery and real-time accuracy (fraction) for `simulate`
    /// to succeed.
    pub deploy_threshold: f64,
    /// Held-out images (`<class>/<file>`) for label checks and simulation.
    /// Defaults to the first fold's test split.
    pub probe_root: Option<PathBuf>,
    pub probes_per_class: usize,
    pub model_name: String,
    pub author: String,
    pub out_dir: PathBuf,
    /// Worker threads; not part of the config hash.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::new(),
            sizes: vec![50, 100],
            k: 5,
            val_fraction: 0.1,
            seed: 42,
            generators: GeneratorId::ALL.to_vec(),
            archs: vec!["d1m1".into()],
            train: TrainSettings::default(),
            reduction: ReductionSettings::default(),
            quantize: true,
            skip_augmentation: false,
            skip_reduction: false,
            skip_generators: false,
            deploy_threshold: 0.5,
            probe_root: None,
            probes_per_class: 5,
            model_name: "mobilepipe model".into(),
            author: "X".into(),
            out_dir: PathBuf::from("mobilepipe-out"),
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.sizes.is_empty() {
            return bad("sizes must not be empty".into());
        }
        if let Some(s) = self.sizes.iter().find(|s| !(MIN_SIZE..=MAX_SIZE).contains(*s)) {
            return bad(format!("size {s} outside [{MIN_SIZE}, {MAX_SIZE}]"));
        }
        if self.k < 2 {
            return bad(format!("k = {} must be >= 2", self.k));
        }
        if self.generators.is_empty() || self.archs.is_empty() {
            return bad("generators and archs must not be empty".into());
        }
        for a in &self.archs {
            let known = PRESET_IDS.contains(&a.split('@').next().unwrap_or(a));
            if !known || nn::preset(a, 64, 3, 2).is_err() {
                return bad(format!("unknown architecture preset {a:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.deploy_threshold) {
            return bad("deploy_threshold must be in [0, 1]".into());
        }
        if self.probes_per_class == 0 {
            return bad("probes_per_class must be >= 1".into());
        }
        self.train
            .with_seed(self.seed)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Generators actually evaluated: only G1 when augmentation or the
    /// generator scan is skipped.
    pub fn effective_generators(&self) -> Vec<GeneratorId> {
        if self.skip_generators || self.skip_augmentation {
            vec![GeneratorId::G1]
        } else {
            self.generators.clone()
        }
    }

    /// SHA-256 over the canonical JSON of every field except the output
    /// directory and the worker count.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
            map.remove("jobs");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                write!(s, "{b:02x}").unwrap();
                s
            })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: self.config_hash(),
        }
    }

    /// `seed=<seed> config_hash=<hash>`, the comment line of every CSV.
    pub fn provenance_line(&self) -> String {
        format!("seed={} config_hash={}", self.seed, self.config_hash())
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths {
            root: self.out_dir.clone(),
        }
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.json")
    }
    pub fn variant(&self, size: usize) -> SizeVariant {
        SizeVariant::new(&self.root, size)
    }
    pub fn search_dir(&self) -> PathBuf {
        self.root.join("search")
    }
    pub fn results_csv(&self) -> PathBuf {
        self.search_dir().join("results.csv")
    }
    pub fn best_json(&self) -> PathBuf {
        self.search_dir().join("best.json")
    }
    pub fn reduce_dir(&self) -> PathBuf {
        self.root.join("reduce")
    }
    pub fn reduced_model(&self) -> PathBuf {
        self.reduce_dir().join("model.mpipe")
    }
    pub fn grid_json(&self) -> PathBuf {
        self.reduce_dir().join("grid.json")
    }
    pub fn package_dir(&self) -> PathBuf {
        self.root.join("package")
    }
    pub fn float_container(&self) -> PathBuf {
        self.package_dir().join("model.mpipe")
    }
    pub fn quantized_container(&self) -> PathBuf {
        self.package_dir().join("model_uint8.mpipe")
    }
    pub fn simulate_dir(&self) -> PathBuf {
        self.root.join("simulate")
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingStage { path, stage })
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub classes: Vec<String>,
    pub items: usize,
    pub sizes: Vec<usize>,
    pub k: usize,
}

/// Ingests the dataset, writes one resized copy per size and the fold
/// layout of each copy.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    fs::create_dir_all(&paths.root).map_err(io_err(&paths.root))?;
    let manifest = dataset::ingest(&cfg.dataset_root)?;
    manifest.save(&paths.manifest())?;
    let plan = dataset::stratified_kfold(&manifest, cfg.k, cfg.val_fraction, cfg.seed)?;
    plan.save(&paths.folds())?;
    let variants = dataset::generate_subdatasets(&manifest, &cfg.sizes, &paths.root)?;
    for v in &variants {
        dataset::write_fold_layout(v, &manifest, &plan)?;
    }
    info!(
        "prepared {} items in {} classes at sizes {:?}",
        manifest.items.len(),
        manifest.classes.len(),
        cfg.sizes
    );
    Ok(PrepareSummary {
        classes: manifest.classes.clone(),
        items: manifest.items.len(),
        sizes: cfg.sizes.clone(),
        k: cfg.k,
    })
}

struct Prepared {
    manifest: DatasetManifest,
    plan: FoldPlan,
}

fn load_prepared(cfg: &RunConfig) -> Result<Prepared, PipelineError> {
    let paths = cfg.paths();
    let manifest = DatasetManifest::load(&require(paths.manifest(), "prepare")?)?;
    let plan = FoldPlan::load(&require(paths.folds(), "prepare")?)?;
    Ok(Prepared { manifest, plan })
}

struct Variant {
    images: Vec<ImageBuffer>,
    labels: Vec<usize>,
    channels: usize,
}

fn load_variant(cfg: &RunConfig, prepared: &Prepared, size: usize) -> Result<Variant, PipelineError> {
    let v = cfg.paths().variant(size);
    require(v.directory.clone(), "prepare")?;
    let images = v.load(&prepared.manifest)?;
    let channels = if images.iter().any(|i| i.channels() == 3) { 3 } else { 1 };
    Ok(Variant {
        images,
        labels: prepared.manifest.labels(),
        channels,
    })
}

/// Architecture `id` for images of `size` with `channels` channels.
pub fn build_arch(id: &str, size: usize, channels: usize, num_classes: usize) -> Result<ArchitectureSpec, NnError> {
    nn::preset(id, size, channels, num_classes)?.fit_to_input(size)
}

/// Base seed of one grid configuration.
pub fn config_seed(seed: u64, key: &ConfigKey) -> u64 {
    derive_seed(seed, &[key.size as u64, key.generator.index() as u64, key.arch_rank as u64])
}

/// What `search` persists about the winning configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub key: ConfigKey,
    pub mean: f64,
    pub std: f64,
    pub summary: String,
    pub provenance: Provenance,
}

/// Cross-validates every (size, generator, architecture) and persists
/// `results.csv` and `best.json`. Rows that finished are written even if
/// another configuration fails.
pub fn cmd_search(cfg: &RunConfig) -> Result<BestConfig, PipelineError> {
    cfg.validate()?;
    let prepared = load_prepared(cfg)?;
    let paths = cfg.paths();
    let classes = &prepared.manifest.classes;
    let generators = cfg.effective_generators();

    let mut variants = Vec::new();
    for &size in &cfg.sizes {
        variants.push((size, load_variant(cfg, &prepared, size)?));
    }
    let mut keys = Vec::new();
    for &(size, ref variant) in &variants {
        for &generator in &generators {
            for (rank, arch_id) in cfg.archs.iter().enumerate() {
                let arch = build_arch(arch_id, size, variant.channels, classes.len())
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                let key = ConfigKey {
                    size,
                    generator,
                    arch: arch.id.clone(),
                    arch_rank: rank,
                };
                keys.push((key, arch));
            }
        }
    }
    let folds = prepared.plan.folds.len();
    let jobs: Vec<(usize, usize)> = (0..keys.len()).flat_map(|c| (0..folds).map(move |f| (c, f))).collect();
    let outcomes: Vec<Result<f64, SearchError>> = jobs
        .par_iter()
        .map(|&(c, fold)| {
            let (key, arch) = &keys[c];
            let variant = &variants.iter().find(|(s, _)| *s == key.size).expect("variant loaded").1;
            let samples = Samples {
                images: &variant.images,
                labels: &variant.labels,
                classes,
            };
            let tc = cfg.train.with_seed(fold_seed(config_seed(cfg.seed, key), fold));
            let spec = augment::preset(key.generator);
            let (correct, total) = search::run_fold(samples, &prepared.plan, fold, &spec, arch, &tc)?;
            info!("{} {} {} fold {fold}: {correct}/{total}", key.size, key.generator, key.arch);
            Ok(correct as f64 / total as f64)
        })
        .collect();

    let mut results = Vec::new();
    let mut first_error = None;
    for (c, (key, _)) in keys.iter().enumerate() {
        let mut accs = Vec::with_capacity(folds);
        for outcome in &outcomes[c * folds..(c + 1) * folds] {
            match outcome {
                Ok(a) => accs.push(*a),
                Err(e) => {
                    if first_error.is_none() {
                        first_error = Some(format!("{} {} {}: {e}", key.size, key.generator, key.arch));
                    }
                    break;
                }
            }
        }
        if accs.len() == folds {
            results.push(CVResult::from_folds(key.clone(), accs));
        }
    }
    let mut csv = Vec::new();
    write_results_csv(&results, &cfg.provenance_line(), &mut csv).expect("write to memory");
    write_text(&paths.results_csv(), &String::from_utf8(csv).expect("utf-8"))?;
    if let Some(e) = first_error {
        return Err(PipelineError::Search(SearchError::InvalidGrid(e)));
    }
    let best = select_best(&results).map_err(PipelineError::Search)?;
    let best = BestConfig {
        key: best.key.clone(),
        mean: best.mean,
        std: best.std,
        summary: best.summary(),
        provenance: cfg.provenance(),
    };
    write_json(&paths.best_json(), &best)?;
    info!("best: size {} {} {} {}", best.key.size, best.key.generator, best.key.arch, best.summary);
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceSummary {
    pub arch: String,
    pub params: usize,
    pub base_params: usize,
    pub skipped: bool,
    pub chosen: Option<(usize, usize)>,
}

/// Scans the widths of the best configuration (unless skipped) and trains
/// the final model on the first fold.
pub fn cmd_reduce(cfg: &RunConfig) -> Result<ReduceSummary, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    let best: BestConfig = read_json(&require(paths.best_json(), "search")?)?;
    let prepared = load_prepared(cfg)?;
    let variant = load_variant(cfg, &prepared, best.key.size)?;
    let classes = &prepared.manifest.classes;
    let samples = Samples {
        images: &variant.images,
        labels: &variant.labels,
        classes,
    };
    let base = build_arch(&best.key.arch, best.key.size, variant.channels, classes.len())
        .map_err(|e| PipelineError::Reduce(e.into()))?;
    let base_params = param_count(&base).map_err(|e| PipelineError::Reduce(e.into()))?;
    let spec = augment::preset(best.key.generator);
    let seed = config_seed(cfg.seed, &best.key);

    let (arch, train_seed, chosen) = if cfg.skip_reduction {
        (base.clone(), fold_seed(seed, 0), None)
    } else {
        let base_cfg = cfg.train.with_seed(seed);
        let grid = reduce_parameters(&base, samples, &prepared.plan, &spec, &base_cfg, &cfg.reduction)
            .map_err(PipelineError::Reduce)?;
        emit_heatmap(&grid, &paths.reduce_dir(), &cfg.provenance_line()).map_err(PipelineError::Reduce)?;
        write_json(&paths.grid_json(), &grid)?;
        let (f, n) = grid.chosen;
        let arch = base.with_widths(f, n).map_err(|e| PipelineError::Reduce(e.into()))?;
        (arch, fold_seed(cell_seed(seed, f, n), 0), Some(grid.chosen))
    };

    let fold = &prepared.plan.folds[0];
    let model = train(
        &arch,
        classes,
        &samples.subset(&fold.train),
        &samples.subset(&fold.validation),
        &spec,
        &cfg.train.with_seed(train_seed),
    )
    .map_err(|e| PipelineError::Reduce(e.into()))?;
    let mut log = Vec::new();
    write_log_csv(&model.log, &mut log).expect("write to memory");
    write_text(
        &paths.reduce_dir().join("train_log.csv"),
        &format!("# {}\n{}", cfg.provenance_line(), String::from_utf8(log).expect("utf-8")),
    )?;
    let meta = ModelMetadata::for_model(&model, &cfg.model_name, "v1", &cfg.author);
    let container = package(&model, meta, false, Some(cfg.provenance())).map_err(PipelineError::Package)?;
    container.save(&paths.reduced_model()).map_err(PipelineError::Package)?;
    let params = param_count(&arch).map_err(|e| PipelineError::Reduce(e.into()))?;
    info!("final model {} with {params} parameters (base {base_params})", arch.id);
    Ok(ReduceSummary {
        arch: arch.id.clone(),
        params,
        base_params,
        skipped: cfg.skip_reduction,
        chosen,
    })
}

/// Probe images with their class names: `probes_per_class` per class from
/// `probe_root`, or from the first fold's test split at source resolution.
pub fn load_probes(cfg: &RunConfig) -> Result<Vec<TestItem>, PipelineError> {
    let (manifest, indices): (DatasetManifest, Vec<usize>) = match &cfg.probe_root {
        Some(root) => {
            let m = dataset::ingest(root)?;
            let idx = (0..m.items.len()).collect();
            (m, idx)
        }
        None => {
            let prepared = load_prepared(cfg)?;
            let test = prepared.plan.folds[0].test.clone();
            (prepared.manifest, test)
        }
    };
    let mut taken = vec![0usize; manifest.classes.len()];
    let mut probes = Vec::new();
    for i in indices {
        let item = &manifest.items[i];
        if taken[item.class] >= cfg.probes_per_class {
            continue;
        }
        taken[item.class] += 1;
        let path = manifest.source_path(i);
        let image = read_image(&path).map_err(|source| DatasetError::UndecodableImage { path, source })?;
        probes.push((item.class, manifest.classes[item.class].clone(), item.file.clone(), image));
    }
    probes.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.2.cmp(&b.2)));
    Ok(probes
        .into_iter()
        .map(|(class, _, name, image)| TestItem {
            name,
            image,
            label: class,
        })
        .collect())
}

fn probe_pairs(probes: &[TestItem], class_names: &[String]) -> Vec<(ImageBuffer, String)> {
    probes
        .iter()
        .map(|p| (p.image.clone(), class_names[p.label].clone()))
        .collect()
}

fn probe_class_names(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    match &cfg.probe_root {
        Some(root) => Ok(dataset::ingest(root)?.classes),
        None => Ok(load_prepared(cfg)?.manifest.classes),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageSummary {
    pub float_bytes: usize,
    pub quantized_bytes: Option<usize>,
    pub label_order: LabelOrderReport,
}

/// Writes the float container, the quantized one when enabled, the labels
/// file and the standalone metadata, then checks the label order.
pub fn cmd_package(cfg: &RunConfig) -> Result<PackageSummary, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    let reduced = DeployableModel::load(&require(paths.reduced_model(), "reduce")?).map_err(PipelineError::Package)?;
    let model = reduced.to_trained_model();
    let meta = ModelMetadata::for_model(&model, &cfg.model_name, "v1", &cfg.author);
    let prov = Some(cfg.provenance());

    let float = package(&model, meta.clone(), false, prov.clone()).map_err(PipelineError::Package)?;
    float.save(&paths.float_container()).map_err(PipelineError::Package)?;
    let float_bytes = float.to_bytes().map_err(PipelineError::Package)?.len();
    let quantized_path = paths.quantized_container();
    let quantized_bytes = if cfg.quantize {
        let q = package(&model, meta.clone(), true, prov).map_err(PipelineError::Package)?;
        q.save(&quantized_path).map_err(PipelineError::Package)?;
        Some(q.to_bytes().map_err(PipelineError::Package)?.len())
    } else {
        if quantized_path.exists() {
            fs::remove_file(&quantized_path).map_err(io_err(&quantized_path))?;
        }
        None
    };
    write_text(&paths.package_dir().join("metadata.json"), &(meta.to_json().map_err(PipelineError::Package)? + "\n"))?;

    let probes = load_probes(cfg)?;
    let names = probe_class_names(cfg)?;
    let label_order = verify_label_order(&float, &probe_pairs(&probes, &names)).map_err(PipelineError::Package)?;
    write_json(&paths.package_dir().join("label_order.json"), &label_order)?;
    if !label_order.is_identity() {
        return Err(PipelineError::LabelOrder(format!("{:?}", label_order.mismatches)));
    }
    Ok(PackageSummary {
        float_bytes,
        quantized_bytes,
        label_order,
    })
}

/// Runs the probe set through the computer, gallery and real-time paths.
/// Fails with [`PipelineError::DeployGate`] when the gallery accuracy, or
/// after it the real-time accuracy, is below the configured threshold.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<GapReport, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    let float_path = require(paths.float_container(), "package")?;
    let float = DeployableModel::load(&float_path).map_err(PipelineError::Package)?;
    let sidecar = read_labels(&labels_path_for(&float_path)).map_err(PipelineError::Package)?;
    if sidecar != float.labels {
        return Err(PipelineError::LabelOrder(format!(
            "labels.txt {sidecar:?} vs container {:?}",
            float.labels
        )));
    }
    let model = float.to_trained_model();
    let quantized = if paths.quantized_container().exists() {
        DeployableModel::load(&paths.quantized_container()).map_err(PipelineError::Package)?
    } else {
        warn!("no quantized container; quantizing the float model for the gallery path");
        package(&model, float.metadata.clone(), true, float.provenance.clone()).map_err(PipelineError::Package)?
    };
    let probes = load_probes(cfg)?;
    let names = probe_class_names(cfg)?;
    let order = verify_label_order(&quantized, &probe_pairs(&probes, &names)).map_err(PipelineError::Package)?;
    if !order.is_identity() {
        return Err(PipelineError::LabelOrder(format!("{:?}", order.mismatches)));
    }
    let test_set_id = match &cfg.probe_root {
        Some(root) => root.display().to_string(),
        None => "fold_0/test".to_string(),
    };
    let mut report = compare_paths(&model, &quantized, &probes, &FrameGeometry::default(), &model.arch.id, &test_set_id)
        .map_err(PipelineError::Simulate)?;
    report.provenance = Some(cfg.provenance());
    report.write(&paths.simulate_dir()).map_err(PipelineError::Simulate)?;
    info!(
        "computer {:.3} gallery {:.3} realtime {:.3}",
        report.computer, report.gallery, report.realtime
    );
    for (path, accuracy) in [("gallery", report.gallery), ("realtime", report.realtime)] {
        if accuracy < cfg.deploy_threshold {
            return Err(PipelineError::DeployGate {
                path,
                accuracy,
                threshold: cfg.deploy_threshold,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Report {
    provenance: Provenance,
    best: Option<BestConfig>,
    reduction_chosen: Option<(usize, usize)>,
    reduction_max_params: Option<usize>,
    reduction_chosen_params: Option<usize>,
    final_arch: Option<String>,
    final_params: Option<usize>,
    float_bytes: Option<u64>,
    quantized_bytes: Option<u64>,
    gap: Option<GapReport>,
}

/// Summarizes whatever stage outputs exist into `report.md` and `report.json`.
pub fn cmd_report(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    let paths = cfg.paths();
    let best: Option<BestConfig> = paths.best_json().exists().then(|| read_json(&paths.best_json())).transpose()?;
    let grid: Option<ReductionGrid> = paths.grid_json().exists().then(|| read_json(&paths.grid_json())).transpose()?;
    let reduced = if paths.reduced_model().exists() {
        Some(DeployableModel::load(&paths.reduced_model()).map_err(PipelineError::Package)?)
    } else {
        None
    };
    let gap_path = paths.simulate_dir().join("gap_report.json");
    let gap: Option<GapReport> = gap_path.exists().then(|| read_json(&gap_path)).transpose()?;
    let size_of = |p: PathBuf| fs::metadata(p).ok().map(|m| m.len());
    let report = Report {
        provenance: cfg.provenance(),
        reduction_chosen: grid.as_ref().map(|g| g.chosen),
        reduction_max_params: grid.as_ref().map(|g| g.max_params()),
        reduction_chosen_params: grid.as_ref().and_then(|g| g.cell(g.chosen.0, g.chosen.1)).map(|c| c.1),
        final_arch: reduced.as_ref().map(|m| m.architecture.id.clone()),
        final_params: reduced.as_ref().and_then(|m| param_count(&m.architecture).ok()),
        float_bytes: size_of(paths.float_container()),
        quantized_bytes: size_of(paths.quantized_container()),
        best,
        gap,
    };

    let mut md = String::from("# mobilepipe run report\n\n");
    writeln!(md, "- seed: {}\n- config hash: `{}`\n", report.provenance.seed, report.provenance.config_hash).unwrap();
    if let Ok(results) = fs::read_to_string(paths.results_csv()) {
        md.push_str("## Search\n\n| size | generator | arch | accuracy |\n|---|---|---|---|\n");
        for line in results.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() >= 4 {
                writeln!(md, "| {} | {} | {} | {} |", f[0], f[1], f[2], f[f.len() - 1]).unwrap();
            }
        }
        md.push('\n');
    }
    if let Some(b) = &report.best {
        writeln!(md, "Best: size {}, {}, {}: {}\n", b.key.size, b.key.generator, b.key.arch, b.summary).unwrap();
    }
    if let (Some(c), Some(maxp), Some(cp)) = (report.reduction_chosen, report.reduction_max_params, report.reduction_chosen_params) {
        writeln!(md, "## Reduction\n\nChosen cell: {} filters, {} neurons, {cp} parameters (grid maximum {maxp}).\n", c.0, c.1).unwrap();
    }
    if let (Some(a), Some(p)) = (&report.final_arch, report.final_params) {
        writeln!(md, "Final model: {a}, {p} parameters.\n").unwrap();
    }
    if let Some(b) = report.float_bytes {
        write!(md, "## Package\n\nFloat container: {b} bytes").unwrap();
        if let Some(q) = report.quantized_bytes {
            write!(md, "; uint8 container: {q} bytes").unwrap();
        }
        md.push_str(".\n\n");
    }
    if let Some(g) = &report.gap {
        writeln!(
            md,
            "## Simulation\n\n| path | accuracy |\n|---|---|\n| computer | {:.4} |\n| gallery | {:.4} |\n| realtime | {:.4} |\n\n{} probe images.",
            g.computer, g.gallery, g.realtime, g.items
        )
        .unwrap();
    }
    let md_path = paths.root.join("report.md");
    write_text(&md_path, &md)?;
    write_json(&paths.root.join("report.json"), &report)?;
    Ok(md_path)
}

/// All stages in order.
pub fn run_all(cfg: &RunConfig) -> Result<(), PipelineError> {
    cmd_prepare(cfg)?;
    cmd_search(cfg)?;
    cmd_reduce(cfg)?;
    cmd_package(cfg)?;
    let sim = cmd_simulate(cfg);
    cmd_report(cfg)?;
    sim.map(|_| ())
}
