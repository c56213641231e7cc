//! Dataset ingestion, multi-size sub-datasets and stratified k-fold plans.
//!
//! Class indices come from the lexicographic order of the class folder
//! names and nothing else, so filesystem enumeration order never changes
//! labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_ops::{self, read_image, resize_bilinear, ImageBuffer, ImageError};
use crate::rng::derived_rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("need at least 2 class folders, found {0}")]
    TooFewClasses(usize),
    #[error("class folder {0:?} contains no images")]
    EmptyClass(String),
    #[error("cannot decode image {path}: {source}")]
    UndecodableImage {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("two files in class {class:?} share the stem {stem:?}")]
    DuplicateStem { class: String, stem: String },
    #[error("class {class:?} has {count} items, fewer than k = {k}")]
    ClassSmallerThanK { class: String, count: usize, k: usize },
    #[error("invalid fold settings: {0}")]
    InvalidFraction(String),
    #[error("sub-dataset size {0} is below the minimum of 8")]
    SizeTooSmall(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    /// Path relative to the dataset root, `<class>/<file>`.
    pub file: String,
    pub class: usize,
}

impl Item {
    pub fn file_name(&self) -> &str {
        self.file.rsplit('/').next().unwrap_or(&self.file)
    }

    pub fn stem(&self) -> &str {
        let name = self.file_name();
        match name.rfind('.') {
            Some(i) if i > 0 => &name[..i],
            _ => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    /// Sorted by (class, file name).
    pub items: Vec<Item>,
    pub counts: Vec<usize>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.class).collect()
    }

    pub fn source_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.items[index].file)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        read_json(path)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a class-per-folder dataset. Every non-hidden file inside a class
/// folder must decode as an image.
pub fn ingest(root: &Path) -> Result<DatasetManifest, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let class_dirs: Vec<(String, PathBuf)> = sorted_entries(root)?
        .into_iter()
        .filter(|(_, p)| p.is_dir())
        .collect();
    if class_dirs.len() < 2 {
        return Err(DatasetError::TooFewClasses(class_dirs.len()));
    }
    let mut classes = Vec::new();
    let mut items = Vec::new();
    let mut counts = Vec::new();
    for (class_idx, (name, dir)) in class_dirs.iter().enumerate() {
        let files: Vec<(String, PathBuf)> = sorted_entries(dir)?
            .into_iter()
            .filter(|(_, p)| p.is_file())
            .collect();
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(name.clone()));
        }
        files.par_iter().try_for_each(|(_, path)| {
            read_image(path)
                .map(|_| ())
                .map_err(|source| DatasetError::UndecodableImage {
                    path: path.clone(),
                    source,
                })
        })?;
        let mut stems = BTreeMap::new();
        for (file, _) in &files {
            let item = Item {
                file: format!("{name}/{file}"),
                class: class_idx,
            };
            if stems.insert(item.stem().to_string(), ()).is_some() {
                return Err(DatasetError::DuplicateStem {
                    class: name.clone(),
                    stem: item.stem().to_string(),
                });
            }
            items.push(item);
        }
        classes.push(name.clone());
        counts.push(files.len());
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        items,
        counts,
    })
}

/// One resized copy of the dataset: `<dir>/<class>/<stem>.png`, all `size x size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeVariant {
    pub size: usize,
    pub directory: PathBuf,
}

impl SizeVariant {
    pub fn new(out_root: &Path, size: usize) -> Self {
        Self {
            size,
            directory: out_root.join(format!("size_{size}")),
        }
    }

    pub fn image_path(&self, manifest: &DatasetManifest, index: usize) -> PathBuf {
        let item = &manifest.items[index];
        self.directory
            .join(&manifest.classes[item.class])
            .join(format!("{}.png", item.stem()))
    }

    /// Loads every image of the variant in manifest order.
    pub fn load(&self, manifest: &DatasetManifest) -> Result<Vec<ImageBuffer>, DatasetError> {
        (0..manifest.items.len())
            .into_par_iter()
            .map(|i| {
                let path = self.image_path(manifest, i);
                read_image(&path).map_err(|source| DatasetError::UndecodableImage { path, source })
            })
            .collect()
    }
}

/// Writes one resized copy of the dataset per requested size.
pub fn generate_subdatasets(
    manifest: &DatasetManifest,
    sizes: &[usize],
    out_root: &Path,
) -> Result<Vec<SizeVariant>, DatasetError> {
    if let Some(&s) = sizes.iter().find(|&&s| s < 8) {
        return Err(DatasetError::SizeTooSmall(s));
    }
    let variants: Vec<SizeVariant> = sizes.iter().map(|&s| SizeVariant::new(out_root, s)).collect();
    for v in &variants {
        for class in &manifest.classes {
            let dir = v.directory.join(class);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    (0..manifest.items.len())
        .into_par_iter()
        .try_for_each(|i| -> Result<(), DatasetError> {
            let src = manifest.source_path(i);
            let img = read_image(&src).map_err(|source| DatasetError::UndecodableImage {
                path: src.clone(),
                source,
            })?;
            for v in &variants {
                let resized = resize_bilinear(&img, v.size, v.size)?;
                image_ops::write_image(&resized, &v.image_path(manifest, i))?;
            }
            Ok(())
        })?;
    Ok(variants)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        read_json(path)
    }
}

fn check_fold_args(
    counts: &[usize],
    class_names: &dyn Fn(usize) -> String,
    k: usize,
    val_fraction: f64,
) -> Result<(), DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidFraction(format!("k = {k} must be >= 2")));
    }
    if !(0.0..1.0 - 1.0 / k as f64).contains(&val_fraction) {
        return Err(DatasetError::InvalidFraction(format!(
            "val_fraction {val_fraction} outside [0, {})",
            1.0 - 1.0 / k as f64
        )));
    }
    for (c, &n) in counts.iter().enumerate() {
        if n < k {
            return Err(DatasetError::ClassSmallerThanK {
                class: class_names(c),
                count: n,
                k,
            });
        }
    }
    Ok(())
}

/// Per-class validation count, rounded half away from zero and capped so
/// that at least one training item remains.
fn validation_count(n: usize, test: usize, val_fraction: f64) -> usize {
    let want = (val_fraction * n as f64).round() as usize;
    want.min((n - test).saturating_sub(1))
}

/// Stratified k-fold over class labels.
///
/// Per class: shuffle with a stream derived from `(seed, class)`, cut into
/// `k` contiguous chunks whose sizes differ by at most one (remainders
/// rotate across classes so folds stay balanced overall), use chunk `f` as
/// fold `f`'s test set, take validation from the items that follow the
/// test chunk cyclically, and train on the rest.
pub fn stratified_kfold_labels(
    labels: &[usize],
    num_classes: usize,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<FoldPlan, DatasetError> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class[c].push(i);
    }
    let counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
    check_fold_args(&counts, &|c| format!("class {c}"), k, val_fraction)?;

    let mut folds = vec![
        Fold {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        k
    ];
    let mut offset = 0;
    for (c, members) in per_class.iter_mut().enumerate() {
        members.shuffle(&mut derived_rng(seed, &[c as u64]));
        let n = members.len();
        let (base, extra) = (n / k, n % k);
        let sizes: Vec<usize> = (0..k)
            .map(|f| base + usize::from((f + k - offset % k) % k < extra))
            .collect();
        offset += extra;
        let mut starts = Vec::with_capacity(k);
        let mut acc = 0;
        for &s in &sizes {
            starts.push(acc);
            acc += s;
        }
        for (f, fold) in folds.iter_mut().enumerate() {
            let (start, len) = (starts[f], sizes[f]);
            fold.test.extend_from_slice(&members[start..start + len]);
            let n_val = validation_count(n, len, val_fraction);
            let rest: Vec<usize> = (0..n - len).map(|j| members[(start + len + j) % n]).collect();
            fold.validation.extend_from_slice(&rest[..n_val]);
            fold.train.extend_from_slice(&rest[n_val..]);
        }
    }
    for fold in &mut folds {
        fold.train.sort_unstable();
        fold.validation.sort_unstable();
        fold.test.sort_unstable();
    }
    Ok(FoldPlan {
        k,
        seed,
        val_fraction,
        folds,
    })
}

pub fn stratified_kfold(
    manifest: &DatasetManifest,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<FoldPlan, DatasetError> {
    check_fold_args(&manifest.counts, &|c| manifest.classes[c].clone(), k, val_fraction)?;
    stratified_kfold_labels(&manifest.labels(), manifest.classes.len(), k, val_fraction, seed)
}

/// Group key of an item: its file stem up to the first `separator`.
pub fn source_group(item: &Item, separator: char) -> String {
    let stem = item.stem();
    stem.split(separator).next().unwrap_or(stem).to_string()
}

/// Stratified k-fold that keeps items sharing a source group in the same
/// partition (for datasets that already contain augmented copies of one
/// original). Groups are shuffled per class, then assigned largest-first to
/// the fold with the fewest test items of that class; validation takes
/// whole groups from the remainder. Per-fold balance is best-effort.
pub fn stratified_group_kfold(
    manifest: &DatasetManifest,
    k: usize,
    val_fraction: f64,
    seed: u64,
    separator: char,
) -> Result<FoldPlan, DatasetError> {
    check_fold_args(&manifest.counts, &|c| manifest.classes[c].clone(), k, val_fraction)?;
    let mut folds = vec![
        Fold {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        k
    ];
    for c in 0..manifest.classes.len() {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, item) in manifest.items.iter().enumerate().filter(|(_, it)| it.class == c) {
            groups.entry(source_group(item, separator)).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        groups.shuffle(&mut derived_rng(seed, &[c as u64]));
        groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
        if groups.len() < k {
            return Err(DatasetError::ClassSmallerThanK {
                class: manifest.classes[c].clone(),
                count: groups.len(),
                k,
            });
        }
        let mut owner = vec![0; groups.len()];
        let mut load = vec![0usize; k];
        for (g, members) in groups.iter().enumerate() {
            let f = (0..k).min_by_key(|&f| (load[f], f)).expect("k >= 2");
            owner[g] = f;
            load[f] += members.len();
        }
        let n = manifest.counts[c];
        for (f, fold) in folds.iter_mut().enumerate() {
            let n_val = validation_count(n, load[f], val_fraction);
            let mut taken = 0;
            for g in (0..groups.len()).map(|j| (j + f) % groups.len()) {
                let members = &groups[g];
                if owner[g] == f {
                    fold.test.extend_from_slice(members);
                } else if taken < n_val {
                    taken += members.len();
                    fold.validation.extend_from_slice(members);
                } else {
                    fold.train.extend_from_slice(members);
                }
            }
        }
    }
    for fold in &mut folds {
        fold.train.sort_unstable();
        fold.validation.sort_unstable();
        fold.test.sort_unstable();
    }
    Ok(FoldPlan {
        k,
        seed,
        val_fraction,
        folds,
    })
}

/// Materializes `size_s/fold_f/{train,validation,test}/<class>/` for every
/// fold of `plan`. Existing fold directories are replaced, so reruns yield
/// the same tree.
pub fn write_fold_layout(
    variant: &SizeVariant,
    manifest: &DatasetManifest,
    plan: &FoldPlan,
) -> Result<PathBuf, DatasetError> {
    for (f, fold) in plan.folds.iter().enumerate() {
        let fold_dir = variant.directory.join(format!("fold_{f}"));
        if fold_dir.exists() {
            fs::remove_dir_all(&fold_dir).map_err(io_err(&fold_dir))?;
        }
        for (split, members) in [
            ("train", &fold.train),
            ("validation", &fold.validation),
            ("test", &fold.test),
        ] {
            for class in &manifest.classes {
                let dir = fold_dir.join(split).join(class);
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            }
            members.par_iter().try_for_each(|&i| {
                let src = variant.image_path(manifest, i);
                let dst = fold_dir
                    .join(split)
                    .join(&manifest.classes[manifest.items[i].class])
                    .join(src.file_name().expect("image file name"));
                fs::copy(&src, &dst).map(|_| ()).map_err(io_err(&dst))
            })?;
        }
    }
    Ok(variant.directory.clone())
}
