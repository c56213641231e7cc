//! Cross-validated grid evaluation and the filters x neurons width scan.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentorSpec, GeneratorId};
use crate::dataset::FoldPlan;
use crate::image_ops::ImageBuffer;
use crate::nn::{count_correct, param_count, train, ArchitectureSpec, Labeled, NnError, TrainConfig};
use crate::rng::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: NnError,
    },
    #[error("no results to select from")]
    EmptyResults,
    #[error("fold plan needs k >= 2, got {0}")]
    TooFewFolds(usize),
    #[error("invalid reduction grid: {0}")]
    InvalidGrid(String),
    #[error("malformed grid csv: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Identifies one cell of the (size x generator x architecture) grid.
/// `arch_rank` is the position of the architecture in the configured list
/// and only serves as a tie-breaker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigKey {
    pub size: usize,
    pub generator: GeneratorId,
    pub arch: String,
    pub arch_rank: usize,
}

impl ConfigKey {
    fn order(&self) -> (usize, usize, usize) {
        (self.size, self.generator.index(), self.arch_rank)
    }
}

impl PartialOrd for ConfigKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ConfigKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order().cmp(&other.order()).then_with(|| self.arch.cmp(&other.arch))
    }
}

/// Accuracies are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub key: ConfigKey,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl CVResult {
    pub fn from_folds(key: ConfigKey, fold_accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&fold_accuracies);
        Self {
            key,
            fold_accuracies,
            mean,
            std,
        }
    }

    /// `"96.54(+- 1.87)"`
    pub fn summary(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Formats fractions on a 0-100 scale.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}(+- {:.2})", mean * 100.0, std * 100.0)
}

/// Images of one size variant with their labels, indexed like the manifest.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub images: &'a [ImageBuffer],
    pub labels: &'a [usize],
    pub classes: &'a [String],
}

impl<'a> Samples<'a> {
    pub fn subset(&self, indices: &[usize]) -> Vec<Labeled<'a>> {
        indices.iter().map(|&i| (&self.images[i], self.labels[i])).collect()
    }
}

/// Trains on one fold and returns (correct, total) on its test split.
pub fn run_fold(
    samples: Samples,
    plan: &FoldPlan,
    fold: usize,
    spec: &AugmentorSpec,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<(usize, usize), SearchError> {
    let f = &plan.folds[fold];
    let wrap = |source| SearchError::Fold { fold, source };
    let train_split = samples.subset(&f.train);
    let val_split = samples.subset(&f.validation);
    let test_split = samples.subset(&f.test);
    let model = train(arch, samples.classes, &train_split, &val_split, spec, cfg).map_err(wrap)?;
    let correct = count_correct(&model, &test_split).map_err(wrap)?;
    Ok((correct, test_split.len()))
}

/// Seed used for training fold `fold` of a configuration.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, &[fold as u64])
}

/// k-fold cross-validation: one model per fold, each scored on its test split.
pub fn cross_validate(
    key: ConfigKey,
    samples: Samples,
    plan: &FoldPlan,
    spec: &AugmentorSpec,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<CVResult, SearchError> {
    if plan.k < 2 || plan.folds.len() < 2 {
        return Err(SearchError::TooFewFolds(plan.folds.len()));
    }
    let accs = (0..plan.folds.len())
        .map(|fold| {
            let fold_cfg = TrainConfig {
                seed: fold_seed(cfg.seed, fold),
                ..cfg.clone()
            };
            let (correct, total) = run_fold(samples, plan, fold, spec, arch, &fold_cfg)?;
            Ok(correct as f64 / total as f64)
        })
        .collect::<Result<Vec<_>, SearchError>>()?;
    Ok(CVResult::from_folds(key, accs))
}

/// Highest mean accuracy; ties go to the smaller image size, then the lower
/// generator, then the earlier architecture.
pub fn select_best(results: &[CVResult]) -> Result<&CVResult, SearchError> {
    let mut best: Option<&CVResult> = None;
    for r in results {
        best = match best {
            None => Some(r),
            Some(b) if r.mean > b.mean || (r.mean == b.mean && r.key < b.key) => Some(r),
            keep => keep,
        };
    }
    best.ok_or(SearchError::EmptyResults)
}

/// Writes results sorted by key, one row per configuration. Fold
/// accuracies, mean and std are percentages with two decimals.
pub fn write_results_csv<W: io::Write>(
    results: &[CVResult],
    provenance: &str,
    mut out: W,
) -> io::Result<()> {
    let mut sorted: Vec<&CVResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    let folds = sorted.iter().map(|r| r.fold_accuracies.len()).max().unwrap_or(0);
    writeln!(out, "# {provenance}")?;
    let mut header = String::from("size,generator,arch");
    for f in 0..folds {
        write!(header, ",fold_{f}").unwrap();
    }
    header.push_str(",mean,std,accuracy");
    writeln!(out, "{header}")?;
    for r in sorted {
        let mut row = format!("{},{},{}", r.key.size, r.key.generator, r.key.arch);
        for a in &r.fold_accuracies {
            write!(row, ",{:.2}", a * 100.0).unwrap();
        }
        write!(row, ",{:.2},{:.2},{}", r.mean * 100.0, r.std * 100.0, r.summary()).unwrap();
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Settings of the width scan. Filters run over `1..=max_filters` in steps
/// of `stride.0`, neurons over `1..=max_neurons` in steps of `stride.1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSettings {
    pub max_filters: usize,
    pub max_neurons: usize,
    pub stride: (usize, usize),
    /// Accuracy points (0-100 scale).
    pub tolerance: f64,
    /// Full cross-validation per cell instead of fold 0 only.
    pub cv: bool,
}

impl Default for ReductionSettings {
    fn default() -> Self {
        Self {
            max_filters: 8,
            max_neurons: 16,
            stride: (1, 2),
            tolerance: 1.0,
            cv: false,
        }
    }
}

impl ReductionSettings {
    pub fn filter_axis(&self) -> Vec<usize> {
        (1..=self.max_filters).step_by(self.stride.0.max(1)).collect()
    }

    pub fn neuron_axis(&self) -> Vec<usize> {
        (1..=self.max_neurons).step_by(self.stride.1.max(1)).collect()
    }

    fn validate(&self) -> Result<(), SearchError> {
        if self.max_filters == 0 || self.max_neurons == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(SearchError::InvalidGrid("bounds and strides must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(SearchError::InvalidGrid("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Accuracy (percent) and parameter count per (filters, neurons) cell.
/// `accuracy[i][j]` belongs to `filters[i]`, `neurons[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionGrid {
    pub max_filters: usize,
    pub max_neurons: usize,
    pub stride: (usize, usize),
    pub tolerance: f64,
    pub filters: Vec<usize>,
    pub neurons: Vec<usize>,
    pub accuracy: Vec<Vec<f64>>,
    pub params: Vec<Vec<usize>>,
    /// (filters, neurons) of the selected cell.
    pub chosen: (usize, usize),
}

impl ReductionGrid {
    pub fn max_accuracy(&self) -> f64 {
        self.accuracy.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_params(&self) -> usize {
        self.params.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn cell(&self, filters: usize, neurons: usize) -> Option<(f64, usize)> {
        let i = self.filters.iter().position(|&f| f == filters)?;
        let j = self.neurons.iter().position(|&n| n == neurons)?;
        Some((self.accuracy[i][j], self.params[i][j]))
    }
}

/// Smallest parameter count among cells within `tolerance` points of the
/// best accuracy; remaining ties go to the first cell in row-major order.
/// Returns row and column indices.
pub fn select_cell(accuracy: &[Vec<f64>], params: &[Vec<usize>], tolerance: f64) -> Option<(usize, usize)> {
    let best = accuracy.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = best - tolerance - 1e-9;
    let mut chosen: Option<(usize, usize)> = None;
    for (i, row) in accuracy.iter().enumerate() {
        for (j, &acc) in row.iter().enumerate() {
            if acc < threshold {
                continue;
            }
            match chosen {
                Some((ci, cj)) if params[ci][cj] <= params[i][j] => {}
                _ => chosen = Some((i, j)),
            }
        }
    }
    chosen
}

/// Seed for the cell with the given widths; independent of scan order.
pub fn cell_seed(seed: u64, filters: usize, neurons: usize) -> u64 {
    derive_seed(seed, &[0x7265_6475, filters as u64, neurons as u64])
}

/// Scans the reducible widths of `base`, training one model per cell
/// (fold 0, or every fold with `settings.cv`). Cells run on the current
/// rayon pool.
pub fn reduce_parameters(
    base: &ArchitectureSpec,
    samples: Samples,
    plan: &FoldPlan,
    spec: &AugmentorSpec,
    cfg: &TrainConfig,
    settings: &ReductionSettings,
) -> Result<ReductionGrid, SearchError> {
    settings.validate()?;
    base.widths()?;
    if plan.folds.is_empty() {
        return Err(SearchError::TooFewFolds(0));
    }
    let filters = settings.filter_axis();
    let neurons = settings.neuron_axis();
    let cells: Vec<(usize, usize)> = filters
        .iter()
        .flat_map(|&f| neurons.iter().map(move |&n| (f, n)))
        .collect();

    let scored = cells
        .par_iter()
        .map(|&(f, n)| {
            let arch = base.with_widths(f, n)?;
            let params = param_count(&arch)?;
            let cell_cfg = TrainConfig {
                seed: cell_seed(cfg.seed, f, n),
                ..cfg.clone()
            };
            let acc = if settings.cv {
                let key = ConfigKey {
                    size: arch.input_size,
                    generator: GeneratorId::G1,
                    arch: arch.id.clone(),
                    arch_rank: 0,
                };
                cross_validate(key, samples, plan, spec, &arch, &cell_cfg)?.mean * 100.0
            } else {
                let fold_cfg = TrainConfig {
                    seed: fold_seed(cell_cfg.seed, 0),
                    ..cell_cfg
                };
                let (correct, total) = run_fold(samples, plan, 0, spec, &arch, &fold_cfg)?;
                correct as f64 * 100.0 / total as f64
            };
            Ok((acc, params))
        })
        .collect::<Result<Vec<_>, SearchError>>()?;

    let cols = neurons.len();
    let accuracy: Vec<Vec<f64>> = scored.chunks(cols).map(|r| r.iter().map(|c| c.0).collect()).collect();
    let params: Vec<Vec<usize>> = scored.chunks(cols).map(|r| r.iter().map(|c| c.1).collect()).collect();
    let (ci, cj) = select_cell(&accuracy, &params, settings.tolerance)
        .ok_or_else(|| SearchError::InvalidGrid("empty grid".into()))?;
    Ok(ReductionGrid {
        max_filters: settings.max_filters,
        max_neurons: settings.max_neurons,
        stride: settings.stride,
        tolerance: settings.tolerance,
        chosen: (filters[ci], neurons[cj]),
        filters,
        neurons,
        accuracy,
        params,
    })
}

/// Paths written by [`emit_heatmap`].
#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub heatmap_csv: PathBuf,
    pub params_csv: PathBuf,
    pub heatmap_svg: PathBuf,
}

fn matrix_csv<T: std::fmt::Display>(grid: &ReductionGrid, values: &[Vec<T>], provenance: &str) -> String {
    let mut s = format!("# {provenance}\nfilters\\neurons");
    for n in &grid.neurons {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for (f, row) in grid.filters.iter().zip(values) {
        write!(s, "{f}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `heatmap.csv` (accuracy), `params.csv` and `heatmap.svg` under
/// `out`. Rows are layer-1 filters, columns hidden-layer neurons.
pub fn emit_heatmap(grid: &ReductionGrid, out: &Path, provenance: &str) -> Result<HeatmapFiles, SearchError> {
    fs::create_dir_all(out)?;
    let files = HeatmapFiles {
        heatmap_csv: out.join("heatmap.csv"),
        params_csv: out.join("params.csv"),
        heatmap_svg: out.join("heatmap.svg"),
    };
    fs::write(&files.heatmap_csv, matrix_csv(grid, &grid.accuracy, provenance))?;
    fs::write(&files.params_csv, matrix_csv(grid, &grid.params, provenance))?;
    fs::write(&files.heatmap_svg, heatmap_svg(grid, provenance))?;
    Ok(files)
}

/// Row labels, column labels and cell values of a matrix CSV written by
/// [`emit_heatmap`]. Comment lines are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCsv {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

pub fn read_grid_csv(text: &str) -> Result<GridCsv, SearchError> {
    let bad = |m: &str| SearchError::MalformedCsv(m.to_string());
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("missing header"))?;
    let cols = header
        .split(',')
        .skip(1)
        .map(|c| c.trim().parse::<usize>().map_err(|_| bad(c)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        let mut fields = line.split(',');
        let label = fields.next().ok_or_else(|| bad(line))?;
        rows.push(label.trim().parse::<usize>().map_err(|_| bad(label))?);
        let row = fields
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad(v)))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != cols.len() {
            return Err(bad(line));
        }
        values.push(row);
    }
    Ok(GridCsv { rows, cols, values })
}

fn color(t: f64) -> String {
    // dark blue -> teal -> yellow
    let stops = [(0.0, [48.0, 18.0, 59.0]), (0.5, [33.0, 145.0, 140.0]), (1.0, [253.0, 231.0, 37.0])];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let u = (t - a.0) / (b.0 - a.0);
    let c: Vec<u8> = (0..3).map(|k| (a.1[k] + (b.1[k] - a.1[k]) * u).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn heatmap_svg(grid: &ReductionGrid, provenance: &str) -> String {
    const CELL: usize = 40;
    const MARGIN: usize = 60;
    let w = MARGIN + CELL * grid.neurons.len() + 20;
    let h = MARGIN + CELL * grid.filters.len() + 40;
    let lo = grid.accuracy.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.max_accuracy();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n<!-- {provenance} -->\n"
    );
    writeln!(s, "<text x=\"{MARGIN}\" y=\"16\">accuracy (%): rows = layer-1 filters, columns = hidden neurons</text>").unwrap();
    for (j, n) in grid.neurons.iter().enumerate() {
        let x = MARGIN + j * CELL + CELL / 2;
        writeln!(s, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{n}</text>", MARGIN - 6).unwrap();
    }
    for (i, f) in grid.filters.iter().enumerate() {
        let y = MARGIN + i * CELL;
        writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{f}</text>", MARGIN - 6, y + CELL / 2 + 4).unwrap();
        for (j, n) in grid.neurons.iter().enumerate() {
            let x = MARGIN + j * CELL;
            let acc = grid.accuracy[i][j];
            let stroke = if (*f, *n) == grid.chosen { " stroke=\"red\" stroke-width=\"3\"" } else { "" };
            writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"{stroke}/>",
                color((acc - lo) / span)
            )
            .unwrap();
            let ink = if (acc - lo) / span > 0.6 { "black" } else { "white" };
            writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\" font-size=\"9\">{acc:.0}</text>",
                x + CELL / 2,
                y + CELL / 2 + 3
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(size: usize, g: GeneratorId, rank: usize) -> ConfigKey {
        ConfigKey {
            size,
            generator: g,
            arch: format!("a{rank}"),
            arch_rank: rank,
        }
    }

    #[test]
    fn formatting_matches_table_style() {
        let r = CVResult::from_folds(key(50, GeneratorId::G1, 0), vec![1.0; 5]);
        assert_eq!(r.summary(), "100.00(+- 0.00)");
        let r = CVResult::from_folds(key(50, GeneratorId::G1, 0), vec![0.9, 1.0]);
        assert!((r.mean - 0.95).abs() < 1e-12);
        assert!((r.std - 0.05).abs() < 1e-12);
        assert_eq!(r.summary(), "95.00(+- 5.00)");
        assert_eq!(format_mean_std(0.6582, 0.0463), "65.82(+- 4.63)");
    }

    #[test]
    fn select_best_examples() {
        let table = [(50, 0.9588), (100, 0.9577), (200, 0.9654), (300, 0.5980)];
        let results: Vec<_> = table
            .iter()
            .map(|&(s, m)| CVResult {
                key: key(s, GeneratorId::G1, 0),
                fold_accuracies: vec![m],
                mean: m,
                std: 0.0,
            })
            .collect();
        assert_eq!(select_best(&results).unwrap().key.size, 200);

        let tied: Vec<_> = [200, 100]
            .iter()
            .map(|&s| CVResult::from_folds(key(s, GeneratorId::G2, 0), vec![0.8]))
            .collect();
        assert_eq!(select_best(&tied).unwrap().key.size, 100);

        let gens: Vec<_> = [GeneratorId::G3, GeneratorId::G2]
            .iter()
            .map(|&g| CVResult::from_folds(key(50, g, 0), vec![0.8]))
            .collect();
        assert_eq!(select_best(&gens).unwrap().key.generator, GeneratorId::G2);

        let one = [CVResult::from_folds(key(30, GeneratorId::G4, 1), vec![0.1])];
        assert_eq!(select_best(&one).unwrap().key, one[0].key);
        assert!(matches!(select_best(&[]), Err(SearchError::EmptyResults)));
    }

    #[test]
    fn results_csv_is_sorted_and_formatted() {
        let results = vec![
            CVResult::from_folds(key(50, GeneratorId::G1, 0), vec![1.0, 0.9]),
            CVResult::from_folds(key(30, GeneratorId::G2, 0), vec![0.5, 0.5]),
        ];
        let mut buf = Vec::new();
        write_results_csv(&results, "seed=1 config_hash=ab", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "# seed=1 config_hash=ab");
        assert_eq!(lines[1], "size,generator,arch,fold_0,fold_1,mean,std,accuracy");
        assert_eq!(lines[2], "30,G2,a0,50.00,50.00,50.00,0.00,50.00(+- 0.00)");
        assert_eq!(lines[3], "50,G1,a0,100.00,90.00,95.00,5.00,95.00(+- 5.00)");
    }

    fn grid_2x2() -> ReductionGrid {
        ReductionGrid {
            max_filters: 2,
            max_neurons: 2,
            stride: (1, 1),
            tolerance: 1.0,
            filters: vec![1, 2],
            neurons: vec![1, 2],
            accuracy: vec![vec![50.0, 99.5], vec![100.0, 1.0 / 3.0]],
            params: vec![vec![10, 20], vec![30, 40]],
            chosen: (1, 2),
        }
    }

    #[test]
    fn selection_rule() {
        let g = grid_2x2();
        assert_eq!(select_cell(&g.accuracy, &g.params, 1.0), Some((0, 1)));
        assert_eq!(select_cell(&g.accuracy, &g.params, 0.0), Some((1, 0)));
        assert_eq!(select_cell(&g.accuracy, &g.params, 100.0), Some((0, 0)));
        let flat = vec![vec![1.0, 1.0]];
        assert_eq!(select_cell(&flat, &[vec![5, 5]], 0.0), Some((0, 0)));
    }

    #[test]
    fn heatmap_csv_round_trip() {
        let g = grid_2x2();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_heatmap(&g, dir.path(), "seed=3 config_hash=x").unwrap();
        let acc = read_grid_csv(&fs::read_to_string(&files.heatmap_csv).unwrap()).unwrap();
        assert_eq!(acc.rows, vec![1, 2]);
        assert_eq!(acc.cols, vec![1, 2]);
        assert_eq!(acc.values, g.accuracy);
        let params = read_grid_csv(&fs::read_to_string(&files.params_csv).unwrap()).unwrap();
        assert_eq!(params.values, vec![vec![10.0, 20.0], vec![30.0, 40.0]]);
        let svg = fs::read_to_string(&files.heatmap_svg).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("seed=3"));
    }

    #[test]
    fn axes_follow_strides() {
        let s = ReductionSettings {
            max_filters: 8,
            max_neurons: 16,
            stride: (1, 2),
            ..Default::default()
        };
        assert_eq!(s.filter_axis(), (1..=8).collect::<Vec<_>>());
        assert_eq!(s.neuron_axis(), vec![1, 3, 5, 7, 9, 11, 13, 15]);
    }

    proptest! {
        #[test]
        fn chosen_cell_satisfies_rule(
            acc in proptest::collection::vec(0.0f64..100.0, 1..30),
            tol in 0.0f64..20.0,
        ) {
            let cols = 3;
            let n = acc.len() / cols * cols;
            prop_assume!(n > 0);
            let accuracy: Vec<Vec<f64>> = acc[..n].chunks(cols).map(|r| r.to_vec()).collect();
            let params: Vec<Vec<usize>> = (0..n / cols)
                .map(|i| (0..cols).map(|j| (i + 1) * (j + 1)).collect())
                .collect();
            let (ci, cj) = select_cell(&accuracy, &params, tol).unwrap();
            let best = acc[..n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(accuracy[ci][cj] >= best - tol - 1e-9);
            for i in 0..accuracy.len() {
                for j in 0..cols {
                    if accuracy[i][j] >= best - tol - 1e-9 {
                        prop_assert!(params[ci][cj] <= params[i][j]);
                    }
                }
            }
        }
    }
}
