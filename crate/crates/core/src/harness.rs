//! Config-driven experiment grids: run every (grid point, pairing) cell a
//! number of times, aggregate, archive, and render tables and curves.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{
    gen_ones, load_digits, load_idx_train, split_80_20, LabeledSet, IDX_TEST_IMAGES, IDX_TEST_LABELS,
    IDX_TRAIN_IMAGES, IDX_TRAIN_LABELS,
};
use crate::error::{Error, Result};
use crate::grad_sources::{Activation, GradientSource, Normalization, SourceKind};
use crate::numerics::{streams, RandomStream};
use crate::training::{
    build_network, train, Architecture, NetworkSpec, Reduction, RunResult, SgdConfig, DEFAULT_CLIP,
};

/// Version tag written into every archive.
pub const SCHEMA: &str = "untied-archive/1";

/// Default number of runs per cell.
pub const DEFAULT_RUNS: usize = 20;

/// Default MNIST-style training subset for LeNet cells.
pub const DEFAULT_TRAIN_SUBSET: usize = 10_000;

/// Accuracy margin above `1/classes` under which a run counts as collapsed.
pub const CHANCE_MARGIN: f64 = 0.05;

/// Forward activation, backward source and per-pairing extras, written
/// `act/source[+bn][+clip]`, e.g. `log/d`, `relu/rect:-1:1:1+bn`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pairing {
    pub activation: Activation,
    pub source: SourceKind,
    pub batch_norm: bool,
    pub clip: bool,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.activation, self.source)?;
        if self.batch_norm {
            f.write_str("+bn")?;
        }
        if self.clip {
            f.write_str("+clip")?;
        }
        Ok(())
    }
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('+');
        let head = parts.next().unwrap_or_default();
        let (act, source) = head
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("pairing {s:?} is not of the form act/source")))?;
        let mut pairing = Pairing {
            activation: act.parse()?,
            source: source.parse()?,
            batch_norm: false,
            clip: false,
        };
        for flag in parts {
            match flag {
                "bn" => pairing.batch_norm = true,
                "clip" => pairing.clip = true,
                _ => return Err(Error::Config(format!("unknown pairing flag {flag:?} in {s:?}"))),
            }
        }
        Ok(pairing)
    }
}

impl TryFrom<String> for Pairing {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Pairing> for String {
    fn from(p: Pairing) -> String {
        p.to_string()
    }
}

fn default_ones_n() -> usize {
    2000
}

fn default_threshold() -> f64 {
    0.7
}

fn default_subset() -> usize {
    DEFAULT_TRAIN_SUBSET
}

/// Where a grid's samples come from. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthetic majority-of-ones vectors; the dimension comes from the grid.
    Ones {
        #[serde(default = "default_ones_n")]
        n: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    Digits { path: PathBuf },
    /// IDX training files in `dir`; `train_subset = 0` keeps all of them.
    Mnist {
        dir: PathBuf,
        #[serde(default = "default_subset")]
        train_subset: usize,
    },
    Fashion {
        dir: PathBuf,
        #[serde(default = "default_subset")]
        train_subset: usize,
    },
}

/// One experiment grid, as read from a TOML file in `experiments/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub architecture: Architecture,
    pub dataset: DatasetSpec,
    /// Input dimensions; only meaningful for the Ones dataset.
    #[serde(default)]
    pub dims: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub pairings: Vec<Pairing>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Defaults to 100 for `suc`/`mlp` and 20 for `lenet5`.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub reduction: Reduction,
    /// Threshold used by `+clip` pairings.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Directory that relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

/// A single grid point with its pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub dim: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pairing: Pairing,
}

impl CellSpec {
    /// Stable identifier, e.g. `dim=2,bs=32,lr=0.1,pair=log/d`.
    pub fn id(&self) -> String {
        let mut id = String::new();
        if let Some(dim) = self.dim {
            id.push_str(&format!("dim={dim},"));
        }
        id.push_str(&format!("bs={},lr={},pair={}", self.batch_size, self.learning_rate, self.pairing));
        id
    }

    /// Identifier of the table row this cell belongs to.
    pub fn row_key(&self) -> String {
        match self.dim {
            Some(dim) => format!("dim={dim},bs={},lr={}", self.batch_size, self.learning_rate),
            None => format!("bs={},lr={}", self.batch_size, self.learning_rate),
        }
    }
}

/// 64-bit FNV-1a of the cell id.
pub fn cell_hash(id: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(id.as_bytes());
    h.finish()
}

/// Seed of run `r` of the cell `id`: `base + fnv1a(id) + r`, wrapping.
pub fn run_seed(base_seed: u64, id: &str, r: usize) -> u64 {
    base_seed.wrapping_add(cell_hash(id)).wrapping_add(r as u64)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.id)));
        if self.batch_sizes.is_empty() || self.learning_rates.is_empty() || self.pairings.is_empty() {
            return fail("grid needs at least one batch size, learning rate and pairing".into());
        }
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.epochs == Some(0) {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_sizes.contains(&0) {
            return fail("batch sizes must be positive".into());
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return fail("learning rates must be positive".into());
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return fail(format!("clip threshold {} must be positive", self.clip));
        }
        let is_ones = matches!(self.dataset, DatasetSpec::Ones { .. });
        if is_ones && (self.dims.is_empty() || self.dims.contains(&0)) {
            return fail("the ones dataset needs a nonempty list of positive dims".into());
        }
        if !is_ones && !self.dims.is_empty() {
            return fail("dims only apply to the ones dataset".into());
        }
        for p in &self.pairings {
            p.source.validate()?;
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.architecture {
            Architecture::LeNet5 => 20,
            _ => 100,
        })
    }

    /// Grid cells in table order: dims, then batch sizes, then learning
    /// rates, then pairings.
    pub fn cells(&self) -> Vec<CellSpec> {
        let dims: Vec<Option<usize>> = if self.dims.is_empty() {
            vec![None]
        } else {
            self.dims.iter().copied().map(Some).collect()
        };
        let mut cells = Vec::new();
        for &dim in &dims {
            for &batch_size in &self.batch_sizes {
                for &learning_rate in &self.learning_rates {
                    for &pairing in &self.pairings {
                        cells.push(CellSpec { dim, batch_size, learning_rate, pairing });
                    }
                }
            }
        }
        cells
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads the dataset for grid dimension `dim`.
    pub fn load_dataset(&self, dim: Option<usize>) -> Result<LabeledSet> {
        match &self.dataset {
            DatasetSpec::Ones { n, threshold } => {
                let dim = dim.ok_or_else(|| Error::Config("ones dataset without a dim".into()))?;
                gen_ones(dim, *n, *threshold, self.base_seed)
            }
            DatasetSpec::Digits { path } => load_digits(self.resolve(path)),
            DatasetSpec::Mnist { dir, train_subset } | DatasetSpec::Fashion { dir, train_subset } => {
                let full = load_idx_train(self.resolve(dir))?;
                if *train_subset == 0 || *train_subset >= full.len() {
                    Ok(full)
                } else {
                    full.sample(*train_subset, self.base_seed)
                }
            }
        }
    }

    /// Applies command-line overrides of the desk-scale profile.
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(runs) = o.runs {
            self.runs = runs;
        }
        if let Some(epochs) = o.epochs {
            self.epochs = Some(epochs);
        }
        if let Some(subset) = o.train_subset {
            match &mut self.dataset {
                DatasetSpec::Mnist { train_subset, .. } | DatasetSpec::Fashion { train_subset, .. } => {
                    *train_subset = subset
                }
                _ => return Err(Error::Config("--train-subset applies to mnist and fashion only".into())),
            }
        }
        self.validate()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub runs: Option<usize>,
    pub epochs: Option<usize>,
    pub train_subset: Option<usize>,
}

/// Aggregate of one cell's runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub id: String,
    pub dim: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pairing: Pairing,
    pub mean: f64,
    /// Population standard deviation of the test accuracies.
    pub std: f64,
    /// Runs that hit a non-finite step or ended within
    /// [`CHANCE_MARGIN`] of chance.
    pub divergences: usize,
    pub runs: Vec<RunResult>,
}

impl SummaryCell {
    pub fn from_runs(spec: &CellSpec, classes: usize, runs: Vec<RunResult>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let chance = 1.0 / classes as f64 + CHANCE_MARGIN;
        let divergences = runs.iter().filter(|r| r.diverged() || r.test_accuracy <= chance).count();
        SummaryCell {
            id: spec.id(),
            dim: spec.dim,
            batch_size: spec.batch_size,
            learning_rate: spec.learning_rate,
            pairing: spec.pairing,
            mean,
            std,
            divergences,
            runs,
        }
    }

    pub fn row_key(&self) -> String {
        CellSpec { dim: self.dim, batch_size: self.batch_size, learning_rate: self.learning_rate, pairing: self.pairing }
            .row_key()
    }
}

/// Mean and population standard deviation; `(0, 0)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything needed to reproduce and report one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultArchive {
    pub schema: String,
    pub config: ExperimentConfig,
    pub cells: Vec<SummaryCell>,
}

impl ResultArchive {
    pub fn cell(&self, id: &str) -> Result<&SummaryCell> {
        self.cells
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Config(format!("no cell {id:?} in archive {}", self.config.id)))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let archive: ResultArchive = serde_json::from_str(text)?;
        if archive.schema != SCHEMA {
            return Err(Error::Config(format!(
                "archive schema {:?} is not supported (expected {SCHEMA:?})",
                archive.schema
            )));
        }
        Ok(archive)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Per-run wall times keyed by cell id, kept out of the archive so the
    /// archive stays byte-identical across reruns.
    pub fn timing_json(&self) -> Result<String> {
        let timing: BTreeMap<&str, Vec<f64>> = self
            .cells
            .iter()
            .map(|c| (c.id.as_str(), c.runs.iter().map(|r| r.wall_time.as_secs_f64()).collect()))
            .collect();
        Ok(serde_json::to_string_pretty(&timing)?)
    }

    pub fn total_wall_time(&self) -> Duration {
        self.cells.iter().flat_map(|c| &c.runs).map(|r| r.wall_time).sum()
    }
}

/// Trains one run of one cell on `set` and returns its result.
pub fn run_cell(cfg: &ExperimentConfig, cell: &CellSpec, set: &LabeledSet, r: usize) -> Result<RunResult> {
    let seed = run_seed(cfg.base_seed, &cell.id(), r);
    let split = split_80_20(set, seed)?;
    let spec = NetworkSpec {
        architecture: cfg.architecture,
        input_shape: set.sample_shape().to_vec(),
        classes: set.classes(),
        activation: cell.pairing.activation,
        backward: GradientSource::new(cell.pairing.source).with_normalization(cfg.normalization),
        batch_norm: cell.pairing.batch_norm,
    };
    let mut net = build_network(&spec, &mut RandomStream::with_stream(seed, streams::INIT))?;
    let sgd = SgdConfig {
        eta: cell.learning_rate,
        batch_size: cell.batch_size,
        epochs: cfg.epochs(),
        clip: cell.pairing.clip.then_some(cfg.clip),
        seed,
        reduction: cfg.reduction,
    };
    train(&mut net, &split, &sgd)
}

/// Runs the whole grid on up to `workers` threads (0 = all cores).
/// Each run owns its network and random streams, so the result does not
/// depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ResultArchive> {
    cfg.validate()?;
    let cells = cfg.cells();
    let mut sets: BTreeMap<Option<usize>, LabeledSet> = BTreeMap::new();
    for cell in &cells {
        if let std::collections::btree_map::Entry::Vacant(slot) = sets.entry(cell.dim) {
            slot.insert(cfg.load_dataset(cell.dim)?);
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..cfg.runs).map(move |r| (c, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<RunResult>> =
        pool.install(|| jobs.par_iter().map(|&(c, r)| run_cell(cfg, &cells[c], &sets[&cells[c].dim], r)).collect());
    let mut per_cell: Vec<Vec<RunResult>> = vec![Vec::with_capacity(cfg.runs); cells.len()];
    for (&(c, _), res) in jobs.iter().zip(results) {
        per_cell[c].push(res?);
    }
    let summaries = cells
        .iter()
        .zip(per_cell)
        .map(|(cell, runs)| SummaryCell::from_runs(cell, sets[&cell.dim].classes(), runs))
        .collect();
    Ok(ResultArchive { schema: SCHEMA.to_string(), config: cfg.clone(), cells: summaries })
}

/// Output format of [`emit_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "md" | "markdown" => Ok(TableFormat::Markdown),
            _ => Err(Error::Config(format!("unknown table format {s:?} (expected csv or md)"))),
        }
    }
}

/// Groups cells into table rows, keeping grid order.
fn table_rows(archive: &ResultArchive) -> Vec<(&SummaryCell, Vec<Option<&SummaryCell>>)> {
    let pairings = &archive.config.pairings;
    let mut rows: Vec<(String, Vec<Option<&SummaryCell>>)> = Vec::new();
    for cell in &archive.cells {
        let key = cell.row_key();
        if rows.last().is_none_or(|(k, _)| *k != key) {
            rows.push((key, vec![None; pairings.len()]));
        }
        if let Some(col) = pairings.iter().position(|p| *p == cell.pairing) {
            rows.last_mut().expect("row just pushed").1[col] = Some(cell);
        }
    }
    rows.into_iter()
        .filter_map(|(_, cols)| cols.iter().flatten().next().copied().map(|first| (first, cols)))
        .collect()
}

/// One row per grid point and one column group per pairing. CSV carries
/// exact values; markdown shows `mean (std)` and bolds the best mean of
/// each row.
pub fn emit_table(archive: &ResultArchive, format: TableFormat) -> Result<String> {
    let with_dim = !archive.config.dims.is_empty();
    let pairings: Vec<String> = archive.config.pairings.iter().map(Pairing::to_string).collect();
    let rows = table_rows(archive);
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<String> = Vec::new();
            if with_dim {
                header.push("dim".into());
            }
            header.extend(["bs".to_string(), "lr".to_string()]);
            for p in &pairings {
                header.extend([format!("{p}:mean"), format!("{p}:std"), format!("{p}:div")]);
            }
            w.write_record(&header).map_err(csv_err)?;
            for (first, cols) in &rows {
                let mut rec = Vec::new();
                if let Some(dim) = first.dim {
                    rec.push(dim.to_string());
                }
                rec.extend([first.batch_size.to_string(), first.learning_rate.to_string()]);
                for col in cols {
                    match col {
                        Some(c) => rec.extend([c.mean.to_string(), c.std.to_string(), c.divergences.to_string()]),
                        None => rec.extend([String::new(), String::new(), String::new()]),
                    }
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
        }
        TableFormat::Markdown => {
            let mut out = String::new();
            let mut header = Vec::new();
            if with_dim {
                header.push("Dim".to_string());
            }
            header.extend(["BS".to_string(), "LR".to_string()]);
            header.extend(pairings.iter().cloned());
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for (first, cols) in &rows {
                let best = cols.iter().flatten().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
                let mut rec = Vec::new();
                if let Some(dim) = first.dim {
                    rec.push(dim.to_string());
                }
                rec.extend([first.batch_size.to_string(), first.learning_rate.to_string()]);
                for col in cols {
                    rec.push(match col {
                        Some(c) if c.mean == best => format!("**{:.4} ({:.4})**", c.mean, c.std),
                        Some(c) => format!("{:.4} ({:.4})", c.mean, c.std),
                        None => String::new(),
                    });
                }
                out.push_str(&format!("| {} |\n", rec.join(" | ")));
            }
            Ok(out)
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Long-format training curves of one cell: `run,epoch,accuracy,loss`.
pub fn emit_curves(archive: &ResultArchive, cell_id: &str) -> Result<String> {
    let cell = archive.cell(cell_id)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "epoch", "accuracy", "loss"]).map_err(csv_err)?;
    for (r, run) in cell.runs.iter().enumerate() {
        for e in &run.epochs {
            w.write_record([r.to_string(), e.epoch.to_string(), e.accuracy.to_string(), e.loss.to_string()])
                .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Curves of every cell, with a leading `cell` column.
pub fn emit_all_curves(archive: &ResultArchive) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell", "run", "epoch", "accuracy", "loss"]).map_err(csv_err)?;
    for cell in &archive.cells {
        for (r, run) in cell.runs.iter().enumerate() {
            for e in &run.epochs {
                w.write_record([
                    cell.id.clone(),
                    r.to_string(),
                    e.epoch.to_string(),
                    e.accuracy.to_string(),
                    e.loss.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Writes `archive.json`, `table.csv`, `table.md`, `curves.csv` and
/// `timing.json` into `dir`.
pub fn write_outputs(archive: &ResultArchive, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("archive.json", archive.to_json()?),
        ("table.csv", emit_table(archive, TableFormat::Csv)?),
        ("table.md", emit_table(archive, TableFormat::Markdown)?),
        ("curves.csv", emit_all_curves(archive)?),
        ("timing.json", archive.timing_json()?),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// One downloadable IDX file with its published decompressed size.
#[derive(Debug, Clone, Copy)]
pub struct RemoteFile {
    pub name: &'static str,
    pub size: u64,
    /// SHA-256 of the decompressed file, where known.
    pub sha256: Option<&'static str>,
}

/// Dataset sources for [`fetch_datasets`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteDataset {
    Mnist,
    Fashion,
}

impl FromStr for RemoteDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(RemoteDataset::Mnist),
            "fashion" | "fashion-mnist" => Ok(RemoteDataset::Fashion),
            _ => Err(Error::Config(format!("unknown dataset {s:?} (expected mnist or fashion)"))),
        }
    }
}

const TRAIN_IMAGES_SIZE: u64 = 16 + 60_000 * 784;
const TRAIN_LABELS_SIZE: u64 = 8 + 60_000;
const TEST_IMAGES_SIZE: u64 = 16 + 10_000 * 784;
const TEST_LABELS_SIZE: u64 = 8 + 10_000;

impl RemoteDataset {
    pub fn base_url(self) -> &'static str {
        match self {
            RemoteDataset::Mnist => "https://ossci-datasets.s3.amazonaws.com/mnist/",
            RemoteDataset::Fashion => "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        }
    }

    pub fn files(self) -> [RemoteFile; 4] {
        let sha = |h: &'static str| match self {
            RemoteDataset::Mnist => Some(h),
            RemoteDataset::Fashion => None,
        };
        [
            RemoteFile {
                name: IDX_TRAIN_IMAGES,
                size: TRAIN_IMAGES_SIZE,
                sha256: sha("ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
            },
            RemoteFile {
                name: IDX_TRAIN_LABELS,
                size: TRAIN_LABELS_SIZE,
                sha256: sha("65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
            },
            RemoteFile {
                name: IDX_TEST_IMAGES,
                size: TEST_IMAGES_SIZE,
                sha256: sha("0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
            },
            RemoteFile {
                name: IDX_TEST_LABELS,
                size: TEST_LABELS_SIZE,
                sha256: sha("ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
            },
        ]
    }
}

fn verify(file: &RemoteFile, bytes: &[u8]) -> std::result::Result<(), String> {
    if bytes.len() as u64 != file.size {
        return Err(format!("{}: {} bytes, expected {}", file.name, bytes.len(), file.size));
    }
    if let Some(expected) = file.sha256 {
        let digest = Sha256::digest(bytes);
        let got: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        if got != expected {
            return Err(format!("{}: sha256 {got}, expected {expected}", file.name));
        }
    }
    Ok(())
}

/// Inflates gzip payloads; anything else is returned unchanged.
fn maybe_gunzip(bytes: Vec<u8>, name: &str) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Download(format!("{name}: bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn obtain(dataset: RemoteDataset, file: &RemoteFile, from: Option<&Path>) -> Result<Vec<u8>> {
    match from {
        Some(src) => {
            for candidate in [src.join(file.name), src.join(format!("{}.gz", file.name))] {
                if candidate.is_file() {
                    let bytes = fs::read(&candidate).map_err(|e| Error::io(&candidate, e))?;
                    return maybe_gunzip(bytes, file.name);
                }
            }
            Err(Error::Download(format!("{}: not found in {}", file.name, src.display())))
        }
        None => {
            let url = format!("{}{}.gz", dataset.base_url(), file.name);
            let mut resp = ureq::get(&url).call().map_err(|e| Error::Download(format!("{url}: {e}")))?;
            let bytes = resp
                .body_mut()
                .with_config()
                .limit(4 * file.size)
                .read_to_vec()
                .map_err(|e| Error::Download(format!("{url}: {e}")))?;
            maybe_gunzip(bytes, file.name)
        }
    }
}

/// Places the four IDX files of `dataset` in `dest`, downloading them or
/// copying from `from` (raw or `.gz`). Files already present and valid are
/// left alone; a file that fails verification is removed and reported.
pub fn fetch_datasets(dataset: RemoteDataset, dest: impl AsRef<Path>, from: Option<&Path>) -> Result<Vec<PathBuf>> {
    let dest = dest.as_ref();
    fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    let mut paths = Vec::new();
    for file in dataset.files() {
        let path = dest.join(file.name);
        if path.is_file() {
            let existing = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if verify(&file, &existing).is_ok() {
                paths.push(path);
                continue;
            }
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        let bytes = obtain(dataset, &file, from)?;
        if let Err(msg) = verify(&file, &bytes) {
            return Err(Error::Download(msg));
        }
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
        id = "exp1"
        architecture = "suc"
        dims = [2, 3]
        batch_sizes = [32]
        learning_rates = [0.1]
        pairings = ["log/d", "log/1"]
        runs = 2
        epochs = 3

        [dataset]
        name = "ones"
        n = 200
    "#;

    #[test]
    fn pairing_names_round_trip() {
        for name in ["log/d", "log/const:1", "relu/rect:-5:5:1+bn", "relu/d+clip", "id/fj", "step/triang:0:5:1"] {
            assert_eq!(name.parse::<Pairing>().unwrap().to_string(), name);
        }
        assert_eq!("log/1".parse::<Pairing>().unwrap().source, SourceKind::Constant(1.0));
        assert!("log".parse::<Pairing>().is_err());
        assert!("log/d+gc".parse::<Pairing>().is_err());
        assert!("tanh/d".parse::<Pairing>().is_err());
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.dataset, DatasetSpec::Ones { n: 200, threshold: 0.7 });
        assert_eq!(cfg.base_seed, 0);
        assert_eq!(cfg.reduction, Reduction::Mean);
        assert_eq!(cfg.cells().len(), 4);
        assert_eq!(cfg.cells()[0].id(), "dim=2,bs=32,lr=0.1,pair=log/d");
        let lenet = SMALL.replace("\"suc\"", "\"lenet5\"").replace("epochs = 3", "");
        assert_eq!(ExperimentConfig::from_toml(&lenet).unwrap().epochs(), 20);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for (from, to) in [
            ("runs = 2", "runs = 0"),
            ("batch_sizes = [32]", "batch_sizes = []"),
            ("\"log/1\"", "\"log/banana\""),
            ("dims = [2, 3]", "dims = []"),
            ("learning_rates = [0.1]", "learning_rates = [-0.1]"),
            ("runs = 2", "runs = 2\nsurprise = 1"),
        ] {
            assert!(ExperimentConfig::from_toml(&SMALL.replace(from, to)).is_err(), "{to}");
        }
    }

    #[test]
    fn seeds_depend_on_cell_and_run() {
        let a = run_seed(7, "bs=32,lr=0.1,pair=log/d", 0);
        assert_eq!(a, 7u64.wrapping_add(cell_hash("bs=32,lr=0.1,pair=log/d")));
        assert_eq!(run_seed(7, "bs=32,lr=0.1,pair=log/d", 1), a.wrapping_add(1));
        assert_ne!(a, run_seed(7, "bs=32,lr=0.1,pair=log/1", 0));
        // Reference FNV-1a values.
        assert_eq!(cell_hash(""), 0xcbf29ce484222325);
        assert_eq!(cell_hash("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn aggregation_matches_direct_computation() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[0.2, 0.4, 0.9]);
        assert!((m - 0.5).abs() < 1e-15);
        let expected = ((0.09 + 0.01 + 0.16) / 3.0f64).sqrt();
        assert!((s - expected).abs() < 1e-15);
    }

    #[test]
    fn experiment_is_deterministic_and_worker_independent() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 3).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.cells.len(), 4);
        for cell in &a.cells {
            assert_eq!(cell.runs.len(), 2);
            assert!(cell.std >= 0.0 && (0.0..=1.0).contains(&cell.mean));
            let (m, s) = mean_std(&cell.runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
            assert_eq!((m.to_bits(), s.to_bits()), (cell.mean.to_bits(), cell.std.to_bits()));
        }
        let back = ResultArchive::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn single_cell_rerun_matches_grid() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let archive = run_experiment(&cfg, 1).unwrap();
        let cell = &cfg.cells()[3];
        let set = cfg.load_dataset(cell.dim).unwrap();
        assert_eq!(run_cell(&cfg, cell, &set, 1).unwrap(), archive.cell(&cell.id()).unwrap().runs[1]);
    }

    #[test]
    fn rejects_foreign_schema() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let archive = ResultArchive { schema: "other/9".into(), config: cfg, cells: Vec::new() };
        assert!(ResultArchive::from_json(&archive.to_json().unwrap()).is_err());
    }

    #[test]
    fn verify_checks_size_and_digest() {
        let file = RemoteFile { name: "x", size: 3, sha256: None };
        assert!(verify(&file, b"abc").is_ok());
        assert!(verify(&file, b"ab").is_err());
        let hashed = RemoteFile {
            name: "x",
            size: 3,
            sha256: Some("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"),
        };
        assert!(verify(&hashed, b"abc").is_ok());
        assert!(verify(&hashed, b"abd").is_err());
    }
}
