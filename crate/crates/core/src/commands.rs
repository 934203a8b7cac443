//! Implementations behind the `qnn` subcommands: run configuration, data
//! loading, prep, train, sweep, decision-boundary export and latency bench.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    make_circles, make_moons, DatasetSchema, EncodedDataset, LogBase, Points, RawTable, Split,
    Vocab, tokenize,
};
use crate::error::{QnnError, Result};
use crate::layers::{ActivationPlacement, Format, HeadInputMode, PlacementMode};
use crate::loss_metrics::{measure_latency, LatencyStats, MetricReport};
use crate::model::{FieldSpec, InputSpec, Inputs, ModelConfig, QnnModel};
use crate::train::{evaluate, predict_all, train, Examples, TrainConfig, TrainReport};

pub const SEED_ENV: &str = "QNN_SEED";

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// Which two-dimensional toy dataset to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Moons,
    Circles,
}

impl std::str::FromStr for SyntheticKind {
    type Err = QnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(SyntheticKind::Moons),
            "circles" => Ok(SyntheticKind::Circles),
            _ => Err(QnnError::Config(format!("unknown dataset '{s}' (moons or circles)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub dataset: SyntheticKind,
    pub n: usize,
    /// Defaults to 0.2 for moons and 0.1 for circles.
    pub noise: Option<f64>,
    pub factor: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dataset: SyntheticKind::Moons,
            n: 1000,
            noise: None,
            factor: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn new(dataset: SyntheticKind) -> Self {
        SyntheticSpec {
            dataset,
            ..SyntheticSpec::default()
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or(match self.dataset {
            SyntheticKind::Moons => 0.2,
            SyntheticKind::Circles => 0.1,
        })
    }

    pub fn generate(&self, seed: u64) -> Result<Points> {
        match self.dataset {
            SyntheticKind::Moons => make_moons(self.n, self.noise(), seed),
            SyntheticKind::Circles => make_circles(self.n, self.factor, self.noise(), seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// One CSV, or three (train, validation, test) that fix the split.
    pub csv: Vec<PathBuf>,
    pub schema: Option<PathBuf>,
    /// Output directory of `qnn prep`; replaces `csv`/`schema`.
    pub prepared: Option<PathBuf>,
    /// Directory with `train.idx`, `val.idx`, `test.idx` row-index files.
    pub splits: Option<PathBuf>,
    /// Overrides every field's frequency threshold.
    pub threshold: Option<u64>,
    pub log_base: LogBase,
    pub ratios: [f64; 3],
    /// Defaults to the training seed.
    pub split_seed: Option<u64>,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            csv: Vec::new(),
            schema: None,
            prepared: None,
            splits: None,
            threshold: None,
            log_base: LogBase::Natural,
            ratios: default_ratios(),
            split_seed: None,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub format: String,
    /// `none`, `post`, `mid`, optionally `:<activation>`; format default when absent.
    pub placement: Option<String>,
    /// Embedding size per field.
    pub d: usize,
    /// Hidden width for dense (synthetic) inputs.
    pub width: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub head_input: HeadInputMode,
    pub dropout: f64,
    pub bias: Option<bool>,
    pub residual: bool,
    pub krp_linear: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            format: "qnn_alpha".into(),
            placement: None,
            d: 16,
            width: 20,
            layers: 3,
            m: 1,
            h: 1,
            head_input: HeadInputMode::Local,
            dropout: 0.1,
            bias: None,
            residual: true,
            krp_linear: false,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, input: InputSpec, seed: u64) -> Result<ModelConfig> {
        let format: Format = self.format.parse()?;
        let mut cfg = ModelConfig::new(input, format, self.layers);
        cfg.placement = self.placement.as_deref().map(ActivationPlacement::parse).transpose()?;
        cfg.m = self.m;
        cfg.h = self.h;
        cfg.head_input = self.head_input;
        cfg.bias = self.bias;
        cfg.residual = self.residual;
        cfg.krp_linear = self.krp_linear;
        cfg.dropout = self.dropout;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The `--config` file of `qnn train` and `qnn sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Reads the file and applies the `QNN_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| QnnError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.csv.iter_mut().for_each(fix);
        for p in [&mut self.data.schema, &mut self.data.prepared, &mut self.data.splits, &mut self.output]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.train.seed = s
                .trim()
                .parse()
                .map_err(|_| QnnError::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// Train/validation/test data ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedData {
    Categorical {
        fields: Vec<FieldSpec>,
        train: EncodedDataset,
        val: EncodedDataset,
        test: EncodedDataset,
    },
    Dense {
        train: Points,
        val: Points,
        test: Points,
    },
}

impl LoadedData {
    pub fn input_spec(&self, model: &ModelSection) -> InputSpec {
        match self {
            LoadedData::Categorical { fields, .. } => InputSpec::Embedding {
                fields: fields.clone(),
                d: model.d,
            },
            LoadedData::Dense { .. } => InputSpec::Dense {
                features: 2,
                width: model.width,
            },
        }
    }

    pub fn train(&self) -> Examples<'_> {
        match self {
            LoadedData::Categorical { train, .. } => Examples::Categorical(train),
            LoadedData::Dense { train, .. } => Examples::Dense(train),
        }
    }

    pub fn val(&self) -> Examples<'_> {
        match self {
            LoadedData::Categorical { val, .. } => Examples::Categorical(val),
            LoadedData::Dense { val, .. } => Examples::Dense(val),
        }
    }

    pub fn test(&self) -> Examples<'_> {
        match self {
            LoadedData::Categorical { test, .. } => Examples::Categorical(test),
            LoadedData::Dense { test, .. } => Examples::Dense(test),
        }
    }
}

/// Result of preprocessing: encoded rows, vocabulary and split.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub schema: DatasetSchema,
    pub vocab: Vocab,
    pub data: EncodedDataset,
    pub split: Split,
}

impl Prepared {
    pub fn into_loaded(self) -> Result<LoadedData> {
        Ok(LoadedData::Categorical {
            fields: self.vocab.field_specs(),
            train: self.data.subset(&self.split.train)?,
            val: self.data.subset(&self.split.val)?,
            test: self.data.subset(&self.split.test)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.data.save(&dir.join("data.qnn"))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        fs::write(dir.join("schema.json"), serde_json::to_vec_pretty(&self.schema)?)?;
        self.split.save_dir(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schema: DatasetSchema = serde_json::from_slice(&fs::read(dir.join("schema.json"))?)
            .map_err(|e| QnnError::Schema(e.to_string()))?;
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let data = EncodedDataset::load(&dir.join("data.qnn"))?;
        data.check_sizes(&vocab.sizes())?;
        let split = Split::load_dir(dir)?;
        split.check(data.len())?;
        Ok(Prepared { schema, vocab, data, split })
    }
}

/// Options of `qnn prep`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepOptions {
    pub csv: Vec<PathBuf>,
    pub schema: PathBuf,
    pub threshold: Option<u64>,
    pub log_base: LogBase,
    pub splits: Option<PathBuf>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

/// Reads CSVs, builds the vocabulary on the training rows, encodes everything.
pub fn prepare(opts: &PrepOptions) -> Result<Prepared> {
    let mut schema = DatasetSchema::load(&opts.schema)?;
    if let Some(t) = opts.threshold {
        schema = schema.with_threshold(t);
    }
    let (table, split) = match opts.csv.as_slice() {
        [one] => {
            let table = RawTable::read_csv(one)?;
            let split = match &opts.splits {
                Some(dir) => Split::load_dir(dir)?,
                None => Split::random(table.len(), opts.ratios, opts.seed)?,
            };
            (table, split)
        }
        [tr, va, te] => {
            if opts.splits.is_some() {
                return Err(QnnError::Config("split files and three CSVs are mutually exclusive".into()));
            }
            let mut table = RawTable::read_csv(tr)?;
            let n_tr = table.len();
            table.append(RawTable::read_csv(va)?)?;
            let n_va = table.len() - n_tr;
            table.append(RawTable::read_csv(te)?)?;
            let n = table.len();
            let split = Split {
                train: (0..n_tr).collect(),
                val: (n_tr..n_tr + n_va).collect(),
                test: (n_tr + n_va..n).collect(),
            };
            (table, split)
        }
        _ => {
            return Err(QnnError::Config(format!(
                "expected one CSV or three (train, val, test), got {}",
                opts.csv.len()
            )))
        }
    };
    split.check(table.len())?;
    let tokens = tokenize(&table, &schema, opts.log_base)?;
    let vocab = Vocab::build(&schema, &tokens, &split.train)?;
    let data = vocab.encode(&tokens)?;
    Ok(Prepared { schema, vocab, data, split })
}

/// Loads (or generates) the data a run configuration points at.
pub fn load_data(cfg: &DataSection, seed: u64) -> Result<LoadedData> {
    let split_seed = cfg.split_seed.unwrap_or(seed);
    if let Some(s) = &cfg.synthetic {
        let pts = s.generate(split_seed)?;
        let split = Split::random(pts.len(), cfg.ratios, split_seed)?;
        return Ok(LoadedData::Dense {
            train: pts.subset(&split.train),
            val: pts.subset(&split.val),
            test: pts.subset(&split.test),
        });
    }
    if let Some(dir) = &cfg.prepared {
        return Prepared::load(dir)?.into_loaded();
    }
    let schema = cfg
        .schema
        .clone()
        .ok_or_else(|| QnnError::Config("data section needs 'prepared', 'synthetic', or 'csv' + 'schema'".into()))?;
    prepare(&PrepOptions {
        csv: cfg.csv.clone(),
        schema,
        threshold: cfg.threshold,
        log_base: cfg.log_base,
        splits: cfg.splits.clone(),
        ratios: cfg.ratios,
        seed: split_seed,
    })?
    .into_loaded()
}

/// SHA-256 over the named input files, in order, as lowercase hex.
pub fn content_hash(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(p.display().to_string().as_bytes());
        h.update([0]);
        h.update(fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn input_files(cfg: &DataSection) -> Vec<PathBuf> {
    if cfg.synthetic.is_some() {
        return Vec::new();
    }
    if let Some(dir) = &cfg.prepared {
        return ["data.qnn", "vocab.json", "schema.json", "train.idx", "val.idx", "test.idx"]
            .iter()
            .map(|f| dir.join(f))
            .collect();
    }
    let mut v = cfg.csv.clone();
    v.extend(cfg.schema.clone());
    if let Some(dir) = &cfg.splits {
        v.extend(["train.idx", "val.idx", "test.idx"].iter().map(|f| dir.join(f)));
    }
    v
}

/// Everything needed to re-run a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub model_config_hash: String,
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub format: String,
    pub placement: String,
    pub params: usize,
    pub stack_params: usize,
    pub report: TrainReport,
    pub test: MetricReport,
}

/// Trains the configured model on preloaded data; writes artifacts when `out` is given.
pub fn run_training(cfg: &RunConfig, data: &LoadedData, out: Option<&Path>) -> Result<(RunResult, QnnModel)> {
    let seed = cfg.train.seed;
    let model_cfg = cfg.model.model_config(data.input_spec(&cfg.model), seed)?;
    cfg.train.validate()?;
    let mut model = QnnModel::new(model_cfg)?;
    let report = train(&mut model, data.train(), Some(data.val()), &cfg.train)?;
    let test = evaluate(&model, data.test())?;
    let result = RunResult {
        format: model.config().format.name(),
        placement: model.layer_spec().placement.label(),
        params: model.param_count(),
        stack_params: model.stack_param_count(),
        report,
        test,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        model.save(&dir.join("model.ckpt"))?;
        let mut jsonl = Vec::new();
        result.report.write_jsonl(&mut jsonl)?;
        fs::write(dir.join("report.jsonl"), jsonl)?;
        fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&result)?)?;
        let inputs = input_files(&cfg.data);
        let manifest = Manifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            seed,
            model_config_hash: model.config_hash(),
            input_hash: content_hash(&inputs)?,
            inputs,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok((result, model))
}

/// `qnn train`: load data, train, evaluate on test, write artifacts.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunResult> {
    let data = load_data(&cfg.data, cfg.train.seed)?;
    run_training(cfg, &data, cfg.output.as_deref()).map(|(r, _)| r)
}

/// Expands `t1..t25,mlp` style lists into formats.
pub fn parse_format_list(s: &str) -> Result<Vec<Format>> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let num = |x: &str| {
                x.strip_prefix('t')
                    .and_then(|n| n.parse::<u8>().ok())
                    .ok_or_else(|| QnnError::Config(format!("bad format range '{item}'")))
            };
            let (lo, hi) = (num(a)?, num(b)?);
            if lo == 0 || hi > 25 || lo > hi {
                return Err(QnnError::Config(format!("bad format range '{item}'")));
            }
            out.extend((lo..=hi).map(Format::T));
        } else {
            out.push(item.parse()?);
        }
    }
    if out.is_empty() {
        return Err(QnnError::Config("empty format list".into()));
    }
    Ok(out)
}

pub fn parse_placement_list(s: &str) -> Result<Vec<ActivationPlacement>> {
    let v = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(ActivationPlacement::parse)
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(QnnError::Config("empty placement list".into()));
    }
    Ok(v)
}

/// One `(format, placement)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub format: String,
    pub placement: String,
    pub logloss: Option<f64>,
    pub auc: Option<f64>,
    pub params: Option<usize>,
    pub seconds_per_epoch: Option<f64>,
    pub epochs: Option<usize>,
    /// `logloss(none) - logloss(post)` for this format.
    pub gap_logloss: Option<f64>,
    /// `auc(none) - auc(post)` for this format.
    pub gap_auc: Option<f64>,
    pub error: Option<String>,
}

/// Trains every `(format, placement)` cell with otherwise identical settings.
/// A failing cell is recorded in its row and does not stop the sweep.
pub fn run_sweep(
    cfg: &RunConfig,
    data: &LoadedData,
    formats: &[Format],
    placements: &[ActivationPlacement],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(formats.len() * placements.len());
    for &format in formats {
        for &placement in placements {
            let mut cell = cfg.clone();
            cell.model.format = format.name();
            cell.model.placement = Some(placement.label());
            let out = cfg
                .output
                .as_ref()
                .map(|d| d.join(format!("{}_{}", format.name(), placement.label().replace(':', "-"))));
            let mut row = SweepRow {
                format: format.name(),
                placement: placement.label(),
                logloss: None,
                auc: None,
                params: None,
                seconds_per_epoch: None,
                epochs: None,
                gap_logloss: None,
                gap_auc: None,
                error: None,
            };
            match run_training(&cell, data, out.as_deref()) {
                Ok((r, _)) => {
                    row.logloss = Some(r.test.logloss);
                    row.auc = Some(r.test.auc);
                    row.params = Some(r.stack_params);
                    row.epochs = Some(r.report.epochs.len());
                    row.seconds_per_epoch = Some(r.report.total_seconds() / r.report.epochs.len() as f64);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
        }
    }
    fill_gaps(&mut rows);
    Ok(rows)
}

fn fill_gaps(rows: &mut [SweepRow]) {
    let lookup = |rows: &[SweepRow], f: &str, p: &str| {
        rows.iter()
            .find(|r| r.format == f && r.placement == p)
            .and_then(|r| r.logloss.zip(r.auc))
    };
    let gaps: Vec<Option<(f64, f64)>> = rows
        .iter()
        .map(|r| {
            let (ln, an) = lookup(rows, &r.format, "none")?;
            let (lp, ap) = lookup(rows, &r.format, "post")?;
            Some((ln - lp, an - ap))
        })
        .collect();
    for (r, g) in rows.iter_mut().zip(gaps) {
        r.gap_logloss = g.map(|g| g.0);
        r.gap_auc = g.map(|g| g.1);
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or(String::new(), |x| format!("{x:.digits$}"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "format", "placement", "logloss", "auc", "params", "seconds_per_epoch", "epochs",
        "gap_logloss", "gap_auc", "error",
    ])
    .map_err(|e| QnnError::Format(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.format.clone(),
            r.placement.clone(),
            opt(r.logloss, 6),
            opt(r.auc, 6),
            r.params.map_or(String::new(), |p| p.to_string()),
            opt(r.seconds_per_epoch, 3),
            r.epochs.map_or(String::new(), |e| e.to_string()),
            opt(r.gap_logloss, 6),
            opt(r.gap_auc, 6),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| QnnError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| QnnError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<11} {:<10} {:>8} {:>8} {:>9} {:>12} {:>9} {:>8}",
        "format", "placement", "logloss", "auc%", "params", "time x ep", "dLogloss", "dAUC%"
    );
    for r in rows {
        if let Some(e) = &r.error {
            let _ = writeln!(s, "{:<11} {:<10} failed: {e}", r.format, r.placement);
            continue;
        }
        let time = match (r.seconds_per_epoch, r.epochs) {
            (Some(t), Some(e)) => format!("{t:.1}s x {e}"),
            _ => String::new(),
        };
        let _ = writeln!(
            s,
            "{:<11} {:<10} {:>8} {:>8} {:>9} {:>12} {:>9} {:>8}",
            r.format,
            r.placement,
            opt(r.logloss, 4),
            opt(r.auc.map(|a| 100.0 * a), 2),
            r.params.map_or(String::new(), |p| p.to_string()),
            time,
            opt(r.gap_logloss, 4),
            opt(r.gap_auc.map(|a| 100.0 * a), 2),
        );
    }
    s
}

/// Settings of the two-dimensional decision-boundary study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOptions {
    pub data: SyntheticSpec,
    pub format: Format,
    pub placement: Option<ActivationPlacement>,
    pub width: usize,
    pub layers: usize,
    pub lr: f64,
    /// Defaults to 500 for moons and 100 for circles.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub test_fraction: f64,
    pub grid: usize,
    pub extent: f64,
    pub seed: u64,
}

impl BoundaryOptions {
    pub fn new(dataset: SyntheticKind, format: Format) -> Self {
        BoundaryOptions {
            data: SyntheticSpec::new(dataset),
            format,
            placement: None,
            width: 20,
            layers: 2,
            lr: 1e-2,
            epochs: None,
            batch_size: 128,
            test_fraction: 0.2,
            grid: 200,
            extent: 2.5,
            seed: 2024,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.data.dataset {
            SyntheticKind::Moons => 500,
            SyntheticKind::Circles => 100,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// `(x, y, p)` over a `grid x grid` lattice, x varying fastest.
    pub grid: Vec<[f64; 3]>,
    pub model: QnnModel,
}

fn accuracy(model: &QnnModel, pts: &Points) -> Result<f64> {
    let p = predict_all(model, Examples::Dense(pts), 4096)?;
    let hits = p
        .iter()
        .zip(&pts.y)
        .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    Ok(hits as f64 / pts.len() as f64)
}

/// Trains a small dense-input model on moons or circles and samples its
/// probability surface on a square grid.
pub fn run_boundary(opts: &BoundaryOptions) -> Result<BoundaryResult> {
    if !(opts.test_fraction > 0.0 && opts.test_fraction < 1.0) || opts.grid < 2 {
        return Err(QnnError::Config("test_fraction must lie in (0,1) and grid >= 2".into()));
    }
    let pts = opts.data.generate(opts.seed)?;
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED));
    let n_test = ((pts.len() as f64) * opts.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, pts.len() - 1);
    let test = pts.subset(&order[..n_test]);
    let train_pts = pts.subset(&order[n_test..]);

    let mut cfg = ModelConfig::new(
        InputSpec::Dense {
            features: 2,
            width: opts.width,
        },
        opts.format,
        opts.layers,
    );
    cfg.placement = opts.placement;
    cfg.seed = opts.seed;
    let mut model = QnnModel::new(cfg)?;
    let tc = TrainConfig {
        lr: opts.lr,
        batch_size: opts.batch_size,
        max_epochs: opts.epochs(),
        seed: opts.seed,
        se_enabled: false,
        forward_passes: 1,
        ..TrainConfig::default()
    };
    train(&mut model, Examples::Dense(&train_pts), None, &tc)?;

    let g = opts.grid;
    let step = 2.0 * opts.extent / (g - 1) as f64;
    let mut xy = Vec::with_capacity(2 * g * g);
    for j in 0..g {
        for i in 0..g {
            xy.push(-opts.extent + i as f64 * step);
            xy.push(-opts.extent + j as f64 * step);
        }
    }
    let p = model.predict(Inputs::Dense(&xy))?;
    let grid = xy.chunks(2).zip(p).map(|(c, p)| [c[0], c[1], p]).collect();
    Ok(BoundaryResult {
        accuracy: accuracy(&model, &test)?,
        train_accuracy: accuracy(&model, &train_pts)?,
        grid,
        model,
    })
}

pub fn grid_csv(grid: &[[f64; 3]]) -> String {
    let mut s = String::with_capacity(grid.len() * 40);
    s.push_str("x,y,p\n");
    for [x, y, p] in grid {
        let _ = writeln!(s, "{x},{y},{p}");
    }
    s
}

/// Latency benchmark settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            batch: 100,
            warmup: 5,
            reps: 30,
            seed: 7,
        }
    }
}

/// Random valid inputs for `model`: uniform vocabulary indices or standard normals.
pub fn random_inputs(model: &QnnModel, rows: usize, seed: u64) -> Vec<InputBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &model.config().input {
        InputSpec::Embedding { fields, .. } => vec![InputBuf::Categorical(
            (0..rows)
                .flat_map(|_| fields.iter().map(|f| rng.gen_range(0..f.vocab_size as u32)).collect::<Vec<_>>())
                .collect(),
        )],
        InputSpec::Dense { features, .. } => vec![InputBuf::Dense(
            (0..rows * features).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )],
    }
}

/// Owned input rows for benchmarking.
#[derive(Debug, Clone, PartialEq)]
pub enum InputBuf {
    Categorical(Vec<u32>),
    Dense(Vec<f64>),
}

impl InputBuf {
    pub fn as_inputs(&self) -> Inputs<'_> {
        match self {
            InputBuf::Categorical(v) => Inputs::Categorical(v),
            InputBuf::Dense(v) => Inputs::Dense(v),
        }
    }
}

/// Median and p95 inference latency per 100 samples, single-threaded.
///
/// Each timed repetition predicts every batch of `data` once.
pub fn bench_model(model: &QnnModel, data: Option<&EncodedDataset>, opts: &BenchOptions) -> Result<LatencyStats> {
    if opts.batch == 0 || opts.reps < 30 {
        return Err(QnnError::Config("bench needs batch >= 1 and at least 30 repetitions".into()));
    }
    let batches: Vec<InputBuf> = match data {
        Some(d) => {
            let f = d.fields();
            d.indices()
                .chunks(opts.batch * f)
                .map(|c| InputBuf::Categorical(c.to_vec()))
                .collect()
        }
        None => random_inputs(model, opts.batch, opts.seed),
    };
    let samples: usize = batches.iter().map(|b| model.rows(b.as_inputs())).sum::<Result<usize>>()?;
    measure_latency(
        || {
            for b in &batches {
                std::hint::black_box(model.predict(b.as_inputs())?);
            }
            Ok(())
        },
        samples,
        opts.warmup,
        opts.reps,
    )
}

/// Human-readable summary of a run.
pub fn describe_run(r: &RunResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format {} ({}), {} parameters", r.format, r.placement, r.params);
    for e in &r.report.epochs {
        let _ = writeln!(
            s,
            "epoch {:>3}  loss {:.5}  val logloss {}  val auc {}  lr {:.1e}  {:.2}s",
            e.epoch,
            e.train_loss,
            opt(e.val_logloss, 5),
            opt(e.val_auc, 5),
            e.lr,
            e.seconds
        );
    }
    let _ = writeln!(
        s,
        "best epoch {}  test logloss {:.5}  test auc {:.5}",
        r.report.best_epoch, r.test.logloss, r.test.auc
    );
    s
}

/// True when the placement needs a mid-activation site the format lacks.
pub fn placement_unsupported(format: Format, p: &ActivationPlacement) -> bool {
    p.mode == PlacementMode::Mid && format.def().mid_site.is_none()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_lists() {
        let v = parse_format_list("t1..t3,mlp,crossnetv2").unwrap();
        assert_eq!(v, vec![Format::T(1), Format::T(2), Format::T(3), Format::Mlp, Format::CrossNetV2]);
        assert_eq!(parse_format_list("t1..t25").unwrap().len(), 25);
        assert!(parse_format_list("t0..t3").is_err());
        assert!(parse_format_list("t26").is_err());
        assert!(parse_format_list("bogus").is_err());
        let p = parse_placement_list("none,post,mid:tanh").unwrap();
        assert_eq!(p.len(), 3);
        assert!(placement_unsupported(Format::T(9), &p[2]));
        assert!(!placement_unsupported(Format::T(19), &p[2]));
    }

    #[test]
    fn run_config_defaults_and_unknown_keys() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.data.ratios, [0.8, 0.1, 0.1]);
        let cfg: RunConfig = serde_json::from_str(r#"{"model":{"format":"t9","L":2,"M":4,"H":2}}"#).unwrap();
        assert_eq!((cfg.model.layers, cfg.model.m, cfg.model.h), (2, 4, 2));
        assert!(serde_json::from_str::<RunConfig>(r#"{"model":{"colour":1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra":{}}"#).is_err());
    }

    #[test]
    fn gap_columns() {
        let row = |f: &str, p: &str, l: f64, a: f64| SweepRow {
            format: f.into(),
            placement: p.into(),
            logloss: Some(l),
            auc: Some(a),
            params: Some(1),
            seconds_per_epoch: Some(1.0),
            epochs: Some(1),
            gap_logloss: None,
            gap_auc: None,
            error: None,
        };
        let mut rows = vec![
            row("t9", "none", 0.40, 0.80),
            row("t9", "post", 0.45, 0.78),
            row("mlp", "none", 0.50, 0.70),
        ];
        fill_gaps(&mut rows);
        assert!((rows[0].gap_auc.unwrap() - 0.02).abs() < 1e-12);
        assert!((rows[1].gap_logloss.unwrap() + 0.05).abs() < 1e-12);
        assert_eq!(rows[2].gap_auc, None);
        let csv = sweep_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(sweep_table(&rows).contains("t9"));
    }

    #[test]
    fn synthetic_training_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.synthetic = Some(SyntheticSpec::new(SyntheticKind::Moons));
        cfg.model.format = "t19".into();
        cfg.model.layers = 2;
        cfg.train.batch_size = 128;
        cfg.train.max_epochs = 3;
        cfg.train.lr = 1e-2;
        cfg.output = Some(dir.path().to_path_buf());
        let r = cmd_train(&cfg).unwrap();
        assert!(r.test.auc > 0.5);
        for f in ["model.ckpt", "report.jsonl", "metrics.json", "manifest.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m: Manifest = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.config, cfg);
        let model = QnnModel::load(&dir.path().join("model.ckpt")).unwrap();
        assert_eq!(model.config_hash(), m.model_config_hash);
    }

    #[test]
    fn boundary_grid_layout() {
        let mut o = BoundaryOptions::new(SyntheticKind::Circles, Format::T(9));
        o.data.n = 100;
        o.epochs = Some(2);
        o.grid = 5;
        let r = run_boundary(&o).unwrap();
        assert_eq!(r.grid.len(), 25);
        assert_eq!(r.grid[0][..2], [-2.5, -2.5]);
        assert_eq!(r.grid[4][..2], [2.5, -2.5]);
        assert_eq!(r.grid[24][..2], [2.5, 2.5]);
        assert!(grid_csv(&r.grid).starts_with("x,y,p\n"));
    }

    #[test]
    fn bench_requires_thirty_reps() {
        let cfg = ModelConfig::new(InputSpec::Dense { features: 2, width: 4 }, Format::T(9), 1);
        let model = QnnModel::new(cfg).unwrap();
        let bad = BenchOptions { reps: 10, ..BenchOptions::default() };
        assert!(bench_model(&model, None, &bad).is_err());
        let s = bench_model(&model, None, &BenchOptions::default()).unwrap();
        assert!(s.median_ms_per_100 > 0.0 && s.p95_ms_per_100 >= s.median_ms_per_100);
        assert_eq!(s.repetitions, 30);
    }
}
