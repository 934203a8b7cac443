//! Tabular CTR data: schema, vocabularies, encoding, splits, batches, and the
//! two-dimensional moon/circle generators.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};
use crate::model::FieldSpec;

pub const CACHE_MAGIC: &[u8; 8] = b"QNNDATA1";

/// Mixes several integers into one well-spread seed (SplitMix64 finalizer chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Numeric,
}

fn default_min_count() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaField {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
}

/// Ordered input fields plus the label column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub fields: Vec<SchemaField>,
    pub label: String,
}

impl DatasetSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let schema: DatasetSchema =
            serde_json::from_str(&text).map_err(|e| QnnError::Schema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(QnnError::Schema("schema has no fields".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(QnnError::Schema(format!("duplicate field name '{}'", f.name)));
            }
        }
        if seen.contains(self.label.as_str()) {
            return Err(QnnError::Schema(format!(
                "label column '{}' is also listed as a field",
                self.label
            )));
        }
        Ok(())
    }

    /// Overrides every field's frequency threshold.
    pub fn with_threshold(mut self, min_count: u64) -> Self {
        for f in &mut self.fields {
            f.min_count = min_count;
        }
        self
    }
}

/// Which logarithm the numeric bucketing squares.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    /// `floor((ln x)^2)`.
    #[default]
    #[serde(rename = "e2")]
    Natural,
    /// `floor((log2 x)^2)`.
    #[serde(rename = "2")]
    Two,
}

impl std::str::FromStr for LogBase {
    type Err = QnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2" | "e" | "ln" => Ok(LogBase::Natural),
            "2" => Ok(LogBase::Two),
            _ => Err(QnnError::Config(format!("unknown log base '{s}' (expected e2 or 2)"))),
        }
    }
}

/// Buckets a raw numeric value; `None` means missing and maps to OOV.
pub fn discretize_numeric(x: Option<f64>, base: LogBase) -> Option<String> {
    let x = x.filter(|v| v.is_finite())?;
    if x > 2.0 {
        let l = match base {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        };
        Some(format!("{}", (l * l).floor() as u64))
    } else {
        Some("1".to_string())
    }
}

/// Raw CSV contents: header plus string cells; `line` is the 1-based file line.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

impl RawTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| QnnError::Data(format!("{}: {e}", path.display())))?;
        Self::from_reader(file, &path.display().to_string())
    }

    pub fn from_reader<R: std::io::Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_error(origin, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(QnnError::Data(format!("{origin}: missing header row")));
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(origin, e))?;
            lines.push(rec.position().map_or(0, |p| p.line()));
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(RawTable { header, rows, lines })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends another table with the same header.
    pub fn append(&mut self, other: RawTable) -> Result<()> {
        if other.header != self.header {
            return Err(QnnError::Data("CSV headers differ between input files".into()));
        }
        self.rows.extend(other.rows);
        self.lines.extend(other.lines);
        Ok(())
    }
}

fn csv_error(origin: &str, e: csv::Error) -> QnnError {
    match e.position() {
        Some(p) => QnnError::Data(format!("{origin}: line {}: {e}", p.line())),
        None => QnnError::Data(format!("{origin}: {e}")),
    }
}

/// Per-row field tokens (`None` = missing) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRows {
    pub tokens: Vec<Vec<Option<String>>>,
    pub labels: Vec<u8>,
}

/// Applies the schema to a raw table: selects columns, buckets numerics, parses labels.
pub fn tokenize(table: &RawTable, schema: &DatasetSchema, base: LogBase) -> Result<TokenRows> {
    schema.validate()?;
    let col = |name: &str| {
        table
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| QnnError::Schema(format!("unknown column '{name}'")))
    };
    let label_col = col(&schema.label)?;
    let cols = schema.fields.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
    let mut tokens = Vec::with_capacity(table.len());
    let mut labels = Vec::with_capacity(table.len());
    for (row, &line) in table.rows.iter().zip(&table.lines) {
        labels.push(parse_label(&row[label_col]).ok_or_else(|| {
            QnnError::Data(format!("line {line}: label '{}' is not 0/1", row[label_col]))
        })?);
        let mut toks = Vec::with_capacity(cols.len());
        for (f, &c) in schema.fields.iter().zip(&cols) {
            let cell = row[c].trim();
            let tok = match f.kind {
                FieldKind::Categorical => (!cell.is_empty()).then(|| cell.to_string()),
                FieldKind::Numeric => {
                    let v = if cell.is_empty() {
                        None
                    } else {
                        Some(cell.parse::<f64>().map_err(|_| {
                            QnnError::Data(format!(
                                "line {line}: field '{}' value '{cell}' is not numeric",
                                f.name
                            ))
                        })?)
                    };
                    discretize_numeric(v, base)
                }
            };
            toks.push(tok);
        }
        tokens.push(toks);
    }
    Ok(TokenRows { tokens, labels })
}

/// Accepts 1 as positive and 0 or -1 as negative.
fn parse_label(s: &str) -> Option<u8> {
    let v: f64 = s.trim().parse().ok()?;
    if v == 1.0 {
        Some(1)
    } else if v == 0.0 || v == -1.0 {
        Some(0)
    } else {
        None
    }
}

/// One field's token list; token `i` has index `i + 1`, index 0 is OOV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldVocab {
    pub name: String,
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl FieldVocab {
    fn new(name: String, tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + 1))
            .collect();
        FieldVocab { name, tokens, index }
    }

    /// Vocabulary size including the OOV slot.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn encode(&self, token: Option<&str>) -> u32 {
        token.and_then(|t| self.index.get(t).copied()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub fields: Vec<FieldVocab>,
}

impl Vocab {
    /// Counts tokens over `rows` (the training split) and keeps those reaching
    /// each field's threshold, ordered by descending count then lexicographically.
    pub fn build(schema: &DatasetSchema, data: &TokenRows, rows: &[usize]) -> Result<Self> {
        let mut fields = Vec::with_capacity(schema.fields.len());
        for (i, f) in schema.fields.iter().enumerate() {
            let mut counts: HashMap<&str, u64> = HashMap::new();
            for &r in rows {
                let row = data
                    .tokens
                    .get(r)
                    .ok_or_else(|| QnnError::Data(format!("row index {r} out of range")))?;
                if let Some(t) = &row[i] {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
            let mut kept: Vec<(&str, u64)> =
                counts.into_iter().filter(|&(_, c)| c >= f.min_count).collect();
            kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            fields.push(FieldVocab::new(
                f.name.clone(),
                kept.into_iter().map(|(t, _)| t.to_string()).collect(),
            ));
        }
        Ok(Vocab { fields })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.fields.iter().map(FieldVocab::size).collect()
    }

    pub fn total_features(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn field_specs(&self) -> Vec<FieldSpec> {
        self.fields
            .iter()
            .map(|f| FieldSpec {
                name: f.name.clone(),
                vocab_size: f.size(),
            })
            .collect()
    }

    pub fn encode(&self, data: &TokenRows) -> Result<EncodedDataset> {
        let f = self.fields.len();
        let mut indices = Vec::with_capacity(data.tokens.len() * f);
        for row in &data.tokens {
            if row.len() != f {
                return Err(QnnError::Data(format!("row has {} fields, vocab has {f}", row.len())));
            }
            for (v, t) in self.fields.iter().zip(row) {
                indices.push(v.encode(t.as_deref()));
            }
        }
        EncodedDataset::new(f, indices, data.labels.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocab = serde_json::from_slice(&fs::read(path)?)?;
        Ok(Vocab {
            fields: v.fields.into_iter().map(|f| FieldVocab::new(f.name, f.tokens)).collect(),
        })
    }
}

/// Row-major `[N x f]` index matrix with binary labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDataset {
    fields: usize,
    indices: Vec<u32>,
    labels: Vec<u8>,
}

impl EncodedDataset {
    pub fn new(fields: usize, indices: Vec<u32>, labels: Vec<u8>) -> Result<Self> {
        if fields == 0 || indices.len() != labels.len() * fields {
            return Err(QnnError::Data(format!(
                "{} indices do not form {} rows of {fields} fields",
                indices.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(QnnError::Data("labels must be 0 or 1".into()));
        }
        Ok(EncodedDataset { fields, indices, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn fields(&self) -> usize {
        self.fields
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut idx = Vec::with_capacity(rows.len() * self.fields);
        let mut lab = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(QnnError::Data(format!("row index {r} out of range ({})", self.len())));
            }
            idx.extend_from_slice(&self.indices[r * self.fields..(r + 1) * self.fields]);
            lab.push(self.labels[r]);
        }
        EncodedDataset::new(self.fields, idx, lab)
    }

    /// Checks every index against its field's vocabulary size.
    pub fn check_sizes(&self, sizes: &[usize]) -> Result<()> {
        if sizes.len() != self.fields {
            return Err(QnnError::Data(format!(
                "dataset has {} fields, vocabulary has {}",
                self.fields,
                sizes.len()
            )));
        }
        for (r, row) in self.indices.chunks(self.fields).enumerate() {
            for (i, (&v, &s)) in row.iter().zip(sizes).enumerate() {
                if v as usize >= s {
                    return Err(QnnError::Data(format!("row {r} field {i}: index {v} >= {s}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.indices.len() * 4 + self.labels.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.fields as u32).to_le_bytes());
        for v in &self.indices {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CACHE_MAGIC {
            return Err(QnnError::Format("not a QNN data cache (bad magic)".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let want = n
            .checked_mul(f)
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(20 + n));
        if want != Some(bytes.len()) {
            return Err(QnnError::Integrity(format!(
                "cache size {} does not match {n} rows x {f} fields",
                bytes.len()
            )));
        }
        let body = &bytes[20..];
        let indices = body[..n * f * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EncodedDataset::new(f, indices, body[n * f * 4..].to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        EncodedDataset::from_bytes(&fs::read(path)?)
    }
}

/// Row indices of the train / validation / test partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded random partition; sizes round the first two ratios, the rest goes to test.
    pub fn random(n: usize, ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(QnnError::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
        }
        let n_train = (n as f64 * ratios[0]).round() as usize;
        let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train.min(n));
        let n_test = n.saturating_sub(n_train + n_val);
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(QnnError::Config(format!(
                "split of {n} rows by {ratios:?} leaves an empty partition ({n_train}/{n_val}/{n_test})"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok(Split { train: order, val, test })
    }

    /// Validates disjointness and range.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if part.is_empty() {
                return Err(QnnError::Config(format!("{name} split is empty")));
            }
            for &r in part {
                if r >= n {
                    return Err(QnnError::Data(format!("{name} split index {r} >= {n} rows")));
                }
                if std::mem::replace(&mut seen[r], true) {
                    return Err(QnnError::Data(format!("row {r} appears in more than one split")));
                }
            }
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            write_split_file(&dir.join(format!("{name}.idx")), part)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Split {
            train: read_split_file(&dir.join("train.idx"))?,
            val: read_split_file(&dir.join("val.idx"))?,
            test: read_split_file(&dir.join("test.idx"))?,
        })
    }
}

pub fn write_split_file(path: &Path, rows: &[usize]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_split_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                QnnError::Data(format!("{}: line {}: '{l}' is not a row index", path.display(), i + 1))
            })
        })
        .collect()
}

/// Two-dimensional points `[n x 2]` with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    pub x: Vec<f64>,
    pub y: Vec<u8>,
}

impl Points {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Points {
        Points {
            x: rows.iter().flat_map(|&r| [self.x[2 * r], self.x[2 * r + 1]]).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }
}

fn check_synthetic(n: usize, noise: f64) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(QnnError::Config(format!("n must be even and >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(QnnError::Config(format!("noise must be >= 0, got {noise}")));
    }
    Ok(())
}

fn finish_synthetic(mut x: Vec<f64>, y: Vec<u8>, noise: f64, seed: u64) -> Points {
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, noise).expect("noise checked");
        for v in &mut x {
            *v += g.sample(&mut rng);
        }
    }
    standardize(&mut x);
    Points { x, y }
}

/// Zero mean, unit variance per axis (population statistics).
fn standardize(x: &mut [f64]) {
    let n = (x.len() / 2) as f64;
    for axis in 0..2 {
        let mean = x.iter().skip(axis).step_by(2).sum::<f64>() / n;
        let var = x.iter().skip(axis).step_by(2).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for v in x.iter_mut().skip(axis).step_by(2) {
            *v = (*v - mean) / sd;
        }
    }
}

/// Two interleaving half circles, `n/2` points each; label 1 is the lower moon.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<Points> {
    check_synthetic(n, noise)?;
    let half = n / 2;
    let step = if half > 1 { std::f64::consts::PI / (half - 1) as f64 } else { 0.0 };
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..half {
        let t = i as f64 * step;
        x.extend([t.cos(), t.sin()]);
        y.push(0);
    }
    for i in 0..half {
        let t = i as f64 * step;
        x.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        y.push(1);
    }
    Ok(finish_synthetic(x, y, noise, seed))
}

/// Concentric circles of radius 1 (label 0) and `factor` (label 1).
pub fn make_circles(n: usize, factor: f64, noise: f64, seed: u64) -> Result<Points> {
    check_synthetic(n, noise)?;
    if !(factor > 0.0 && factor < 1.0) {
        return Err(QnnError::Config(format!("factor must lie in (0, 1), got {factor}")));
    }
    let half = n / 2;
    let step = 2.0 * std::f64::consts::PI / half as f64;
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for (r, label) in [(1.0, 0u8), (factor, 1u8)] {
        for i in 0..half {
            let t = i as f64 * step;
            x.extend([r * t.cos(), r * t.sin()]);
            y.push(label);
        }
    }
    Ok(finish_synthetic(x, y, noise, seed))
}

/// Shuffled minibatches of `0..n` for one epoch; the last partial block is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(QnnError::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch])));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
