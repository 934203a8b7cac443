//! Model assembly: input layer, neuron-format stack, logit head, checkpoints.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QnnError, Result};
use crate::layers::{
    fan_in_uniform, init_params, layer_forward, param_count, ActivationPlacement, BoundLayer,
    Format, HeadInputMode, KrpConfig, LayerParams, NeuronFormatSpec,
};
use crate::loss_metrics::PROB_EPS;
use crate::tensor::{ActivationKind, NodeId, Tape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QNNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One categorical input field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: usize,
}

/// How raw samples become the first-order feature `X_1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Per-field embedding lookup, concatenated: `D = fields * d`.
    Embedding { fields: Vec<FieldSpec>, d: usize },
    /// Affine map of a dense feature vector to width `D`.
    Dense { features: usize, width: usize },
}

impl InputSpec {
    pub fn width(&self) -> usize {
        match self {
            InputSpec::Embedding { fields, d } => fields.len() * d,
            InputSpec::Dense { width, .. } => *width,
        }
    }
}

/// Full architecture description; also the checkpoint config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputSpec,
    pub format: Format,
    #[serde(default)]
    pub placement: Option<ActivationPlacement>,
    pub layers: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "one")]
    pub h: usize,
    #[serde(default)]
    pub head_input: HeadInputMode,
    /// `None` picks the format default (on for mlp, off otherwise).
    #[serde(default)]
    pub bias: Option<bool>,
    #[serde(default = "yes")]
    pub residual: bool,
    /// Replace the Khatri-Rao interaction of qnn_alpha by a plain linear read-out.
    #[serde(default)]
    pub krp_linear: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(input: InputSpec, format: Format, layers: usize) -> Self {
        ModelConfig {
            input,
            format,
            placement: None,
            layers,
            m: 1,
            h: 1,
            head_input: HeadInputMode::Local,
            bias: None,
            residual: true,
            krp_linear: false,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.input.width()
    }

    /// The per-layer spec every stack layer shares.
    pub fn layer_spec(&self) -> NeuronFormatSpec {
        let mut spec = NeuronFormatSpec::new(self.format, self.width());
        if let Some(p) = self.placement {
            spec.placement = p;
        }
        if let Some(b) = self.bias {
            spec.bias = b;
        }
        spec.residual = self.residual;
        if self.format == Format::QnnAlpha {
            spec.krp = Some(KrpConfig {
                m: self.m,
                h: self.h,
                head_input: self.head_input,
            });
            spec.krp_linear = self.krp_linear;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(QnnError::Config("model needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(QnnError::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        match &self.input {
            InputSpec::Embedding { fields, d } => {
                if fields.is_empty() || *d == 0 {
                    return Err(QnnError::Config("embedding needs fields and d >= 1".into()));
                }
                if let Some(f) = fields.iter().find(|f| f.vocab_size == 0) {
                    return Err(QnnError::Config(format!("field {} has an empty vocabulary", f.name)));
                }
            }
            InputSpec::Dense { features, width } => {
                if *features == 0 || *width == 0 {
                    return Err(QnnError::Config("dense input needs features and width >= 1".into()));
                }
            }
        }
        self.layer_spec().validate()
    }

    /// Short stable digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// A minibatch of model inputs, row-major.
#[derive(Debug, Clone, Copy)]
pub enum Inputs<'a> {
    /// `[rows x fields]` vocabulary indices.
    Categorical(&'a [u32]),
    /// `[rows x features]` dense values.
    Dense(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
enum InputParams {
    Embedding(Vec<Tensor>),
    Dense { weight: Tensor, bias: Tensor },
}

/// Tape handles for every model parameter, in [`QnnModel::named_params`] order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    input: Vec<NodeId>,
    layers: Vec<BoundLayer>,
    projections: Vec<Option<NodeId>>,
    head_w: NodeId,
    head_b: NodeId,
}

impl BoundModel {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.input.clone();
        for (l, p) in self.layers.iter().zip(&self.projections) {
            v.extend(l.ids());
            v.extend(p.iter().copied());
        }
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

/// Embedding tables, layer stack, and logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct QnnModel {
    config: ModelConfig,
    spec: NeuronFormatSpec,
    input: InputParams,
    layers: Vec<LayerParams>,
    projections: Vec<Option<Tensor>>,
    head_w: Tensor,
    head_b: Tensor,
}

/// Standard deviation of the embedding initializer.
const EMBED_STD: f64 = 0.01;

impl QnnModel {
    /// Builds a model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spec = config.layer_spec();
        let width = config.width();
        let input = match &config.input {
            InputSpec::Embedding { fields, d } => {
                let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
                let tables = fields
                    .iter()
                    .map(|f| {
                        let data = (0..f.vocab_size * d).map(|_| normal.sample(&mut rng)).collect();
                        Tensor::new(vec![f.vocab_size, *d], data)
                    })
                    .collect::<Result<_>>()?;
                InputParams::Embedding(tables)
            }
            InputSpec::Dense { features, width } => InputParams::Dense {
                weight: fan_in_uniform(&[*width, *features], *features, &mut rng)?,
                bias: Tensor::zeros(&[*width])?,
            },
        };
        let mut layers = Vec::with_capacity(config.layers);
        let mut projections = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(init_params(&spec, &mut rng)?);
            projections.push(if spec.def().concat {
                Some(fan_in_uniform(&[width, 2 * width], 2 * width, &mut rng)?)
            } else {
                None
            });
        }
        Ok(QnnModel {
            head_w: fan_in_uniform(&[width], width, &mut rng)?,
            head_b: Tensor::zeros(&[1])?,
            config,
            spec,
            input,
            layers,
            projections,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_spec(&self) -> &NeuronFormatSpec {
        &self.spec
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn width(&self) -> usize {
        self.config.width()
    }

    pub fn dropout_rate(&self) -> f64 {
        self.config.dropout
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    /// Per-field embedding tables (empty for dense-input models).
    pub fn embeddings(&self) -> &[Tensor] {
        match &self.input {
            InputParams::Embedding(t) => t,
            InputParams::Dense { .. } => &[],
        }
    }

    pub fn head_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.head_w, &mut self.head_b)
    }

    /// All learnable tensors with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        match &self.input {
            InputParams::Embedding(tables) => {
                for (i, t) in tables.iter().enumerate() {
                    v.push((format!("embedding.{i}"), t));
                }
            }
            InputParams::Dense { weight, bias } => {
                v.push(("input.weight".into(), weight));
                v.push(("input.bias".into(), bias));
            }
        }
        for (l, (p, proj)) in self.layers.iter().zip(&self.projections).enumerate() {
            for (n, t) in p.named() {
                v.push((format!("layer{l}.{n}"), t));
            }
            if let Some(t) = proj {
                v.push((format!("layer{l}.proj"), t));
            }
        }
        v.push(("head.weight".into(), &self.head_w));
        v.push(("head.bias".into(), &self.head_b));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        match &mut self.input {
            InputParams::Embedding(tables) => {
                for (i, t) in tables.iter_mut().enumerate() {
                    v.push((format!("embedding.{i}"), t));
                }
            }
            InputParams::Dense { weight, bias } => {
                v.push(("input.weight".into(), weight));
                v.push(("input.bias".into(), bias));
            }
        }
        for (l, (p, proj)) in self.layers.iter_mut().zip(&mut self.projections).enumerate() {
            for (n, t) in p.named_mut() {
                v.push((format!("layer{l}.{n}"), t));
            }
            if let Some(t) = proj {
                v.push((format!("layer{l}.proj"), t));
            }
        }
        v.push(("head.weight".into(), &mut self.head_w));
        v.push(("head.bias".into(), &mut self.head_b));
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Learnable scalars in the interaction stack (layers and projections only).
    pub fn stack_param_count(&self) -> usize {
        let proj = self.projections.iter().flatten().map(Tensor::len).sum::<usize>();
        self.layers.len() * param_count(&self.spec) + proj
    }

    /// Puts every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        let input = match &self.input {
            InputParams::Embedding(tables) => tables.iter().map(|t| put(tape, t)).collect(),
            InputParams::Dense { weight, bias } => vec![put(tape, weight), put(tape, bias)],
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut projections = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().zip(&self.projections) {
            layers.push(l.bind(tape, trainable));
            projections.push(p.as_ref().map(|t| put(tape, t)));
        }
        let head_w = put(tape, &self.head_w);
        let head_b = put(tape, &self.head_b);
        BoundModel {
            input,
            layers,
            projections,
            head_w,
            head_b,
        }
    }

    /// Number of rows in `inputs`, validating its layout.
    pub fn rows(&self, inputs: Inputs<'_>) -> Result<usize> {
        let (len, per) = match (&self.config.input, inputs) {
            (InputSpec::Embedding { fields, .. }, Inputs::Categorical(idx)) => (idx.len(), fields.len()),
            (InputSpec::Dense { features, .. }, Inputs::Dense(x)) => (x.len(), *features),
            _ => {
                return Err(QnnError::Data(
                    "input kind does not match the model's input layer".into(),
                ))
            }
        };
        if len == 0 || len % per != 0 {
            return Err(QnnError::Data(format!(
                "input of length {len} is not a whole number of {per}-wide rows"
            )));
        }
        Ok(len / per)
    }

    /// First-order feature `X_1` as `[rows x D]`.
    pub fn embed(&self, tape: &mut Tape, bound: &BoundModel, inputs: Inputs<'_>) -> Result<NodeId> {
        let rows = self.rows(inputs)?;
        match (&self.config.input, inputs) {
            (InputSpec::Embedding { fields, .. }, Inputs::Categorical(idx)) => {
                let f = fields.len();
                let mut parts = Vec::with_capacity(f);
                for (i, field) in fields.iter().enumerate() {
                    let mut sel = Vec::with_capacity(rows);
                    for r in 0..rows {
                        let v = idx[r * f + i] as usize;
                        if v >= field.vocab_size {
                            return Err(QnnError::Data(format!(
                                "field '{}' row {r}: index {v} >= vocabulary size {}",
                                field.name, field.vocab_size
                            )));
                        }
                        sel.push(v);
                    }
                    parts.push(tape.gather(bound.input[i], &sel)?);
                }
                tape.concat(&parts)
            }
            (InputSpec::Dense { features, .. }, Inputs::Dense(x)) => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(QnnError::Data("non-finite dense input".into()));
                }
                let xi = tape.constant_vec(vec![rows, *features], x.to_vec())?;
                let z = tape.matvec(bound.input[0], xi)?;
                tape.add_row(z, bound.input[1])
            }
            _ => unreachable!("checked by rows()"),
        }
    }

    /// Clicks probabilities `[rows]`, clamped to `[1e-7, 1 - 1e-7]`.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        inputs: Inputs<'_>,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let x1 = self.embed(tape, bound, inputs)?;
        let rows = tape.shape(x1)[0];
        let mut x = x1;
        for (layer, proj) in bound.layers.iter().zip(&bound.projections) {
            let mut y = layer_forward(tape, &self.spec, layer, x, x1)?;
            if let Some(p) = proj {
                y = tape.matvec(*p, y)?;
            }
            x = tape.dropout(y, self.config.dropout, rng, training)?;
        }
        let w = tape.reshape(bound.head_w, vec![1, self.width()])?;
        let logit = tape.matvec(w, x)?;
        let logit = tape.add_row(logit, bound.head_b)?;
        let logit = tape.reshape(logit, vec![rows])?;
        let p = tape.activation(logit, ActivationKind::Sigmoid);
        Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }

    /// Inference: dropout off, no gradients.
    pub fn predict(&self, inputs: Inputs<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = self.forward_on_tape(&mut tape, &bound, inputs, false, &mut rng)?;
        Ok(tape.value(p).to_vec())
    }

    /// Stochastic forward with dropout seeded by `seed`.
    pub fn forward_train(&self, inputs: Inputs<'_>, seed: u64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.forward_on_tape(&mut tape, &bound, inputs, true, &mut rng)?;
        Ok(tape.value(p).to_vec())
    }

    /// Writes the binary checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config is always serializable");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        let params = self.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        QnnModel::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| bad_header())? != CHECKPOINT_MAGIC {
            return Err(bad_header());
        }
        let version = r.u32().map_err(|_| bad_header())?;
        if version != CHECKPOINT_VERSION {
            return Err(QnnError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| QnnError::Format(format!("checkpoint config: {e}")))?;
        // A fresh model gives the expected parameter names and shapes.
        let mut model = QnnModel::new(config)?;
        let count = r.u32()? as usize;
        let mut expected = model.named_params_mut();
        if count != expected.len() {
            return Err(QnnError::Integrity(format!(
                "checkpoint holds {count} tensors, config implies {}",
                expected.len()
            )));
        }
        for (want_name, t) in expected.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| QnnError::Integrity("parameter name is not UTF-8".into()))?;
            if name != want_name {
                return Err(QnnError::Integrity(format!(
                    "expected parameter {want_name}, found {name}"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            if shape != t.shape() {
                return Err(QnnError::Integrity(format!(
                    "{name}: stored shape {shape:?} vs config shape {:?}",
                    t.shape()
                )));
            }
            for v in t.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
        drop(expected);
        if r.pos != bytes.len() {
            return Err(QnnError::Integrity(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(model)
    }
}

fn bad_header() -> QnnError {
    QnnError::Format("not a QNN checkpoint (bad magic)".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| QnnError::Integrity("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
