//! Neuron formats: the linear, cross, and quadratic layer formulas plus the
//! multi-head Khatri-Rao block.
//!
//! Every format is a closed-form map `Phi(X)` over a width-`D` input built
//! from up to three `D x D` weights (`W_a`, `W_b`, `W_c`). Formats whose
//! formula contains an inner activation (t19, t24, t25, qnn_alpha) expose a
//! *mid site*; everything else can only be wrapped by a post activation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};
use crate::tensor::{ActivationKind, NodeId, Tape, Tensor};

/// Stable identifiers of every registered format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    Mlp,
    CrossNetV2,
    /// `T1..=T25`.
    T(u8),
    QnnAlpha,
}

impl Format {
    /// Registry order: mlp, crossnetv2, t1..t25, qnn_alpha.
    pub fn all() -> Vec<Format> {
        let mut v = vec![Format::Mlp, Format::CrossNetV2];
        v.extend((1..=25).map(Format::T));
        v.push(Format::QnnAlpha);
        v
    }

    pub fn name(self) -> String {
        match self {
            Format::Mlp => "mlp".into(),
            Format::CrossNetV2 => "crossnetv2".into(),
            Format::T(n) => format!("t{n}"),
            Format::QnnAlpha => "qnn_alpha".into(),
        }
    }

    pub fn def(self) -> FormatDef {
        registry_lookup(&self.name()).expect("every Format variant is registered")
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Format {
    type Err = QnnError;

    fn from_str(s: &str) -> Result<Self> {
        registry_lookup(s).map(|d| d.format)
    }
}

impl Serialize for Format {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Format {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One learnable matrix slot of a format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSlot {
    Wa,
    Wb,
    Wc,
}

/// Static description of a format's formula.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatDef {
    pub format: Format,
    pub formula: &'static str,
    pub weights: &'static [WeightSlot],
    /// Term that receives the mid activation, if the formula has one.
    pub mid_site: Option<&'static str>,
    /// Whether the formula ends in a `+ X` residual term.
    pub residual: bool,
    /// Output width is `2D` (`A || B` formats).
    pub concat: bool,
    /// Reads the first-order feature `X_1` in addition to `X`.
    pub uses_first_order: bool,
    /// Owns the learnable `alpha` gate.
    pub gate: bool,
}

use WeightSlot::{Wa, Wb, Wc};

const A: &[WeightSlot] = &[Wa];
const AB: &[WeightSlot] = &[Wa, Wb];
const ABC: &[WeightSlot] = &[Wa, Wb, Wc];

fn row(
    format: Format,
    formula: &'static str,
    weights: &'static [WeightSlot],
    mid_site: Option<&'static str>,
    residual: bool,
    concat: bool,
) -> FormatDef {
    FormatDef {
        format,
        formula,
        weights,
        mid_site,
        residual,
        concat,
        uses_first_order: format == Format::CrossNetV2,
        gate: format == Format::T(22),
    }
}

/// Looks up a format by its lowercase name.
pub fn registry_lookup(name: &str) -> Result<FormatDef> {
    use Format::*;
    let def = match name {
        "mlp" => row(Mlp, "W_a X", A, None, false, false),
        "crossnetv2" => row(CrossNetV2, "X_1 ⊙ W_a X + X", A, None, true, false),
        "t1" => row(T(1), "X^T W_a X + W_b X", AB, None, false, false),
        "t2" => row(T(2), "X^T W_a X", A, None, false, false),
        "t3" => row(T(3), "W_a X²", A, None, false, false),
        "t4" => row(T(4), "(W_a X)²", A, None, false, false),
        "t5" => row(T(5), "W_a X ⊙ W_b X", AB, None, false, false),
        "t6" => row(T(6), "X^T W_a X + W_b X²", AB, None, false, false),
        "t7" => row(T(7), "W_a X ⊙ W_b X + W_c X²", ABC, None, false, false),
        "t8" => row(T(8), "W_a X ⊙ W_b X + W_c X", ABC, None, false, false),
        "t9" => row(T(9), "X ⊙ W_a X + X", A, None, true, false),
        "t10" => row(T(10), "X ⊙ W_a X + W_b X", AB, None, false, false),
        "t11" => row(T(11), "W_a X || (W_b X)²", AB, None, false, true),
        "t12" => row(T(12), "W_a X ⊙ W_b X || W_c X²", ABC, None, false, true),
        "t13" => row(T(13), "W_a X ⊙ W_b X || W_c X", ABC, None, false, true),
        "t14" => row(T(14), "W_a X ⊙ W_b X || W_b X", AB, None, false, true),
        "t15" => row(T(15), "W_a X || (W_a X)²", A, None, false, true),
        "t16" => row(T(16), "X ⊙ (W_a X ⊙ W_b X) + X", AB, None, true, false),
        "t17" => row(T(17), "X ⊙ (W_a X + W_b X) + X", AB, None, true, false),
        "t18" => row(T(18), "X ⊙ W_a X || X", A, None, false, true),
        "t19" => row(T(19), "X ⊙ σ_mid(W_a X) + X", A, Some("W_a X"), true, false),
        "t20" => row(T(20), "X ⊙ W_a X + W_a X + X", A, None, true, false),
        "t21" => row(T(21), "(X ⊙ W_a X)² + X", A, None, true, false),
        "t22" => row(T(22), "X ⊙ W_a X + α ⊙ X", A, None, false, false),
        "t23" => row(T(23), "W_a X ⊙ W_b X + X", AB, None, true, false),
        "t24" => row(T(24), "W_a X ⊙ σ_mid(W_b X) + X", AB, Some("W_b X"), true, false),
        "t25" => row(T(25), "X ⊙ W_a(σ_mid(W_b X)) + X", AB, Some("W_b X"), true, false),
        "qnn_alpha" => row(
            QnnAlpha,
            "||_h [ X^h • σ_mid(W^h X) + X^h ]",
            &[],
            Some("W^h X"),
            true,
            false,
        ),
        _ => {
            let valid: Vec<String> = Format::all().into_iter().map(Format::name).collect();
            return Err(QnnError::Config(format!(
                "unknown neuron format '{name}' (valid: {})",
                valid.join(", ")
            )));
        }
    };
    Ok(def)
}

/// Where a format's activation goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    /// The formula as written. Mid-site formats keep their ReLU.
    #[default]
    None,
    /// `act(Phi(X))`.
    Post,
    /// `kind` replaces the formula's mid activation; only valid on mid-site formats.
    Mid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationPlacement {
    pub mode: PlacementMode,
    pub kind: ActivationKind,
}

impl ActivationPlacement {
    pub fn none() -> Self {
        ActivationPlacement {
            mode: PlacementMode::None,
            kind: ActivationKind::Relu,
        }
    }

    pub fn post(kind: ActivationKind) -> Self {
        ActivationPlacement {
            mode: PlacementMode::Post,
            kind,
        }
    }

    pub fn mid(kind: ActivationKind) -> Self {
        ActivationPlacement {
            mode: PlacementMode::Mid,
            kind,
        }
    }

    /// Parses `none`, `post`, `mid`, optionally suffixed with `:<activation>`.
    pub fn parse(s: &str) -> Result<Self> {
        let (mode, kind) = match s.split_once(':') {
            Some((m, k)) => (m, ActivationKind::parse(k)?),
            None => (s, ActivationKind::Relu),
        };
        let mode = match mode {
            "none" => PlacementMode::None,
            "post" => PlacementMode::Post,
            "mid" => PlacementMode::Mid,
            _ => {
                return Err(QnnError::Config(format!(
                    "unknown placement '{s}' (valid: none, post, mid[:act])"
                )))
            }
        };
        Ok(ActivationPlacement { mode, kind })
    }

    pub fn label(&self) -> String {
        match (self.mode, self.kind) {
            (PlacementMode::None, _) => "none".into(),
            (PlacementMode::Post, ActivationKind::Relu) => "post".into(),
            (PlacementMode::Mid, ActivationKind::Relu) => "mid".into(),
            (PlacementMode::Post, k) => format!("post:{}", k.name()),
            (PlacementMode::Mid, k) => format!("mid:{}", k.name()),
        }
    }
}

impl Default for ActivationPlacement {
    fn default() -> Self {
        ActivationPlacement::none()
    }
}

/// How each qnn_alpha head forms its expansion input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadInputMode {
    /// Head `h` expands its own slice: weights `M x (D/H) x (D/H)`.
    #[default]
    Local,
    /// Head `h` expands the whole input: weights `M x (D/H) x D`.
    Full,
}

/// Multi-head Khatri-Rao hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KrpConfig {
    pub m: usize,
    pub h: usize,
    #[serde(default)]
    pub head_input: HeadInputMode,
}

/// A fully configured layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeuronFormatSpec {
    pub format: Format,
    pub placement: ActivationPlacement,
    pub dims: usize,
    pub krp: Option<KrpConfig>,
    pub bias: bool,
    /// Keep the formula's `+ X` term (ignored for formats without one).
    pub residual: bool,
    /// qnn_alpha only: pool the expansion without multiplying by the head slice.
    pub krp_linear: bool,
}

impl NeuronFormatSpec {
    /// Defaults: bias on for mlp only, residual on, no post activation
    /// (mlp defaults to post ReLU, which is the standard MLP layer).
    pub fn new(format: Format, dims: usize) -> Self {
        let mlp = format == Format::Mlp;
        NeuronFormatSpec {
            format,
            placement: if mlp {
                ActivationPlacement::post(ActivationKind::Relu)
            } else {
                ActivationPlacement::none()
            },
            dims,
            krp: (format == Format::QnnAlpha).then_some(KrpConfig {
                m: 1,
                h: 1,
                head_input: HeadInputMode::Local,
            }),
            bias: mlp,
            residual: true,
            krp_linear: false,
        }
    }

    pub fn qnn_alpha(dims: usize, m: usize, h: usize) -> Self {
        NeuronFormatSpec {
            krp: Some(KrpConfig {
                m,
                h,
                head_input: HeadInputMode::Local,
            }),
            ..NeuronFormatSpec::new(Format::QnnAlpha, dims)
        }
    }

    pub fn with_placement(mut self, placement: ActivationPlacement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn def(&self) -> FormatDef {
        self.format.def()
    }

    pub fn validate(&self) -> Result<()> {
        let def = self.def();
        if self.dims == 0 {
            return Err(QnnError::Config("layer width must be >= 1".into()));
        }
        if self.placement.mode == PlacementMode::Mid && def.mid_site.is_none() {
            return Err(QnnError::Config(format!(
                "format {} has no mid-activation site",
                self.format
            )));
        }
        match (self.format, self.krp) {
            (Format::QnnAlpha, Some(k)) => {
                if k.m == 0 || k.h == 0 {
                    return Err(QnnError::Config("qnn_alpha needs M >= 1 and H >= 1".into()));
                }
                if !self.dims.is_multiple_of(k.h) {
                    return Err(QnnError::Config(format!(
                        "qnn_alpha head count H={} does not divide D={}",
                        k.h, self.dims
                    )));
                }
            }
            (Format::QnnAlpha, None) => {
                return Err(QnnError::Config("qnn_alpha requires M and H".into()))
            }
            (_, Some(_)) => {
                return Err(QnnError::Config(format!(
                    "M/H only apply to qnn_alpha, not {}",
                    self.format
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Width of the layer output (`2D` for concat formats).
    pub fn out_dims(&self) -> usize {
        if self.def().concat {
            2 * self.dims
        } else {
            self.dims
        }
    }

    fn mid_kind(&self) -> ActivationKind {
        if self.placement.mode == PlacementMode::Mid {
            self.placement.kind
        } else {
            ActivationKind::Relu
        }
    }

    /// Shape of each qnn_alpha head weight: `[M, D/H, in]`.
    pub fn head_weight_shape(&self) -> Option<[usize; 3]> {
        self.krp.map(|k| {
            let hd = self.dims / k.h;
            let inp = match k.head_input {
                HeadInputMode::Local => hd,
                HeadInputMode::Full => self.dims,
            };
            [k.m, hd, inp]
        })
    }
}

/// Learnable tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wa: Option<Tensor>,
    pub wb: Option<Tensor>,
    pub wc: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub alpha: Option<Tensor>,
    pub krp_weights: Vec<Tensor>,
}

impl LayerParams {
    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (n, t) in [
            ("w_a", &self.wa),
            ("w_b", &self.wb),
            ("w_c", &self.wc),
            ("bias", &self.bias),
            ("alpha", &self.alpha),
        ] {
            if let Some(t) = t {
                v.push((n.to_string(), t));
            }
        }
        for (h, t) in self.krp_weights.iter().enumerate() {
            v.push((format!("krp_{h}"), t));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (n, t) in [
            ("w_a", &mut self.wa),
            ("w_b", &mut self.wb),
            ("w_c", &mut self.wc),
            ("bias", &mut self.bias),
            ("alpha", &mut self.alpha),
        ] {
            if let Some(t) = t.as_mut() {
                v.push((n.to_string(), t));
            }
        }
        for (h, t) in self.krp_weights.iter_mut().enumerate() {
            v.push((format!("krp_{h}"), t));
        }
        v
    }

    /// Puts every tensor on the tape; `trainable` selects leaf vs constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLayer {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        BoundLayer {
            wa: self.wa.as_ref().map(&mut put),
            wb: self.wb.as_ref().map(&mut put),
            wc: self.wc.as_ref().map(&mut put),
            bias: self.bias.as_ref().map(&mut put),
            alpha: self.alpha.as_ref().map(&mut put),
            krp: self.krp_weights.iter().map(put).collect(),
        }
    }
}

/// Tape handles for a layer's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundLayer {
    pub wa: Option<NodeId>,
    pub wb: Option<NodeId>,
    pub wc: Option<NodeId>,
    pub bias: Option<NodeId>,
    pub alpha: Option<NodeId>,
    pub krp: Vec<NodeId>,
}

impl BoundLayer {
    /// Handles in the same order as [`LayerParams::named`].
    pub fn ids(&self) -> Vec<NodeId> {
        [self.wa, self.wb, self.wc, self.bias, self.alpha]
            .into_iter()
            .flatten()
            .chain(self.krp.iter().copied())
            .collect()
    }
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Draws fresh parameters for `spec`.
pub fn init_params<R: Rng + ?Sized>(spec: &NeuronFormatSpec, rng: &mut R) -> Result<LayerParams> {
    spec.validate()?;
    let def = spec.def();
    let d = spec.dims;
    let mut draw = |slot| -> Result<Option<Tensor>> {
        if def.weights.contains(&slot) {
            fan_in_uniform(&[d, d], d, rng).map(Some)
        } else {
            Ok(None)
        }
    };
    let wa = draw(Wa)?;
    let wb = draw(Wb)?;
    let wc = draw(Wc)?;
    let mut krp_weights = Vec::new();
    if let (Some(k), Some(shape)) = (spec.krp, spec.head_weight_shape()) {
        for _ in 0..k.h {
            krp_weights.push(fan_in_uniform(&shape, shape[2], rng)?);
        }
    }
    Ok(LayerParams {
        wa,
        wb,
        wc,
        bias: if spec.bias { Some(Tensor::zeros(&[d])?) } else { None },
        alpha: if def.gate { Some(Tensor::ones(&[d])?) } else { None },
        krp_weights,
    })
}

/// Exact number of learnable scalars in one layer.
pub fn param_count(spec: &NeuronFormatSpec) -> usize {
    let def = spec.def();
    let d = spec.dims;
    let mut n = def.weights.len() * d * d;
    if spec.bias {
        n += d;
    }
    if def.gate {
        n += d;
    }
    if let (Some(k), Some(shape)) = (spec.krp, spec.head_weight_shape()) {
        n += k.h * shape.iter().product::<usize>();
    }
    n
}

/// Evaluates the layer formula on the tape.
///
/// `x` is `[.. x D]`; `x1` is the first-order feature (read by crossnetv2 only).
pub fn layer_forward(
    tape: &mut Tape,
    spec: &NeuronFormatSpec,
    p: &BoundLayer,
    x: NodeId,
    x1: NodeId,
) -> Result<NodeId> {
    let width = *tape.shape(x).last().unwrap();
    if width != spec.dims {
        return Err(QnnError::dim("layer_forward", &[spec.dims], tape.shape(x)));
    }
    if tape.shape(x1) != tape.shape(x) {
        return Err(QnnError::dim("layer_forward first-order", tape.shape(x), tape.shape(x1)));
    }
    let def = spec.def();
    let mid = spec.mid_kind();
    let need = |w: Option<NodeId>, name: &str| {
        w.ok_or_else(|| QnnError::Config(format!("{} is missing weight {name}", spec.format)))
    };

    if spec.format == Format::QnnAlpha {
        let out = qnn_alpha_forward(tape, spec, &p.krp, x)?;
        let out = match p.bias {
            Some(b) => tape.add_row(out, b)?,
            None => out,
        };
        return Ok(post(tape, spec, out));
    }

    // W_a X carries the bias when present.
    let wa = need(p.wa, "W_a")?;
    let ax = tape.matvec(wa, x)?;
    let ax = match p.bias {
        Some(b) => tape.add_row(ax, b)?,
        None => ax,
    };
    let bx = |tape: &mut Tape, input: NodeId| -> Result<NodeId> {
        let wb = need(p.wb, "W_b")?;
        tape.matvec(wb, input)
    };
    let cx = |tape: &mut Tape, input: NodeId| -> Result<NodeId> {
        let wc = need(p.wc, "W_c")?;
        tape.matvec(wc, input)
    };
    // X^T (W_a X) broadcast over the width.
    let quad = |tape: &mut Tape| -> Result<NodeId> {
        let xa = tape.hadamard(x, ax)?;
        let s = tape.row_sum(xa);
        tape.broadcast(s, width)
    };
    let sq = |tape: &mut Tape, v: NodeId| tape.hadamard(v, v);

    let body = match spec.format {
        Format::Mlp => ax,
        Format::CrossNetV2 => tape.hadamard(x1, ax)?,
        Format::T(n) => match n {
            1 => {
                let q = quad(tape)?;
                let b = bx(tape, x)?;
                tape.add(q, b)?
            }
            2 => quad(tape)?,
            3 => {
                // bias attaches to the single linear map, here applied to X².
                let x2 = sq(tape, x)?;
                let v = tape.matvec(wa, x2)?;
                match p.bias {
                    Some(b) => tape.add_row(v, b)?,
                    None => v,
                }
            }
            4 => sq(tape, ax)?,
            5 => {
                let b = bx(tape, x)?;
                tape.hadamard(ax, b)?
            }
            6 => {
                let q = quad(tape)?;
                let x2 = sq(tape, x)?;
                let b = bx(tape, x2)?;
                tape.add(q, b)?
            }
            7 | 8 => {
                let b = bx(tape, x)?;
                let ab = tape.hadamard(ax, b)?;
                let c = if n == 7 {
                    let x2 = sq(tape, x)?;
                    cx(tape, x2)?
                } else {
                    cx(tape, x)?
                };
                tape.add(ab, c)?
            }
            9 | 20 | 21 => tape.hadamard(x, ax)?,
            10 => {
                let xa = tape.hadamard(x, ax)?;
                let b = bx(tape, x)?;
                tape.add(xa, b)?
            }
            11 => {
                let b = bx(tape, x)?;
                let b2 = sq(tape, b)?;
                tape.concat(&[ax, b2])?
            }
            12..=14 => {
                let b = bx(tape, x)?;
                let ab = tape.hadamard(ax, b)?;
                let right = match n {
                    12 => {
                        let x2 = sq(tape, x)?;
                        cx(tape, x2)?
                    }
                    13 => cx(tape, x)?,
                    _ => b,
                };
                tape.concat(&[ab, right])?
            }
            15 => {
                let a2 = sq(tape, ax)?;
                tape.concat(&[ax, a2])?
            }
            16 => {
                let b = bx(tape, x)?;
                let ab = tape.hadamard(ax, b)?;
                tape.hadamard(x, ab)?
            }
            17 => {
                let b = bx(tape, x)?;
                let s = tape.add(ax, b)?;
                tape.hadamard(x, s)?
            }
            18 => {
                let xa = tape.hadamard(x, ax)?;
                tape.concat(&[xa, x])?
            }
            19 => {
                let m = tape.activation(ax, mid);
                tape.hadamard(x, m)?
            }
            22 => {
                let xa = tape.hadamard(x, ax)?;
                let alpha = need(p.alpha, "alpha")?;
                let gated = tape.mul_row(x, alpha)?;
                tape.add(xa, gated)?
            }
            23 => {
                let b = bx(tape, x)?;
                tape.hadamard(ax, b)?
            }
            24 => {
                let b = bx(tape, x)?;
                let m = tape.activation(b, mid);
                tape.hadamard(ax, m)?
            }
            25 => {
                let b = bx(tape, x)?;
                let m = tape.activation(b, mid);
                // W_a applied to the activated expansion; bias follows W_a.
                let inner = tape.matvec(wa, m)?;
                let inner = match p.bias {
                    Some(bias) => tape.add_row(inner, bias)?,
                    None => inner,
                };
                tape.hadamard(x, inner)?
            }
            _ => unreachable!("registry only holds t1..=t25"),
        },
        Format::QnnAlpha => unreachable!(),
    };
    let body = match spec.format {
        Format::T(20) => tape.add(body, ax)?,
        Format::T(21) => sq(tape, body)?,
        _ => body,
    };
    let out = if def.residual && spec.residual {
        tape.add(body, x)?
    } else {
        body
    };
    Ok(post(tape, spec, out))
}

fn post(tape: &mut Tape, spec: &NeuronFormatSpec, out: NodeId) -> NodeId {
    if spec.placement.mode == PlacementMode::Post {
        tape.activation(out, spec.placement.kind)
    } else {
        out
    }
}

/// Multi-head sum-pooled Khatri-Rao block.
///
/// The input is split into `H` contiguous slices of width `D/H`. Head `h` maps
/// its input through `M x (D/H) x in` weights to an `M x (D/H)` expansion,
/// applies the mid activation, combines it with its slice via `krp_sum`, adds
/// the slice back, and the heads are concatenated.
pub fn qnn_alpha_forward(
    tape: &mut Tape,
    spec: &NeuronFormatSpec,
    heads: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    spec.validate()?;
    let k = spec
        .krp
        .ok_or_else(|| QnnError::Config("qnn_alpha requires M and H".into()))?;
    let [m, hd, inp] = spec.head_weight_shape().unwrap();
    if heads.len() != k.h {
        return Err(QnnError::Config(format!(
            "qnn_alpha expects {} head weights, got {}",
            k.h,
            heads.len()
        )));
    }
    let lead = tape.shape(x)[..tape.shape(x).len() - 1].to_vec();
    let mid = spec.mid_kind();
    let mut outs = Vec::with_capacity(k.h);
    for (h, &w) in heads.iter().enumerate() {
        let xh = if k.h == 1 {
            x
        } else {
            tape.slice(x, h * hd, hd)?
        };
        let src = match k.head_input {
            HeadInputMode::Local => xh,
            HeadInputMode::Full => x,
        };
        let w2 = tape.reshape(w, vec![m * hd, inp])?;
        let z = tape.matvec(w2, src)?;
        let mut zshape = lead.clone();
        zshape.extend([m, hd]);
        let z = tape.reshape(z, zshape)?;
        let z = tape.activation(z, mid);
        let inter = if spec.krp_linear {
            let ones = tape.constant(&Tensor::ones(tape.shape(xh))?);
            tape.krp_sum(ones, z)?
        } else {
            tape.krp_sum(xh, z)?
        };
        let psi = if spec.residual {
            tape.add(inter, xh)?
        } else {
            inter
        };
        outs.push(psi);
    }
    tape.concat(&outs)
}
