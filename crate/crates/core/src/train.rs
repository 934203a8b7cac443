//! Optimization loop: Adam, reduce-on-plateau, early stopping, multi-pass
//! self-ensemble training, evaluation and reporting.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, derive_seed, EncodedDataset, Points};
use crate::error::{QnnError, Result};
use crate::loss_metrics::{training_loss, ConsistencyLoss, MetricReport};
use crate::model::{Inputs, QnnModel};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub plateau_factor: f64,
    /// Minimum validation AUC gain that counts as an improvement.
    pub min_delta: f64,
    pub seed: u64,
    pub se_enabled: bool,
    pub forward_passes: usize,
    pub consistency: ConsistencyLoss,
    /// Global gradient-norm ceiling; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4096,
            max_epochs: 100,
            patience: 2,
            plateau_factor: 10.0,
            min_delta: 1e-6,
            seed: 2024,
            se_enabled: true,
            forward_passes: 2,
            consistency: ConsistencyLoss::Se,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QnnError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.plateau_factor.is_nan() || self.plateau_factor <= 1.0 {
            return bad(format!("plateau_factor must be > 1, got {}", self.plateau_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs is 0: nothing to train".into());
        }
        if self.forward_passes == 0 {
            return bad("forward_passes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps > 0".into());
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be > 0".into());
        }
        Ok(())
    }

    /// Consistency term actually applied (none when SE is switched off).
    pub fn loss_kind(&self) -> ConsistencyLoss {
        if self.se_enabled {
            self.consistency
        } else {
            ConsistencyLoss::None
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(QnnError::Argument(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(QnnError::Argument(format!(
                "adam: param of {} values vs grad of {}",
                p.len(),
                g.len()
            )));
        }
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A labelled example set the trainer can batch.
#[derive(Debug, Clone, Copy)]
pub enum Examples<'a> {
    Categorical(&'a EncodedDataset),
    Dense(&'a Points),
}

/// Owned minibatch inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs {
    Categorical(Vec<u32>),
    Dense(Vec<f64>),
}

impl BatchInputs {
    pub fn as_inputs(&self) -> Inputs<'_> {
        match self {
            BatchInputs::Categorical(v) => Inputs::Categorical(v),
            BatchInputs::Dense(v) => Inputs::Dense(v),
        }
    }
}

impl Examples<'_> {
    pub fn len(&self) -> usize {
        match self {
            Examples::Categorical(d) => d.len(),
            Examples::Dense(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<f64> {
        let y = match self {
            Examples::Categorical(d) => d.labels(),
            Examples::Dense(p) => &p.y,
        };
        y.iter().map(|&v| v as f64).collect()
    }

    pub fn gather(&self, rows: &[usize]) -> (BatchInputs, Vec<f64>) {
        match self {
            Examples::Categorical(d) => {
                let f = d.fields();
                let mut idx = Vec::with_capacity(rows.len() * f);
                for &r in rows {
                    idx.extend_from_slice(&d.indices()[r * f..(r + 1) * f]);
                }
                let y = rows.iter().map(|&r| d.labels()[r] as f64).collect();
                (BatchInputs::Categorical(idx), y)
            }
            Examples::Dense(p) => {
                let x = rows.iter().flat_map(|&r| [p.x[2 * r], p.x[2 * r + 1]]).collect();
                let y = rows.iter().map(|&r| p.y[r] as f64).collect();
                (BatchInputs::Dense(x), y)
            }
        }
    }

    fn range(&self, start: usize, end: usize) -> BatchInputs {
        match self {
            Examples::Categorical(d) => {
                let f = d.fields();
                BatchInputs::Categorical(d.indices()[start * f..end * f].to_vec())
            }
            Examples::Dense(p) => BatchInputs::Dense(p.x[2 * start..2 * end].to_vec()),
        }
    }
}

/// Loss value and per-parameter gradients (in `named_params` order) for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Runs `forward_passes` stochastic forwards, the training loss, and backward.
pub fn loss_and_grads(
    model: &QnnModel,
    inputs: Inputs<'_>,
    y: &[f64],
    cfg: &TrainConfig,
    step_seed: &[u64],
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut passes = Vec::with_capacity(cfg.forward_passes);
    for k in 0..cfg.forward_passes {
        let mut parts = step_seed.to_vec();
        parts.push(k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&parts));
        passes.push(model.forward_on_tape(&mut tape, &bound, inputs, true, &mut rng)?);
    }
    let loss = training_loss(&mut tape, y, &passes, cfg.loss_kind())?;
    let value = tape.value(loss)[0];
    tape.backward(loss)?;
    let grads = bound
        .ids()
        .into_iter()
        .map(|id| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).len()],
        })
        .collect();
    Ok(StepResult { loss: value, grads })
}

/// Predicted probabilities for every example, dropout off, in chunks.
pub fn predict_all(model: &QnnModel, data: Examples<'_>, chunk: usize) -> Result<Vec<f64>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        out.extend(model.predict(data.range(start, end).as_inputs())?);
        start = end;
    }
    Ok(out)
}

/// Single inference pass over a split.
pub fn evaluate(model: &QnnModel, data: Examples<'_>) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(QnnError::Data("cannot evaluate an empty split".into()));
    }
    let p = predict_all(model, data, 8192)?;
    MetricReport::compute(&data.labels(), &p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_logloss: Option<f64>,
    pub val_auc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub stop_reason: StopReason,
}

impl TrainReport {
    /// One JSON object per epoch followed by a summary object.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        let summary = serde_json::json!({
            "summary": {
                "best_epoch": self.best_epoch,
                "best_val_auc": self.best_val_auc,
                "stop_reason": self.stop_reason,
                "epochs_run": self.epochs.len(),
                "seconds": self.total_seconds(),
            }
        });
        serde_json::to_writer(&mut w, &summary)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> TrainReport {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Trains in place and leaves the best-epoch parameters in `model`.
///
/// With `val = None` there is no monitoring: every epoch runs and the final
/// parameters are kept.
pub fn train(
    model: &mut QnnModel,
    train_set: Examples<'_>,
    val: Option<Examples<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(QnnError::Data("training split is empty".into()));
    }
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut state = AdamState::new(&sizes);
    let mut lr = cfg.lr;
    let mut best: Option<(f64, QnnModel)> = None;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, rows) in batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)?
            .iter()
            .enumerate()
        {
            let (inputs, y) = train_set.gather(rows);
            let step_seed = [cfg.seed, epoch as u64, b as u64];
            let StepResult { loss, mut grads } =
                loss_and_grads(model, inputs.as_inputs(), &y, cfg, &step_seed)?;
            if !loss.is_finite() {
                return Err(QnnError::Numeric(format!(
                    "loss is {loss} at epoch {epoch}, batch {b}"
                )));
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(QnnError::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, batch {b} (loss {loss})"
                )));
            }
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            let mut params: Vec<&mut Tensor> =
                model.named_params_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &grads, &mut state, lr, cfg)?;
            loss_sum += loss * rows.len() as f64;
            seen += rows.len();
        }

        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_logloss: None,
            val_auc: None,
            lr,
            seconds: 0.0,
        };
        let mut stop = false;
        match val {
            Some(v) => {
                let m = evaluate(model, v)?;
                record.val_logloss = Some(m.logloss);
                record.val_auc = Some(m.auc);
                let improved = best.as_ref().is_none_or(|(a, _)| m.auc >= a + cfg.min_delta);
                if improved {
                    best = Some((m.auc, model.clone()));
                    best_epoch = epoch;
                    bad_epochs = 0;
                } else {
                    bad_epochs += 1;
                    lr /= cfg.plateau_factor;
                    stop = bad_epochs >= cfg.patience;
                }
            }
            None => best_epoch = epoch,
        }
        record.seconds = started.elapsed().as_secs_f64();
        epochs.push(record);
        if stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let best_val_auc = best.as_ref().map(|(a, _)| *a);
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_auc,
        stop_reason,
    })
}
