//! Training losses and evaluation metrics.
//!
//! Plain-slice functions evaluate values; [`training_loss`] records the same
//! formulas on a [`Tape`] so they can be differentiated.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};
use crate::tensor::{NodeId, Tape};

/// Lower/upper probability clamp applied to every model output.
pub const PROB_EPS: f64 = 1e-7;

/// Mean binary cross-entropy `-(1/N) sum(y ln p + (1-y) ln(1-p))`.
pub fn bce(y: &[f64], p: &[f64]) -> Result<f64> {
    check_lengths(y.len(), p.len())?;
    let s: f64 = y
        .iter()
        .zip(p)
        .map(|(&y, &p)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        .sum();
    Ok(-s / y.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(QnnError::Argument(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(QnnError::Argument("empty batch".into()));
    }
    Ok(())
}

/// Inputs to the self-ensemble loss: two stochastic passes and their frozen mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SeLossInputs {
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y_bar: Vec<f64>,
    /// Frozen copy of `y_bar`; treated as a constant target.
    pub y_tilde: Vec<f64>,
}

impl SeLossInputs {
    pub fn new(y: &[f64], y1: &[f64], y2: &[f64]) -> Result<Self> {
        check_lengths(y.len(), y1.len())?;
        check_lengths(y.len(), y2.len())?;
        let y_bar: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| (a + b) / 2.0).collect();
        Ok(SeLossInputs {
            y: y.to_vec(),
            y1: y1.to_vec(),
            y2: y2.to_vec(),
            y_tilde: y_bar.clone(),
            y_bar,
        })
    }
}

/// `-(1/N) sum[ t ln(p1 p2) + (1-t) ln((1-p1)(1-p2)) ]` with `t` the frozen mean.
pub fn se_loss(inputs: &SeLossInputs) -> Result<f64> {
    let SeLossInputs { y1, y2, y_tilde, .. } = inputs;
    check_lengths(y_tilde.len(), y1.len())?;
    let s: f64 = y_tilde
        .iter()
        .zip(y1.iter().zip(y2))
        .map(|(&t, (&p1, &p2))| t * (p1 * p2).ln() + (1.0 - t) * ((1.0 - p1) * (1.0 - p2)).ln())
        .sum();
    Ok(-s / y_tilde.len() as f64)
}

/// `bce(y, (y1+y2)/2) + se_loss`.
pub fn total_loss(y: &[f64], y1: &[f64], y2: &[f64]) -> Result<f64> {
    let inputs = SeLossInputs::new(y, y1, y2)?;
    Ok(bce(y, &inputs.y_bar)? + se_loss(&inputs)?)
}

/// Area under the ROC curve via the Mann-Whitney U statistic with average ranks for ties.
pub fn auc(y: &[f64], scores: &[f64]) -> Result<f64> {
    check_lengths(y.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(QnnError::Numeric("NaN score passed to auc".into()));
    }
    let positives = y.iter().filter(|&&v| v > 0.5).count();
    let negatives = y.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(QnnError::MetricUndefined(format!(
            "auc needs both classes ({positives} positives, {negatives} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the average of i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| y[k] > 0.5).count() as f64 * avg;
        i = j + 1;
    }
    let (p, q) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Consistency term added to the CTR loss when more than one forward pass is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyLoss {
    /// Self-ensemble: each pass is fit to the frozen ensemble mean.
    #[default]
    Se,
    /// Symmetric Bernoulli KL between pairs of passes.
    KlSym,
    /// Mean squared disagreement between pairs of passes.
    MseConsistency,
    None,
}

impl ConsistencyLoss {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "se" => Ok(ConsistencyLoss::Se),
            "kl_sym" => Ok(ConsistencyLoss::KlSym),
            "mse_consistency" => Ok(ConsistencyLoss::MseConsistency),
            "none" => Ok(ConsistencyLoss::None),
            _ => Err(QnnError::Config(format!(
                "unknown loss '{name}' (valid: se, kl_sym, mse_consistency, none)"
            ))),
        }
    }
}

/// Records the training objective on the tape.
///
/// `passes` are probability nodes from independent stochastic forwards. The CTR
/// term is evaluated on their mean; the consistency term couples the passes.
/// A single pass reduces to plain BCE.
pub fn training_loss(
    tape: &mut Tape,
    y: &[f64],
    passes: &[NodeId],
    kind: ConsistencyLoss,
) -> Result<NodeId> {
    let first = *passes
        .first()
        .ok_or_else(|| QnnError::Argument("no forward passes".into()))?;
    if passes.len() == 1 {
        return tape.bce_mean(first, y);
    }
    let k = passes.len() as f64;
    let mut sum = first;
    for &p in &passes[1..] {
        sum = tape.add(sum, p)?;
    }
    let mean = tape.affine(sum, 1.0 / k, 0.0);
    let ctr = tape.bce_mean(mean, y)?;
    let extra = match kind {
        ConsistencyLoss::None => return Ok(ctr),
        ConsistencyLoss::Se => {
            let frozen = tape.value(mean).to_vec();
            let mut acc = tape.bce_mean(first, &frozen)?;
            for &p in &passes[1..] {
                let term = tape.bce_mean(p, &frozen)?;
                acc = tape.add(acc, term)?;
            }
            acc
        }
        ConsistencyLoss::KlSym | ConsistencyLoss::MseConsistency => {
            let mut terms = Vec::new();
            for i in 0..passes.len() {
                for j in i + 1..passes.len() {
                    terms.push(pair_term(tape, passes[i], passes[j], kind)?);
                }
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            tape.affine(acc, 1.0 / terms.len() as f64, 0.0)
        }
    };
    tape.add(ctr, extra)
}

fn pair_term(tape: &mut Tape, a: NodeId, b: NodeId, kind: ConsistencyLoss) -> Result<NodeId> {
    let diff = tape.sub(a, b)?;
    let per = if kind == ConsistencyLoss::MseConsistency {
        tape.hadamard(diff, diff)?
    } else {
        // KL(a||b) + KL(b||a) = (a - b) * (logit a - logit b)
        let la = logit(tape, a)?;
        let lb = logit(tape, b)?;
        let dl = tape.sub(la, lb)?;
        tape.hadamard(diff, dl)?
    };
    Ok(tape.mean(per))
}

fn logit(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let lp = tape.ln(p);
    let q = tape.affine(p, -1.0, 1.0);
    let lq = tape.ln(q);
    tape.sub(lp, lq)
}

/// Evaluation summary of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub logloss: f64,
    pub auc: f64,
    pub n: usize,
    pub latency_ms_per_100: Option<f64>,
}

impl MetricReport {
    pub fn compute(y: &[f64], p: &[f64]) -> Result<Self> {
        Ok(MetricReport {
            logloss: bce(y, p)?,
            auc: auc(y, p)?,
            n: y.len(),
            latency_ms_per_100: None,
        })
    }
}

/// Wall-clock latency per 100 samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms_per_100: f64,
    pub p95_ms_per_100: f64,
    pub repetitions: usize,
}

/// Times `sweep` (which must process `samples` rows) `reps` times after `warmup` untimed runs.
pub fn measure_latency<F: FnMut() -> Result<()>>(
    mut sweep: F,
    samples: usize,
    warmup: usize,
    reps: usize,
) -> Result<LatencyStats> {
    if samples == 0 || reps == 0 {
        return Err(QnnError::Argument("latency needs samples and repetitions".into()));
    }
    for _ in 0..warmup {
        sweep()?;
    }
    let mut per100 = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        sweep()?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        per100.push(ms * 100.0 / samples as f64);
    }
    per100.sort_by(f64::total_cmp);
    let p95_idx = ((reps as f64 * 0.95).ceil() as usize).clamp(1, reps) - 1;
    Ok(LatencyStats {
        median_ms_per_100: median_sorted(&per100),
        p95_ms_per_100: per100[p95_idx],
        repetitions: reps,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
