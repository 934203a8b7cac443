//! Checks shared by the acceptance suite and the property tests. Each
//! criterion returns `Ok(detail)` on success and `Err(detail)` otherwise.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use qnn_core::commands::{
    bench_model, prepare, run_boundary, run_training, BenchOptions, BoundaryOptions, LoadedData, PrepOptions,
    RunConfig, SyntheticKind,
};
use qnn_core::data::{derive_seed, LogBase};
use qnn_core::layers::{init_params, layer_forward, param_count, LayerParams};
use qnn_core::loss_metrics::{auc, bce, se_loss, SeLossInputs};
use qnn_core::model::FieldSpec;
use qnn_core::train::{loss_and_grads, TrainConfig};
use qnn_core::{
    ActivationKind, ActivationPlacement, Format, HeadInputMode, InputSpec, Inputs, ModelConfig,
    NeuronFormatSpec, NodeId, QnnModel, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;
type Ablation = (&'static str, fn(&mut RunConfig));

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

/// `|a - n| / (|a| + |n|)` over whole tensors.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Worst relative error between tape gradients and central differences of
/// the scalar `f` with respect to each of `inputs`.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &ids);
    tape.backward(out).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &ids);
        tape.value(out)[0]
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        let mut work = inputs.to_vec();
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let fp = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let fm = eval(&work);
            work[k].data_mut()[i] = orig;
            *n = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Placements a format accepts, with smooth activations so the difference
/// quotient never straddles a kink.
pub fn smooth_placements(format: Format) -> Vec<ActivationPlacement> {
    let mut v = vec![ActivationPlacement::none(), ActivationPlacement::post(ActivationKind::Tanh)];
    if format.def().mid_site.is_some() {
        v.push(ActivationPlacement::mid(ActivationKind::Tanh));
        v.push(ActivationPlacement::mid(ActivationKind::Sigmoid));
    }
    v
}

/// Binds `params` on the tape with every slot replaced by the given leaves, in `named()` order.
pub fn bind_with(params: &LayerParams, tape: &mut Tape, ids: &[NodeId]) -> qnn_core::layers::BoundLayer {
    let mut bound = params.bind(tape, false);
    let mut it = ids.iter().copied();
    for slot in [&mut bound.wa, &mut bound.wb, &mut bound.wc, &mut bound.bias, &mut bound.alpha] {
        if slot.is_some() {
            *slot = it.next();
        }
    }
    for h in bound.krp.iter_mut() {
        *h = it.next().unwrap();
    }
    bound
}

/// Worst gradient error of one layer over parameters and both inputs.
pub fn layer_grad_error(spec: &NeuronFormatSpec, rng: &mut ChaCha8Rng) -> f64 {
    let d = spec.dims;
    let params = init_params(spec, rng).unwrap();
    let mut tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    for t in &mut tensors {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let n_params = tensors.len();
    tensors.push(random(&[3, d], rng, 1.0));
    tensors.push(random(&[3, d], rng, 1.0));
    let r = random(&[3, spec.out_dims()], rng, 1.0);
    fd_check(&tensors, |tape, ids| {
        let bound = bind_with(&params, tape, &ids[..n_params]);
        let y = layer_forward(tape, spec, &bound, ids[n_params], ids[n_params + 1]).unwrap();
        let rr = tape.constant(&r);
        let w = tape.hadamard(y, rr).unwrap();
        tape.sum(w)
    })
}

fn spec_for(format: Format, d: usize) -> NeuronFormatSpec {
    if format == Format::QnnAlpha {
        NeuronFormatSpec::qnn_alpha(d, 2, 2)
    } else {
        NeuronFormatSpec::new(format, d)
    }
}

/// Small embedding model used for whole-objective gradient checks.
pub fn small_model(dropout: f64) -> QnnModel {
    let fields = vec![
        FieldSpec { name: "u".into(), vocab_size: 3 },
        FieldSpec { name: "i".into(), vocab_size: 4 },
        FieldSpec { name: "c".into(), vocab_size: 2 },
    ];
    let mut cfg = ModelConfig::new(InputSpec::Embedding { fields, d: 2 }, Format::QnnAlpha, 2);
    cfg.m = 2;
    cfg.h = 2;
    cfg.dropout = dropout;
    cfg.seed = 8;
    let mut model = QnnModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, t) in model.named_params_mut() {
        if name.starts_with("embedding") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    model
}

/// Two-pass objective rebuilt independently, with the ensemble target held at `frozen`.
pub fn reference_total(
    model: &QnnModel,
    idx: &[u32],
    y: &[f64],
    seeds: &[u64],
    frozen: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut passes = Vec::new();
    for k in 0..2u64 {
        let mut parts = seeds.to_vec();
        parts.push(k);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&parts));
        let p = model
            .forward_on_tape(&mut tape, &bound, Inputs::Categorical(idx), true, &mut rng)
            .unwrap();
        passes.push(tape.value(p).to_vec());
    }
    let mean: Vec<f64> = passes[0].iter().zip(&passes[1]).map(|(a, b)| (a + b) / 2.0).collect();
    let target = frozen.map_or(mean.clone(), <[f64]>::to_vec);
    let ce = |t: &[f64], p: &[f64]| {
        -t.iter()
            .zip(p)
            .map(|(t, p)| t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            .sum::<f64>()
            / t.len() as f64
    };
    (ce(y, &mean) + ce(&target, &passes[0]) + ce(&target, &passes[1]), mean)
}

/// Worst gradient error of the full two-pass objective over all model parameters.
pub fn total_loss_grad_error() -> f64 {
    let model = small_model(0.25);
    let idx = [0u32, 1, 1, 2, 3, 0, 1, 0, 1, 2, 2, 0];
    let y = [1.0, 0.0, 0.0, 1.0];
    let seeds = [5u64, 0, 3];
    let cfg = TrainConfig { forward_passes: 2, ..TrainConfig::default() };
    let step = loss_and_grads(&model, Inputs::Categorical(&idx), &y, &cfg, &seeds).unwrap();
    let (base, frozen) = reference_total(&model, &idx, &y, &seeds, None);
    assert!((step.loss - base).abs() < 1e-12, "{} vs {base}", step.loss);
    let mut worst: f64 = 0.0;
    for (k, g) in step.grads.iter().enumerate() {
        let mut numeric = vec![0.0; g.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.named_params_mut()[k].1.data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.named_params_mut()[k].1.data_mut()[i] -= FD_STEP;
            let fp = reference_total(&plus, &idx, &y, &seeds, Some(&frozen)).0;
            let fm = reference_total(&minus, &idx, &y, &seeds, Some(&frozen)).0;
            *n = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(g, &numeric));
    }
    worst
}

/// Criterion 7.
pub fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut cases = 0;
    for format in Format::all() {
        for placement in smooth_placements(format) {
            for bias in [false, true] {
                let spec = spec_for(format, 6).with_placement(placement).with_bias(bias);
                let e = layer_grad_error(&spec, &mut rng);
                cases += 1;
                worst = worst.max(e);
                if e >= FD_TOL {
                    failures.push(format!("{format} {} bias={bias}: {e:.1e}", placement.label()));
                }
            }
        }
    }
    for m in [1, 2, 4] {
        let a = random(&[2, 6], &mut rng, 1.0);
        let b = random(&[2, m, 6], &mut rng, 1.0);
        let r = random(&[2, 6], &mut rng, 1.0);
        let e = fd_check(&[a, b], |tape, ids| {
            let y = tape.krp_sum(ids[0], ids[1]).unwrap();
            let rr = tape.constant(&r);
            let w = tape.hadamard(y, rr).unwrap();
            tape.sum(w)
        });
        cases += 1;
        worst = worst.max(e);
        if e >= FD_TOL {
            failures.push(format!("krp_sum M={m}: {e:.1e}"));
        }
    }
    let x = random(&[4, 6], &mut rng, 1.0);
    let w = random(&[6, 6], &mut rng, 0.5);
    let e = fd_check(&[x, w], |tape, ids| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let z = tape.matvec(ids[1], ids[0]).unwrap();
        let z = tape.activation(z, ActivationKind::Tanh);
        let d = tape.dropout(z, 0.4, &mut mask_rng, true).unwrap();
        let sq = tape.hadamard(d, d).unwrap();
        tape.sum(sq)
    });
    cases += 1;
    worst = worst.max(e);
    if e >= FD_TOL {
        failures.push(format!("dropout: {e:.1e}"));
    }
    let e = total_loss_grad_error();
    cases += 1;
    worst = worst.max(e);
    if e >= FD_TOL {
        failures.push(format!("two-pass objective: {e:.1e}"));
    }
    if failures.is_empty() {
        Ok(format!("{cases} cases, worst rel err {worst:.2e} (< 1e-6)"))
    } else {
        Err(failures.join("; "))
    }
}

/// Output of an `l`-layer stack on `x`, all layers sharing `x` as first-order input.
pub fn stack_output(spec: &NeuronFormatSpec, layers: &[LayerParams], x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x0 = tape.constant_vec(vec![x.len()], x.to_vec()).unwrap();
    let mut h = x0;
    for p in layers {
        let b = p.bind(&mut tape, false);
        h = layer_forward(&mut tape, spec, &b, h, x0).unwrap();
    }
    tape.value(h).to_vec()
}

/// Criterion 6.
pub fn degree_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for (format, degree) in [
        (Format::CrossNetV2, (|l: u32| l + 1) as fn(u32) -> u32),
        (Format::T(9), |l: u32| 1 << l),
    ] {
        let spec = NeuronFormatSpec::new(format, 6).with_bias(false).with_residual(false);
        for l in 1..=3u32 {
            let layers: Vec<LayerParams> = (0..l).map(|_| init_params(&spec, &mut rng).unwrap()).collect();
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = stack_output(&spec, &layers, &x);
            for c in [2.0f64, 3.0] {
                let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
                let got = stack_output(&spec, &layers, &scaled);
                let k = c.powi(degree(l) as i32);
                let want: Vec<f64> = base.iter().map(|v| k * v).collect();
                let e = got
                    .iter()
                    .zip(&want)
                    .map(|(g, w)| (g - w).abs() / w.abs().max(f64::MIN_POSITIVE))
                    .fold(0.0, f64::max);
                worst = worst.max(e);
                if e >= 1e-9 {
                    return Err(format!("{format} L={l} c={c}: rel err {e:.2e}"));
                }
            }
        }
    }
    Ok(format!("crossnetv2 c^(L+1), t9 c^(2^L), L=1..3, c=2,3: worst rel err {worst:.2e}"))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Criterion 8.
pub fn degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in [4, 6, 16] {
        // qnn_alpha(H=1, M=1) against t19 with the same matrix
        let t19 = NeuronFormatSpec::new(Format::T(19), d);
        let qa = NeuronFormatSpec::qnn_alpha(d, 1, 1);
        let p19 = init_params(&t19, &mut rng).unwrap();
        let mut pqa = init_params(&qa, &mut rng).unwrap();
        pqa.krp_weights[0] = p19.wa.clone().unwrap().reshaped(vec![1, d, d]).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let run = |spec: &NeuronFormatSpec, p: &LayerParams| {
                let mut tape = Tape::new();
                let xi = tape.constant_vec(vec![3, d], x.clone()).unwrap();
                let b = p.bind(&mut tape, false);
                let y = layer_forward(&mut tape, spec, &b, xi, xi).unwrap();
                tape.value(y).to_vec()
            };
            if bits(&run(&t19, &p19)) != bits(&run(&qa, &pqa)) {
                return Err(format!("qnn_alpha(H=1,M=1) differs from t19 at D={d}"));
            }
            // krp_sum with a single expansion row against hadamard
            let a = Tensor::new(vec![3, d], x.clone()).unwrap();
            let bt = random(&[3, d], &mut rng, 2.0);
            let mut tape = Tape::new();
            let ai = tape.constant(&a);
            let bi = tape.constant(&bt);
            let b3 = tape.reshape(bi, vec![3, 1, d]).unwrap();
            let k = tape.krp_sum(ai, b3).unwrap();
            let h = tape.hadamard(ai, bi).unwrap();
            if bits(tape.value(k)) != bits(tape.value(h)) {
                return Err(format!("krp_sum(M=1) differs from hadamard at D={d}"));
            }
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..50);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        let inputs = SeLossInputs::new(&y, &p, &p).unwrap();
        let e = (se_loss(&inputs).unwrap() - 2.0 * bce(&inputs.y_tilde, &p).unwrap()).abs();
        worst = worst.max(e);
        if e >= 1e-12 {
            return Err(format!("se_loss(y1==y2) off by {e:e}"));
        }
    }
    Ok(format!(
        "qnn_alpha(1,1)==t19 and krp_sum(M=1)==hadamard bit-exact; se_loss identity worst {worst:.1e}"
    ))
}

/// Criterion 9.
pub fn param_count_law() -> Outcome {
    let mut checked = 0;
    for d in (4..=256).step_by(4) {
        for h in [1usize, 2, 4, 8, 16] {
            if d % h != 0 {
                continue;
            }
            for m in [1usize, 2, 3, 4, 8] {
                let spec = NeuronFormatSpec::qnn_alpha(d, m, h);
                let got = param_count(&spec);
                let want = m * d * d / h;
                if got != want {
                    return Err(format!("D={d} M={m} H={h}: {got} != {want}"));
                }
                checked += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = NeuronFormatSpec::qnn_alpha(24, 3, 4);
    let p = init_params(&spec, &mut rng).unwrap();
    let n: usize = p.named().iter().map(|(_, t)| t.len()).sum();
    if n != 3 * 24 * 24 / 4 {
        return Err(format!("initialized tensors hold {n} values"));
    }
    Ok(format!("{checked} (D, M, H) combinations equal M*D^2/H"))
}

/// Pairwise AUC: wins plus half ties over all positive/negative pairs.
pub fn brute_auc(y: &[f64], s: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Mean BCE with `ln_1p` for the negative branch and compensated summation.
pub fn precise_bce(y: &[f64], p: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&y, &p) in y.iter().zip(p) {
        let term = y * p.ln() + (1.0 - y) * (-p).ln_1p();
        let t = sum + term;
        comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    }
    -(sum + comp) / y.len() as f64
}

/// Criterion 11.
pub fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for inst in 0..1000 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..30);
        let mut y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let got = auc(&y, &s).unwrap();
        let want = brute_auc(&y, &s);
        if got != want {
            return Err(format!("instance {inst}: auc {got} vs brute force {want}"));
        }
    }
    // references evaluated at 40 significant digits
    #[allow(clippy::excessive_precision)]
    let fixed: [(&[f64], &[f64], f64); 4] = [
        (&[1.0, 0.0, 1.0], &[0.9, 0.2, 0.3], 0.510_825_623_765_990_683_2),
        (&[0.0, 1.0, 1.0, 0.0], &[0.01, 0.99, 0.5, 0.75], 0.524_885_553_346_709_702_7),
        (&[1.0], &[0.999_999_9], 1.000_000_050_000_003_3e-7),
        (&[0.0, 0.0, 1.0], &[1e-7, 0.123_456_789, 0.987_654_321], 0.048_063_965_445_165_119_18),
    ];
    let mut worst: f64 = 0.0;
    for (y, p, want) in fixed {
        let e = (bce(y, p).unwrap() - want).abs();
        worst = worst.max(e);
        if e >= 1e-12 {
            return Err(format!("bce({y:?}, {p:?}) off by {e:e}"));
        }
    }
    for _ in 0..1000 {
        let n = rng.gen_range(1..=200);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-7..1.0 - 1e-7)).collect();
        let e = (bce(&y, &p).unwrap() - precise_bce(&y, &p)).abs();
        worst = worst.max(e);
        if e >= 1e-12 {
            return Err(format!("bce off the compensated reference by {e:e}"));
        }
    }
    Ok(format!("1000 auc instances exact; bce worst abs err {worst:.1e}"))
}

/// Mean test accuracy over seeds `1..=seeds` for one boundary setting.
pub fn boundary_accuracy(
    dataset: SyntheticKind,
    format: Format,
    placement: Option<ActivationPlacement>,
    noise: Option<f64>,
    seeds: u64,
) -> f64 {
    let mut total = 0.0;
    for seed in 1..=seeds {
        let mut o = BoundaryOptions::new(dataset, format);
        o.placement = placement;
        o.data.noise = noise;
        o.seed = seed;
        total += run_boundary(&o).unwrap().accuracy;
    }
    total / seeds as f64
}

/// Criterion 5.
pub fn boundary_study() -> Outcome {
    const SEEDS: u64 = 5;
    let linear = Some(ActivationPlacement::none());
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for noise in [0.0, 0.1] {
        let mlp = boundary_accuracy(SyntheticKind::Circles, Format::Mlp, linear, Some(noise), SEEDS);
        let t9 = boundary_accuracy(SyntheticKind::Circles, Format::T(9), None, Some(noise), SEEDS);
        let t19 = boundary_accuracy(SyntheticKind::Circles, Format::T(19), None, Some(noise), SEEDS);
        lines.push(format!("circles noise {noise}: mlp-linear {mlp:.3} t9 {t9:.3} t19 {t19:.3}"));
        if mlp > 0.70 {
            failed.push(format!("mlp-linear {mlp:.3} > 0.70 at noise {noise}"));
        }
        if t9 < 0.95 || t19 < 0.95 {
            failed.push(format!("t9 {t9:.3} / t19 {t19:.3} below 0.95 at noise {noise}"));
        }
    }
    let mlp = boundary_accuracy(SyntheticKind::Moons, Format::Mlp, None, None, SEEDS);
    let t19 = boundary_accuracy(SyntheticKind::Moons, Format::T(19), None, None, SEEDS);
    lines.push(format!("moons: mlp {mlp:.3} t19 {t19:.3}"));
    if t19 < mlp - 0.01 {
        failed.push(format!("moons t19 {t19:.3} < mlp {mlp:.3} - 0.01"));
    }
    let summary = format!("mean test accuracy over {SEEDS} seeds; {}", lines.join("; "));
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failed.join("; ")))
    }
}

/// Checkpoint-restored qnn_alpha model at `D = 13 * 16`, `M = 4`, `L = 3`.
pub fn latency_model(h: usize) -> QnnModel {
    let fields = (0..13)
        .map(|i| FieldSpec { name: format!("f{i}"), vocab_size: 1000 })
        .collect();
    let mut cfg = ModelConfig::new(InputSpec::Embedding { fields, d: 16 }, Format::QnnAlpha, 3);
    cfg.m = 4;
    cfg.h = h;
    cfg.head_input = HeadInputMode::Local;
    cfg.seed = 10;
    let model = QnnModel::new(cfg).unwrap();
    QnnModel::from_bytes(&model.to_bytes()).unwrap()
}

/// Criterion 10. The H sweep is repeated in interleaved rounds and the lowest
/// median per H is kept, so a transient slowdown hits one round only.
pub fn latency_direction() -> Outcome {
    const ROUNDS: usize = 3;
    let heads = [1usize, 2, 4, 8];
    let models: Vec<QnnModel> = heads.iter().map(|&h| latency_model(h)).collect();
    let opts = BenchOptions { batch: 100, warmup: 5, reps: 30, seed: 3 };
    let mut lat = vec![f64::INFINITY; heads.len()];
    for _ in 0..ROUNDS {
        for (l, m) in lat.iter_mut().zip(&models) {
            *l = l.min(bench_model(m, None, &opts).unwrap().median_ms_per_100);
        }
    }
    let table = heads
        .iter()
        .zip(&lat)
        .map(|(h, l)| format!("H={h} {l:.3}ms"))
        .collect::<Vec<_>>()
        .join(", ");
    for w in 0..heads.len() - 1 {
        if lat[w + 1] > 1.10 * lat[w] {
            return Err(format!("latency rose more than 10% from H={} to H={}: {table}", heads[w], heads[w + 1]));
        }
    }
    Ok(format!("median per 100 samples, D=208 M=4 L=3: {table}"))
}

/// Directory of a benchmark dataset: `train.csv`, `valid.csv`, `test.csv`, and
/// optionally `schema.json` (else the bundled schema is used).
pub fn dataset_dir(env: &str) -> Result<PathBuf, String> {
    let dir = std::env::var_os(env)
        .map(PathBuf::from)
        .ok_or_else(|| format!("dataset not available: set {env} to a directory with train/valid/test CSVs"))?;
    for f in ["train.csv", "valid.csv", "test.csv"] {
        if !dir.join(f).exists() {
            return Err(format!("dataset not available: {} missing", dir.join(f).display()));
        }
    }
    Ok(dir)
}

pub fn load_benchmark(env: &str, bundled_schema: &str) -> Result<LoadedData, String> {
    let dir = dataset_dir(env)?;
    let schema = if dir.join("schema.json").exists() {
        dir.join("schema.json")
    } else {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(bundled_schema)
    };
    let prepared = prepare(&PrepOptions {
        csv: ["train.csv", "valid.csv", "test.csv"].iter().map(|f| dir.join(f)).collect(),
        schema,
        threshold: Some(1),
        log_base: LogBase::Natural,
        splits: None,
        ratios: [0.8, 0.1, 0.1],
        seed: 0,
    })
    .map_err(|e| e.to_string())?;
    prepared.into_loaded().map_err(|e| e.to_string())
}

/// The shared benchmark protocol: d=16, batch 4096, Adam 1e-3, dropout 0.1, patience 2.
pub fn benchmark_config(l: usize, m: usize, h: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.format = "qnn_alpha".into();
    cfg.model.d = 16;
    cfg.model.layers = l;
    cfg.model.m = m;
    cfg.model.h = h;
    cfg.model.dropout = 0.1;
    cfg.train = TrainConfig { lr: 1e-3, batch_size: 4096, patience: 2, max_epochs: 100, seed, ..TrainConfig::default() };
    cfg
}

/// Grid over L, M, H; the configuration with the best validation AUC is reported on test.
pub fn grid_reproduction(data: &LoadedData) -> Result<(f64, f64, String), String> {
    let mut best: Option<(f64, f64, f64, String)> = None;
    for l in 1..=4 {
        for m in [1, 2, 4] {
            for h in [1, 2, 4] {
                let cfg = benchmark_config(l, m, h, 2024);
                let (r, _) = run_training(&cfg, data, None).map_err(|e| e.to_string())?;
                let val = r.report.best_val_auc.unwrap_or(0.0);
                if best.as_ref().is_none_or(|b| val > b.0) {
                    best = Some((val, r.test.auc, r.test.logloss, format!("L={l} M={m} H={h}")));
                }
            }
        }
    }
    let (_, auc, logloss, label) = best.expect("grid is non-empty");
    Ok((auc, logloss, label))
}

/// Criterion 1.
pub fn frappe_reproduction() -> Outcome {
    let data = load_benchmark("QNN_FRAPPE_DIR", "frappe.json")?;
    let (auc, logloss, label) = grid_reproduction(&data)?;
    let msg = format!("best ({label}) test AUC {:.2}% logloss {logloss:.4}", 100.0 * auc);
    if auc >= 0.982 && logloss <= 0.155 {
        Ok(msg)
    } else {
        Err(format!("{msg}; need AUC >= 98.2% and logloss <= 0.155"))
    }
}

/// Criterion 2.
pub fn ml1m_reproduction() -> Outcome {
    let data = load_benchmark("QNN_ML1M_DIR", "ml1m.json")?;
    let (auc, logloss, label) = grid_reproduction(&data)?;
    let msg = format!("best ({label}) test AUC {:.2}% logloss {logloss:.4}", 100.0 * auc);
    if auc >= 0.903 {
        Ok(msg)
    } else {
        Err(format!("{msg}; need AUC >= 90.3%"))
    }
}

fn test_auc(cfg: &RunConfig, data: &LoadedData) -> Result<f64, String> {
    run_training(cfg, data, None).map(|(r, _)| r.test.auc).map_err(|e| e.to_string())
}

/// Criterion 3: the full model against each ablation, three seeds, majority vote.
pub fn ablation_ordering() -> Outcome {
    let data = load_benchmark("QNN_FRAPPE_DIR", "frappe.json")?;
    let ablations: [Ablation; 3] = [
        ("w/o mid act", |c| c.model.placement = Some("mid:identity".into())),
        ("w/o KRP", |c| c.model.krp_linear = true),
        ("w/o SE loss", |c| {
            c.train.se_enabled = false;
            c.train.forward_passes = 1;
        }),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    let seeds = [1u64, 2, 3];
    let full: Vec<f64> = seeds
        .iter()
        .map(|&s| test_auc(&benchmark_config(3, 2, 2, s), &data))
        .collect::<Result<_, _>>()?;
    for (name, apply) in ablations {
        let mut wins = 0;
        for (i, &s) in seeds.iter().enumerate() {
            let mut cfg = benchmark_config(3, 2, 2, s);
            apply(&mut cfg);
            if full[i] > test_auc(&cfg, &data)? {
                wins += 1;
            }
        }
        lines.push(format!("{name}: full wins {wins}/3"));
        ok &= wins >= 2;
    }
    if ok {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

/// Criterion 4.
pub fn scalability_direction() -> Outcome {
    let data = load_benchmark("QNN_FRAPPE_DIR", "frappe.json")?;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let a1 = test_auc(&benchmark_config(3, 1, 1, seed), &data)?;
        let a2 = test_auc(&benchmark_config(3, 2, 1, seed), &data)?;
        let a4 = test_auc(&benchmark_config(3, 4, 1, seed), &data)?;
        if a2.max(a4) >= a1 {
            wins += 1;
        }
        lines.push(format!("seed {seed}: M=1 {a1:.4} M=2 {a2:.4} M=4 {a4:.4}"));
    }
    let msg = format!("{wins}/3 seeds; {}", lines.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
