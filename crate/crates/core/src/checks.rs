//! Invariant battery: each check compares an implementation against an
//! independent oracle (direct DFT sums, central differences, hand-computed
//! metric fixtures) and reports the worst error it saw.

use serde::Serialize;

use crate::data::{make_batch, Example, EOS, MASK, PAD};
use crate::error::Result;
use crate::metrics::{bleu, evaluate, rouge_l};
use crate::model::layers::{Attention, Dropout, FeedForward, LayerNorm};
use crate::model::{Arch, DraftInit, EncoderState, FourierNat, ModelConfig, Seq2Seq};
use crate::spectral::{dft_naive, dft_seq, fourier_mix, fourier_mix_full, fourier_mix_vjp, idft_seq, ComplexSpectrum};
use crate::tensor::{grad_check, DiffFn, ParamStore, Rng};
use crate::training::{nat_batch_grads, TrainConfig};

type Tensor = crate::tensor::Tensor<f64>;

/// Deliberate defects for exercising the battery itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Inverse transform uses the forward twiddle sign.
    pub ifft_sign: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &'static str, error: f64, tolerance: f64) -> Self {
        Self {
            name,
            error,
            tolerance,
            passed: error.is_finite() && error < tolerance,
        }
    }
}

fn inverse(spec: &ComplexSpectrum, faults: Faults) -> (Tensor, Tensor) {
    if faults.ifft_sign {
        let n = spec.len() as f64;
        let wrong = dft_naive(&spec.real, &spec.imag, false);
        (wrong.real.scale(1.0 / n), wrong.imag.scale(1.0 / n))
    } else {
        idft_seq(spec)
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SpectralErrors {
    /// Max-abs difference between the fast transform and the direct sum.
    pub fft_vs_naive: f64,
    /// Max-abs error of inverse∘forward.
    pub round_trip: f64,
    /// `|Σ|x|² − Σ|X|²/T|`, relative to `max(1, Σ|x|²)`.
    pub parseval: f64,
}

pub fn spectral_errors(
    lengths: &[usize],
    widths: &[usize],
    trials: usize,
    seed: u64,
    faults: Faults,
) -> SpectralErrors {
    let mut rng = Rng::new(seed);
    let mut e = SpectralErrors::default();
    for &t in lengths {
        for &d in widths {
            for _ in 0..trials {
                let x = Tensor::randn(&[t, d], 1.0, &mut rng);
                let fast = dft_seq(&x);
                let slow = dft_naive(&x, &Tensor::zeros(&[t, d]), false);
                e.fft_vs_naive = e
                    .fft_vs_naive
                    .max(fast.real.max_abs_diff(&slow.real))
                    .max(fast.imag.max_abs_diff(&slow.imag));
                let (re, im) = inverse(&fast, faults);
                e.round_trip = e.round_trip.max(re.max_abs_diff(&x)).max(im.max_abs());
                let time = x.norm_sq();
                let freq = (fast.real.norm_sq() + fast.imag.norm_sq()) / t as f64;
                e.parseval = e.parseval.max((time - freq).abs() / time.max(1.0));
            }
        }
    }
    e
}

/// With unit gates the mixing is the identity.
pub fn unit_gate_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    [1, 2, 8, 16]
        .iter()
        .map(|&t| {
            let x = Tensor::randn(&[t, 5], 1.0, &mut rng);
            let ones = Tensor::full(&[t, 5], 1.0);
            fourier_mix(&x, &ones, &ones).expect("shapes agree").max_abs_diff(&x)
        })
        .fold(0.0, f64::max)
}

/// Gates with `g[k] == g[(T−k) mod T]` keep the mixed signal real; returns
/// the largest pre-truncation imaginary part.
pub fn hermitian_imag_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for t in [8, 16] {
        for _ in 0..10 {
            let d = 6;
            let mut gr = Tensor::randn(&[t, d], 1.0, &mut rng);
            let mut gi = Tensor::randn(&[t, d], 1.0, &mut rng);
            for k in 1..t {
                for c in 0..d {
                    gr.set(k, c, gr.at((t - k) % t, c).max(gr.at(k, c)));
                    gi.set(k, c, gi.at((t - k) % t, c).max(gi.at(k, c)));
                }
            }
            let x = Tensor::randn(&[t, d], 1.0, &mut rng);
            let (_, im, _) = fourier_mix_full(&x, &gr, &gi).expect("shapes agree");
            worst = worst.max(im.max_abs());
        }
    }
    worst
}

fn tiny_config(d: usize, t_max: usize, vocab: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d,
        n_layers: 1,
        n_heads: heads,
        d_ff: 2 * d,
        vocab,
        t_max,
        s_max: t_max,
        dropout: 0.0,
        draft_init: DraftInit::MaskEmbedding,
        combine_imag: false,
    }
}

fn scrambled(cfg: ModelConfig, seed: u64) -> Result<FourierNat> {
    let mut m = FourierNat::new(cfg, Arch::Fouriernat, seed)?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    for p in m.params_mut().iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.6, &mut rng);
    }
    Ok(m)
}

/// With all gates at zero, changing draft position `t'` leaves the logits at
/// every other position untouched; returns the largest such change.
pub fn zero_gate_leakage(seed: u64) -> Result<f64> {
    let mut m = scrambled(tiny_config(8, 8, 10, 2), seed)?;
    for id in m.gate_ids() {
        m.params_mut().value_mut(id).fill(0.0);
    }
    let enc = m.encode(&[vec![4, 5, 6, 7]])?;
    let base = [MASK; 8];
    let reference = m.decode_parallel(&enc, Some(&base))?.logits;
    let mut worst = 0.0f64;
    for tp in 0..8 {
        let mut draft = base;
        draft[tp] = 5 + tp % 4;
        let logits = m.decode_parallel(&enc, Some(&draft))?.logits;
        for t in (0..8).filter(|&t| t != tp) {
            for (a, b) in logits.row(t).iter().zip(reference.row(t)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

fn with_values(ps: &ParamStore, values: &[Tensor]) -> ParamStore {
    let mut out = ps.clone();
    for (p, v) in out.iter_mut().zip(values) {
        p.value = v.clone();
    }
    out
}

fn values(ps: &ParamStore) -> Vec<Tensor> {
    ps.iter().map(|p| p.value.clone()).collect()
}

/// Relative error of the mixing gradient w.r.t. the input and both gates.
pub fn grad_fourier_mix(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let f = DiffFn::new(
        "fourier_mix",
        |x| fourier_mix(&x[0], &x[1], &x[2]).expect("shapes agree"),
        |x, g| {
            let (dx, dgr, dgi) = fourier_mix_vjp(&x[0], &x[1], &x[2], g).expect("shapes agree");
            vec![dx, dgr, dgi]
        },
    );
    let mut worst = 0.0f64;
    for t in [4, 8] {
        let inputs = [
            Tensor::randn(&[t, 3], 1.0, &mut rng),
            Tensor::randn(&[t, 3], 1.0, &mut rng),
            Tensor::randn(&[t, 3], 1.0, &mut rng),
        ];
        worst = worst.max(grad_check(&f, &inputs, 1e-5, &mut rng)?);
    }
    Ok(worst)
}

pub fn grad_layer_norm(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut ps = ParamStore::new();
    let ln = LayerNorm::new(&mut ps, "ln", 6);
    let vals: Vec<Tensor> = values(&ps)
        .iter()
        .map(|v| v.add(&Tensor::randn(v.shape(), 0.5, &mut rng)))
        .collect();
    let f = DiffFn::new(
        "layer_norm",
        |x| ln.forward(&with_values(&ps, &x[1..]), &x[0]).0,
        |x, g| {
            let ps = with_values(&ps, &x[1..]);
            let mut grads = ps.gradients();
            let (_, c) = ln.forward(&ps, &x[0]);
            let mut out = vec![ln.backward(&ps, &c, g, &mut grads)];
            out.extend(grads.iter().cloned());
            out
        },
    );
    let mut inputs = vec![Tensor::randn(&[5, 6], 2.0, &mut rng)];
    inputs.extend(vals);
    grad_check(&f, &inputs, 1e-5, &mut rng)
}

pub fn grad_ffn(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut ps = ParamStore::new();
    let ffn = FeedForward::new(&mut ps, "ffn", 4, 8, &mut rng);
    let vals: Vec<Tensor> = values(&ps)
        .iter()
        .map(|v| v.add(&Tensor::randn(v.shape(), 0.2, &mut rng)))
        .collect();
    let f = DiffFn::new(
        "ffn",
        |x| ffn.forward(&with_values(&ps, &x[1..]), &x[0]).0,
        |x, g| {
            let ps = with_values(&ps, &x[1..]);
            let mut grads = ps.gradients();
            let (_, c) = ffn.forward(&ps, &x[0]);
            let mut out = vec![ffn.backward(&ps, &c, g, &mut grads)];
            out.extend(grads.iter().cloned());
            out
        },
    );
    let mut inputs = vec![Tensor::randn(&[5, 4], 1.0, &mut rng)];
    inputs.extend(vals);
    grad_check(&f, &inputs, 1e-5, &mut rng)
}

/// Cross-attention over a two-example batch with a padded key.
pub fn grad_cross_attention(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut ps = ParamStore::new();
    let attn = Attention::new(&mut ps, "cross", 4, 2, &mut rng);
    let vals = values(&ps);
    let pad = [false, false, false, false, true, true];
    let f = DiffFn::new(
        "cross_attention",
        |x| attn.forward(&with_values(&ps, &x[2..]), &x[0], &x[1], 2, &pad, false).0,
        |x, g| {
            let ps = with_values(&ps, &x[2..]);
            let mut grads = ps.gradients();
            let (_, c) = attn.forward(&ps, &x[0], &x[1], 2, &pad, false);
            let (dq, dkv) = attn.backward(&ps, &c, g, &mut grads);
            let mut out = vec![dq, dkv];
            out.extend(grads.iter().cloned());
            out
        },
    );
    let mut inputs = vec![
        Tensor::randn(&[8, 4], 1.0, &mut rng),
        Tensor::randn(&[6, 4], 1.0, &mut rng),
    ];
    inputs.extend(vals);
    grad_check(&f, &inputs, 1e-5, &mut rng)
}

/// One decoder layer w.r.t. its input, the encoder output and every model
/// parameter, in both imaginary-part modes.
pub fn grad_decoder_layer(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for combine_imag in [false, true] {
        let cfg = ModelConfig {
            combine_imag,
            ..tiny_config(4, 4, 7, 2)
        };
        let m = scrambled(cfg, seed)?;
        let enc = m.encode(&[vec![4, 5, 6], vec![6, 5]])?;
        let layer = m.layers[0];
        let state = |h: &Tensor| EncoderState {
            h: h.clone(),
            pad_mask: enc.pad_mask.clone(),
            batch: 2,
        };
        let ps = m.params();
        let f = DiffFn::new(
            "decoder_layer",
            |x| {
                let ps = with_values(ps, &x[2..]);
                layer
                    .forward(&ps, &x[0], &state(&x[1]), 4, &mut Dropout::inference())
                    .expect("shapes agree")
                    .0
            },
            |x, g| {
                let ps = with_values(ps, &x[2..]);
                let mut grads = ps.gradients();
                let (_, c) = layer
                    .forward(&ps, &x[0], &state(&x[1]), 4, &mut Dropout::inference())
                    .expect("shapes agree");
                let (dz, denc) = layer.backward(&ps, &c, g, &mut grads);
                let mut out = vec![dz, denc];
                out.extend(grads.iter().cloned());
                out
            },
        );
        let mut rng = Rng::new(seed + 1);
        let mut inputs = vec![Tensor::randn(&[8, 4], 1.0, &mut rng), enc.h.clone()];
        inputs.extend(values(ps));
        worst = worst.max(grad_check(&f, &inputs, 1e-5, &mut rng)?);
    }
    Ok(worst)
}

/// The full training objective (parallel decode, token loss, length loss)
/// w.r.t. every parameter of a d=8, T=4, V=8, one-layer model.
pub fn grad_objective(seed: u64) -> Result<f64> {
    let m = scrambled(tiny_config(8, 4, 8, 2), seed)?;
    let examples = [
        Example {
            src: vec![4, 5, 6],
            tgt: vec![6, 5, EOS],
        },
        Example {
            src: vec![7, 4, PAD],
            tgt: vec![4, 7, 5, EOS],
        },
    ];
    let batch = make_batch(&examples, &[0, 1], 4)?;
    let cfg = TrainConfig {
        length_loss_weight: 0.5,
        ..TrainConfig::default()
    };
    let rebuild = |x: &[Tensor]| {
        let mut mm = m.clone();
        for (p, v) in mm.params_mut().iter_mut().zip(x) {
            p.value = v.clone();
        }
        mm
    };
    let f = DiffFn::new(
        "objective",
        |x| {
            let mm = rebuild(x);
            let mut g = mm.params().gradients();
            let r = nat_batch_grads(&mm, &batch, &cfg, None, &mut g).expect("valid batch");
            Tensor::full(&[1], r.total)
        },
        |x, up| {
            let mm = rebuild(x);
            let mut g = mm.params().gradients();
            nat_batch_grads(&mm, &batch, &cfg, None, &mut g).expect("valid batch");
            g.iter().map(|t| t.scale(up.data()[0])).collect()
        },
    );
    let mut rng = Rng::new(seed + 2);
    grad_check(&f, &values(m.params()), 1e-5, &mut rng)
}

/// BLEU and ROUGE-L against hand-computed fixtures plus the identity
/// corpus; returns the largest deviation.
pub fn metric_fixture_error() -> Result<f64> {
    let the = 10;
    let cat = 11;
    let hyp = vec![vec![the, the, the, the]];
    let reference = vec![vec![the, cat]];
    // clipped unigram precision 1/4, hypothesis longer than reference
    let e1 = (bleu(&hyp, &reference, 1, false)? - 0.25).abs();
    // precision 1/2, brevity penalty e^(1 − 4/2)
    let e2 = (bleu(&reference, &hyp, 1, false)? - 0.5 * (-1.0f64).exp()).abs();
    let e3 = (rouge_l(&[4, 5, 6, 7], &[4, 6, 7]) - 6.0 / 7.0).abs();
    let corpus = vec![vec![4, 5, 6, 7, 8], vec![9, 4, 4, EOS], vec![5]];
    let r = evaluate(&corpus, &corpus, false)?;
    let e4 = [
        r.token_accuracy,
        r.sequence_accuracy,
        r.bleu,
        r.rouge1,
        r.rouge2,
        r.rouge_l,
    ]
    .iter()
    .map(|v| (v - 1.0).abs())
    .fold(0.0, f64::max);
    Ok(e1.max(e2).max(e3).max(e4))
}

/// Runs every check. Errors inside a check count as a failure of that check.
pub fn battery(faults: Faults) -> Vec<CheckResult> {
    let s = spectral_errors(&[1, 2, 4, 8, 16, 64], &[1, 3, 8], 20, 1, faults);
    let or_inf = |r: Result<f64>| r.unwrap_or(f64::INFINITY);
    vec![
        CheckResult::new("fft_matches_direct_dft", s.fft_vs_naive, 1e-9),
        CheckResult::new("inverse_round_trip", s.round_trip, 1e-9),
        CheckResult::new("parseval_energy", s.parseval, 1e-8),
        CheckResult::new("unit_gates_identity", unit_gate_error(2), 1e-9),
        CheckResult::new("symmetric_gates_real_output", hermitian_imag_error(3), 1e-9),
        CheckResult::new("zero_gates_no_leakage", or_inf(zero_gate_leakage(4)), 1e-9),
        CheckResult::new("grad_fourier_mix", or_inf(grad_fourier_mix(5)), 1e-4),
        CheckResult::new("grad_layer_norm", or_inf(grad_layer_norm(6)), 1e-4),
        CheckResult::new("grad_ffn", or_inf(grad_ffn(7)), 1e-4),
        CheckResult::new("grad_cross_attention", or_inf(grad_cross_attention(8)), 1e-4),
        CheckResult::new("grad_decoder_layer", or_inf(grad_decoder_layer(9)), 1e-4),
        CheckResult::new("grad_objective_end_to_end", or_inf(grad_objective(10)), 1e-4),
        CheckResult::new("metric_fixtures", or_inf(metric_fixture_error()), 1e-6),
    ]
}
