//! Cross-entropy objectives, Adam with warmup and inverse-square-root decay,
//! the training loop and sequence-level distillation.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, strip_eos, Batch, Example, BOS, EOS, MASK, PAD};
use crate::decoding::{ar_greedy_batch, parallel_map, single_pass_batch};
use crate::error::{Error, Result};
use crate::metrics::sequence_accuracy;
use crate::model::layers::Dropout;
use crate::model::{save_checkpoint, AnyModel, ArTransformer, FourierNat, Seq2Seq};
use crate::tensor::{Gradients, ParamId, ParamStore, Real, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    /// Examples per batch are `tokens_per_batch / t_max`.
    pub tokens_per_batch: usize,
    pub dropout: f64,
    pub length_loss_weight: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Global gradient L2 norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    /// Steps between validation records.
    pub eval_interval: usize,
    /// Fraction of NAT training examples whose draft reveals part of the
    /// gold target, which teaches the decoder to refine.
    pub partial_draft_prob: f64,
    /// Stop once the validation metric reaches this value.
    pub target_val_metric: Option<f64>,
    /// Record elapsed seconds in the curves. Off by default so curves are
    /// byte-reproducible.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps_adam: 1e-9,
            warmup_steps: 400,
            max_steps: 3000,
            tokens_per_batch: 1024,
            dropout: 0.1,
            length_loss_weight: 0.1,
            label_smoothing: 0.0,
            seed: 0,
            grad_clip: 1.0,
            lr_scale: 1.0,
            eval_interval: 250,
            partial_draft_prob: 0.5,
            target_val_metric: None,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            warmup_steps: 4000,
            tokens_per_batch: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing {} must lie in [0, 1)",
                self.label_smoothing
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps_adam > 0.0) || !(self.lr_scale > 0.0) || self.grad_clip < 0.0 {
            return fail("eps_adam and lr_scale must be positive, grad_clip non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.partial_draft_prob) {
            return fail("partial_draft_prob must lie in [0, 1]".into());
        }
        if self.eval_interval == 0 || self.tokens_per_batch == 0 {
            return fail("eval_interval and tokens_per_batch must be positive".into());
        }
        Ok(())
    }

    pub fn examples_per_batch(&self, t_max: usize) -> usize {
        (self.tokens_per_batch / t_max).max(1)
    }
}

/// Loss of one batch. `token_ce` is per counted token, `length_ce` per
/// example, and `total = token_ce + length_loss_weight · length_ce`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub token_ce: f64,
    pub length_ce: f64,
    pub tokens_counted: usize,
}

/// Summed token cross-entropy and its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct TokenLoss<F: Real = f64> {
    pub sum: f64,
    pub count: usize,
    pub dlogits: Tensor<F>,
}

/// `Σ_t −Σ_v q_t(v) log softmax(logits_t)(v)` over rows with
/// `pad_mask[t] == false`, where `q_t` is the one-hot gold distribution
/// mixed with `smoothing` of uniform mass. Padded rows contribute nothing.
pub fn nat_loss<F: Real>(
    logits: &Tensor<F>,
    gold: &[usize],
    pad_mask: &[bool],
    smoothing: f64,
) -> Result<TokenLoss<F>> {
    let (t, v) = (logits.rows(), logits.cols());
    if gold.len() != t || pad_mask.len() != t {
        return Err(Error::Dimension {
            op: "nat_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![gold.len(), pad_mask.len()],
        });
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let (mut sum, mut count) = (0.0, 0);
    let off = smoothing / v as f64;
    for r in 0..t {
        if pad_mask[r] {
            continue;
        }
        let g = gold[r];
        if g >= v {
            return Err(Error::Vocabulary { id: g, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
        let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
        let d = dlogits.row_mut(r);
        for (j, x) in row.iter().enumerate() {
            let logp = x.as_f64() - lse;
            let q = off + if j == g { 1.0 - smoothing } else { 0.0 };
            if q > 0.0 {
                sum -= q * logp;
            }
            d[j] = F::of(logp.exp() - q);
        }
        count += 1;
    }
    Ok(TokenLoss {
        sum,
        count,
        dlogits,
    })
}

/// `d^−0.5 · min(step^−0.5, step · warmup^−1.5)`.
pub fn lr_at(step: usize, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("learning-rate schedule starts at step 1"));
    }
    if warmup == 0 {
        return Err(Error::config("warmup must be at least 1"));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Debug, Clone)]
pub struct OptimState<F: Real = f64> {
    pub step: usize,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> OptimState<F> {
    pub fn new(ps: &ParamStore<F>) -> Self {
        Self {
            step: 0,
            m: ps.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: ps.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// Bias-corrected Adam on the stored gradients. Parameters in `frozen` are
/// skipped. A non-finite gradient aborts before anything changes.
pub fn adam_step<F: Real>(
    ps: &mut ParamStore<F>,
    optim: &mut OptimState<F>,
    lr: f64,
    cfg: &TrainConfig,
    frozen: &[ParamId],
) -> Result<()> {
    if let Some(p) = ps.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
    }
    optim.step += 1;
    let t = optim.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let skip: Vec<usize> = frozen.iter().map(|id| id.0).collect();
    for (i, p) in ps.iter_mut().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        let (m, v) = (optim.m[i].data_mut(), optim.v[i].data_mut());
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            let g = g.as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
            m[j] = F::of(mj);
            v[j] = F::of(vj);
            let update = lr * (mj * c1) / ((vj * c2).sqrt() + cfg.eps_adam);
            *w = F::of(w.as_f64() - update);
        }
    }
    Ok(())
}

/// Scales stored gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(ps: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = ps
        .iter()
        .map(|p| p.grad.norm_sq().as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for p in ps.iter_mut() {
            p.grad = p.grad.scale(s);
        }
    }
    norm
}

/// Length-head class of a target: content length minus one, at least 0.
pub fn length_class(target: &[usize], t_max: usize) -> usize {
    strip_eos(target).len().clamp(1, t_max) - 1
}

/// Draft ids and loss mask for one NAT training example. With `partial`,
/// a random non-empty subset of the gold positions is masked and the rest
/// revealed (PAD beyond the target); only masked positions are scored.
/// Otherwise every position is MASK and every gold position is scored.
pub fn training_draft(
    target: &[usize],
    t_max: usize,
    partial: bool,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<bool>) {
    let n = target.len();
    if !partial {
        return (vec![MASK; t_max], (0..t_max).map(|p| p >= n).collect());
    }
    let k = rng.range_inclusive(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut draft = vec![PAD; t_max];
    draft[..n].copy_from_slice(target);
    let mut excluded = vec![true; t_max];
    for &p in &order[..k] {
        draft[p] = MASK;
        excluded[p] = false;
    }
    (draft, excluded)
}

fn gold_rows(batch: &Batch) -> Vec<usize> {
    batch.tgt_ids.concat()
}

/// Forward and backward for a NAT batch. `rng` enables dropout and partial
/// drafts; without it the batch is scored in inference mode.
pub fn nat_batch_grads<F: Real>(
    model: &FourierNat<F>,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: Option<&mut Rng>,
    grads: &mut Gradients<F>,
) -> Result<LossReport> {
    let t = model.config().t_max;
    let b = batch.len();
    let mut draft = Vec::with_capacity(b * t);
    let mut excluded = Vec::with_capacity(b * t);
    let mut drop = match rng {
        Some(rng) => {
            for row in 0..b {
                let partial = rng.uniform() < cfg.partial_draft_prob;
                let (d, e) = training_draft(batch.target(row), t, partial, rng);
                draft.extend(d);
                excluded.extend(e);
            }
            Dropout::training(cfg.dropout, rng)
        }
        None => {
            for row in 0..b {
                let (d, e) = training_draft(batch.target(row), t, false, &mut Rng::new(0));
                draft.extend(d);
                excluded.extend(e);
            }
            Dropout::inference()
        }
    };
    let (out, cache) = model.forward(&batch.src_ids, Some(&draft), &mut drop)?;
    let tok = nat_loss(&out.trace.logits, &gold_rows(batch), &excluded, cfg.label_smoothing)?;
    let len_gold: Vec<usize> = (0..b).map(|r| length_class(batch.target(r), t)).collect();
    let len_loss = nat_loss(&out.length_logits, &len_gold, &vec![false; b], 0.0)?;
    let token_ce = tok.sum / tok.count.max(1) as f64;
    let length_ce = len_loss.sum / b as f64;
    let dlogits = tok.dlogits.scale(F::of(1.0 / tok.count.max(1) as f64));
    let dlen = len_loss
        .dlogits
        .scale(F::of(cfg.length_loss_weight / b as f64));
    model.backward(&cache, &dlogits, &dlen, grads);
    Ok(LossReport {
        total: token_ce + cfg.length_loss_weight * length_ce,
        token_ce,
        length_ce,
        tokens_counted: tok.count,
    })
}

/// Teacher-forced decoder inputs: BOS then the target shifted right, padded
/// to the longest target in the batch.
fn ar_inputs(batch: &Batch) -> (Vec<usize>, Vec<usize>, Vec<bool>, usize) {
    let len = batch.gold_lengths.iter().copied().max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(batch.len() * len);
    let mut gold = Vec::with_capacity(batch.len() * len);
    let mut excluded = Vec::with_capacity(batch.len() * len);
    for r in 0..batch.len() {
        let tgt = batch.target(r);
        for p in 0..len {
            inputs.push(match p {
                0 => BOS,
                _ if p <= tgt.len() => tgt[p - 1],
                _ => PAD,
            });
            gold.push(tgt.get(p).copied().unwrap_or(PAD));
            excluded.push(p >= tgt.len());
        }
    }
    (inputs, gold, excluded, len)
}

pub fn ar_batch_grads<F: Real>(
    model: &ArTransformer<F>,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: Option<&mut Rng>,
    grads: &mut Gradients<F>,
) -> Result<LossReport> {
    let (inputs, gold, excluded, _) = ar_inputs(batch);
    let mut drop = match rng {
        Some(rng) => Dropout::training(cfg.dropout, rng),
        None => Dropout::inference(),
    };
    let (logits, cache) = model.forward(&batch.src_ids, &inputs, &mut drop)?;
    let tok = nat_loss(&logits, &gold, &excluded, cfg.label_smoothing)?;
    let n = tok.count.max(1) as f64;
    model.backward(&cache, &tok.dlogits.scale(F::of(1.0 / n)), grads);
    Ok(LossReport {
        total: tok.sum / n,
        token_ce: tok.sum / n,
        length_ce: 0.0,
        tokens_counted: tok.count,
    })
}

pub fn batch_grads<F: Real>(
    model: &AnyModel<F>,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: Option<&mut Rng>,
    grads: &mut Gradients<F>,
) -> Result<LossReport> {
    match model {
        AnyModel::Nat(m) => nat_batch_grads(m, batch, cfg, rng, grads),
        AnyModel::Ar(m) => ar_batch_grads(m, batch, cfg, rng, grads),
    }
}

fn frozen_of<F: Real>(model: &AnyModel<F>) -> Vec<ParamId> {
    match model {
        AnyModel::Nat(m) => m.frozen_params(),
        AnyModel::Ar(_) => Vec::new(),
    }
}

fn gate_ids_of<F: Real>(model: &AnyModel<F>) -> Vec<ParamId> {
    match model {
        AnyModel::Nat(m) => m.gate_ids(),
        AnyModel::Ar(_) => Vec::new(),
    }
}

/// One optimizer step on `batch`. Returns the loss and the norm of the
/// spectral-gate gradient before clipping.
pub fn train_step<F: Real>(
    model: &mut AnyModel<F>,
    optim: &mut OptimState<F>,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LossReport, f64)> {
    let mut grads = model.as_dyn().params().gradients();
    let report = batch_grads(model, batch, cfg, Some(rng), &mut grads)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at step {}",
            optim.step + 1
        )));
    }
    let frozen = frozen_of(model);
    let gate_norm = gate_ids_of(model)
        .iter()
        .filter(|id| !frozen.contains(id))
        .map(|&id| grads.get(id).norm_sq().as_f64())
        .sum::<f64>()
        .sqrt();
    for &id in &frozen {
        grads.slot(id).fill(F::zero());
    }
    let d = model.config().d;
    let lr = cfg.lr_scale * lr_at(optim.step + 1, d, cfg.warmup_steps)?;
    let ps = model.as_dyn_mut().params_mut();
    ps.zero_grad();
    ps.accumulate(&grads, F::one());
    clip_grad_norm(ps, cfg.grad_clip);
    adam_step(ps, optim, lr, cfg, &frozen)?;
    Ok((report, gate_norm))
}

/// Sequence accuracy of inference-mode decoding (single NAT pass, or greedy
/// AR) over `examples`.
pub fn validation_metric<F: Real>(
    model: &AnyModel<F>,
    examples: &[Example],
    batch_size: usize,
    workers: usize,
) -> Result<f64> {
    let hyps = decode_examples(model, examples, batch_size, workers)?;
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.tgt.clone()).collect();
    sequence_accuracy(&hyps, &refs)
}

/// Inference-mode outputs for each example, as content ids.
pub fn decode_examples<F: Real>(
    model: &AnyModel<F>,
    examples: &[Example],
    batch_size: usize,
    workers: usize,
) -> Result<Vec<Vec<usize>>> {
    let batches: Vec<Vec<Vec<usize>>> = examples
        .chunks(batch_size.max(1))
        .map(|c| c.iter().map(|e| e.src.clone()).collect())
        .collect();
    let out = match model {
        AnyModel::Nat(m) => parallel_map(&batches, workers, |b| {
            Ok(single_pass_batch(m, b)?
                .into_iter()
                .map(|r| r.tokens)
                .collect::<Vec<_>>())
        })?,
        AnyModel::Ar(m) => {
            let t = m.config().t_max;
            parallel_map(&batches, workers, |b| {
                Ok(ar_greedy_batch(m, b, t)?
                    .into_iter()
                    .map(|s| strip_eos(&s).to_vec())
                    .collect::<Vec<_>>())
            })?
        }
    };
    Ok(out.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_clock_s: f64,
}

pub const CURVES_HEADER: &str = "step,train_loss,val_metric,wall_clock_s";

pub fn curves_csv(records: &[CurveRecord]) -> String {
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.train_loss, r.val_metric, r.wall_clock_s
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub curves: Vec<CurveRecord>,
    pub steps: usize,
    pub best_val: f64,
    /// Σ over steps of the spectral-gate gradient norm.
    pub gate_grad_norm: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Writes `curves.csv`, `best.fnat` and `last.fnat` under `out_dir` as it
/// goes. On a non-finite loss the run stops, the curves so far are written
/// and the last good checkpoint is left in place.
pub fn train_loop<F: Real>(
    model: &mut AnyModel<F>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let t_max = model.config().t_max;
    let per_batch = cfg.examples_per_batch(t_max);
    let val: &[Example] = if val.is_empty() {
        &train[..train.len().min(200)]
    } else {
        val
    };
    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.fork(1);
    let mut step_rng = root.fork(2);
    let mut optim = OptimState::new(model.as_dyn().params());
    let start = Instant::now();
    let clock = |cfg: &TrainConfig| {
        if cfg.record_wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut batches = make_batches(train, t_max, per_batch, &mut shuffle_rng)?;
    let initial_loss = {
        let mut g = model.as_dyn().params().gradients();
        batch_grads(model, &batches[0], cfg, None, &mut g)?.total
    };
    let val0 = validation_metric(model, val, 64, 1)?;
    let mut curves = vec![CurveRecord {
        step: 0,
        train_loss: initial_loss,
        val_metric: val0,
        wall_clock_s: clock(cfg),
    }];
    let mut best_val = val0;
    let save = |model: &AnyModel<F>, name: &str, step: usize, v: f64| -> Result<()> {
        if let Some(dir) = out_dir {
            let meta = serde_json::json!({"step": step, "val_metric": v, "seed": cfg.seed});
            save_checkpoint(model.as_dyn(), meta, &dir.join(name))?;
        }
        Ok(())
    };
    let write_curves = |curves: &[CurveRecord]| -> Result<()> {
        if let Some(dir) = out_dir {
            fs::File::create(dir.join("curves.csv"))?.write_all(curves_csv(curves).as_bytes())?;
        }
        Ok(())
    };
    save(model, "best.fnat", 0, val0)?;
    save(model, "last.fnat", 0, val0)?;
    write_curves(&curves)?;

    let mut cursor = 0;
    let (mut window_loss, mut window_n) = (0.0, 0usize);
    let mut gate_grad_norm = 0.0;
    let mut final_loss = initial_loss;
    let mut step = 0;
    let reached = |v: f64| cfg.target_val_metric.is_some_and(|t| v >= t);
    while step < cfg.max_steps && !reached(best_val) {
        if cursor == batches.len() {
            batches = make_batches(train, t_max, per_batch, &mut shuffle_rng)?;
            cursor = 0;
        }
        let outcome = train_step(model, &mut optim, &batches[cursor], cfg, &mut step_rng);
        let (report, gate_norm) = match outcome {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                write_curves(&curves)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        cursor += 1;
        step += 1;
        window_loss += report.total;
        window_n += 1;
        gate_grad_norm += gate_norm;
        final_loss = report.total;
        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let v = validation_metric(model, val, 64, 1)?;
            curves.push(CurveRecord {
                step,
                train_loss: window_loss / window_n as f64,
                val_metric: v,
                wall_clock_s: clock(cfg),
            });
            window_loss = 0.0;
            window_n = 0;
            save(model, "last.fnat", step, v)?;
            if v > best_val {
                best_val = v;
                save(model, "best.fnat", step, v)?;
            }
            write_curves(&curves)?;
        }
    }
    if window_n > 0 {
        let v = validation_metric(model, val, 64, 1)?;
        curves.push(CurveRecord {
            step,
            train_loss: window_loss / window_n as f64,
            val_metric: v,
            wall_clock_s: clock(cfg),
        });
        save(model, "last.fnat", step, v)?;
        if v > best_val {
            best_val = v;
            save(model, "best.fnat", step, v)?;
        }
        write_curves(&curves)?;
    }
    Ok(TrainRun {
        curves,
        steps: step,
        best_val,
        gate_grad_norm,
        initial_loss,
        final_loss,
    })
}

/// Replaces each target by the teacher's greedy decode. Decodes that hit
/// `t_max` without EOS are cut to `t_max − 1` tokens plus EOS and counted.
pub fn distill_generate<F: Real>(
    teacher: &ArTransformer<F>,
    examples: &[Example],
    batch_size: usize,
    workers: usize,
) -> Result<(Vec<Example>, usize)> {
    let t = teacher.config().t_max;
    let batches: Vec<Vec<Vec<usize>>> = examples
        .chunks(batch_size.max(1))
        .map(|c| c.iter().map(|e| e.src.clone()).collect())
        .collect();
    let outs = parallel_map(&batches, workers, |b| ar_greedy_batch(teacher, b, t))?;
    let mut truncated = 0;
    let distilled = examples
        .iter()
        .zip(outs.into_iter().flatten())
        .map(|(ex, mut tgt)| {
            if tgt.last() != Some(&EOS) {
                truncated += 1;
                tgt.truncate(t - 1);
                tgt.push(EOS);
            }
            Example {
                src: ex.src.clone(),
                tgt,
            }
        })
        .collect();
    Ok((distilled, truncated))
}

#[cfg(test)]
mod tests;
