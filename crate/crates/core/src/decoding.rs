//! Single-pass parallel decoding, mask-and-repredict refinement, greedy
//! autoregressive decoding and the throughput benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{strip_eos, Example, BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{argmax_with_prob, ArTransformer, EncoderState, FourierNat, Seq2Seq};
use crate::tensor::Real;

/// Output of parallel decoding. `tokens` has the predicted content length
/// (no EOS); `confidences[i]` is the softmax maximum that chose `tokens[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub confidences: Vec<f64>,
    pub passes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Refinement passes after the first parallel pass.
    pub n_passes: usize,
    pub mask_ratio: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            n_passes: 0,
            mask_ratio: 0.3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!(
                "mask_ratio {} must lie in [0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// Decodes a batch in one decoder pass. Length comes from the length head.
pub fn single_pass_batch<F: Real>(
    model: &FourierNat<F>,
    sources: &[Vec<usize>],
) -> Result<Vec<DecodeResult>> {
    single_pass_encoded(model, &model.encode(sources)?)
}

fn single_pass_encoded<F: Real>(
    model: &FourierNat<F>,
    enc: &EncoderState<F>,
) -> Result<Vec<DecodeResult>> {
    let lengths = model.predict_length(enc);
    let trace = model.decode_parallel(enc, None)?;
    let t = model.config().t_max;
    Ok((0..enc.batch)
        .map(|b| {
            let (cls, _) = argmax_with_prob(lengths.row(b));
            let (tokens, confidences) = (0..cls + 1)
                .map(|p| argmax_with_prob(trace.logits.row(b * t + p)))
                .unzip();
            DecodeResult {
                tokens,
                confidences,
                passes: 1,
            }
        })
        .collect())
}

pub fn single_pass<F: Real>(model: &FourierNat<F>, src: &[usize]) -> Result<DecodeResult> {
    single_pass_batch(model, &[src.to_vec()]).map(|mut v| v.remove(0))
}

/// Positions to re-mask: the `ceil(ratio·len)` lowest confidences, ties to
/// the lowest index, returned in ascending position order.
pub fn positions_to_mask(confidences: &[f64], ratio: f64) -> Vec<usize> {
    let k = (ratio * confidences.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    // stable sort keeps lower indices first among equal confidences
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));
    let mut chosen = order[..k.min(order.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Draft for a refinement pass: kept tokens, MASK at `masked`, EOS right
/// after the content and PAD beyond.
pub fn refinement_draft(tokens: &[usize], masked: &[usize], t_max: usize) -> Vec<usize> {
    let mut draft = vec![PAD; t_max];
    draft[..tokens.len()].copy_from_slice(tokens);
    if tokens.len() < t_max {
        draft[tokens.len()] = EOS;
    }
    for &p in masked {
        draft[p] = MASK;
    }
    draft
}

/// Applies `cfg.n_passes` mask-and-repredict passes to each result. The
/// length is kept fixed; only masked positions can change.
pub fn refine_batch<F: Real>(
    model: &FourierNat<F>,
    sources: &[Vec<usize>],
    results: Vec<DecodeResult>,
    cfg: &RefineConfig,
) -> Result<Vec<DecodeResult>> {
    cfg.validate()?;
    if cfg.n_passes == 0 || results.is_empty() {
        return Ok(results);
    }
    refine_encoded(model, &model.encode(sources)?, results, cfg)
}

fn refine_encoded<F: Real>(
    model: &FourierNat<F>,
    enc: &EncoderState<F>,
    mut results: Vec<DecodeResult>,
    cfg: &RefineConfig,
) -> Result<Vec<DecodeResult>> {
    let t = model.config().t_max;
    for _ in 0..cfg.n_passes {
        let masks: Vec<Vec<usize>> = results
            .iter()
            .map(|r| positions_to_mask(&r.confidences, cfg.mask_ratio))
            .collect();
        let draft: Vec<usize> = results
            .iter()
            .zip(&masks)
            .flat_map(|(r, m)| refinement_draft(&r.tokens, m, t))
            .collect();
        let trace = model.decode_parallel(enc, Some(&draft))?;
        for (b, (r, m)) in results.iter_mut().zip(&masks).enumerate() {
            for &p in m {
                let (tok, conf) = argmax_with_prob(trace.logits.row(b * t + p));
                r.tokens[p] = tok;
                r.confidences[p] = conf;
            }
            r.passes += 1;
        }
    }
    Ok(results)
}

pub fn refine<F: Real>(
    model: &FourierNat<F>,
    src: &[usize],
    result: DecodeResult,
    cfg: &RefineConfig,
) -> Result<DecodeResult> {
    refine_batch(model, &[src.to_vec()], vec![result], cfg).map(|mut v| v.remove(0))
}

/// Single pass followed by refinement.
pub fn nat_decode_batch<F: Real>(
    model: &FourierNat<F>,
    sources: &[Vec<usize>],
    cfg: &RefineConfig,
) -> Result<Vec<DecodeResult>> {
    cfg.validate()?;
    let enc = model.encode(sources)?;
    let first = single_pass_encoded(model, &enc)?;
    refine_encoded(model, &enc, first, cfg)
}

/// Greedy left-to-right decoding of a batch. Each output ends with EOS
/// unless `max_len` tokens were produced first. Finished rows leave the
/// batch; every step is one decoder stack evaluation.
pub fn ar_greedy_batch<F: Real>(
    model: &ArTransformer<F>,
    sources: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let t_max = model.config().t_max;
    if max_len > t_max {
        return Err(Error::Length {
            what: "greedy decode length",
            len: max_len,
            max: t_max,
        });
    }
    let mut outputs = vec![Vec::new(); sources.len()];
    if max_len == 0 || sources.is_empty() {
        return Ok(outputs);
    }
    let full = model.encode(sources)?;
    let mut active: Vec<usize> = (0..sources.len()).collect();
    while !active.is_empty() {
        let enc = full.select(&active);
        let prefixes: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| {
                let mut p = vec![BOS];
                p.extend(&outputs[i]);
                p
            })
            .collect();
        let logits = model.ar_decode_step(&enc, &prefixes)?;
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let (tok, _) = argmax_with_prob(logits.row(row));
            outputs[i].push(tok);
            if tok != EOS && outputs[i].len() < max_len {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(outputs)
}

pub fn ar_greedy<F: Real>(model: &ArTransformer<F>, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    ar_greedy_batch(model, &[src.to_vec()], max_len).map(|mut v| v.remove(0))
}

/// Maps `f` over `items` on up to `workers` scoped threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub nat_tokens_per_s: f64,
    pub ar_tokens_per_s: f64,
    pub speedup: f64,
    pub nat_forwards: usize,
    pub ar_forwards: usize,
    pub batch_size: usize,
    pub workers: usize,
}

/// Extra detail kept next to the report for tests and logs.
#[derive(Debug, Clone)]
pub struct BenchmarkDetail {
    pub report: BenchmarkReport,
    pub n_batches: usize,
    /// Σ over batches of the longest generated sequence (EOS included).
    pub ar_steps: usize,
    pub nat_tokens: usize,
    pub ar_tokens: usize,
}

/// Times NAT and AR decoding of the same examples with the same batching.
/// Tokens per second count emitted content tokens (EOS excluded).
pub fn benchmark<F: Real>(
    nat: &FourierNat<F>,
    ar: &ArTransformer<F>,
    examples: &[Example],
    batch_size: usize,
    refine_cfg: &RefineConfig,
    workers: usize,
) -> Result<BenchmarkDetail> {
    if examples.is_empty() {
        return Err(Error::Empty("benchmark dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let (nc, ac) = (nat.config(), ar.config());
    if nc.vocab != ac.vocab || nc.t_max != ac.t_max {
        return Err(Error::config(format!(
            "incompatible models: vocab {}/{} and t_max {}/{}",
            nc.vocab, ac.vocab, nc.t_max, ac.t_max
        )));
    }
    refine_cfg.validate()?;
    let batches: Vec<Vec<Vec<usize>>> = examples
        .chunks(batch_size)
        .map(|c| c.iter().map(|e| e.src.clone()).collect())
        .collect();
    let workers = workers.max(1);

    nat.reset_forward_count();
    let start = Instant::now();
    let nat_out = parallel_map(&batches, workers, |b| nat_decode_batch(nat, b, refine_cfg))?;
    let nat_secs = start.elapsed().as_secs_f64();
    let nat_forwards = nat.forward_count();

    ar.reset_forward_count();
    let start = Instant::now();
    let ar_out = parallel_map(&batches, workers, |b| ar_greedy_batch(ar, b, ac.t_max))?;
    let ar_secs = start.elapsed().as_secs_f64();
    let ar_forwards = ar.forward_count();

    let nat_tokens: usize = nat_out.iter().flatten().map(|r| r.tokens.len()).sum();
    let ar_tokens: usize = ar_out.iter().flatten().map(|t| strip_eos(t).len()).sum();
    let ar_steps = ar_out
        .iter()
        .map(|b| b.iter().map(Vec::len).max().unwrap_or(0))
        .sum();
    let nat_tokens_per_s = nat_tokens as f64 / nat_secs.max(f64::MIN_POSITIVE);
    let ar_tokens_per_s = ar_tokens as f64 / ar_secs.max(f64::MIN_POSITIVE);
    Ok(BenchmarkDetail {
        report: BenchmarkReport {
            nat_tokens_per_s,
            ar_tokens_per_s,
            speedup: nat_tokens_per_s / ar_tokens_per_s,
            nat_forwards,
            ar_forwards,
            batch_size,
            workers,
        },
        n_batches: batches.len(),
        ar_steps,
        nat_tokens,
        ar_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, DraftInit, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab: 10,
            t_max: 8,
            s_max: 8,
            dropout: 0.0,
            draft_init: DraftInit::MaskEmbedding,
            combine_imag: false,
        }
    }

    fn zeroed_nat() -> FourierNat {
        let mut m = FourierNat::new(cfg(), Arch::Fouriernat, 0).unwrap();
        for p in m.params_mut().iter_mut() {
            p.value.fill(0.0);
        }
        m
    }

    #[test]
    fn uniform_model_picks_lowest_ids() {
        let m = zeroed_nat();
        let r = single_pass(&m, &[4, 5, 6]).unwrap();
        // uniform length distribution resolves to class 0, i.e. length 1
        assert_eq!(r.tokens, vec![PAD]);
        assert_eq!(r.passes, 1);
        assert!((r.confidences[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mask_selection_rules() {
        assert_eq!(positions_to_mask(&[0.9, 0.2, 0.8], 0.3), vec![1]);
        assert_eq!(positions_to_mask(&[0.5, 0.5, 0.5], 0.6), vec![0, 1]);
        assert_eq!(positions_to_mask(&[0.5, 0.5, 0.5], 0.0), Vec::<usize>::new());
        assert_eq!(positions_to_mask(&[], 0.3), Vec::<usize>::new());
        assert_eq!(refinement_draft(&[5, 6, 7], &[1], 6), vec![5, MASK, 7, EOS, PAD, PAD]);
        assert_eq!(refinement_draft(&[5, 6], &[], 2), vec![5, 6]);
    }

    #[test]
    fn refinement_keeps_unmasked_positions() {
        let mut m = FourierNat::<f64>::new(cfg(), Arch::Fouriernat, 3).unwrap();
        let mut rng = crate::tensor::Rng::new(4);
        for p in m.params_mut().iter_mut() {
            p.value = crate::tensor::Tensor::randn(p.value.shape(), 1.0, &mut rng);
        }
        let src = vec![4, 7, 5, 9];
        let first = DecodeResult {
            tokens: vec![4, 7, 5, 9, 6],
            confidences: vec![0.9, 0.1, 0.95, 0.3, 0.8],
            passes: 1,
        };
        let unchanged = refine(&m, &src, first.clone(), &RefineConfig::default()).unwrap();
        assert_eq!(unchanged, first);
        let cfg = RefineConfig {
            n_passes: 1,
            mask_ratio: 0.3,
        };
        m.reset_forward_count();
        let out = refine(&m, &src, first.clone(), &cfg).unwrap();
        assert_eq!(m.forward_count(), 1);
        assert_eq!(out.passes, 2);
        for p in [0, 2, 4] {
            assert_eq!(out.tokens[p], first.tokens[p]);
            assert_eq!(out.confidences[p], first.confidences[p]);
        }
        let bad = RefineConfig {
            n_passes: 1,
            mask_ratio: 1.0,
        };
        assert!(matches!(refine(&m, &src, first, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn greedy_edge_cases() {
        let mut ar = ArTransformer::<f64>::new(cfg(), 0).unwrap();
        assert_eq!(ar_greedy(&ar, &[4, 5], 0).unwrap(), Vec::<usize>::new());
        assert_eq!(ar.forward_count(), 0);
        assert!(ar_greedy(&ar, &[4, 5], 9).is_err());
        // a model whose projection always favours EOS
        let proj = ar.proj;
        let ps = ar.params_mut();
        ps.value_mut(proj.w).fill(0.0);
        ps.value_mut(proj.b).data_mut()[EOS] = 10.0;
        ar.reset_forward_count();
        let out = ar_greedy(&ar, &[4, 5], 8).unwrap();
        assert_eq!(out, vec![EOS]);
        assert!(strip_eos(&out).is_empty());
        assert_eq!(ar.forward_count(), 1);
        // a model that never stops runs to the limit, one stack call per token
        let ps = ar.params_mut();
        ps.value_mut(proj.b).data_mut()[EOS] = 0.0;
        ps.value_mut(proj.b).data_mut()[6] = 10.0;
        ar.reset_forward_count();
        let out = ar_greedy(&ar, &[4, 5], 5).unwrap();
        assert_eq!(out, vec![6; 5]);
        assert_eq!(ar.forward_count(), 5);
    }

    #[test]
    fn benchmark_counts_and_schema() {
        let nat = FourierNat::<f64>::new(cfg(), Arch::Fouriernat, 1).unwrap();
        let ar = ArTransformer::<f64>::new(cfg(), 2).unwrap();
        let examples: Vec<Example> = (0..10)
            .map(|i| Example {
                src: vec![4 + i % 5, 5],
                tgt: vec![4 + i % 5, 5, EOS],
            })
            .collect();
        let d = benchmark(&nat, &ar, &examples, 4, &RefineConfig::default(), 2).unwrap();
        assert_eq!(d.n_batches, 3);
        assert_eq!(d.report.nat_forwards, 3);
        assert_eq!(d.report.ar_forwards, d.ar_steps);
        assert_eq!(d.report.speedup, d.report.nat_tokens_per_s / d.report.ar_tokens_per_s);
        let refined = RefineConfig {
            n_passes: 1,
            mask_ratio: 0.3,
        };
        let d = benchmark(&nat, &ar, &examples, 4, &refined, 1).unwrap();
        assert_eq!(d.report.nat_forwards, 6);
        let json = serde_json::to_value(&d.report).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            [
                "ar_forwards",
                "ar_tokens_per_s",
                "batch_size",
                "nat_forwards",
                "nat_tokens_per_s",
                "speedup",
                "workers"
            ]
        );
        assert!(benchmark(&nat, &ar, &[], 4, &RefineConfig::default(), 1).is_err());
    }

    #[test]
    fn decoding_is_deterministic_and_batch_invariant() {
        let nat = FourierNat::<f64>::new(cfg(), Arch::Fouriernat, 9).unwrap();
        let srcs = vec![vec![4, 5, 6], vec![9, 8], vec![7]];
        let a = nat_decode_batch(&nat, &srcs, &RefineConfig { n_passes: 1, mask_ratio: 0.5 }).unwrap();
        let b = nat_decode_batch(&nat, &srcs, &RefineConfig { n_passes: 1, mask_ratio: 0.5 }).unwrap();
        assert_eq!(a, b);
        for (i, s) in srcs.iter().enumerate() {
            let one = nat_decode_batch(&nat, std::slice::from_ref(s), &RefineConfig { n_passes: 1, mask_ratio: 0.5 })
                .unwrap();
            assert_eq!(one[0].tokens, a[i].tokens);
        }
        let ar = ArTransformer::<f64>::new(cfg(), 9).unwrap();
        let batch = ar_greedy_batch(&ar, &srcs, 8).unwrap();
        for (i, s) in srcs.iter().enumerate() {
            assert_eq!(ar_greedy(&ar, s, 8).unwrap(), batch[i]);
        }
    }
}
