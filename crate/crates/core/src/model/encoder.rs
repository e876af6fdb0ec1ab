use super::layers::{undrop, AttnCache, Attention, Dropout, Embedding, FeedForward, FfnCache, LayerNorm};
use super::ModelConfig;
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, LayerNormCache, ParamStore, Real, Rng, Tensor};

/// Encoder output for a batch: `h` is `(B·S)×d`, `pad_mask[b·S + j]` marks
/// padding.
#[derive(Debug, Clone)]
pub struct EncoderState<F: Real = f64> {
    pub h: Tensor<F>,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
}

impl<F: Real> EncoderState<F> {
    /// Padded source length shared by the batch.
    pub fn src_len(&self) -> usize {
        self.pad_mask.len() / self.batch
    }

    /// The sub-batch made of examples `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let s = self.src_len();
        let parts: Vec<Tensor<F>> = rows.iter().map(|&b| self.h.rows_range(b * s, s)).collect();
        Self {
            h: Tensor::vstack(&parts),
            pad_mask: rows
                .iter()
                .flat_map(|&b| self.pad_mask[b * s..(b + 1) * s].iter().copied())
                .collect(),
            batch: rows.len(),
        }
    }

    /// Mean of the un-padded rows of each example, `B×d`.
    pub fn pooled(&self) -> Tensor<F> {
        let (s, d) = (self.src_len(), self.h.cols());
        let mut out = Tensor::zeros(&[self.batch, d]);
        for b in 0..self.batch {
            let rows: Vec<usize> = (0..s).filter(|&j| !self.pad_mask[b * s + j]).collect();
            let w = F::one() / F::of(rows.len() as f64);
            let o = out.row_mut(b);
            for j in rows {
                for (a, &v) in o.iter_mut().zip(self.h.row(b * s + j)) {
                    *a += v * w;
                }
            }
        }
        out
    }

    /// Adds the gradient of [`Self::pooled`] into `dh`.
    pub fn pooled_backward(&self, dpooled: &Tensor<F>, dh: &mut Tensor<F>) {
        let s = self.src_len();
        for b in 0..self.batch {
            let rows: Vec<usize> = (0..s).filter(|&j| !self.pad_mask[b * s + j]).collect();
            let w = F::one() / F::of(rows.len() as f64);
            for j in rows {
                for (a, &g) in dh.row_mut(b * s + j).iter_mut().zip(dpooled.row(b)) {
                    *a += g * w;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct EncoderLayerCache<F: Real> {
    ln_attn: LayerNormCache<F>,
    attn: AttnCache<F>,
    drop_attn: Option<Tensor<F>>,
    ln_ffn: LayerNormCache<F>,
    ffn: FfnCache<F>,
    drop_ffn: Option<Tensor<F>>,
}

impl EncoderLayer {
    fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Tensor<F>,
        batch: usize,
        pad: &[bool],
        drop: &mut Dropout<'_>,
    ) -> (Tensor<F>, EncoderLayerCache<F>) {
        let (a, ln_attn) = self.ln_attn.forward(ps, x);
        let (s, attn) = self.attn.forward(ps, &a, &a, batch, pad, false);
        let (s, drop_attn) = drop.apply(s);
        let x1 = x.add(&s);
        let (b, ln_ffn) = self.ln_ffn.forward(ps, &x1);
        let (f, ffn) = self.ffn.forward(ps, &b);
        let (f, drop_ffn) = drop.apply(f);
        (
            x1.add(&f),
            EncoderLayerCache {
                ln_attn,
                attn,
                drop_attn,
                ln_ffn,
                ffn,
                drop_ffn,
            },
        )
    }

    fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        c: &EncoderLayerCache<F>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> Tensor<F> {
        let df = undrop(&c.drop_ffn, dy);
        let db = self.ffn.backward(ps, &c.ffn, &df, grads);
        let mut dx1 = dy.add(&self.ln_ffn.backward(ps, &c.ln_ffn, &db, grads));
        let ds = undrop(&c.drop_attn, &dx1);
        let (dq, dkv) = self.attn.backward(ps, &c.attn, &ds, grads);
        let da = dq.add(&dkv);
        dx1.add_assign(&self.ln_attn.backward(ps, &c.ln_attn, &da, grads));
        dx1
    }
}

/// Source embedding, pre-LN self-attention layers, final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    emb: Embedding,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F: Real> {
    ids: Vec<usize>,
    drop_emb: Option<Tensor<F>>,
    layers: Vec<EncoderLayerCache<F>>,
    ln_out: LayerNormCache<F>,
    /// Output state, kept for the pooled-length gradient.
    pub state: EncoderState<F>,
}

impl Encoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let emb = Embedding::new(store, "enc.emb", cfg.vocab, cfg.s_max, cfg.d, rng);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), cfg.d),
                    attn: Attention::new(store, &format!("{p}.attn"), cfg.d, cfg.n_heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), cfg.d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.d, cfg.d_ff, rng),
                }
            })
            .collect();
        Self {
            emb,
            layers,
            ln_out: LayerNorm::new(store, "enc.ln_out", cfg.d),
        }
    }

    /// Pads the batch to its longest source (trailing PAD is ignored when
    /// measuring) and runs the stack.
    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        cfg: &ModelConfig,
        sources: &[Vec<usize>],
        drop: &mut Dropout<'_>,
    ) -> Result<(EncoderState<F>, EncoderCache<F>)> {
        if sources.is_empty() {
            return Err(Error::Empty("source batch"));
        }
        let trimmed: Vec<&[usize]> = sources
            .iter()
            .map(|s| {
                let n = s.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1);
                &s[..n]
            })
            .collect();
        let mut s = 0;
        for src in &trimmed {
            if src.is_empty() {
                return Err(Error::Empty("source has no non-padding tokens"));
            }
            if src.len() > cfg.s_max {
                return Err(Error::Length {
                    what: "source",
                    len: src.len(),
                    max: cfg.s_max,
                });
            }
            if let Some(&id) = src.iter().find(|&&id| id >= cfg.vocab) {
                return Err(Error::Vocabulary {
                    id,
                    vocab: cfg.vocab,
                });
            }
            s = s.max(src.len());
        }
        let batch = sources.len();
        let mut ids = vec![PAD; batch * s];
        for (b, src) in trimmed.iter().enumerate() {
            ids[b * s..b * s + src.len()].copy_from_slice(src);
        }
        let pad_mask: Vec<bool> = ids.iter().map(|&id| id == PAD).collect();

        let x = self.emb.lookup(ps, &ids, s, |_| false);
        let (mut x, drop_emb) = drop.apply(x);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(ps, &x, batch, &pad_mask, drop);
            x = y;
            caches.push(c);
        }
        let (h, ln_out) = self.ln_out.forward(ps, &x);
        super::check_finite(&h, "encoder output")?;
        let state = EncoderState { h, pad_mask, batch };
        Ok((
            state.clone(),
            EncoderCache {
                ids,
                drop_emb,
                layers: caches,
                ln_out,
                state,
            },
        ))
    }

    pub fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        cache: &EncoderCache<F>,
        dh: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) {
        let mut dx = self.ln_out.backward(ps, &cache.ln_out, dh, grads);
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            dx = layer.backward(ps, c, &dx, grads);
        }
        let dx = undrop(&cache.drop_emb, &dx);
        self.emb
            .backward(&cache.ids, cache.state.src_len(), |_| false, &dx, grads);
    }
}
