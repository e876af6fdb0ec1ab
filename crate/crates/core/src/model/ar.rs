use std::sync::atomic::{AtomicUsize, Ordering};

use super::encoder::{Encoder, EncoderCache, EncoderState};
use super::layers::{
    undrop, AttnCache, Attention, Dropout, Embedding, FeedForward, FfnCache, LayerNorm, Linear,
};
use super::{check_finite, Arch, ModelConfig, Seq2Seq};
use crate::data::{BOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, LayerNormCache, ParamStore, Real, Rng, Tensor};

/// Causal self-attention, cross-attention and feed-forward, pre-LN.
#[derive(Debug, Clone, Copy)]
pub struct ArLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct ArLayerCache<F: Real> {
    ln_self: LayerNormCache<F>,
    self_attn: AttnCache<F>,
    drop_self: Option<Tensor<F>>,
    ln_cross: LayerNormCache<F>,
    cross: AttnCache<F>,
    drop_cross: Option<Tensor<F>>,
    ln_ffn: LayerNormCache<F>,
    ffn: FfnCache<F>,
    drop_ffn: Option<Tensor<F>>,
}

impl ArLayer {
    fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, l: usize, rng: &mut Rng) -> Self {
        let p = format!("ar.{l}");
        let d = cfg.d;
        Self {
            ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
            self_attn: Attention::new(store, &format!("{p}.self"), d, cfg.n_heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d),
            cross: Attention::new(store, &format!("{p}.cross"), d, cfg.n_heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
            ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.d_ff, rng),
        }
    }

    fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        z: &Tensor<F>,
        enc: &EncoderState<F>,
        self_pad: &[bool],
        drop: &mut Dropout<'_>,
    ) -> (Tensor<F>, ArLayerCache<F>) {
        let (a, ln_self) = self.ln_self.forward(ps, z);
        let (s, self_attn) = self.self_attn.forward(ps, &a, &a, enc.batch, self_pad, true);
        let (s, drop_self) = drop.apply(s);
        let z1 = z.add(&s);
        let (b, ln_cross) = self.ln_cross.forward(ps, &z1);
        let (c, cross) = self
            .cross
            .forward(ps, &b, &enc.h, enc.batch, &enc.pad_mask, false);
        let (c, drop_cross) = drop.apply(c);
        let z2 = z1.add(&c);
        let (f_in, ln_ffn) = self.ln_ffn.forward(ps, &z2);
        let (f, ffn) = self.ffn.forward(ps, &f_in);
        let (f, drop_ffn) = drop.apply(f);
        (
            z2.add(&f),
            ArLayerCache {
                ln_self,
                self_attn,
                drop_self,
                ln_cross,
                cross,
                drop_cross,
                ln_ffn,
                ffn,
                drop_ffn,
            },
        )
    }

    fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        c: &ArLayerCache<F>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> (Tensor<F>, Tensor<F>) {
        let df = undrop(&c.drop_ffn, dy);
        let df_in = self.ffn.backward(ps, &c.ffn, &df, grads);
        let mut dz = dy.add(&self.ln_ffn.backward(ps, &c.ln_ffn, &df_in, grads));
        let dc = undrop(&c.drop_cross, &dz);
        let (db, denc) = self.cross.backward(ps, &c.cross, &dc, grads);
        dz.add_assign(&self.ln_cross.backward(ps, &c.ln_cross, &db, grads));
        let ds = undrop(&c.drop_self, &dz);
        let (dq, dkv) = self.self_attn.backward(ps, &c.self_attn, &ds, grads);
        let da = dq.add(&dkv);
        dz.add_assign(&self.ln_self.backward(ps, &c.ln_self, &da, grads));
        (dz, denc)
    }
}

#[derive(Debug, Clone)]
pub struct ArCache<F: Real> {
    enc: EncoderCache<F>,
    dec: DecoderPart<F>,
}

#[derive(Debug, Clone)]
struct DecoderPart<F: Real> {
    inputs: Vec<usize>,
    len: usize,
    drop_emb: Option<Tensor<F>>,
    layers: Vec<ArLayerCache<F>>,
    ln_out: LayerNormCache<F>,
    normed: Tensor<F>,
}

/// Standard encoder-decoder Transformer decoding left to right. It has no
/// key/value cache: every step re-runs the stack over the whole prefix.
#[derive(Debug)]
pub struct ArTransformer<F: Real = f64> {
    cfg: ModelConfig,
    params: ParamStore<F>,
    pub encoder: Encoder,
    pub emb: Embedding,
    pub layers: Vec<ArLayer>,
    pub ln_out: LayerNorm,
    pub proj: Linear,
    forwards: AtomicUsize,
}

impl<F: Real> Clone for ArTransformer<F> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            emb: self.emb,
            layers: self.layers.clone(),
            ln_out: self.ln_out,
            proj: self.proj,
            forwards: AtomicUsize::new(0),
        }
    }
}

impl<F: Real> ArTransformer<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let emb = Embedding::new(&mut params, "ar.emb", cfg.vocab, cfg.t_max, cfg.d, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|l| ArLayer::new(&mut params, &cfg, l, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut params, "ar.ln_out", cfg.d);
        let proj = Linear::new(&mut params, "ar.proj", cfg.d, cfg.vocab, &mut rng);
        Ok(Self {
            cfg,
            params,
            encoder,
            emb,
            layers,
            ln_out,
            proj,
            forwards: AtomicUsize::new(0),
        })
    }

    fn check_inputs(&self, inputs: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || inputs.len() % batch != 0 {
            return Err(Error::contract(format!(
                "{} decoder inputs do not split into {batch} rows",
                inputs.len()
            )));
        }
        let len = inputs.len() / batch;
        if len == 0 {
            return Err(Error::Empty("decoder prefix"));
        }
        if len > self.cfg.t_max {
            return Err(Error::Length {
                what: "decoder prefix",
                len,
                max: self.cfg.t_max,
            });
        }
        if let Some(&id) = inputs.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.cfg.vocab,
            });
        }
        Ok(len)
    }

    fn decoder_forward(
        &self,
        enc: &EncoderState<F>,
        inputs: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<(Tensor<F>, DecoderPart<F>)> {
        let len = self.check_inputs(inputs, enc.batch)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let self_pad: Vec<bool> = inputs.iter().map(|&id| id == PAD).collect();
        let z = self.emb.lookup(&self.params, inputs, len, |_| false);
        let (mut z, drop_emb) = drop.apply(z);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, c) = layer.forward(&self.params, &z, enc, &self_pad, drop);
            z = next;
            caches.push(c);
        }
        let (normed, ln_out) = self.ln_out.forward(&self.params, &z);
        let logits = self.proj.forward(&self.params, &normed);
        check_finite(&logits, "decoder logits")?;
        Ok((
            logits,
            DecoderPart {
                inputs: inputs.to_vec(),
                len,
                drop_emb,
                layers: caches,
                ln_out,
                normed,
            },
        ))
    }

    /// Teacher-forced logits for `B` rows of decoder inputs (BOS followed by
    /// the target shifted right, PAD after the end), `(B·len)×V`.
    pub fn forward(
        &self,
        sources: &[Vec<usize>],
        inputs: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<(Tensor<F>, ArCache<F>)> {
        let (state, enc) = self.encoder.forward(&self.params, &self.cfg, sources, drop)?;
        let (logits, dec) = self.decoder_forward(&state, inputs, drop)?;
        Ok((logits, ArCache { enc, dec }))
    }

    pub fn backward(&self, cache: &ArCache<F>, dlogits: &Tensor<F>, grads: &mut Gradients<F>) {
        let ps = &self.params;
        let dec = &cache.dec;
        let dnormed = self.proj.backward(ps, &dec.normed, dlogits, grads);
        let mut dz = self.ln_out.backward(ps, &dec.ln_out, &dnormed, grads);
        let mut dh = Tensor::zeros(cache.enc.state.h.shape());
        for (layer, c) in self.layers.iter().zip(&dec.layers).rev() {
            let (dz_prev, de) = layer.backward(ps, c, &dz, grads);
            dz = dz_prev;
            dh.add_assign(&de);
        }
        let dz = undrop(&dec.drop_emb, &dz);
        self.emb.backward(&dec.inputs, dec.len, |_| false, &dz, grads);
        self.encoder.backward(ps, &cache.enc, &dh, grads);
    }

    /// Next-token logits (`B×V`) for equal-length prefixes, each starting
    /// with BOS. One decoder stack evaluation.
    pub fn ar_decode_step(&self, enc: &EncoderState<F>, prefixes: &[Vec<usize>]) -> Result<Tensor<F>> {
        if prefixes.len() != enc.batch {
            return Err(Error::contract(format!(
                "{} prefixes for an encoder batch of {}",
                prefixes.len(),
                enc.batch
            )));
        }
        let len = prefixes.first().map_or(0, Vec::len);
        if prefixes.iter().any(|p| p.len() != len || p.first() != Some(&BOS)) {
            return Err(Error::contract(
                "prefixes must be non-empty, equally long and start with BOS",
            ));
        }
        let inputs: Vec<usize> = prefixes.concat();
        let (logits, ..) = self.decoder_forward(enc, &inputs, &mut Dropout::inference())?;
        let v = self.cfg.vocab;
        let mut out = Tensor::zeros(&[enc.batch, v]);
        for b in 0..enc.batch {
            out.row_mut(b).copy_from_slice(logits.row(b * len + len - 1));
        }
        Ok(out)
    }
}

impl<F: Real> Seq2Seq<F> for ArTransformer<F> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn arch(&self) -> Arch {
        Arch::ArBaseline
    }

    fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }
}
