use std::sync::atomic::{AtomicUsize, Ordering};

use super::encoder::{Encoder, EncoderCache, EncoderState};
use super::layers::{
    undrop, AttnCache, Attention, Dropout, Embedding, FeedForward, FfnCache, LayerNorm, Linear,
};
use super::{check_finite, Arch, DraftInit, ModelConfig, Seq2Seq};
use crate::data::MASK;
use crate::error::{Error, Result};
use crate::spectral::{fourier_mix_backward, fourier_mix_full, GatePair, MixCache};
use crate::tensor::{softmax, Gradients, LayerNormCache, ParamId, ParamStore, Real, Rng, Tensor};

/// Cross-attention, spectral mixing and feed-forward, each pre-LN with a
/// residual connection.
#[derive(Debug, Clone, Copy)]
pub struct NatLayer {
    pub ln_cross: LayerNorm,
    pub cross: Attention,
    pub ln_mix: LayerNorm,
    pub gates: GatePair,
    /// Present with `combine_imag`: maps `[re | im]` back to width `d`.
    pub combine: Option<Linear>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct NatLayerCache<F: Real> {
    ln_cross: LayerNormCache<F>,
    cross: AttnCache<F>,
    drop_cross: Option<Tensor<F>>,
    ln_mix: LayerNormCache<F>,
    mix: Vec<MixCache<F>>,
    mix_cat: Option<Tensor<F>>,
    drop_mix: Option<Tensor<F>>,
    ln_ffn: LayerNormCache<F>,
    ffn: FfnCache<F>,
    drop_ffn: Option<Tensor<F>>,
}

impl NatLayer {
    fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, l: usize, rng: &mut Rng) -> Self {
        let p = format!("dec.{l}");
        let d = cfg.d;
        let ln_cross = LayerNorm::new(store, &format!("{p}.ln_cross"), d);
        let cross = Attention::new(store, &format!("{p}.cross"), d, cfg.n_heads, rng);
        let ln_mix = LayerNorm::new(store, &format!("{p}.ln_mix"), d);
        let gates = GatePair::new(store, &format!("{p}.mix"), cfg.t_max, d);
        let combine = cfg.combine_imag.then(|| {
            let lin = Linear::new(store, &format!("{p}.mix.combine"), 2 * d, d, rng);
            // start as "keep the real part"
            let mut w = Tensor::zeros(&[2 * d, d]);
            for i in 0..d {
                w.set(i, i, F::one());
            }
            *store.value_mut(lin.w) = w;
            lin
        });
        let ln_ffn = LayerNorm::new(store, &format!("{p}.ln_ffn"), d);
        let ffn = FeedForward::new(store, &format!("{p}.ffn"), d, cfg.d_ff, rng);
        Self {
            ln_cross,
            cross,
            ln_mix,
            gates,
            combine,
            ln_ffn,
            ffn,
        }
    }

    /// Spectral mixing of each `t_max`-row block of `x`.
    fn mix<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Tensor<F>,
        t: usize,
    ) -> Result<(Tensor<F>, Vec<MixCache<F>>, Option<Tensor<F>>)> {
        let (gr, gi) = (ps.value(self.gates.g_real), ps.value(self.gates.g_imag));
        let batch = x.rows() / t;
        let mut re = Vec::with_capacity(batch);
        let mut im = Vec::with_capacity(batch);
        let mut caches = Vec::with_capacity(batch);
        for b in 0..batch {
            let (r, i, c) = fourier_mix_full(&x.rows_range(b * t, t), gr, gi)?;
            re.push(r);
            im.push(i);
            caches.push(c);
        }
        let re = Tensor::vstack(&re);
        match self.combine {
            Some(lin) => {
                let cat = Tensor::concat_cols(&re, &Tensor::vstack(&im));
                Ok((lin.forward(ps, &cat), caches, Some(cat)))
            }
            None => Ok((re, caches, None)),
        }
    }

    fn mix_backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        caches: &[MixCache<F>],
        cat: Option<&Tensor<F>>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> Tensor<F> {
        let (gr, gi) = (ps.value(self.gates.g_real), ps.value(self.gates.g_imag));
        let d = dy.cols();
        let (dre, dim) = match (self.combine, cat) {
            (Some(lin), Some(cat)) => {
                let dcat = lin.backward(ps, cat, dy, grads);
                (dcat.slice_cols(0, d), Some(dcat.slice_cols(d, d)))
            }
            _ => (dy.clone(), None),
        };
        let t = gr.rows();
        let mut dx = Tensor::zeros(dy.shape());
        for (b, c) in caches.iter().enumerate() {
            let dim_b = dim.as_ref().map(|m| m.rows_range(b * t, t));
            let (dxb, dgr, dgi) =
                fourier_mix_backward(c, gr, gi, &dre.rows_range(b * t, t), dim_b.as_ref());
            grads.add(self.gates.g_real, &dgr);
            grads.add(self.gates.g_imag, &dgi);
            dx.set_block(b * t, 0, &dxb);
        }
        dx
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        z: &Tensor<F>,
        enc: &EncoderState<F>,
        t: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<(Tensor<F>, NatLayerCache<F>)> {
        let (a, ln_cross) = self.ln_cross.forward(ps, z);
        let (c, cross) = self
            .cross
            .forward(ps, &a, &enc.h, enc.batch, &enc.pad_mask, false);
        let (c, drop_cross) = drop.apply(c);
        let z1 = z.add(&c);
        let (b, ln_mix) = self.ln_mix.forward(ps, &z1);
        let (m, mix, mix_cat) = self.mix(ps, &b, t)?;
        let (m, drop_mix) = drop.apply(m);
        let z2 = z1.add(&m);
        let (f_in, ln_ffn) = self.ln_ffn.forward(ps, &z2);
        let (f, ffn) = self.ffn.forward(ps, &f_in);
        let (f, drop_ffn) = drop.apply(f);
        Ok((
            z2.add(&f),
            NatLayerCache {
                ln_cross,
                cross,
                drop_cross,
                ln_mix,
                mix,
                mix_cat,
                drop_mix,
                ln_ffn,
                ffn,
                drop_ffn,
            },
        ))
    }

    /// Returns `(dz, d_enc_h)`.
    pub fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        c: &NatLayerCache<F>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> (Tensor<F>, Tensor<F>) {
        let df = undrop(&c.drop_ffn, dy);
        let df_in = self.ffn.backward(ps, &c.ffn, &df, grads);
        let mut dz2 = dy.add(&self.ln_ffn.backward(ps, &c.ln_ffn, &df_in, grads));
        let dm = undrop(&c.drop_mix, &dz2);
        let db = self.mix_backward(ps, &c.mix, c.mix_cat.as_ref(), &dm, grads);
        dz2.add_assign(&self.ln_mix.backward(ps, &c.ln_mix, &db, grads));
        let dz1 = dz2;
        let dc = undrop(&c.drop_cross, &dz1);
        let (da, denc) = self.cross.backward(ps, &c.cross, &dc, grads);
        let mut dz = dz1;
        dz.add_assign(&self.ln_cross.backward(ps, &c.ln_cross, &da, grads));
        (dz, denc)
    }
}

/// Decoder activations: `z_per_layer[0]` is the draft input and
/// `z_per_layer[l]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct DecoderTrace<F: Real = f64> {
    pub z_per_layer: Vec<Tensor<F>>,
    pub logits: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct NatOutput<F: Real = f64> {
    pub trace: DecoderTrace<F>,
    /// `B×t_max`; class `c` stands for target length `c + 1`.
    pub length_logits: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct NatCache<F: Real> {
    enc: EncoderCache<F>,
    dec: DecoderCache<F>,
    pooled: Tensor<F>,
}

#[derive(Debug, Clone)]
struct DecoderCache<F: Real> {
    draft: Vec<usize>,
    drop_emb: Option<Tensor<F>>,
    layers: Vec<NatLayerCache<F>>,
    ln_out: LayerNormCache<F>,
    normed: Tensor<F>,
}

/// The non-autoregressive model: encoder, draft embedding, FourierNAT
/// decoder layers, vocabulary projection and length head.
#[derive(Debug)]
pub struct FourierNat<F: Real = f64> {
    pub(super) cfg: ModelConfig,
    arch: Arch,
    params: ParamStore<F>,
    pub encoder: Encoder,
    pub emb: Embedding,
    pub layers: Vec<NatLayer>,
    pub ln_out: LayerNorm,
    pub proj: Linear,
    pub length_head: Linear,
    forwards: AtomicUsize,
}

impl<F: Real> Clone for FourierNat<F> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            arch: self.arch,
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            emb: self.emb,
            layers: self.layers.clone(),
            ln_out: self.ln_out,
            proj: self.proj,
            length_head: self.length_head,
            forwards: AtomicUsize::new(0),
        }
    }
}

impl<F: Real> FourierNat<F> {
    /// Deterministic initialization from `seed`. `arch` must be a NAT arch.
    pub fn new(cfg: ModelConfig, arch: Arch, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !arch.is_nat() {
            return Err(Error::config(format!("{arch} is not a non-autoregressive arch")));
        }
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let emb = Embedding::new(&mut params, "dec.emb", cfg.vocab, cfg.t_max, cfg.d, &mut rng);
        let layers: Vec<NatLayer> = (0..cfg.n_layers)
            .map(|l| NatLayer::new(&mut params, &cfg, l, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut params, "dec.ln_out", cfg.d);
        let proj = Linear::new(&mut params, "dec.proj", cfg.d, cfg.vocab, &mut rng);
        let length_head = Linear::new(&mut params, "len.proj", cfg.d, cfg.t_max, &mut rng);
        if arch == Arch::FouriernatNogate {
            for layer in &layers {
                params.value_mut(layer.gates.g_real).fill(F::zero());
                params.value_mut(layer.gates.g_imag).fill(F::zero());
            }
        }
        Ok(Self {
            cfg,
            arch,
            params,
            encoder,
            emb,
            layers,
            ln_out,
            proj,
            length_head,
            forwards: AtomicUsize::new(0),
        })
    }

    /// Parameters the optimizer must leave untouched.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        if self.arch == Arch::FouriernatNogate {
            self.gate_ids()
        } else {
            Vec::new()
        }
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.gates.g_real, l.gates.g_imag])
            .collect()
    }

    fn check_draft(&self, draft: &[usize], batch: usize) -> Result<()> {
        let want = batch * self.cfg.t_max;
        if draft.len() != want {
            return Err(Error::contract(format!(
                "draft has {} ids, expected batch × t_max = {want}",
                draft.len()
            )));
        }
        if let Some(&id) = draft.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.cfg.vocab,
            });
        }
        Ok(())
    }

    fn skip_token(&self, draft: &[usize], i: usize) -> bool {
        self.cfg.draft_init == DraftInit::Zeros && draft[i] == MASK
    }

    /// Draft rows: a token embedding (MASK for unknown positions) plus the
    /// positional embedding.
    pub fn embed_draft(&self, draft: &[usize]) -> Tensor<F> {
        self.emb
            .lookup(&self.params, draft, self.cfg.t_max, |i| self.skip_token(draft, i))
    }

    fn decoder_forward(
        &self,
        enc: &EncoderState<F>,
        draft: Option<&[usize]>,
        drop: &mut Dropout<'_>,
    ) -> Result<(DecoderTrace<F>, DecoderCache<F>)> {
        let t = self.cfg.t_max;
        let draft = match draft {
            Some(d) => d.to_vec(),
            None => vec![MASK; enc.batch * t],
        };
        self.check_draft(&draft, enc.batch)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let z0 = self.embed_draft(&draft);
        let (mut z, drop_emb) = drop.apply(z0);
        let mut z_per_layer = vec![z.clone()];
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, c) = layer.forward(&self.params, &z, enc, t, drop)?;
            z = next;
            z_per_layer.push(z.clone());
            caches.push(c);
        }
        let (normed, ln_out) = self.ln_out.forward(&self.params, &z);
        let logits = self.proj.forward(&self.params, &normed);
        check_finite(&logits, "decoder logits")?;
        Ok((
            DecoderTrace {
                z_per_layer,
                logits,
            },
            DecoderCache {
                draft,
                drop_emb,
                layers: caches,
                ln_out,
                normed,
            },
        ))
    }

    /// Returns the gradient w.r.t. the encoder output.
    fn decoder_backward(
        &self,
        cache: &DecoderCache<F>,
        dlogits: &Tensor<F>,
        enc_rows: usize,
        grads: &mut Gradients<F>,
    ) -> Tensor<F> {
        let ps = &self.params;
        let dnormed = self.proj.backward(ps, &cache.normed, dlogits, grads);
        let mut dz = self.ln_out.backward(ps, &cache.ln_out, &dnormed, grads);
        let mut denc = Tensor::zeros(&[enc_rows, self.cfg.d]);
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (dz_prev, de) = layer.backward(ps, c, &dz, grads);
            dz = dz_prev;
            denc.add_assign(&de);
        }
        let dz = undrop(&cache.drop_emb, &dz);
        let draft = &cache.draft;
        self.emb.backward(
            draft,
            self.cfg.t_max,
            |i| self.skip_token(draft, i),
            &dz,
            grads,
        );
        denc
    }

    /// One parallel pass of the decoder stack. `draft` holds `B·t_max` ids
    /// (MASK where unknown); `None` means an all-MASK draft.
    pub fn decode_parallel(
        &self,
        enc: &EncoderState<F>,
        draft: Option<&[usize]>,
    ) -> Result<DecoderTrace<F>> {
        self.decoder_forward(enc, draft, &mut Dropout::inference())
            .map(|(trace, _)| trace)
    }

    pub fn length_logits(&self, enc: &EncoderState<F>) -> Tensor<F> {
        self.length_head.forward(&self.params, &enc.pooled())
    }

    /// `B×t_max` distribution; column `c` is the probability of length `c + 1`.
    pub fn predict_length(&self, enc: &EncoderState<F>) -> Tensor<F> {
        softmax(&self.length_logits(enc), 1).expect("axis 1 exists")
    }

    /// Full forward pass with caches for [`Self::backward`].
    pub fn forward(
        &self,
        sources: &[Vec<usize>],
        draft: Option<&[usize]>,
        drop: &mut Dropout<'_>,
    ) -> Result<(NatOutput<F>, NatCache<F>)> {
        let (enc_state, enc) = self.encoder.forward(&self.params, &self.cfg, sources, drop)?;
        let (trace, dec) = self.decoder_forward(&enc_state, draft, drop)?;
        let pooled = enc_state.pooled();
        let length_logits = self.length_head.forward(&self.params, &pooled);
        Ok((
            NatOutput {
                trace,
                length_logits,
            },
            NatCache { enc, dec, pooled },
        ))
    }

    pub fn backward(
        &self,
        cache: &NatCache<F>,
        dlogits: &Tensor<F>,
        dlength_logits: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) {
        let state = &cache.enc.state;
        let mut dh = self.decoder_backward(&cache.dec, dlogits, state.h.rows(), grads);
        let dpooled = self
            .length_head
            .backward(&self.params, &cache.pooled, dlength_logits, grads);
        state.pooled_backward(&dpooled, &mut dh);
        self.encoder.backward(&self.params, &cache.enc, &dh, grads);
    }
}

impl<F: Real> Seq2Seq<F> for FourierNat<F> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn arch(&self) -> Arch {
        self.arch
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
