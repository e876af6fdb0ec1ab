//! Building blocks with explicit forward caches and backward passes.

use crate::tensor::{
    dropout, dropout_vjp, gemm, gemm_acc, layer_norm, layer_norm_vjp, relu, relu_vjp, softmax_vjp,
    Gradients, LayerNormCache, ParamId, ParamStore, Real, Rng, Tensor,
};

pub const LN_EPS: f64 = 1e-5;

/// Dropout context for one forward pass. Without an rng it is inference.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl<'a> Dropout<'a> {
    pub fn inference() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn training(rate: f64, rng: &'a mut Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng(&mut self) -> Option<&mut Rng> {
        self.rng.as_deref_mut()
    }

    /// Rates are validated with the model config, so this cannot fail.
    pub fn apply<F: Real>(&mut self, x: Tensor<F>) -> (Tensor<F>, Option<Tensor<F>>) {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                dropout(&x, self.rate, rng, true).expect("dropout rate validated by config")
            }
            _ => (x, None),
        }
    }
}

/// `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::uniform(&[d_in, d_out], -limit, limit, rng),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<F: Real>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Tensor<F> {
        let mut y = gemm(x, false, ps.value(self.w), false);
        y.add_row_vector(ps.value(self.b));
        y
    }

    pub fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> Tensor<F> {
        gemm_acc(x, true, dy, false, grads.slot(self.w));
        grads.add(self.b, &dy.sum_rows());
        gemm(dy, false, ps.value(self.w), true)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], F::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> (Tensor<F>, LayerNormCache<F>) {
        layer_norm(
            x,
            ps.value(self.gain),
            ps.value(self.bias),
            F::of(LN_EPS),
        )
    }

    pub fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        cache: &LayerNormCache<F>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> Tensor<F> {
        let (dx, dg, db) = layer_norm_vjp(cache, ps.value(self.gain), dy);
        grads.add(self.gain, &dg);
        grads.add(self.bias, &db);
        dx
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Debug, Clone)]
pub struct FfnCache<F: Real> {
    x: Tensor<F>,
    pre: Tensor<F>,
    hidden: Tensor<F>,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, rng),
        }
    }

    pub fn forward<F: Real>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> (Tensor<F>, FfnCache<F>) {
        let pre = self.inner.forward(ps, x);
        let hidden = relu(&pre);
        let y = self.outer.forward(ps, &hidden);
        (
            y,
            FfnCache {
                x: x.clone(),
                pre,
                hidden,
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        cache: &FfnCache<F>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> Tensor<F> {
        let dh = self.outer.backward(ps, &cache.hidden, dy, grads);
        let dpre = relu_vjp(&cache.pre, &dh);
        self.inner.backward(ps, &cache.x, &dpre, grads)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs. Inputs hold `batch` examples stacked row-wise; every
/// example has the same query length and the same key length.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<F: Real> {
    xq: Tensor<F>,
    xkv: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    batch: usize,
    /// Attention weights, `T×S`, indexed by `example * heads + head`.
    pub probs: Vec<Tensor<F>>,
    ctx: Tensor<F>,
}

impl Attention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `key_pad[b*S + j]` removes key `j` of example `b` from every softmax;
    /// `causal` removes keys after the query position. A row with no
    /// admissible key attends to nothing and yields zero context.
    pub fn forward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        xq: &Tensor<F>,
        xkv: &Tensor<F>,
        batch: usize,
        key_pad: &[bool],
        causal: bool,
    ) -> (Tensor<F>, AttnCache<F>) {
        let q = self.q.forward(ps, xq);
        let k = self.k.forward(ps, xkv);
        let v = self.v.forward(ps, xkv);
        let (t, s, d) = (q.rows() / batch, k.rows() / batch, q.cols());
        let dh = d / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut ctx = Tensor::zeros(&[t * batch, d]);
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let pad = &key_pad[b * s..(b + 1) * s];
            for h in 0..self.heads {
                let qh = q.block(b * t, t, h * dh, dh);
                let kh = k.block(b * s, s, h * dh, dh);
                let vh = v.block(b * s, s, h * dh, dh);
                let mut p = gemm(&qh, false, &kh, true);
                for i in 0..t {
                    masked_softmax_row(p.row_mut(i), scale, |j| {
                        !pad[j] && !(causal && j > i)
                    });
                }
                ctx.set_block(b * t, h * dh, &gemm(&p, false, &vh, false));
                probs.push(p);
            }
        }
        let out = self.o.forward(ps, &ctx);
        (
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                batch,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(d_xq, d_xkv)`.
    pub fn backward<F: Real>(
        &self,
        ps: &ParamStore<F>,
        cache: &AttnCache<F>,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> (Tensor<F>, Tensor<F>) {
        let dctx = self.o.backward(ps, &cache.ctx, dy, grads);
        let batch = cache.batch;
        let (t, s, d) = (
            cache.q.rows() / batch,
            cache.k.rows() / batch,
            cache.q.cols(),
        );
        let dh = d / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::zeros(&[t * batch, d]);
        let mut dk = Tensor::zeros(&[s * batch, d]);
        let mut dv = Tensor::zeros(&[s * batch, d]);
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let dctx_h = dctx.block(b * t, t, h * dh, dh);
                let qh = cache.q.block(b * t, t, h * dh, dh);
                let kh = cache.k.block(b * s, s, h * dh, dh);
                let vh = cache.v.block(b * s, s, h * dh, dh);
                let dp = gemm(&dctx_h, false, &vh, true);
                dv.set_block(b * s, h * dh, &gemm(p, true, &dctx_h, false));
                let ds = softmax_vjp(p, &dp, 1).scale(scale);
                dq.set_block(b * t, h * dh, &gemm(&ds, false, &kh, false));
                dk.set_block(b * s, h * dh, &gemm(&ds, true, &qh, false));
            }
        }
        let dxq = self.q.backward(ps, &cache.xq, &dq, grads);
        let mut dxkv = self.k.backward(ps, &cache.xkv, &dk, grads);
        dxkv.add_assign(&self.v.backward(ps, &cache.xkv, &dv, grads));
        (dxq, dxkv)
    }
}

/// Scales admissible scores and replaces the row by their softmax; other
/// entries become exactly 0.
fn masked_softmax_row<F: Real>(row: &mut [F], scale: F, allowed: impl Fn(usize) -> bool) {
    let mut max = F::neg_infinity();
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x *= scale;
            max = max.max(*x);
        }
    }
    let mut sum = F::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = F::zero();
        }
    }
    if sum > F::zero() {
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Token table plus learned positional table.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub tok: ParamId,
    pub pos: ParamId,
}

impl Embedding {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        vocab: usize,
        positions: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            tok: store.add(format!("{name}.tok"), Tensor::randn(&[vocab, d], EMB_STD, rng)),
            pos: store.add(format!("{name}.pos"), Tensor::randn(&[positions, d], EMB_STD, rng)),
        }
    }

    /// Row `i` is `tok[ids[i]] + pos[i % seq_len]`, with the token part
    /// left out where `skip_token(i)` holds. Ids and lengths must already be
    /// validated.
    pub fn lookup<F: Real>(
        &self,
        ps: &ParamStore<F>,
        ids: &[usize],
        seq_len: usize,
        skip_token: impl Fn(usize) -> bool,
    ) -> Tensor<F> {
        let (tok, pos) = (ps.value(self.tok), ps.value(self.pos));
        let d = tok.cols();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            let row = out.row_mut(i);
            row.copy_from_slice(pos.row(i % seq_len));
            if !skip_token(i) {
                for (o, &v) in row.iter_mut().zip(tok.row(id)) {
                    *o += v;
                }
            }
        }
        out
    }

    pub fn backward<F: Real>(
        &self,
        ids: &[usize],
        seq_len: usize,
        skip_token: impl Fn(usize) -> bool,
        dy: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) {
        {
            let dpos = grads.slot(self.pos);
            for i in 0..ids.len() {
                for (o, &g) in dpos.row_mut(i % seq_len).iter_mut().zip(dy.row(i)) {
                    *o += g;
                }
            }
        }
        let dtok = grads.slot(self.tok);
        for (i, &id) in ids.iter().enumerate() {
            if !skip_token(i) {
                for (o, &g) in dtok.row_mut(id).iter_mut().zip(dy.row(i)) {
                    *o += g;
                }
            }
        }
    }
}

pub const EMB_STD: f64 = 1.0;

pub fn undrop<F: Real>(mask: &Option<Tensor<F>>, dy: &Tensor<F>) -> Tensor<F> {
    dropout_vjp(mask.as_ref(), dy.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, DiffFn};

    type Tensor = crate::tensor::Tensor<f64>;

    /// Wraps a layer as a function of (inputs…, parameters…) for grad_check.
    fn store_with(ps: &ParamStore, values: &[Tensor]) -> ParamStore {
        let mut out = ps.clone();
        for (p, v) in out.iter_mut().zip(values) {
            p.value = v.clone();
        }
        out
    }

    fn param_values(ps: &ParamStore) -> Vec<Tensor> {
        ps.iter().map(|p| p.value.clone()).collect()
    }

    #[test]
    fn linear_ffn_and_layer_norm_gradients() {
        let mut rng = Rng::new(1);
        let mut ps = ParamStore::new();
        let ffn = FeedForward::new(&mut ps, "ffn", 4, 6, &mut rng);
        let ln = LayerNorm::new(&mut ps, "ln", 4);
        // perturb the layer-norm parameters away from their trivial init
        let mut vals = param_values(&ps);
        for v in vals.iter_mut() {
            *v = v.add(&Tensor::randn(v.shape(), 0.3, &mut rng));
        }
        let ps = store_with(&ps, &vals);
        let np = ps.len();
        let f = DiffFn::new(
            "ln+ffn",
            |x| {
                let ps = store_with(&ps, &x[1..]);
                let (a, _) = ln.forward(&ps, &x[0]);
                ffn.forward(&ps, &a).0
            },
            |x, g| {
                let ps = store_with(&ps, &x[1..]);
                let mut grads = ps.gradients();
                let (a, lc) = ln.forward(&ps, &x[0]);
                let (_, fc) = ffn.forward(&ps, &a);
                let da = ffn.backward(&ps, &fc, g, &mut grads);
                let dx = ln.backward(&ps, &lc, &da, &mut grads);
                let mut out = vec![dx];
                out.extend(grads.iter().cloned());
                out
            },
        );
        let mut inputs = vec![Tensor::randn(&[3, 4], 1.0, &mut rng)];
        inputs.extend(vals);
        assert_eq!(inputs.len(), np + 1);
        assert!(grad_check(&f, &inputs, 1e-5, &mut rng).unwrap() < 1e-4);
    }

    #[test]
    fn attention_gradients_with_masks() {
        let mut rng = Rng::new(2);
        let mut ps = ParamStore::new();
        let attn = Attention::new(&mut ps, "att", 4, 2, &mut rng);
        let vals = param_values(&ps);
        for (causal, pad) in [(false, vec![false, false, true]), (true, vec![false; 3])] {
            let f = DiffFn::new(
                "attention",
                |x| {
                    let ps = store_with(&ps, &x[2..]);
                    attn.forward(&ps, &x[0], &x[1], 1, &pad, causal).0
                },
                |x, g| {
                    let ps = store_with(&ps, &x[2..]);
                    let mut grads = ps.gradients();
                    let (_, c) = attn.forward(&ps, &x[0], &x[1], 1, &pad, causal);
                    let (dq, dkv) = attn.backward(&ps, &c, g, &mut grads);
                    let mut out = vec![dq, dkv];
                    out.extend(grads.iter().cloned());
                    out
                },
            );
            let mut inputs = vec![
                Tensor::randn(&[3, 4], 1.0, &mut rng),
                Tensor::randn(&[3, 4], 1.0, &mut rng),
            ];
            inputs.extend(vals.clone());
            assert!(grad_check(&f, &inputs, 1e-5, &mut rng).unwrap() < 1e-4);
        }
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut rng = Rng::new(3);
        let mut ps = ParamStore::new();
        let attn = Attention::new(&mut ps, "att", 4, 2, &mut rng);
        let xq = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let xkv = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let (out, cache) = attn.forward(&ps, &xq, &xkv, 1, &[false], false);
        let v = attn.v.forward(&ps, &xkv);
        let expect = attn.o.forward(&ps, &v);
        for t in 0..5 {
            for c in 0..4 {
                assert!((out.at(t, c) - expect.at(0, c)).abs() < 1e-12);
            }
        }
        assert!(cache.probs.iter().all(|p| p.data().iter().all(|&w| w == 1.0)));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = Rng::new(4);
        let mut ps = ParamStore::new();
        let attn = Attention::new(&mut ps, "att", 4, 1, &mut rng);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let (_, cache) = attn.forward(&ps, &x, &x, 1, &[false, true, false], true);
        let p = &cache.probs[0];
        assert_eq!(p.at(0, 1), 0.0);
        assert_eq!(p.at(0, 2), 0.0);
        assert_eq!(p.at(0, 0), 1.0);
        assert_eq!(p.at(2, 1), 0.0);
        assert!((p.at(2, 0) + p.at(2, 2) - 1.0).abs() < 1e-12);
    }
}
