//! Frequency-domain token mixing along the sequence axis.
//!
//! A `T×d` matrix is transformed column by column: row `k` of the spectrum
//! holds frequency bin `k` for every channel. The forward transform is
//! unnormalized and the inverse carries the `1/T` factor.
//!
//! Power-of-two lengths use an iterative radix-2 transform whose butterflies
//! operate on whole rows; any other length falls back to the direct `O(T²)`
//! sum, which is also kept public as a reference.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

/// Real and imaginary parts of a `T×d` spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<F: Real = f64> {
    pub real: Tensor<F>,
    pub imag: Tensor<F>,
}

impl<F: Real> ComplexSpectrum<F> {
    pub fn new(real: Tensor<F>, imag: Tensor<F>) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(Error::Dimension {
                op: "spectrum",
                lhs: real.shape().to_vec(),
                rhs: imag.shape().to_vec(),
            });
        }
        Ok(Self { real, imag })
    }

    pub fn len(&self) -> usize {
        self.real.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.real.cols()
    }
}

/// Learned per-bin, per-channel multipliers for the real and imaginary parts
/// of the spectrum. Both are `T_max×d` parameters.
#[derive(Debug, Clone, Copy)]
pub struct GatePair {
    pub g_real: ParamId,
    pub g_imag: ParamId,
}

impl GatePair {
    /// Registers both gates initialized to 1, which makes the mixing an
    /// exact identity.
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, t_max: usize, d: usize) -> Self {
        Self {
            g_real: store.add(
                format!("{prefix}.g_real"),
                Tensor::full(&[t_max, d], F::one()),
            ),
            g_imag: store.add(
                format!("{prefix}.g_imag"),
                Tensor::full(&[t_max, d], F::one()),
            ),
        }
    }
}

fn twiddles<F: Real>(n: usize, inverse: bool) -> Vec<(F, F)> {
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n / 2)
        .map(|k| {
            let angle = sign * 2.0 * PI * k as f64 / n as f64;
            (F::of(angle.cos()), F::of(angle.sin()))
        })
        .collect()
}

/// In-place unnormalized radix-2 transform over the rows of `re`/`im`.
fn fft_rows<F: Real>(re: &mut Tensor<F>, im: &mut Tensor<F>, inverse: bool) {
    let n = re.rows();
    let d = re.cols();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    let (rd, id) = (re.data_mut(), im.data_mut());
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            for c in 0..d {
                rd.swap(i * d + c, j * d + c);
                id.swap(i * d + c, j * d + c);
            }
        }
    }
    let table = twiddles::<F>(n, inverse);
    let mut half = 1;
    while half < n {
        let stride = n / (2 * half);
        for start in (0..n).step_by(2 * half) {
            for j in 0..half {
                let (wr, wi) = table[j * stride];
                let a = (start + j) * d;
                let b = (start + j + half) * d;
                for c in 0..d {
                    let (br, bi) = (rd[b + c], id[b + c]);
                    let tr = wr * br - wi * bi;
                    let ti = wr * bi + wi * br;
                    let (ar, ai) = (rd[a + c], id[a + c]);
                    rd[a + c] = ar + tr;
                    id[a + c] = ai + ti;
                    rd[b + c] = ar - tr;
                    id[b + c] = ai - ti;
                }
            }
        }
        half *= 2;
    }
}

/// Direct `O(T²)` transform of each column, unnormalized in both directions.
pub fn dft_naive<F: Real>(re: &Tensor<F>, im: &Tensor<F>, inverse: bool) -> ComplexSpectrum<F> {
    let (n, d) = (re.rows(), re.cols());
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = Tensor::zeros(&[n, d]);
    let mut out_im = Tensor::zeros(&[n, d]);
    for k in 0..n {
        for t in 0..n {
            // reduce k·t mod n first so the angle stays small
            let angle = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            let (c, s) = (F::of(angle.cos()), F::of(angle.sin()));
            for ch in 0..d {
                let (xr, xi) = (re.at(t, ch), im.at(t, ch));
                let o = k * d + ch;
                out_re.data_mut()[o] += xr * c - xi * s;
                out_im.data_mut()[o] += xr * s + xi * c;
            }
        }
    }
    ComplexSpectrum {
        real: out_re,
        imag: out_im,
    }
}

/// Unnormalized complex transform, fast path when the length allows it.
fn transform<F: Real>(re: &Tensor<F>, im: &Tensor<F>, inverse: bool) -> ComplexSpectrum<F> {
    if re.rows().is_power_of_two() {
        let (mut r, mut i) = (re.clone(), im.clone());
        fft_rows(&mut r, &mut i, inverse);
        ComplexSpectrum { real: r, imag: i }
    } else {
        dft_naive(re, im, inverse)
    }
}

/// Forward DFT of a real `T×d` matrix along the sequence axis:
/// `X[k,c] = Σ_t x[t,c]·e^{−2πi·kt/T}`.
pub fn dft_seq<F: Real>(x: &Tensor<F>) -> ComplexSpectrum<F> {
    transform(x, &Tensor::zeros(x.shape()), false)
}

/// Inverse DFT with the `1/T` factor. Returns both parts.
pub fn idft_seq<F: Real>(spec: &ComplexSpectrum<F>) -> (Tensor<F>, Tensor<F>) {
    let out = transform(&spec.real, &spec.imag, true);
    let inv_n = F::one() / F::of(spec.len().max(1) as f64);
    (out.real.scale(inv_n), out.imag.scale(inv_n))
}

fn check_gates<F: Real>(
    spec_shape: &[usize],
    g_real: &Tensor<F>,
    g_imag: &Tensor<F>,
) -> Result<()> {
    if g_real.shape() != g_imag.shape() {
        return Err(Error::Dimension {
            op: "gates",
            lhs: g_real.shape().to_vec(),
            rhs: g_imag.shape().to_vec(),
        });
    }
    if spec_shape != g_real.shape() {
        return Err(Error::contract(format!(
            "sequence shape {spec_shape:?} must equal the gate shape {:?}; drafts are padded to T_max",
            g_real.shape()
        )));
    }
    Ok(())
}

/// Elementwise gating `R' = R ⊙ G_real`, `I' = I ⊙ G_imag`.
pub fn apply_gates<F: Real>(
    spec: &ComplexSpectrum<F>,
    g_real: &Tensor<F>,
    g_imag: &Tensor<F>,
) -> Result<ComplexSpectrum<F>> {
    check_gates(spec.real.shape(), g_real, g_imag)?;
    Ok(ComplexSpectrum {
        real: spec.real.mul(g_real),
        imag: spec.imag.mul(g_imag),
    })
}

/// Values kept from the forward pass for [`fourier_mix_backward`].
#[derive(Debug, Clone)]
pub struct MixCache<F: Real> {
    pub spectrum: ComplexSpectrum<F>,
}

/// Gated mixing before real-part truncation: returns both parts of
/// `iDFT(gates ⊙ DFT(x))` and the input spectrum.
pub fn fourier_mix_full<F: Real>(
    x: &Tensor<F>,
    g_real: &Tensor<F>,
    g_imag: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, MixCache<F>)> {
    check_gates(x.shape(), g_real, g_imag)?;
    let spectrum = dft_seq(x);
    let gated = apply_gates(&spectrum, g_real, g_imag)?;
    let (re, im) = idft_seq(&gated);
    Ok((re, im, MixCache { spectrum }))
}

/// `Re(iDFT(gates ⊙ DFT(x)))`.
pub fn fourier_mix<F: Real>(
    x: &Tensor<F>,
    g_real: &Tensor<F>,
    g_imag: &Tensor<F>,
) -> Result<Tensor<F>> {
    fourier_mix_full(x, g_real, g_imag).map(|(re, _, _)| re)
}

/// Backward pass of [`fourier_mix_full`] given upstream gradients for the
/// real output and, optionally, the imaginary output. Returns
/// `(dx, d_g_real, d_g_imag)`.
///
/// With `U = DFT(u_re + i·u_im)/T` the gradient w.r.t. the gated spectrum is
/// `U`; gate gradients are `U.re ⊙ R` and `U.im ⊙ I`, and the input gradient
/// is the real part of the unnormalized inverse transform of `gates ⊙ U`.
pub fn fourier_mix_backward<F: Real>(
    cache: &MixCache<F>,
    g_real: &Tensor<F>,
    g_imag: &Tensor<F>,
    up_real: &Tensor<F>,
    up_imag: Option<&Tensor<F>>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let n = up_real.rows();
    let zeros;
    let up_imag = match up_imag {
        Some(t) => t,
        None => {
            zeros = Tensor::zeros(up_real.shape());
            &zeros
        }
    };
    let u = transform(up_real, up_imag, false);
    let inv_n = F::one() / F::of(n as f64);
    let (ur, ui) = (u.real.scale(inv_n), u.imag.scale(inv_n));
    let d_g_real = ur.mul(&cache.spectrum.real);
    let d_g_imag = ui.mul(&cache.spectrum.imag);
    let back = transform(&ur.mul(g_real), &ui.mul(g_imag), true);
    (back.real, d_g_real, d_g_imag)
}

/// Vector-Jacobian product of [`fourier_mix`].
pub fn fourier_mix_vjp<F: Real>(
    x: &Tensor<F>,
    g_real: &Tensor<F>,
    g_imag: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (_, _, cache) = fourier_mix_full(x, g_real, g_imag)?;
    if upstream.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "fourier_mix_vjp",
            lhs: x.shape().to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    Ok(fourier_mix_backward(&cache, g_real, g_imag, upstream, None))
}
