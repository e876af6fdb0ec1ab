use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.shape().len() {
        return Err(Error::config(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(data[idx(j)]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// VJP of softmax given its output `y`: `y ⊙ (dy − Σ dy⊙y)` along `axis`.
pub fn softmax_vjp<F: Real>(y: &Tensor<F>, dy: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), dy.data());
    let out = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let dot: F = (0..len).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
            for j in 0..len {
                out[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F: Real> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> (Tensor<F>, LayerNormCache<F>) {
    let (rows, d) = (x.rows(), x.cols());
    let inv_d = F::one() / F::of(d as f64);
    let mut xhat = Tensor::zeros(&[rows, d]);
    let mut y = Tensor::zeros(&[rows, d]);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let s = F::one() / (var + eps).sqrt();
        inv_std.push(s);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = gain.data()[j] * xhat.row(r)[j] + bias.data()[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, d_gain, d_bias)`.
pub fn layer_norm_vjp<F: Real>(
    cache: &LayerNormCache<F>,
    gain: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (rows, d) = (dy.rows(), dy.cols());
    let inv_d = F::one() / F::of(d as f64);
    let mut dx = Tensor::zeros(&[rows, d]);
    let mut dgain = Tensor::zeros(&[d]);
    let dbias = dy.sum_rows();
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let (g, xh) = (dy.row(r), cache.xhat.row(r));
        for j in 0..d {
            dgain.data_mut()[j] += g[j] * xh[j];
            dxhat[j] = g[j] * gain.data()[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_d;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
        let s = cache.inv_std[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = s * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

/// VJP of relu given its input `x`.
pub fn relu_vjp<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    x.zip_map(dy, |v, g| if v > F::zero() { g } else { F::zero() })
}

/// Inverted dropout. Returns the output and, when elements were dropped, the
/// scaling mask needed by [`dropout_vjp`].
pub fn dropout<F: Real>(
    x: &Tensor<F>,
    p: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "dropout rate {p} must lie in [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = F::of(1.0 / (1.0 - p));
    let mut mask = Tensor::zeros(x.shape());
    for m in mask.data_mut() {
        if rng.uniform() >= p {
            *m = keep;
        }
    }
    Ok((x.mul(&mask), Some(mask)))
}

pub fn dropout_vjp<F: Real>(mask: Option<&Tensor<F>>, dy: Tensor<F>) -> Tensor<F> {
    match mask {
        Some(m) => dy.mul(m),
        None => dy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()])
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&row(&[0.0, 0.0]), 1).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(
            softmax(&row(&[1000.0, 1000.0]), 1).unwrap().data(),
            &[0.5, 0.5]
        );
        // e^x / Σe^x evaluated independently
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let expect = [0.09003, 0.24473, 0.66524];
        let got = softmax(&row(&[1.0, 2.0, 3.0]), 1).unwrap();
        for j in 0..3 {
            assert!((got.data()[j] - expect[j]).abs() < 1e-5);
            assert!((got.data()[j] - e[j] / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_axis_zero_and_bad_axis() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 5.0], vec![1.0, 2.0]]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((y.at(0, 1) + y.at(1, 1) - 1.0f64).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let x = Tensor::<f64>::randn(&[4, 7], 3.0, &mut rng);
            let y = softmax(&x, 1).unwrap();
            for r in 0..4 {
                let s: f64 = y.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(y.row(r).iter().all(|&v| v > 0.0));
            }
            let shifted = softmax(&x.map(|v| v + 17.5), 1).unwrap();
            assert!(shifted.max_abs_diff(&y) < 1e-9);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&row(&[4.0, 4.0]), &ones, &zeros, 1e-5);
        assert_eq!(y.data(), &[0.0, 0.0]);

        let (y, _) = layer_norm(&row(&[1.0, 3.0]), &ones, &zeros, 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);

        let bias = Tensor::from_f64(&[2], &[0.25, -2.0]).unwrap();
        let (y, _) = layer_norm(&row(&[1.0, 3.0]), &zeros, &bias, 1e-5);
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn dropout_examples() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::full(&[100_000], 1.0);
        let (y, m) = dropout(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert!(m.is_none());
        let (y, _) = dropout(&x, 0.7, &mut rng, false).unwrap();
        assert_eq!(y, x);
        let (y, _) = dropout(&x, 0.5, &mut rng, true).unwrap();
        let mean = y.sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
    }
}
