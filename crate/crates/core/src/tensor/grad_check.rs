use super::{Rng, Tensor};
use crate::error::{Error, Result};

type Forward<'a> = Box<dyn Fn(&[Tensor]) -> Tensor + 'a>;
type Vjp<'a> = Box<dyn Fn(&[Tensor], &Tensor) -> Vec<Tensor> + 'a>;

/// A forward map paired with its vector-Jacobian product.
pub struct DiffFn<'a> {
    pub name: String,
    forward: Forward<'a>,
    vjp: Vjp<'a>,
}

impl<'a> DiffFn<'a> {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&[Tensor]) -> Tensor + 'a,
        vjp: impl Fn(&[Tensor], &Tensor) -> Vec<Tensor> + 'a,
    ) -> Self {
        Self {
            name: name.into(),
            forward: Box::new(forward),
            vjp: Box::new(vjp),
        }
    }

    pub fn forward(&self, inputs: &[Tensor]) -> Tensor {
        (self.forward)(inputs)
    }

    pub fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Vec<Tensor> {
        (self.vjp)(inputs, upstream)
    }
}

/// Checks `f.vjp` against central differences of the scalar `⟨r, f(x)⟩` for
/// a random projection `r`. Returns the largest
/// `|analytic − numeric| / max(1, |numeric|)` over every input coordinate.
pub fn grad_check(f: &DiffFn<'_>, inputs: &[Tensor], eps: f64, rng: &mut Rng) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!(
            "grad_check eps {eps} must be positive"
        )));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("{}: inputs", f.name)));
    }
    let out = f.forward(inputs);
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("{}: forward output", f.name)));
    }
    let proj = Tensor::randn(out.shape(), 1.0, rng);
    let analytic = f.vjp(inputs, &proj);
    if analytic.len() != inputs.len() {
        return Err(Error::contract(format!(
            "{}: vjp returned {} gradients for {} inputs",
            f.name,
            analytic.len(),
            inputs.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() || !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "{}: gradient of input {i}",
                f.name
            )));
        }
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = f.forward(&probe).dot(&proj);
            probe[i].data_mut()[j] = orig - eps;
            let minus = f.forward(&probe).dot(&proj);
            probe[i].data_mut()[j] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{}: perturbed forward at input {i}[{j}]",
                    f.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{
        layer_norm, layer_norm_vjp, matmul_vjp, relu, relu_vjp, softmax, softmax_vjp,
    };

    #[test]
    fn matmul_check() {
        let mut rng = Rng::new(7);
        let f = DiffFn::new(
            "matmul",
            |x| x[0].matmul(&x[1]).unwrap(),
            |x, g| {
                let (da, db) = matmul_vjp(&x[0], &x[1], g);
                vec![da, db]
            },
        );
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
        assert!(grad_check(&f, &[a, b], 1e-5, &mut rng).unwrap() < 1e-7);
    }

    #[test]
    fn constant_map_has_zero_error() {
        let mut rng = Rng::new(1);
        let f = DiffFn::new(
            "const",
            |_| Tensor::full(&[2], 3.0),
            |x, _| vec![Tensor::zeros(x[0].shape())],
        );
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        assert_eq!(grad_check(&f, &[x], 1e-5, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut rng = Rng::new(2);
        let gold = [1usize, 3, 0];
        let f = DiffFn::new(
            "softmax+ce",
            |x| {
                let p = softmax(&x[0], 1).unwrap();
                let loss: f64 = gold
                    .iter()
                    .enumerate()
                    .map(|(t, &g)| -p.at(t, g).ln())
                    .sum();
                Tensor::full(&[1], loss)
            },
            |x, g| {
                let mut d = softmax(&x[0], 1).unwrap();
                for (t, &y) in gold.iter().enumerate() {
                    let v = d.at(t, y) - 1.0;
                    d.set(t, y, v);
                }
                vec![d.scale(g.data()[0])]
            },
        );
        let logits = Tensor::randn(&[3, 5], 2.0, &mut rng);
        assert!(grad_check(&f, &[logits], 1e-5, &mut rng).unwrap() < 1e-6);
    }

    #[test]
    fn elementwise_ops_pass_on_random_instances() {
        let mut rng = Rng::new(10);
        let sm = DiffFn::new(
            "softmax",
            |x| softmax(&x[0], 1).unwrap(),
            |x, g| vec![softmax_vjp(&softmax(&x[0], 1).unwrap(), g, 1)],
        );
        let ln = DiffFn::new(
            "layer_norm",
            |x| layer_norm(&x[0], &x[1], &x[2], 1e-5).0,
            |x, g| {
                let (_, cache) = layer_norm(&x[0], &x[1], &x[2], 1e-5);
                let (dx, dg, db) = layer_norm_vjp(&cache, &x[1], g);
                vec![dx, dg, db]
            },
        );
        let rl = DiffFn::new("relu", |x| relu(&x[0]), |x, g| vec![relu_vjp(&x[0], g)]);
        for _ in 0..10 {
            let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
            assert!(grad_check(&sm, std::slice::from_ref(&x), 1e-5, &mut rng).unwrap() < 1e-4);
            let gain = Tensor::randn(&[6], 1.0, &mut rng);
            let bias = Tensor::randn(&[6], 1.0, &mut rng);
            assert!(grad_check(&ln, &[x.clone(), gain, bias], 1e-5, &mut rng).unwrap() < 1e-4);
            // keep relu inputs away from the kink
            let x = x.map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
            assert!(grad_check(&rl, &[x], 1e-5, &mut rng).unwrap() < 1e-4);
        }
    }

    #[test]
    fn non_finite_input_is_reported() {
        let mut rng = Rng::new(0);
        let f = DiffFn::new("id", |x| x[0].clone(), |_, g| vec![g.clone()]);
        let x = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        let err = grad_check(&f, &[x], 1e-5, &mut rng).unwrap_err();
        assert!(err.to_string().contains("id"));
    }
}
