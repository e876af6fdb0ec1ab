use super::*;
use crate::data::{generate, make_batch, TaskKind, TaskSpec};
use crate::model::{Arch, DraftInit, ModelConfig, Seq2Seq};
use crate::tensor::{grad_check, DiffFn};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

type Tensor = crate::tensor::Tensor<f64>;

fn vt(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_f64(shape, v).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn schedule_values() {
    let base = 512f64.powf(-0.5);
    assert!(close(lr_at(1, 512, 4000).unwrap(), base * 4000f64.powf(-1.5), 1e-12));
    assert!(close(lr_at(4000, 512, 4000).unwrap(), 6.987712429686844e-4, 1e-9));
    assert!(close(lr_at(16000, 512, 4000).unwrap(), base / 16000f64.sqrt(), 1e-12));
    // peak sits at the end of warmup
    let peak = lr_at(400, 64, 400).unwrap();
    assert!(lr_at(399, 64, 400).unwrap() < peak && lr_at(401, 64, 400).unwrap() < peak);
    assert!(matches!(lr_at(0, 512, 4000), Err(Error::Contract(_))));
}

fn store_with(values: &[f64]) -> ParamStore {
    let mut ps = ParamStore::new();
    ps.add("w", vt(&[values.len()], values));
    ps
}

#[test]
fn adam_matches_scalar_recurrence() {
    let cfg = TrainConfig::default();
    let grads = [[0.5, -2.0], [0.1, -2.0], [-0.3, 4.0]];
    let lrs = [0.01, 0.02, 0.005];
    let mut ps = store_with(&[1.0, -1.0]);
    let mut opt = OptimState::new(&ps);
    // scalar oracle
    let (mut w, mut m, mut v) = ([1.0f64, -1.0], [0.0f64; 2], [0.0f64; 2]);
    for (t, (g, lr)) in grads.iter().zip(lrs).enumerate() {
        ps.iter_mut().next().unwrap().grad = vt(&[2], g);
        adam_step(&mut ps, &mut opt, lr, &cfg, &[]).unwrap();
        let t = (t + 1) as i32;
        for j in 0..2 {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.98 * v[j] + 0.02 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.98f64.powi(t));
            w[j] -= lr * mh / (vh.sqrt() + 1e-9);
        }
        for j in 0..2 {
            assert!(close(ps.iter().next().unwrap().value.data()[j], w[j], 1e-12));
        }
    }
}

#[test]
fn adam_first_step_and_edge_cases() {
    let cfg = TrainConfig::default();
    let mut ps = store_with(&[0.0, 0.0]);
    let mut opt = OptimState::new(&ps);
    ps.iter_mut().next().unwrap().grad = vt(&[2], &[3.0, -0.25]);
    adam_step(&mut ps, &mut opt, 0.1, &cfg, &[]).unwrap();
    let w = ps.iter().next().unwrap().value.data().to_vec();
    assert!(close(w[0], -0.1 * 3.0 / (3.0 + 1e-9), 1e-12));
    assert!(close(w[1], 0.1 * 0.25 / (0.25 + 1e-9), 1e-12));

    // lr 0 leaves parameters untouched
    let before = ps.clone();
    adam_step(&mut ps, &mut opt, 0.0, &cfg, &[]).unwrap();
    assert_eq!(ps.iter().next().unwrap().value, before.iter().next().unwrap().value);

    // frozen parameters keep their value and moments
    let mut ps = store_with(&[1.0]);
    let id = ps.add("gate", vt(&[1], &[0.0]));
    let mut opt = OptimState::new(&ps);
    for p in ps.iter_mut() {
        p.grad = vt(&[1], &[1.0]);
    }
    adam_step(&mut ps, &mut opt, 0.1, &cfg, &[id]).unwrap();
    assert_eq!(ps.value(id).data(), &[0.0]);
    assert_eq!(opt.m[id.0].data(), &[0.0]);
    assert_ne!(ps.iter().next().unwrap().value.data(), &[1.0]);

    // a non-finite gradient names the parameter and changes nothing
    let mut ps = store_with(&[1.0, 2.0]);
    ps.add("bad", vt(&[1], &[0.0]));
    let mut opt = OptimState::new(&ps);
    for p in ps.iter_mut() {
        p.grad = vt(p.value.shape(), &vec![1.0; p.value.shape()[0]]);
    }
    ps.iter_mut().nth(1).unwrap().grad = vt(&[1], &[f64::NAN]);
    let err = adam_step(&mut ps, &mut opt, 0.1, &cfg, &[]).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("bad")), "{err}");
    assert_eq!(ps.iter().next().unwrap().value.data(), &[1.0, 2.0]);
    assert_eq!(opt.step, 0);
}

#[test]
fn clipping_scales_to_the_limit() {
    let mut ps = store_with(&[0.0, 0.0]);
    ps.add("b", vt(&[1], &[0.0]));
    let gs = [vec![3.0, 0.0], vec![4.0]];
    for (p, g) in ps.iter_mut().zip(&gs) {
        p.grad = vt(&[g.len()], g);
    }
    assert!(close(clip_grad_norm(&mut ps, 1.0), 5.0, 1e-12));
    let after: f64 = ps.iter().map(|p| p.grad.norm_sq()).sum::<f64>().sqrt();
    assert!(close(after, 1.0, 1e-12));
    assert!(close(ps.iter().nth(1).unwrap().grad.data()[0], 0.8, 1e-12));
    // under the limit nothing moves
    assert!(close(clip_grad_norm(&mut ps, 2.0), 1.0, 1e-12));
    assert!(close(ps.iter().nth(1).unwrap().grad.data()[0], 0.8, 1e-12));
}

#[test]
fn token_loss_fixtures() {
    let logits = Tensor::zeros(&[3, 4]);
    let l = nat_loss(&logits, &[1, 2, 0], &[false, false, true], 0.0).unwrap();
    assert!(close(l.sum, 2.0 * 4f64.ln(), 1e-12));
    assert_eq!(l.count, 2);
    assert!(l.dlogits.row(2).iter().all(|&x| x == 0.0));
    assert!(close(l.dlogits.row(0)[1], 0.25 - 1.0, 1e-12));

    // confident and right is nearly free, confident and wrong is expensive
    let sharp = Tensor::from_rows(&[vec![20.0, 0.0, 0.0]]);
    assert!(nat_loss(&sharp, &[0], &[false], 0.0).unwrap().sum < 1e-8);
    assert!(close(nat_loss(&sharp, &[1], &[false], 0.0).unwrap().sum, 20.0, 1e-6));

    // smoothing against uniform logits is still ln V
    let s = nat_loss(&Tensor::zeros(&[1, 5]), &[3], &[false], 0.1).unwrap();
    assert!(close(s.sum, 5f64.ln(), 1e-12));

    assert!(matches!(
        nat_loss(&logits, &[1, 9, 0], &[false, false, true], 0.0),
        Err(Error::Vocabulary { id: 9, vocab: 4 })
    ));
    // an out-of-range id at an excluded position is ignored
    assert!(nat_loss(&logits, &[1, 2, 99], &[false, false, true], 0.0).is_ok());
    assert!(matches!(
        nat_loss(&logits, &[1, 2], &[false, false], 0.0),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn token_loss_gradient() {
    let mut rng = Rng::new(3);
    let gold = [2, 0, 4, 1];
    let pad = [false, true, false, false];
    for smoothing in [0.0, 0.2] {
        let f = DiffFn::new(
            "nat_loss",
            |x| vt(&[1], &[nat_loss(&x[0], &gold, &pad, smoothing).unwrap().sum]),
            |x, g| vec![nat_loss(&x[0], &gold, &pad, smoothing).unwrap().dlogits.scale(g.data()[0])],
        );
        let x = Tensor::randn(&[4, 5], 2.0, &mut rng);
        assert!(grad_check(&f, &[x], 1e-6, &mut rng).unwrap() < 1e-6);
    }
}

proptest! {
    #[test]
    fn padded_rows_never_matter(
        noise in proptest::collection::vec(-50.0f64..50.0, 12),
        g0 in 0usize..4, g1 in 0usize..4,
    ) {
        let mut a = Tensor::zeros(&[3, 4]);
        a.row_mut(0).copy_from_slice(&[0.3, -1.0, 2.0, 0.1]);
        a.row_mut(1).copy_from_slice(&[1.0, 1.5, -0.5, 0.0]);
        let mut b = a.clone();
        b.row_mut(2).copy_from_slice(&noise[..4]);
        let pad = [false, false, true];
        let la = nat_loss(&a, &[g0, g1, 0], &pad, 0.0).unwrap();
        let lb = nat_loss(&b, &[g0, g1, 3], &pad, 0.0).unwrap();
        prop_assert_eq!(la.sum, lb.sum);
        prop_assert_eq!(la.dlogits, lb.dlogits);
        prop_assert!(la.sum >= 0.0);
    }

    #[test]
    fn partial_drafts_reveal_only_gold(len in 1usize..8, seed in 0u64..1000) {
        let t_max = 8;
        let target: Vec<usize> = (0..len).map(|i| 4 + i).collect();
        let mut rng = Rng::new(seed);
        let (draft, excluded) = training_draft(&target, t_max, true, &mut rng);
        let masked = draft.iter().filter(|&&x| x == MASK).count();
        prop_assert!(masked >= 1 && masked <= len);
        for p in 0..t_max {
            if p >= len {
                prop_assert_eq!(draft[p], PAD);
                prop_assert!(excluded[p]);
            } else if draft[p] == MASK {
                prop_assert!(!excluded[p]);
            } else {
                prop_assert_eq!(draft[p], target[p]);
                prop_assert!(excluded[p]);
            }
        }
    }
}

#[test]
fn full_drafts_score_every_gold_position() {
    let (draft, excluded) = training_draft(&[5, 6, EOS], 5, false, &mut Rng::new(0));
    assert_eq!(draft, vec![MASK; 5]);
    assert_eq!(excluded, vec![false, false, false, true, true]);
    assert_eq!(length_class(&[5, 6, EOS], 5), 1);
    assert_eq!(length_class(&[EOS], 5), 0);
}

fn small_cfg(vocab: usize, t_max: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        vocab,
        t_max,
        s_max: t_max,
        dropout: 0.0,
        draft_init: DraftInit::MaskEmbedding,
        combine_imag: false,
    }
}

/// Finite differences of the whole objective (token and length terms)
/// against the analytic parameter gradient.
#[test]
fn objective_gradient_end_to_end() {
    let examples = vec![
        Example { src: vec![4, 5, 6], tgt: vec![6, 5, EOS] },
        Example { src: vec![7, 4], tgt: vec![4, 7, 5, EOS] },
    ];
    let batch = make_batch(&examples, &[0, 1], 4).unwrap();
    let cfg = TrainConfig {
        label_smoothing: 0.1,
        length_loss_weight: 0.5,
        ..TrainConfig::default()
    };
    let mut model = FourierNat::<f64>::new(small_cfg(8, 4), Arch::Fouriernat, 7).unwrap();
    let mut rng = Rng::new(8);
    for p in model.params_mut().iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
    }
    let with = |x: &[Tensor]| {
        let mut m = model.clone();
        for (p, v) in m.params_mut().iter_mut().zip(x) {
            p.value = v.clone();
        }
        m
    };
    let f = DiffFn::new(
        "objective",
        |x| {
            let m = with(x);
            let mut g = m.params().gradients();
            let r = nat_batch_grads(&m, &batch, &cfg, None, &mut g).unwrap();
            vt(&[1], &[r.total])
        },
        |x, up| {
            let m = with(x);
            let mut g = m.params().gradients();
            nat_batch_grads(&m, &batch, &cfg, None, &mut g).unwrap();
            g.iter().map(|t| t.scale(up.data()[0])).collect()
        },
    );
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let err = grad_check(&f, &inputs, 1e-5, &mut rng).unwrap();
    assert!(err < 1e-5, "{err}");
}

fn copy_data(n: usize, t_max: usize, seed: u64) -> Vec<Example> {
    let spec = TaskSpec {
        kind: TaskKind::Copy,
        content_vocab: 6,
        min_len: 2,
        max_len: 4,
        seed,
    };
    generate(&spec, n, t_max).unwrap()
}

fn quick_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        warmup_steps: 20,
        tokens_per_batch: 96,
        eval_interval: 10,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible_and_learns() {
    let data = copy_data(120, 8, 1);
    let cfg = quick_cfg(60);
    let run = |arch| {
        let mut m = AnyModel::<f64>::new(small_cfg(10, 8), arch, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = train_loop(&mut m, &data, &data[..20], &cfg, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert!(dir.path().join("best.fnat").exists() && dir.path().join("last.fnat").exists());
        (m, r, csv)
    };
    let (m1, r1, c1) = run(Arch::Fouriernat);
    let (m2, _, c2) = run(Arch::Fouriernat);
    assert_eq!(c1, c2);
    for (p, q) in m1.as_dyn().params().iter().zip(m2.as_dyn().params().iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert!(c1.starts_with(CURVES_HEADER));
    assert_eq!(r1.curves.len(), 7);
    assert_eq!(r1.curves[0].step, 0);
    assert!(r1.final_loss < r1.initial_loss, "{} vs {}", r1.final_loss, r1.initial_loss);
    assert!(r1.gate_grad_norm > 0.0);

    let (m3, r3, _) = run(Arch::FouriernatNogate);
    assert_eq!(r3.gate_grad_norm, 0.0);
    let nat = m3.into_nat().unwrap();
    for id in nat.gate_ids() {
        assert!(nat.params().value(id).data().iter().all(|&g| g == 0.0));
    }

    let (_, r4, _) = run(Arch::ArBaseline);
    assert!(r4.final_loss < r4.initial_loss);
}

#[test]
fn early_stop_and_bad_config() {
    let data = copy_data(40, 8, 2);
    let mut m = AnyModel::<f64>::new(small_cfg(10, 8), Arch::Fouriernat, 3).unwrap();
    let cfg = TrainConfig {
        target_val_metric: Some(0.0),
        ..quick_cfg(50)
    };
    let r = train_loop(&mut m, &data, &[], &cfg, None).unwrap();
    assert_eq!(r.steps, 0);
    let bad = TrainConfig {
        label_smoothing: 1.5,
        ..quick_cfg(5)
    };
    assert!(matches!(train_loop(&mut m, &data, &[], &bad, None), Err(Error::Config(_))));
    assert!(matches!(
        train_loop(&mut m, &[], &[], &quick_cfg(5), None),
        Err(Error::Empty(_))
    ));
}

#[test]
fn exploding_run_keeps_last_good_checkpoint() {
    let data = copy_data(40, 8, 2);
    let mut m = AnyModel::<f64>::new(small_cfg(10, 8), Arch::Fouriernat, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let id = m.as_dyn().params().id("dec.proj.w").unwrap();
    m.as_dyn_mut().params_mut().value_mut(id).data_mut()[0] = f64::INFINITY;
    let err = train_loop(&mut m, &data, &[], &quick_cfg(5), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn distillation_replaces_targets() {
    let data = copy_data(6, 8, 3);
    let mut teacher = ArTransformer::<f64>::new(small_cfg(10, 8), 1).unwrap();
    for p in teacher.params_mut().iter_mut() {
        p.value.fill(0.0);
    }
    // a zero teacher never emits EOS, so every decode is cut at t_max
    let (out, truncated) = distill_generate(&teacher, &data, 4, 2).unwrap();
    assert_eq!(truncated, data.len());
    for (o, e) in out.iter().zip(&data) {
        assert_eq!(o.src, e.src);
        assert_eq!(o.tgt.len(), 8);
        assert_eq!(o.tgt.last(), Some(&EOS));
    }
}
