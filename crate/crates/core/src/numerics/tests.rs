use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::identity(2));
    let m = g.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
    let out = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.5, -2.0, 0.25, 7.0]);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[0.0, 1.0]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[2, 1]);
    assert_eq!(g.value(out).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let expect = triple_loop(&a, &b);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let out = g.matmul(av, bv).unwrap();
    for (x, y) in g.value(out).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn relu_forward_and_subgradient() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let neg = g.constant(t(&[3], &[-3.0, -0.5, -1e-9]));
    let y = g.relu(neg);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let x = g.param("x", t(&[3], &[-1.0, 2.0, 0.0])).unwrap();
    let y = g.relu(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.of(x).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn cross_entropy_uniform_and_margin() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::full(&[3, 10], 0.7));
    let ce = g
        .softmax_cross_entropy(logits, &[0, 4, 9], Reduction::Mean)
        .unwrap();
    assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);

    let mut row = vec![0.0; 5];
    row[2] = 20.0;
    let logits = g.constant(t(&[1, 5], &row));
    let ce = g.softmax_cross_entropy(logits, &[2], Reduction::Mean).unwrap();
    assert!(g.value(ce).item() < 1e-8);
}

#[test]
fn cross_entropy_matches_naive_normalization() {
    let mut r = rng(7);
    let logits = Tensor::randn(&[4, 5], 1.5, &mut r);
    let labels = [0usize, 3, 4, 1];
    let mut naive = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * 5..(i + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        naive += -(row[l].exp() / z).ln();
    }
    let mut g = Graph::new();
    let lv = g.constant(logits);
    let sum = g.softmax_cross_entropy(lv, &labels, Reduction::Sum).unwrap();
    let mean = g.softmax_cross_entropy(lv, &labels, Reduction::Mean).unwrap();
    assert!((g.value(sum).item() - naive).abs() < 1e-10);
    assert!((g.value(mean).item() - naive / 4.0).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut g = Graph::new();
    let lv = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.softmax_cross_entropy(lv, &[0, 3], Reduction::Mean);
    assert!(matches!(err, Err(crate::Error::Validation(_))));
}

#[test]
fn frobenius_norm_sq_values() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let v = g.frobenius_norm_sq(z);
    assert_eq!(g.value(v).item(), 0.0);
    let i = g.constant(Tensor::identity(2));
    let v = g.frobenius_norm_sq(i);
    assert_eq!(g.value(v).item(), 2.0);

    let m = Tensor::randn(&[3, 3], 1.0, &mut rng(3));
    let mut oracle = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            let e = m.data()[r * 3 + c];
            oracle += e * e;
        }
    }
    let mv = g.constant(m);
    let v = g.frobenius_norm_sq(mv);
    assert!((g.value(v).item() - oracle).abs() < 1e-12);
}

#[test]
fn backward_sum_and_detached_parameter() {
    let mut g = Graph::new();
    let w = g.param("w", Tensor::randn(&[2, 3], 1.0, &mut rng(2))).unwrap();
    let p = g.param("p", Tensor::full(&[4], 3.0)).unwrap();
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.of(w), Tensor::full(&[2, 3], 1.0));
    assert_eq!(grads.param("p").unwrap(), Tensor::zeros(&[4]));
    let _ = p;
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let w = g.param("w", Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.backward(w), Err(crate::Error::Contract(_))));
}

#[test]
fn grad_check_linear_is_exact() {
    let c = Tensor::randn(&[5], 1.0, &mut rng(4));
    let x = Tensor::randn(&[5], 1.0, &mut rng(5));
    let err = grad_check(
        |g, x| {
            let cv = g.constant(c.clone());
            let cr = g.reshape(cv, &[1, 5])?;
            let xr = g.reshape(x, &[5, 1])?;
            g.matmul(cr, xr).map(|v| g.sum(v))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

/// Moves every pre-activation of `x·w1 + b1` at least `gap` away from zero.
fn off_kink_bias(x: &Tensor, w1: &Tensor, b1: &mut Tensor, gap: f64) {
    let (n, d) = x.as_matrix_dims();
    let h = w1.shape()[1];
    for j in 0..h {
        loop {
            let ok = (0..n).all(|i| {
                let pre: f64 = (0..d).map(|p| x.data()[i * d + p] * w1.data()[p * h + j]).sum::<f64>()
                    + b1.data()[j];
                pre.abs() > gap
            });
            if ok {
                break;
            }
            b1.data_mut()[j] += gap;
        }
    }
}

#[test]
fn grad_check_two_layer_ffn_with_relu() {
    let mut r = rng(11);
    let x = Tensor::randn(&[4, 3], 1.0, &mut r);
    let w1 = Tensor::randn(&[3, 5], 0.7, &mut r);
    let mut b1 = Tensor::randn(&[5], 0.3, &mut r);
    let w2 = Tensor::randn(&[5, 2], 0.7, &mut r);
    let b2 = Tensor::randn(&[2], 0.3, &mut r);
    off_kink_bias(&x, &w1, &mut b1, 0.05);

    let ffn = |g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var| -> crate::Result<Var> {
        let h = g.matmul(x, w1)?;
        let h = g.add_broadcast(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_broadcast(o, b2)?;
        let sq = g.frobenius_norm_sq(o);
        Ok(g.scale(sq, 0.5))
    };
    let consts = (w1.clone(), b1.clone(), w2.clone(), b2.clone());
    let err = grad_check(
        |g, xv| {
            let (w1, b1, w2, b2) = consts.clone();
            let (w1, b1, w2, b2) = (g.constant(w1), g.constant(b1), g.constant(w2), g.constant(b2));
            ffn(g, xv, w1, b1, w2, b2)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "x: {err}");

    let err = grad_check(
        |g, w1v| {
            let xv = g.constant(x.clone());
            let (b1, w2, b2) = (g.constant(b1.clone()), g.constant(w2.clone()), g.constant(b2.clone()));
            ffn(g, xv, w1v, b1, w2, b2)
        },
        &w1,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "w1: {err}");
}

#[test]
fn grad_check_cross_entropy_head() {
    let mut r = rng(12);
    let logits = Tensor::randn(&[3, 6], 1.0, &mut r);
    for red in [Reduction::Mean, Reduction::Sum] {
        let err = grad_check(|g, l| g.softmax_cross_entropy(l, &[5, 0, 2], red), &logits, 1e-5)
            .unwrap();
        assert!(err < 1e-6, "{red:?}: {err}");
    }
}

#[test]
fn grad_check_layer_norm_all_inputs() {
    let mut r = rng(13);
    let x = Tensor::randn(&[3, 6], 1.0, &mut r);
    let gamma = Tensor::randn(&[6], 1.0, &mut r);
    let beta = Tensor::randn(&[6], 1.0, &mut r);
    let probe = Tensor::randn(&[3, 6], 1.0, &mut r);
    let weighted = |g: &mut Graph, y: Var| -> crate::Result<Var> {
        let p = g.constant(probe.clone());
        let p = g.reshape(p, &[18, 1])?;
        let yr = g.reshape(y, &[1, 18])?;
        let v = g.matmul(yr, p)?;
        Ok(g.sum(v))
    };
    let e1 = grad_check(
        |g, xv| {
            let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(xv, ga, be)?;
            weighted(g, y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    let e2 = grad_check(
        |g, ga| {
            let (xv, be) = (g.constant(x.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(xv, ga, be)?;
            weighted(g, y)
        },
        &gamma,
        1e-5,
    )
    .unwrap();
    let e3 = grad_check(
        |g, be| {
            let (xv, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
            let y = g.layer_norm(xv, ga, be)?;
            weighted(g, y)
        },
        &beta,
        1e-5,
    )
    .unwrap();
    assert!(e1 < 1e-6 && e2 < 1e-6 && e3 < 1e-6, "{e1} {e2} {e3}");
}

#[test]
fn grad_check_attention_each_input() {
    let mut r = rng(14);
    let (batch, seq, d, heads) = (2, 3, 4, 2);
    let q = Tensor::randn(&[batch * seq, d], 1.0, &mut r);
    let k = Tensor::randn(&[batch * seq, d], 1.0, &mut r);
    let v = Tensor::randn(&[batch * seq, d], 1.0, &mut r);
    let probe = Tensor::randn(&[batch * seq * d, 1], 1.0, &mut r);
    let head = |g: &mut Graph, o: Var| -> crate::Result<Var> {
        let p = g.constant(probe.clone());
        let or = g.reshape(o, &[1, batch * seq * d])?;
        let s = g.matmul(or, p)?;
        Ok(g.sum(s))
    };
    for which in 0..3 {
        let target = [&q, &k, &v][which].clone();
        let err = grad_check(
            |g, x| {
                let mut vars = [q.clone(), k.clone(), v.clone()].map(|t| g.constant(t));
                vars[which] = x;
                let o = g.attention(vars[0], vars[1], vars[2], seq, heads)?;
                head(g, o)
            },
            &target,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input {which}: {err}");
    }
}

#[test]
fn grad_check_pooling_broadcast_and_sqrt() {
    let mut r = rng(15);
    let x = Tensor::randn(&[6, 3], 1.0, &mut r);
    let pos = Tensor::randn(&[3, 3], 1.0, &mut r);
    let err = grad_check(
        |g, pv| {
            let xv = g.constant(x.clone());
            let y = g.add_broadcast(xv, pv)?;
            let y = g.mean_pool(y, 2)?;
            let n = g.frobenius_norm_sq(y);
            let n = g.add_scalar(n, 0.5);
            g.sqrt(n)
        },
        &pos,
        1e-5,
    );
    // positional table of 3 rows tiles a 6-row input in period 3 rows
    assert!(err.unwrap() < 1e-6);
}

#[test]
fn attention_with_uniform_scores_averages_values() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[2, 2]));
    let v = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 6.0]));
    let o = g.attention(q, q, v, 2, 1).unwrap();
    assert_eq!(g.value(o).data(), &[2.0, 4.0, 2.0, 4.0]);
}

#[test]
fn frozen_leaves_receive_no_gradient_work() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::full(&[2, 2], 1.0));
    let a = g.param("a", Tensor::full(&[2, 2], 2.0)).unwrap();
    let y = g.matmul(w, a).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.raw(w).is_none());
    assert_eq!(grads.of(a), Tensor::full(&[2, 2], 2.0));
}

#[test]
fn adamw_zero_gradient_no_decay_leaves_params() {
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut p = t(&[3], &[0.5, -1.0, 2.0]);
    let before = p.clone();
    // seed some moments first
    opt.step_with([("p", &mut p)], |_| Some(t(&[3], &[1.0, 1.0, 1.0])))
        .unwrap();
    let after_first = p.clone();
    let (m_before, _) = opt.moments("p").map(|(m, v)| (m.to_vec(), v.to_vec())).unwrap();
    opt.step_with([("p", &mut p)], |_| None).unwrap();
    let (m_after, _) = opt.moments("p").map(|(m, v)| (m.to_vec(), v.to_vec())).unwrap();
    assert!(m_after.iter().zip(&m_before).all(|(a, b)| a.abs() < b.abs()));
    assert_ne!(after_first, before);

    let mut fresh = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut q = before.clone();
    fresh.step_with([("q", &mut q)], |_| None).unwrap();
    assert_eq!(q, before);
    assert_eq!(fresh.step_count(), 1);
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let cfg = AdamWConfig {
        learning_rate: 0.01,
        weight_decay: 0.0,
        ..Default::default()
    };
    let g = t(&[4], &[0.3, -2.0, 1e-9, 5.0]);
    let p0 = t(&[4], &[1.0, 1.0, 1.0, 1.0]);
    let mut p = p0.clone();
    let mut opt = OptimizerState::new(cfg);
    opt.step_with([("p", &mut p)], |_| Some(g.clone())).unwrap();
    // from zero moments, bias correction recovers m̂ = g and v̂ = g²
    for i in 0..4 {
        let gi = g.data()[i];
        let expect = p0.data()[i] - cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
        assert!((p.data()[i] - expect).abs() < 1e-12, "{i}");
    }
}

#[test]
fn adamw_decoupled_decay_scales_params() {
    let cfg = AdamWConfig {
        learning_rate: 0.1,
        weight_decay: 0.5,
        ..Default::default()
    };
    let mut p = t(&[2], &[2.0, -4.0]);
    let mut opt = OptimizerState::new(cfg);
    opt.step_with([("p", &mut p)], |_| None).unwrap();
    assert_eq!(p.data(), &[2.0 * 0.95, -4.0 * 0.95]);
}

#[test]
fn adamw_rejects_shape_mismatch() {
    let mut opt = OptimizerState::new(AdamWConfig::default());
    let mut p = Tensor::zeros(&[2]);
    let err = opt.step_with([("p", &mut p)], |_| Some(Tensor::zeros(&[3])));
    assert!(err.is_err());
    assert_eq!(opt.step_count(), 0);
}

proptest! {
    #[test]
    fn uniform_logits_give_ln_c(c in 1usize..64, b in 1usize..6, level in -50.0f64..50.0) {
        let mut g = Graph::new();
        let l = g.constant(Tensor::full(&[b, c], level));
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let ce = g.softmax_cross_entropy(l, &labels, Reduction::Mean).unwrap();
        prop_assert!((g.value(ce).item() - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn frobenius_gradient_is_twice_input(data in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = data.len();
        let m = Tensor::new(vec![n], data).unwrap();
        let mut g = Graph::new();
        let v = g.param("m", m.clone()).unwrap();
        let f = g.frobenius_norm_sq(v);
        let grad = g.backward(f).unwrap().of(v);
        for (a, b) in grad.data().iter().zip(m.data()) {
            prop_assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn optimizer_step_is_deterministic(seed in 0u64..1000, steps in 1usize..4) {
        let run = || {
            let mut r = rng(seed);
            let mut p = Tensor::randn(&[7], 1.0, &mut r);
            let mut opt = OptimizerState::new(AdamWConfig::default());
            for _ in 0..steps {
                let g = Tensor::randn(&[7], 1.0, &mut r);
                opt.step_with([("p", &mut p)], |_| Some(g.clone())).unwrap();
            }
            (p, opt)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(sa, sb);
    }
}
