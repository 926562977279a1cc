use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::Trainable;

fn cfg(blocks: usize) -> ModelConfig {
    ModelConfig {
        num_blocks: blocks,
        embed_dim: 8,
        num_heads: 2,
        ffn_hidden: 6,
        seq_len: 3,
        input_dim: 4,
        num_classes: 5,
        seed: 2,
    }
}

fn inputs(n: usize, c: &ModelConfig, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, c.seq_len, c.input_dim], 1.0, &mut r)
}

fn perturb(set: &mut AdapterSet, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for a in &mut set.adapters {
        a.b = Tensor::randn(a.b.shape(), 0.3, &mut r);
    }
}

#[test]
fn one_adapter_per_ffn_layer() {
    let m = TransformerClassifier::new(cfg(4)).unwrap();
    let set = AdapterSet::attach(&m, 2, 0).unwrap();
    assert_eq!(set.len(), 8);
    for a in &set.adapters {
        assert!(a.delta().unwrap().data().iter().all(|&v| v == 0.0));
    }
    // Σ (in·r + r·out): per block (8·2 + 2·6) + (6·2 + 2·8)
    assert_eq!(set.trainable_count(), 4 * ((8 * 2 + 2 * 6) + (6 * 2 + 2 * 8)));
}

#[test]
fn rank_beyond_layer_dimension_is_rejected() {
    let m = TransformerClassifier::new(cfg(1)).unwrap();
    assert!(matches!(AdapterSet::attach(&m, 7, 0), Err(crate::Error::Config(_))));
    assert!(AdapterSet::attach(&m, 0, 0).is_err());
    assert!(AdapterSet::attach(&m, 6, 0).is_ok());
}

#[test]
fn effective_weight_cases() {
    let w0 = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let target = FfnLayer { block: 0, position: 1 };
    let zero_b = LoraAdapter {
        target,
        a: Tensor::full(&[2, 1], 5.0),
        b: Tensor::zeros(&[1, 2]),
        enabled: true,
    };
    assert_eq!(effective_weight(&zero_b, &w0).unwrap(), w0);
    let zero_a = LoraAdapter {
        a: Tensor::zeros(&[2, 1]),
        b: Tensor::full(&[1, 2], 5.0),
        ..zero_b.clone()
    };
    assert_eq!(effective_weight(&zero_a, &w0).unwrap(), w0);

    // A = [1, 0]ᵀ, B = [0, 1]: outer product touches only entry (0, 1)
    let outer = LoraAdapter {
        a: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
        b: Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
        ..zero_b.clone()
    };
    assert_eq!(
        effective_weight(&outer, &w0).unwrap().data(),
        &[1.0, 3.0, 3.0, 4.0]
    );
    let disabled = LoraAdapter {
        enabled: false,
        ..outer.clone()
    };
    assert_eq!(effective_weight(&disabled, &w0).unwrap(), w0);
    assert!(effective_weight(&outer, &Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn regularizer_cases() {
    let m = TransformerClassifier::new(cfg(2)).unwrap();
    let set = AdapterSet::attach(&m, 2, 4).unwrap();
    let a_only: f64 = set.adapters.iter().map(|a| a.a.sum_squares()).sum();
    assert!((set.group_regularizer().unwrap() - a_only).abs() < 1e-15);

    let single = AdapterSet::from_adapters(
        vec![LoraAdapter {
            target: FfnLayer { block: 0, position: 1 },
            a: Tensor::identity(2),
            b: Tensor::identity(2),
            enabled: true,
        }],
        0,
    )
    .unwrap();
    assert_eq!(single.group_regularizer().unwrap(), 4.0);
}

fn element_loop_regularizer(set: &AdapterSet) -> f64 {
    let mut total = 0.0;
    for a in &set.adapters {
        for m in [&a.a, &a.b] {
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            for i in 0..rows {
                for j in 0..cols {
                    let v = m.data()[i * cols + j];
                    total += v * v;
                }
            }
        }
    }
    total
}

#[test]
fn regularizer_matches_element_loop_and_gradient_is_twice_factor() {
    let m = TransformerClassifier::new(cfg(3)).unwrap();
    for seed in 0..10 {
        let mut set = AdapterSet::attach(&m, 3, seed).unwrap();
        perturb(&mut set, seed + 100);
        let oracle = element_loop_regularizer(&set);
        assert!((set.group_regularizer().unwrap() - oracle).abs() < 1e-10);

        let mut g = crate::numerics::Graph::new();
        let pairs: Vec<_> = set
            .adapters
            .iter()
            .map(|a| {
                (
                    g.param(&a.a_name(), a.a.clone()).unwrap(),
                    g.param(&a.b_name(), a.b.clone()).unwrap(),
                )
            })
            .collect();
        let r = group_regularizer(&mut g, &pairs, RegularizerNorm::SquaredFrobenius).unwrap();
        let grads = g.backward(r).unwrap();
        for (a, &(av, bv)) in set.adapters.iter().zip(&pairs) {
            let ga = grads.of(av);
            let gb = grads.of(bv);
            assert!(ga.data().iter().zip(a.a.data()).all(|(g, x)| *g == 2.0 * x));
            assert!(gb.data().iter().zip(a.b.data()).all(|(g, x)| *g == 2.0 * x));
        }
    }
}

#[test]
fn unsquared_variant_sums_norms() {
    let set = AdapterSet::from_adapters(
        vec![LoraAdapter {
            target: FfnLayer { block: 0, position: 1 },
            a: Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap(),
            b: Tensor::zeros(&[1, 2]),
            enabled: true,
        }],
        0,
    )
    .unwrap();
    let set = AdapterSet {
        norm: RegularizerNorm::Frobenius,
        ..set
    };
    assert_eq!(set.group_regularizer().unwrap(), 5.0);
}

#[test]
fn fresh_adapters_preserve_logits_and_merge_preserves_function() {
    let c = cfg(2);
    let mut m = TransformerClassifier::new(c).unwrap();
    let x = inputs(6, &c, 5);
    let base = m.forward(None, &x).unwrap();
    let mut set = AdapterSet::attach(&m, 2, 8).unwrap();
    let attached = m.forward(Some(&set), &x).unwrap();
    assert!(base.max_abs_diff(&attached) <= 1e-9);

    let before_fresh_merge = m.clone();
    set.merge(&mut m).unwrap();
    assert_eq!(m, before_fresh_merge);

    perturb(&mut set, 3);
    let adapted = m.forward(Some(&set), &x).unwrap();
    assert!(adapted.max_abs_diff(&base) > 1e-6);
    set.merge(&mut m).unwrap();
    assert!(set.adapters.iter().all(|a| a.b.data().iter().all(|&v| v == 0.0)));
    let merged = m.forward(Some(&set), &x).unwrap();
    assert!(adapted.max_abs_diff(&merged) <= 1e-9);

    let once = m.clone();
    set.merge(&mut m).unwrap();
    assert_eq!(m, once);
}

#[test]
fn frozen_base_gets_no_gradient_but_adapters_do() {
    let c = cfg(2);
    let m = TransformerClassifier::new(c).unwrap();
    let mut set = AdapterSet::attach(&m, 2, 1).unwrap();
    perturb(&mut set, 9);
    let mut g = crate::numerics::Graph::new();
    let bound = m
        .bind(&mut g, Some(&set), Trainable::Adapters { biases: false, observe: false })
        .unwrap();
    let logits = bound.forward(&mut g, &inputs(4, &c, 2)).unwrap();
    let loss = g
        .softmax_cross_entropy(logits, &[0, 1, 2, 3], crate::numerics::Reduction::Mean)
        .unwrap();
    let grads = g.backward(loss).unwrap();
    let names: Vec<&str> = grads.param_names().collect();
    assert!(names.iter().all(|n| n.starts_with(ADAPTER_PREFIX)));
    assert_eq!(names.len(), 2 * set.len());
    let nonzero = grads
        .params()
        .filter(|(_, t)| t.data().iter().any(|&v| v != 0.0))
        .count();
    assert!(nonzero > 0);
}

proptest! {
    #[test]
    fn regularizer_nonnegative_and_zero_iff_all_zero(
        seed in 0u64..500,
        zero_mask in proptest::collection::vec(any::<bool>(), 4),
    ) {
        let m = TransformerClassifier::new(cfg(2)).unwrap();
        let mut set = AdapterSet::attach(&m, 2, seed).unwrap();
        perturb(&mut set, seed);
        for (a, &z) in set.adapters.iter_mut().zip(&zero_mask) {
            if z {
                a.a = Tensor::zeros(a.a.shape());
                a.b = Tensor::zeros(a.b.shape());
            }
        }
        let value = set.group_regularizer().unwrap();
        prop_assert!(value >= 0.0);
        prop_assert_eq!(value == 0.0, zero_mask.iter().all(|&z| z));
    }

    #[test]
    fn attaching_never_changes_logits(seed in 0u64..200) {
        let c = cfg(2);
        let m = TransformerClassifier::new(ModelConfig { seed, ..c }).unwrap();
        let set = AdapterSet::attach(&m, 3, seed + 1).unwrap();
        let x = inputs(2, &c, seed + 2);
        let a = m.forward(None, &x).unwrap();
        let b = m.forward(Some(&set), &x).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }
}
