use proptest::prelude::*;

use super::*;

fn small(seed: u64, noise: f64) -> SyntheticConfig {
    SyntheticConfig {
        num_classes: 20,
        first_class: 0,
        per_class_train: 6,
        per_class_test: 4,
        seq_len: 4,
        input_dim: 3,
        noise_std: noise,
        seed,
    }
}

#[test]
fn generator_counts_and_determinism() {
    let d = generate_synthetic(&small(1, 0.5)).unwrap();
    assert_eq!(d.train.len(), 20 * 6);
    assert_eq!(d.test.len(), 20 * 4);
    assert_eq!(d.train.class_ids().len(), 20);
    let again = generate_synthetic(&small(1, 0.5)).unwrap();
    assert_eq!(d, again);
    let other = generate_synthetic(&small(2, 0.5)).unwrap();
    assert_ne!(d.train.examples, other.train.examples);
}

#[test]
fn noiseless_examples_equal_their_prototype() {
    let d = generate_synthetic(&small(3, 0.0)).unwrap();
    for class in 0..20 {
        let members: Vec<_> = d
            .train
            .examples
            .iter()
            .chain(&d.test.examples)
            .filter(|e| e.label == class)
            .collect();
        assert!(members.windows(2).all(|w| w[0].tokens == w[1].tokens));
    }
}

#[test]
fn nearest_prototype_oracle_separates_classes() {
    let cfg = SyntheticConfig {
        per_class_train: 20,
        per_class_test: 20,
        seq_len: 16,
        input_dim: 16,
        ..small(4, 0.3)
    };
    let d = generate_synthetic(&cfg).unwrap();
    let per = 256;
    // class means estimated from the training split
    let mut means = vec![vec![0.0; per]; 20];
    for e in &d.train.examples {
        for (m, v) in means[e.label].iter_mut().zip(&e.tokens) {
            *m += v / 20.0;
        }
    }
    let correct = d
        .test
        .examples
        .iter()
        .filter(|e| {
            let best = (0..20)
                .min_by(|&a, &b| {
                    let da: f64 = means[a].iter().zip(&e.tokens).map(|(m, v)| (m - v).powi(2)).sum();
                    let db: f64 = means[b].iter().zip(&e.tokens).map(|(m, v)| (m - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == e.label
        })
        .count();
    assert!(correct as f64 / d.test.len() as f64 >= 0.95);
}

#[test]
fn generator_rejects_bad_arguments() {
    assert!(generate_synthetic(&SyntheticConfig { num_classes: 1, ..small(0, 0.1) }).is_err());
    assert!(generate_synthetic(&SyntheticConfig { per_class_test: 0, ..small(0, 0.1) }).is_err());
}

fn task_data() -> (TrainTest, TrainTest) {
    let pre = generate_synthetic(&small(5, 0.4)).unwrap();
    let new = generate_synthetic(&SyntheticConfig {
        num_classes: 5,
        first_class: 20,
        ..small(6, 0.4)
    })
    .unwrap();
    (pre, new)
}

#[test]
fn swap_split_partitions_classes() {
    let (pre, new) = task_data();
    let retain: Vec<usize> = (0..14).collect();
    let task = make_swap_split(&pre, &new, &retain, &[14, 15, 16], &[20, 21, 22]).unwrap();
    assert_eq!(task.retain.class_ids().len(), 14);
    assert_eq!(task.forget.class_ids().len(), 3);
    assert_eq!(task.learn.class_ids().len(), 3);
    assert_eq!(task.class_universe, 25);
    assert_eq!(task.retain.train.role, Role::Retain);
    assert_eq!(task.learn.test.partition, Partition::Test);

    // every selected pretraining test example lands in exactly one split
    for e in &pre.test.examples {
        let hits = [&task.retain.test, &task.forget.test]
            .iter()
            .filter(|s| s.examples.contains(e))
            .count();
        let expected = usize::from(e.label < 17);
        assert_eq!(hits, expected, "label {}", e.label);
    }
}

#[test]
fn swap_split_rejects_overlaps() {
    let (pre, new) = task_data();
    let err = make_swap_split(&pre, &new, &[0, 1, 2], &[2, 3], &[20]).unwrap_err();
    assert!(err.to_string().contains("[2]"), "{err}");
    assert!(make_swap_split(&pre, &new, &[0], &[1], &[1]).is_err());
    assert!(make_swap_split(&pre, &new, &[0], &[21], &[20]).is_err());
    assert!(make_swap_split(&pre, &new, &[0], &[1], &[30]).is_err());
}

#[test]
fn batches_cover_split_once_with_tail() {
    let sizes: Vec<usize> = batch_order(10, 3, 7).iter().map(Vec::len).collect();
    assert_eq!(sizes, [3, 3, 3, 1]);
    let mut all: Vec<usize> = batch_order(10, 3, 7).concat();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(batch_order(10, 3, 7), batch_order(10, 3, 7));
    assert_ne!(batch_order(50, 50, 1), batch_order(50, 50, 2));

    let d = generate_synthetic(&small(8, 0.1)).unwrap();
    let batches: Vec<Batch> = batch_iter(&d.train, 32, 3).collect();
    assert_eq!(batches.iter().map(|b| b.labels.len()).sum::<usize>(), d.train.len());
    assert_eq!(batches[0].inputs.shape(), &[32, 4, 3]);
}

#[test]
fn dataset_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_synthetic(&small(9, 0.7)).unwrap();
    let (csv_path, json_path) = (dir.path().join("d.csv"), dir.path().join("d.json"));
    save_dataset(&d.train, &csv_path, &json_path).unwrap();
    let back = load_dataset(&csv_path, &json_path).unwrap();
    assert_eq!(back, d.train);

    // drop one value from the third row
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let cut = lines[2].rfind(',').unwrap();
    lines[2].truncate(cut);
    std::fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
    match load_dataset(&csv_path, &json_path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }

    // an undeclared label
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let comma = lines[4].find(',').unwrap();
    lines[4] = format!("99{}", &lines[4][comma..]);
    std::fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
    match load_dataset(&csv_path, &json_path) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 5);
            assert!(message.contains("99"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn random_partitions_satisfy_invariants(
        perm in Just((0usize..20).collect::<Vec<_>>()).prop_shuffle(),
        n_retain in 1usize..18,
        n_forget in 1usize..3,
        n_learn in 1usize..5,
    ) {
        let (pre, new) = task_data();
        let retain = &perm[..n_retain];
        let forget = &perm[n_retain..(n_retain + n_forget).min(20)];
        prop_assume!(!forget.is_empty());
        let learn: Vec<usize> = (20..20 + n_learn).collect();
        let task = make_swap_split(&pre, &new, retain, forget, &learn).unwrap();
        let (r, f, l) = (task.retain_classes(), task.forget_classes(), task.learn_classes());
        prop_assert!(r.is_disjoint(&f) && r.is_disjoint(&l) && f.is_disjoint(&l));
        prop_assert!(r.union(&f).all(|c| *c < 20));
        prop_assert!(l.iter().all(|c| *c >= 20));
        for split in [&task.retain.train, &task.forget.test, &task.learn.train] {
            prop_assert!(split.examples.iter().all(|e| split.classes.contains_key(&e.label)));
        }
    }
}
