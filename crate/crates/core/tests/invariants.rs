//! Property checks of the numeric helpers, the stream protocol, and the
//! metrics serialization.

use proptest::collection::vec;
use proptest::option;
use proptest::prelude::*;

use ttalab::adapt::{BatchMetrics, MetricsRecord};
use ttalab::data::{generate_dataset, make_target_stream, CorruptionKind, CorruptionSpec};
use ttalab::metrics::{metrics_from_csv, metrics_to_csv};
use ttalab::tensor::{entropy, minmax_rescale, softmax_row};
use ttalab::Error;

// ─── Numeric helpers ──────────────────────────────────────────────────────

proptest! {
    #[test]
    fn rescale_stays_in_unit_range_and_keeps_order(
        v in vec(-1e6..1e6f64, 1..16)
    ) {
        let r = minmax_rescale(&v);
        prop_assert_eq!(r.len(), v.len());
        for &x in &r {
            prop_assert!((0.0..=1.0).contains(&x), "out of range: {x}");
        }
        for i in 0..v.len() {
            for j in 0..v.len() {
                prop_assert!(
                    (v[i] - v[j]) * (r[i] - r[j]) >= 0.0,
                    "order flipped between {} and {}", v[i], v[j]
                );
            }
        }
    }

    #[test]
    fn rescale_maps_constant_input_to_ones(x in -1e6..1e6f64, n in 1..12usize) {
        let r = minmax_rescale(&vec![x; n]);
        prop_assert_eq!(r, vec![1.0; n]);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        row in vec(-1e3..1e3f64, 1..8),
        tau in 0.05..4.0f64,
        shift in -100.0..100.0f64,
    ) {
        let p = softmax_row(&row, tau);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "sums to {sum}");
        prop_assert!(p.iter().all(|&x| x >= 0.0 && x <= 1.0));

        let h = entropy(&p);
        let cap = (row.len() as f64).ln();
        prop_assert!((-1e-12..=cap + 1e-9).contains(&h), "entropy {h} over {cap}");

        let shifted: Vec<f64> = row.iter().map(|&x| x + shift).collect();
        let q = softmax_row(&shifted, tau);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9, "shift moved {a} to {b}");
        }
    }
}

// ─── Stream protocol ──────────────────────────────────────────────────────

fn corruption_kind(index: usize) -> CorruptionKind {
    match index % 6 {
        0 => CorruptionKind::GaussianNoise,
        1 => CorruptionKind::GaussianBlur,
        2 => CorruptionKind::Brightness,
        3 => CorruptionKind::Contrast,
        4 => CorruptionKind::Saturate,
        _ => CorruptionKind::Pixelate,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn stream_shows_each_example_once_and_only_once(
        classes in 2..=4usize,
        per_class in 1..=5usize,
        batch_size in 2..=7usize,
        data_seed in any::<u64>(),
        stream_seed in any::<u64>(),
        kind_index in 0..6usize,
        severity in 1..=5u8,
    ) {
        let dataset = generate_dataset(classes, per_class, 8, data_seed).unwrap();
        let n = dataset.len();
        let spec = CorruptionSpec::new(corruption_kind(kind_index), severity).unwrap();
        let mut stream =
            make_target_stream(&dataset, &spec, batch_size, stream_seed).unwrap();

        let expected_drop = if n % batch_size == 1 { 1 } else { 0 };
        prop_assert_eq!(stream.dropped_tail, expected_drop);

        let batches = stream.take_batches().unwrap();
        prop_assert_eq!(batches.len(), stream.num_batches);
        let kept: usize = batches.iter().map(|b| b.images.len()).sum();
        prop_assert_eq!(kept, n - expected_drop);
        prop_assert_eq!(kept, stream.num_examples);

        let mut seen = vec![0usize; classes];
        for b in &batches {
            prop_assert!(b.images.len() >= 2 && b.images.len() <= batch_size);
            prop_assert_eq!(b.images.len(), b.labels.len());
            for &label in b.labels.reveal_for_metrics() {
                seen[label] += 1;
            }
        }
        let mut want = vec![0usize; classes];
        for &label in &dataset.labels {
            want[label] += 1;
        }
        let mut missing = 0;
        for c in 0..classes {
            prop_assert!(want[c] - seen[c] <= 1, "class {c} lost {} examples", want[c] - seen[c]);
            missing += want[c] - seen[c];
        }
        prop_assert_eq!(missing, expected_drop);

        prop_assert!(matches!(stream.take_batches(), Err(Error::StreamConsumed)));
    }
}

// ─── Metrics serialization ────────────────────────────────────────────────

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

fn batch_metrics() -> impl Strategy<Value = BatchMetrics> {
    (0..3usize, 0..40usize, 0..200usize, finite(), option::of(finite()))
        .prop_flat_map(|(epoch, batch_index, n, entropy, nsp)| {
            (
                Just(epoch),
                Just(batch_index),
                Just(n),
                0..=n,
                Just(entropy),
                Just(nsp),
            )
        })
        .prop_map(
            |(epoch, batch_index, n, n_wrong, mean_main_entropy, mean_nsp_entropy)| {
                BatchMetrics {
                    epoch,
                    batch_index,
                    n,
                    n_wrong,
                    mean_main_entropy,
                    mean_nsp_entropy,
                }
            },
        )
}

fn record() -> impl Strategy<Value = MetricsRecord> {
    (
        "[a-z][a-z0-9_-]{0,14}",
        "[a-z][a-z_]{0,11}",
        "[a-z][a-z_]{0,11}",
        any::<u8>(),
        any::<u64>(),
        vec(("[a-z][a-z_]{0,7}", "[a-zA-Z0-9._+-]{1,10}"), 0..5),
        vec(batch_metrics(), 0..5),
        (0..500usize, 0..500usize),
        0..20usize,
    )
        .prop_map(
            |(run_id, mode, corruption, severity, seed, config, batches, finals, aborted)| {
                MetricsRecord {
                    run_id,
                    mode,
                    corruption,
                    severity,
                    seed,
                    config,
                    batches,
                    final_wrong: finals.0,
                    final_total: finals.1,
                    aborted_steps: aborted,
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn metrics_files_round_trip_exactly(record in record()) {
        let text = metrics_to_csv(&record);
        let back = metrics_from_csv(&text).unwrap();
        prop_assert_eq!(back, record);
    }
}
