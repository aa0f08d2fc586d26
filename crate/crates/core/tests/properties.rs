use std::path::Path;

use proptest::prelude::*;
use searth::geometry::{earth_attention_mask, latitude_weights, window_partition, window_reverse};
use searth::io::gt1;
use searth::{Graph, MaskMode, Tensor};

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (
            Just(shape),
            prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n),
        )
    })
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize, MaskMode)> {
    (2usize..5, 1usize..4, 1usize..4, any::<bool>()).prop_map(|(win, a, b, planar)| {
        (
            win * a,
            win * b,
            win,
            if planar { MaskMode::Planar } else { MaskMode::Earth },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gt1_round_trip((shape, data) in shape_and_data()) {
        let t = Tensor::new(shape, data).unwrap();
        let mut bytes = Vec::new();
        gt1::encode(&t, &mut bytes).unwrap();
        let back = gt1::decode(&bytes, Path::new("p")).unwrap().to::<f64>();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn roll_is_inverted_by_opposite_roll((shape, data) in shape_and_data(), shift in -7isize..7, pick in 0usize..3) {
        let t = Tensor::new(shape, data).unwrap();
        let axis = pick % t.rank();
        let back = t.roll(axis, shift).unwrap().roll(axis, -shift).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn partition_is_inverted((h, w, win, _) in geometry(), c in 1usize..4) {
        let x = Tensor::<f64>::from_fn(vec![c, h, w], |i| i as f64);
        let windows = window_partition(&x, win, win).unwrap();
        let back = window_reverse(&windows, h, w, win, win).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn mask_is_symmetric_with_open_diagonal((h, w, win, mode) in geometry()) {
        let sh = win / 2;
        let m = earth_attention_mask(h, w, win, win, sh, sh, mode).unwrap();
        let t = m.tokens_per_window();
        for n in 0..m.num_windows() {
            for q in 0..t {
                prop_assert!(!m.is_blocked(n, q, q));
                for k in 0..t {
                    prop_assert_eq!(m.is_blocked(n, q, k), m.is_blocked(n, k, q));
                }
            }
        }
        let earth = earth_attention_mask(h, w, win, win, sh, sh, MaskMode::Earth).unwrap().blocked_set();
        let planar = earth_attention_mask(h, w, win, win, sh, sh, MaskMode::Planar).unwrap().blocked_set();
        prop_assert!(earth.is_subset(&planar));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = Tensor::from_fn(vec![rows, cols], |i| ((i as u64 ^ seed) as f64 * 0.618).sin() * scale);
        let y = Graph::new().constant(x).softmax();
        for r in y.value().data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn latitude_weights_sum_to_row_count(lats in prop::collection::vec(-89.0f64..89.0, 1..40)) {
        let w = latitude_weights(&lats).unwrap();
        prop_assert!((w.iter().sum::<f64>() - lats.len() as f64).abs() < 1e-9);
        let mirrored: Vec<f64> = lats.iter().map(|l| -l).collect();
        let wm = latitude_weights(&mirrored).unwrap();
        for (a, b) in w.iter().zip(&wm) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
