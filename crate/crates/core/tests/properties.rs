use proptest::prelude::*;

use unibrain::alignment::duplicate_weights;
use unibrain::encoders::Volume;
use unibrain::metrics::{auc, average_precision};
use unibrain::selfcheck::{brute_force_contrastive, library_contrastive};
use unibrain::tensor::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn unit_rows(b: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), b).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                r.into_iter().map(|x| x / n).collect()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(m in matrix(3, 5), shift in -50.0f64..50.0) {
        let s = m.softmax(1).unwrap();
        for r in 0..3 {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p > 0.0));
        }
        let shifted = m.map(|v| v + shift).softmax(1).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn l2_rows_have_unit_norm(m in matrix(4, 3)) {
        let n = m.l2_normalize().unwrap();
        for r in 0..4 {
            if m.row(r).iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                let norm: f64 = n.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn contrastive_loss_is_non_negative_and_matches_enumeration(
        image in unit_rows(5, 4),
        text in unit_rows(5, 4),
        ids in prop::collection::vec(0usize..3, 5),
        tau in 0.05f64..2.0,
    ) {
        let keys: Vec<String> = ids.iter().map(|i| format!("k{i}")).collect();
        let text: Vec<Vec<f64>> = ids.iter().map(|&i| text[i].clone()).collect();
        let lib = library_contrastive(&image, &text, &keys, tau).unwrap();
        prop_assert!(lib >= -1e-12);
        prop_assert!((lib - brute_force_contrastive(&image, &text, &keys, tau)).abs() <= 1e-10);
    }

    #[test]
    fn duplicate_weights_are_reciprocal_group_sizes(ids in prop::collection::vec(0usize..4, 1..20)) {
        let keys: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        let w = duplicate_weights(&keys);
        for (i, k) in keys.iter().enumerate() {
            let n = keys.iter().filter(|o| *o == k).count();
            prop_assert_eq!(w[i], 1.0 / n as f64);
        }
    }

    #[test]
    fn auc_flips_under_score_negation(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..40),
    ) {
        let (s, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        match auc(&s, &y) {
            Some(a) => {
                prop_assert!((0.0..=100.0).contains(&a));
                let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                prop_assert!((auc(&neg, &y).unwrap() - (100.0 - a)).abs() <= 1e-9);
            }
            None => prop_assert!(y.iter().all(|&v| v == y[0])),
        }
        if let Some(ap) = average_precision(&s, &y) {
            prop_assert!(ap > 0.0 && ap <= 100.0);
        }
    }

    #[test]
    fn volume_bytes_round_trip_at_f32(data in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 4)) {
        let v = Volume::new("T1WI", [2, 3, 4], data).unwrap();
        let back = Volume::from_bytes("T1WI", &v.to_bytes()).unwrap();
        prop_assert_eq!(&back, &v.clone().quantized());
        prop_assert_eq!(back.to_bytes(), v.to_bytes());
    }
}
