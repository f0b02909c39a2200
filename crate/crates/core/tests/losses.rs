use proptest::prelude::*;

use forgeseg_core::objective::{det_loss, seg_loss, total_loss, LossWeights, EPS};

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, n)
}

fn bits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((0u8..2).prop_map(f64::from), n)
}

proptest! {
    #[test]
    fn losses_are_non_negative(s in probs(24), m in bits(24), p in probs(6), y in bits(6)) {
        prop_assert!(seg_loss(&s, &m, 3).unwrap() >= 0.0);
        prop_assert!(det_loss(&p, &y).unwrap() >= 0.0);
    }

    #[test]
    fn batch_loss_is_the_size_weighted_mean(s in probs(40), m in bits(40), split in 1usize..4) {
        // 5 maps of 8 pixels, cut after `split` maps
        let whole = seg_loss(&s, &m, 5).unwrap();
        let cut = split * 8;
        let a = seg_loss(&s[..cut], &m[..cut], split).unwrap();
        let b = seg_loss(&s[cut..], &m[cut..], 5 - split).unwrap();
        let weighted = (a * split as f64 + b * (5 - split) as f64) / 5.0;
        prop_assert!((whole - weighted).abs() <= 1e-7 * whole.abs().max(1e-12));

        let (p, y) = (&s[..10], &m[..10]);
        let d = det_loss(p, y).unwrap();
        let dw = (det_loss(&p[..4], &y[..4]).unwrap() * 4.0 + det_loss(&p[4..], &y[4..]).unwrap() * 6.0) / 10.0;
        prop_assert!((d - dw).abs() <= 1e-7 * d.abs().max(1e-12));
    }

    #[test]
    fn perfect_prediction_is_independent_of_mask_area(m in bits(64)) {
        let l = seg_loss(&m, &m, 1).unwrap();
        let reference = -(1.0 - EPS).ln();
        prop_assert!((l - reference).abs() < 1e-15);
    }

    #[test]
    fn minimum_only_at_the_target(m in bits(16), i in 0usize..16, delta in 0.01f64..0.99) {
        let mut s = m.clone();
        s[i] = if m[i] == 1.0 { 1.0 - delta } else { delta };
        prop_assert!(seg_loss(&s, &m, 1).unwrap() > seg_loss(&m, &m, 1).unwrap());
    }

    #[test]
    fn total_is_linear(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0, d in 0.0f64..5.0, k in 0.0f64..3.0) {
        let w = LossWeights { lambda_det: 0.7, lambda_seg: 1.3 };
        let lhs = total_loss(a + k * c, b + k * d, w);
        let rhs = total_loss(a, b, w) + k * total_loss(c, d, w);
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}

#[test]
fn ablation_weights_select_one_term() {
    assert_eq!(total_loss(0.4, 0.9, LossWeights { lambda_det: 1.0, lambda_seg: 0.0 }), 0.4);
    assert_eq!(total_loss(0.4, 0.9, LossWeights { lambda_det: 0.0, lambda_seg: 1.0 }), 0.9);
}
