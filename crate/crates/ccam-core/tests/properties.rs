//! Property tests for the spec invariants that hold over whole input
//! families rather than single examples.

use ccam_core::config::Config;
use ccam_core::counterfactual::decoupled_loss;
use ccam_core::eval::{extract_bbox, iou, BBox};
use ccam_core::graph::Graph;
use ccam_core::model::ensemble_predict;
use ccam_core::synth::build_cooc_matrix;
use ccam_core::tensor::Tensor;
use proptest::prelude::*;

fn logits(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-15.0f32..15.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_sums_to_one_and_stays_positive(z in logits(6), t in 0.5f32..20.0) {
        let mut g = Graph::new();
        let zt = g.leaf(Tensor::new(vec![6], z).unwrap());
        let s = g.softmax(zt, t).unwrap();
        let out = g.value(s).data();
        let sum: f32 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
        prop_assert!(out.iter().all(|&v| v > 0.0), "non-positive entry in {out:?}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_equality(
        zp in logits(5),
        zq in logits(5),
        t in 0.5f32..20.0,
    ) {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![5], zp.clone()).unwrap());
        let q = g.leaf(Tensor::new(vec![5], zq).unwrap());
        let kl = g.kl_temperature(p, q, t).unwrap();
        prop_assert!(g.value(kl).item() >= -1e-6, "kl {}", g.value(kl).item());

        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![5], zp.clone()).unwrap());
        let q = g.leaf(Tensor::new(vec![5], zp).unwrap());
        let kl = g.kl_temperature(p, q, t).unwrap();
        prop_assert!(g.value(kl).item().abs() < 1e-6);
    }

    #[test]
    fn cosine_similarity_stays_in_unit_range(
        a in prop::collection::vec(-5.0f32..5.0, 8),
        b in prop::collection::vec(-5.0f32..5.0, 8),
    ) {
        let mut g = Graph::new();
        let at = g.leaf(Tensor::new(vec![8], a).unwrap());
        let bt = g.leaf(Tensor::new(vec![8], b).unwrap());
        let c = g.cosine_similarity(at, bt).unwrap();
        let v = g.value(c).item();
        prop_assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&v), "cos {v}");
    }

    #[test]
    fn decoupled_loss_is_nonnegative(
        f in prop::collection::vec(-2.0f32..2.0, 3 * 6),
        b in prop::collection::vec(-2.0f32..2.0, 3 * 6),
        w in prop::collection::vec(-2.0f32..2.0, 4 * 6),
        labels in prop::collection::vec(0usize..4, 3),
        all_pairs in any::<bool>(),
    ) {
        let mut g = Graph::new();
        let ft = g.leaf(Tensor::new(vec![3, 6], f).unwrap());
        let bt = g.leaf(Tensor::new(vec![3, 6], b).unwrap());
        let wt = g.leaf(Tensor::new(vec![4, 6], w).unwrap());
        let loss = decoupled_loss(&mut g, ft, bt, wt, &labels, all_pairs).unwrap();
        prop_assert!(g.value(loss).item() >= 0.0, "loss {}", g.value(loss).item());
    }

    #[test]
    fn cooc_rows_are_stochastic(k_fg in 2usize..7, k_bg in 2usize..7, raw in 0.0f32..1.0) {
        let lo = 1.0 / k_bg as f32;
        let bias = lo + raw * (1.0 - lo);
        let m = build_cooc_matrix(k_fg, k_bg, bias).unwrap();
        for i in 0..k_fg {
            let row = m.row(i);
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row[m.dominant_bg(i)] - bias).abs() < 1e-6);
        }
    }

    #[test]
    fn ensemble_argmax_is_shift_invariant(
        z_o in logits(5),
        z_f in logits(5),
        shift_o in -50.0f32..50.0,
        shift_f in -50.0f32..50.0,
    ) {
        let (_, p1) = ensemble_predict(&z_o, &z_f);
        let so: Vec<f32> = z_o.iter().map(|v| v + shift_o).collect();
        let sf: Vec<f32> = z_f.iter().map(|v| v + shift_f).collect();
        let (_, p2) = ensemble_predict(&so, &sf);
        prop_assert_eq!(p1, p2);
    }

    #[test]
    fn extracted_box_is_valid_and_contains_threshold_pixels(
        vals in prop::collection::vec(0.0f32..1.0, 64),
        tau in 0.0f32..1.0,
    ) {
        let map = Tensor::new(vec![8, 8], vals.clone()).unwrap();
        let b = extract_bbox(&map, tau);
        prop_assert!(b.x0 <= b.x1 && b.y0 <= b.y1 && b.x1 < 8 && b.y1 < 8);
        // IoU with itself is 1; with a disjoint box it is 0.
        prop_assert!((iou(&b, &b) - 1.0).abs() < 1e-6);
        let elsewhere = BBox { x0: 0, y0: 0, x1: 0, y1: 0 };
        prop_assert!(iou(&b, &elsewhere) <= 1.0);
    }

    #[test]
    fn config_round_trip_is_lossless(
        seed in any::<u64>(),
        lr in 1e-6f32..1.0,
        alpha in 0.0f32..2.0,
        beta in 0.0f32..1.0,
        temp in 0.1f32..50.0,
        tau in 0.01f32..0.99,
        bias_raw in 0.0f32..1.0,
        epochs in 1usize..100,
        batch in 2usize..64,
    ) {
        let mut cfg = Config::default();
        cfg.seed = seed;
        cfg.lr = lr;
        cfg.alpha = alpha;
        cfg.beta = beta;
        cfg.temperature = temp;
        cfg.seg_threshold = tau;
        cfg.cooc_bias = 0.25 + bias_raw * 0.75;
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        let text = cfg.serialize();
        let back = Config::parse(&text).unwrap();
        prop_assert_eq!(cfg, back);
    }
}
