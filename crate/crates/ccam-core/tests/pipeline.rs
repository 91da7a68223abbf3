//! End-to-end behavior of the train / evaluate / adapt pipeline on a small
//! synthetic dataset.

use ccam_core::adapt::adapt;
use ccam_core::config::{AdaptConfig, EvalConfig, TrainConfig};
use ccam_core::counterfactual::train;
use ccam_core::dataset::{generate_split, load_dataset, GenConfig};
use ccam_core::eval::evaluate;
use ccam_core::model::{CamSource, OmegaScheme};
use ccam_core::synth::Scene;
use ccam_core::tensor::Tensor;

fn tiny_dataset(seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        seed,
        image_size: 64,
        num_fg_classes: 4,
        num_bg_classes: 4,
        cooc_bias: 0.9,
        train_size: 48,
        test_size: 16,
    };
    generate_split(&cfg, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    (ds.train, ds.test)
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        seed: 11,
        epochs: 3,
        batch_size: 8,
        lr: 0.002,
        alpha: 0.001,
        use_counterfactual: true,
        use_decouple: true,
        decouple_all_pairs: true,
    }
}

fn eval_cfg() -> EvalConfig {
    EvalConfig {
        seg_threshold: 0.15,
        omega_scheme: OmegaScheme::Top1,
        cam_source: CamSource::Foreground,
    }
}

#[test]
fn training_descends_and_is_deterministic() {
    let (train_scenes, _) = tiny_dataset(21);
    let cfg = tiny_train_cfg();
    let out1 = train(&train_scenes, 4, &cfg, None).unwrap();
    assert!(
        out1.epochs.last().unwrap().mean_loss < out1.epochs[0].mean_loss,
        "loss should descend: {:?}",
        out1.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>()
    );
    // Term breakdown present when both mechanisms are on.
    assert!(out1.epochs[0].mean_ce_counterfactual.is_some());
    assert!(out1.epochs[0].mean_decouple.is_some());

    let out2 = train(&train_scenes, 4, &cfg, None).unwrap();
    assert_eq!(out1.params, out2.params, "same seed must give identical parameters");
}

#[test]
fn baseline_switches_drop_terms() {
    let (train_scenes, _) = tiny_dataset(22);
    let mut cfg = tiny_train_cfg();
    cfg.epochs = 1;
    cfg.use_counterfactual = false;
    cfg.use_decouple = false;
    let out = train(&train_scenes, 4, &cfg, None).unwrap();
    let e = &out.epochs[0];
    assert!(e.mean_ce_counterfactual.is_none());
    assert!(e.mean_decouple.is_none());
    // Two-head baseline: the loss is exactly the two CE means.
    let expect = (e.mean_ce_original as f64 + e.mean_ce_foreground as f64) as f32;
    assert!(
        (e.mean_loss - expect).abs() < 1e-5,
        "{} vs {expect}",
        e.mean_loss
    );
}

#[test]
fn evaluation_invariants_and_order_independence() {
    let (train_scenes, test_scenes) = tiny_dataset(23);
    let mut cfg = tiny_train_cfg();
    cfg.epochs = 2;
    let out = train(&train_scenes, 4, &cfg, None).unwrap();

    let report = evaluate(&test_scenes, &out.params, &eval_cfg()).unwrap();
    assert!(report.top1_loc <= report.top1_cls.min(report.gt_known) + 1e-6);
    assert_eq!(report.per_image.len(), test_scenes.len());
    for (name, v) in report.metric_rows() {
        assert!((0.0..=1.0).contains(&v), "{name} = {v}");
    }

    let report2 = evaluate(&test_scenes, &out.params, &eval_cfg()).unwrap();
    assert_eq!(report.metrics_csv(), report2.metrics_csv());

    let mut shuffled = test_scenes.clone();
    shuffled.reverse();
    let report3 = evaluate(&shuffled, &out.params, &eval_cfg()).unwrap();
    assert_eq!(report.metrics_csv(), report3.metrics_csv());
}

#[test]
fn evaluate_rejects_class_count_mismatch() {
    let (train_scenes, mut test_scenes) = tiny_dataset(24);
    let mut cfg = tiny_train_cfg();
    cfg.epochs = 1;
    let out = train(&train_scenes, 4, &cfg, None).unwrap();
    test_scenes[0].fg_class = 7;
    assert!(matches!(
        evaluate(&test_scenes, &out.params, &eval_cfg()),
        Err(ccam_core::Error::Mismatch(_))
    ));
}

#[test]
fn adaptation_freezes_backbone_and_zero_lr_touches_only_running_stats() {
    let (train_scenes, test_scenes) = tiny_dataset(25);
    let mut cfg = tiny_train_cfg();
    cfg.epochs = 1;
    let trained = train(&train_scenes, 4, &cfg, None).unwrap().params;
    let images: Vec<Tensor> = test_scenes.iter().map(|s| s.image.clone()).collect();

    let acfg = AdaptConfig {
        seed: 5,
        beta: 0.2,
        delta: 0.012,
        temperature: 15.0,
        lr: 0.0,
        batch_size: 8,
        passes: 1,
        episodic: false,
    };
    let out = adapt(&images, &trained, &acfg, None).unwrap();
    // lr = 0: every learnable identical, only running statistics move.
    for ((name, before), after) in trained
        .named_learnables()
        .iter()
        .zip(out.params.named_learnables().iter())
    {
        assert_eq!(before.data(), after.1.data(), "{name} changed under lr=0");
    }
    let stats_moved = trained
        .blocks
        .iter()
        .zip(out.params.blocks.iter())
        .any(|((_, a), (_, b))| a.running != b.running);
    assert!(stats_moved, "running statistics must track adapt batches");

    // Real adaptation: backbone conv weights stay byte-identical.
    let acfg2 = AdaptConfig {
        lr: 1e-4,
        ..acfg
    };
    let out2 = adapt(&images, &trained, &acfg2, None).unwrap();
    for (i, ((ca, _), (cb, _))) in trained.blocks.iter().zip(out2.params.blocks.iter()).enumerate() {
        assert_eq!(ca.w.data(), cb.w.data(), "backbone conv {i} weight moved");
        assert_eq!(ca.b.data(), cb.b.data(), "backbone conv {i} bias moved");
    }
    // But the adapt group did move.
    assert_ne!(trained.cls_w.data(), out2.params.cls_w.data());

    // Determinism of adaptation.
    let out3 = adapt(&images, &trained, &acfg2, None).unwrap();
    assert_eq!(out2.params, out3.params);
}

#[test]
fn episodic_adaptation_returns_entry_learnables() {
    let (train_scenes, test_scenes) = tiny_dataset(26);
    let mut cfg = tiny_train_cfg();
    cfg.epochs = 1;
    let trained = train(&train_scenes, 4, &cfg, None).unwrap().params;
    let images: Vec<Tensor> = test_scenes.iter().map(|s| s.image.clone()).collect();
    let acfg = AdaptConfig {
        seed: 5,
        beta: 0.2,
        delta: 0.012,
        temperature: 15.0,
        lr: 1e-3,
        batch_size: 8,
        passes: 1,
        episodic: true,
    };
    let out = adapt(&images, &trained, &acfg, None).unwrap();
    assert_eq!(out.params, trained);
    assert!(!out.batches.is_empty());
}
