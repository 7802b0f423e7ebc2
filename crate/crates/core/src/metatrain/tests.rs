use super::*;
use crate::dataio::LabeledExample;
use crate::estimator::{init, ArchConfig, Head};
use crate::image::Field3;
use crate::scene::procedural_scene;
use crate::synthgen::{distortion_configs, synthesize, WaterType};

/// `L = ½·mean(θ²)`-style surrogate: every example contributes `½θ²`.
struct Quadratic;

impl Objective<f64> for Quadratic {
    type Example = ();

    fn loss_grad(&self, p: &f64, batch: &[()]) -> Result<(f64, f64)> {
        assert!(!batch.is_empty());
        Ok((0.5 * p * p, *p))
    }
}

/// Zero loss everywhere.
struct Flat;

impl Objective<Vec<f64>> for Flat {
    type Example = ();

    fn loss_grad(&self, p: &Vec<f64>, _: &[()]) -> Result<(f64, Vec<f64>)> {
        Ok((0.0, p.zeros_like()))
    }
}

fn unit_task() -> Task<()> {
    Task {
        distortion_id: "q".into(),
        support: vec![(); 3],
        query: vec![(); 2],
    }
}

#[test]
fn quadratic_closed_form() {
    for (theta, alpha) in [(1.0, 0.1), (-3.5, 0.37), (2.0e3, 1e-4), (0.25, 1.9)] {
        let got = inner_adapt(&theta, &unit_task(), alpha, &Quadratic)
            .unwrap()
            .params;
        let want: f64 = theta * (1.0 - alpha) * (1.0 - alpha);
        assert!(((got - want) / want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn zero_rate_or_zero_gradient_is_identity() {
    assert_eq!(
        inner_adapt(&1.7, &unit_task(), 0.0, &Quadratic)
            .unwrap()
            .params,
        1.7
    );
    let theta = vec![0.3, -1.0, 2.0];
    assert_eq!(
        inner_adapt(&theta, &unit_task(), 0.5, &Flat)
            .unwrap()
            .params,
        theta
    );
}

#[test]
fn empty_sets_are_rejected() {
    let task = Task {
        distortion_id: "e".into(),
        support: vec![],
        query: vec![()],
    };
    assert!(inner_adapt(&1.0, &task, 0.1, &Quadratic).is_err());
}

#[test]
fn outer_update_examples() {
    assert_eq!(outer_update(&0.0, &[2.0, 4.0], 0.5).unwrap(), 1.5);
    let theta = vec![0.1, -7.3, 1e-9, 3.0e5];
    let theta1 = vec![1.0 / 3.0, 2.2, -5.5e-7, 0.7];
    assert_eq!(
        outer_update(&theta, std::slice::from_ref(&theta1), 1.0).unwrap(),
        theta1
    );
    let same = vec![theta.clone(), theta.clone(), theta.clone()];
    let fixed = outer_update(&theta, &same, 0.3).unwrap();
    for (a, b) in fixed.iter().zip(&theta) {
        assert!((a - b).abs() <= 1e-15 * b.abs());
    }
    assert!(outer_update::<f64>(&0.0, &[], 0.5).is_err());
}

#[test]
fn outer_update_matches_difference_form() {
    let theta = vec![0.5, -1.0, 2.0];
    let adapted = vec![
        vec![1.0, 0.0, 2.5],
        vec![0.0, -2.0, 1.0],
        vec![0.25, -1.5, 2.0],
    ];
    let beta = 0.2;
    let got = outer_update(&theta, &adapted, beta).unwrap();
    for j in 0..3 {
        let diff: f64 = adapted.iter().map(|a| theta[j] - a[j]).sum();
        let want = theta[j] - beta * diff / 3.0;
        assert!((got[j] - want).abs() < 1e-15);
    }
}

#[test]
fn outer_update_k1_beta1_on_model_params() {
    let a = init(&ArchConfig::default(), 1).unwrap();
    let b = init(&ArchConfig::default(), 2).unwrap();
    assert_eq!(
        outer_update(&a, std::slice::from_ref(&b), 1.0)
            .unwrap()
            .heads,
        b.heads
    );
}

#[test]
fn lr_schedule() {
    assert!((decayed_lr(1.0, 0.8, 5, 10) - 0.64).abs() < 1e-15);
    assert_eq!(decayed_lr(2.0, 0.8, 5, 4), 2.0);
    assert!((decayed_lr(1.0, 0.8, 2, 3) - 0.8).abs() < 1e-15);
}

#[test]
fn config_defaults_and_names() {
    let cfg = MetaConfig::default();
    assert_eq!(
        (cfg.inner_lr, cfg.outer_lr, cfg.finetune_lr),
        (1e-4, 5e-5, 1e-5)
    );
    assert_eq!(
        (cfg.task_batch, cfg.data_batch, cfg.pretrain_epochs),
        (5, 8, 40)
    );
    cfg.validate().unwrap();
    let json = serde_json::to_value(&cfg).unwrap();
    assert_eq!(json["pretrain_weights"]["c_I"], 0.5);
    assert!(serde_json::from_str::<MetaConfig>(r#"{"inner_lr": 0.1, "bogus": 1}"#).is_err());
    let parsed: MetaConfig = serde_json::from_str(r#"{"task_batch": 3}"#).unwrap();
    assert_eq!(parsed.task_batch, 3);
    assert_eq!(parsed.inner_lr, 1e-4);
    let bad = MetaConfig {
        task_batch: 0,
        ..MetaConfig::default()
    };
    assert!(bad.validate().is_err());
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        num_enc_blocks: 2,
        num_dec_blocks: 2,
        base_channels: 2,
        patch_size: 8,
        ..ArchConfig::default()
    }
}

fn toy_dataset(types: &[WaterType], images: usize) -> MetaDataset {
    let scenes: Vec<_> = (0..images)
        .map(|i| {
            let (rgb, d) = procedural_scene(i as u64, 10, 10);
            (format!("s{i}"), rgb, d)
        })
        .collect();
    MetaDataset::render(&scenes, &distortion_configs(0, types, 2, (10, 10)), 0.05, 0).unwrap()
}

#[test]
fn zero_epochs_returns_init() {
    let ds = toy_dataset(&WaterType::ALL[..3], 2);
    let p = init(&tiny_arch(), 0).unwrap();
    let cfg = MetaConfig {
        pretrain_epochs: 0,
        ..MetaConfig::default()
    };
    let mut log = Vec::new();
    let out = meta_train(&ds, &cfg, p.clone(), |r| log.push(r.clone())).unwrap();
    assert_eq!(out, p);
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].epoch, 0);
    assert!(log[0].val_loss.is_some() && log[0].meta_loss.is_none());
}

#[test]
fn meta_train_is_deterministic_and_logs_every_epoch() {
    let ds = toy_dataset(&WaterType::ALL[..3], 4);
    let p = init(&tiny_arch(), 0).unwrap();
    let cfg = MetaConfig {
        pretrain_epochs: 2,
        iters_per_epoch: 2,
        task_batch: 2,
        support_size: 2,
        query_size: 2,
        inner_lr: 0.05,
        outer_lr: 0.5,
        ..MetaConfig::default()
    };
    let mut log = Vec::new();
    let a = meta_train(&ds, &cfg, p.clone(), |r| log.push(r.clone())).unwrap();
    let b = meta_train(&ds, &cfg, p.clone(), |_| {}).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, p);
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(log[1].meta_loss.unwrap().is_finite());
}

#[test]
fn too_few_configurations() {
    let ds = toy_dataset(&WaterType::ALL[..1], 4);
    let p = init(&tiny_arch(), 0).unwrap();
    let cfg = MetaConfig {
        pretrain_epochs: 1,
        iters_per_epoch: 1,
        ..MetaConfig::default()
    };
    assert!(matches!(
        meta_train(&ds, &cfg, p, |_| {}),
        Err(Error::InsufficientData(_))
    ));
}

/// One distortion, support = query: at the default rates the training
/// loss must fall at every outer iteration.
#[test]
fn single_distortion_loss_is_monotone_at_default_rates() {
    let (rgb, depth) = procedural_scene(1, 8, 8);
    let params = distortion_configs(0, &[WaterType::Green], 1, (8, 8))
        .remove(0)
        .params;
    let samples: Vec<TrainExample> = (0..4)
        .map(|i| {
            let (rgb, depth) = if i == 0 {
                (rgb.clone(), depth.clone())
            } else {
                procedural_scene(i, 8, 8)
            };
            LabeledExample::from(synthesize(&rgb, &depth, &params, "x").unwrap()).example
        })
        .collect();
    let task = Task {
        distortion_id: "G-0".into(),
        support: samples.clone(),
        query: samples,
    };
    let cfg = MetaConfig::default();
    let objective = ModelObjective {
        weights: cfg.pretrain_weights,
    };
    let mut theta = init(&tiny_arch(), 3).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..10 {
        let tasks = vec![task.clone(); cfg.task_batch];
        let adapted: Vec<_> = tasks
            .iter()
            .map(|t| inner_adapt(&theta, t, cfg.inner_lr, &objective).unwrap())
            .collect();
        assert!(adapted[0].support_loss < last);
        last = adapted[0].support_loss;
        let ps: Vec<_> = adapted.into_iter().map(|a| a.params).collect();
        theta = outer_update(&theta, &ps, cfg.outer_lr).unwrap();
    }
}

fn real_pairs(n: usize) -> Vec<TrainExample> {
    let params = distortion_configs(9, &[WaterType::Coastal5], 1, (8, 8))
        .remove(0)
        .params;
    (0..n)
        .map(|i| {
            let (rgb, depth) = procedural_scene(100 + i as u64, 8, 8);
            let s = synthesize(&rgb, &depth, &params, "r").unwrap();
            TrainExample {
                input: s.degraded,
                clean: s.clean,
                background: None,
                transmission: None,
            }
        })
        .collect()
}

#[test]
fn fine_tune_with_zero_rate_is_identity() {
    let p = init(&tiny_arch(), 0).unwrap();
    let cfg = MetaConfig {
        finetune_lr: 0.0,
        finetune_epochs: 2,
        ..MetaConfig::default()
    };
    assert_eq!(
        fine_tune(p.clone(), &real_pairs(3), &cfg, |_| {}).unwrap(),
        p
    );
    assert!(fine_tune(p, &[], &cfg, |_| {}).is_err());
}

#[test]
fn fine_tune_lowers_clean_loss_of_a_pretrained_model() {
    let arch = ArchConfig {
        base_channels: 4,
        ..tiny_arch()
    };
    let ds = toy_dataset(&WaterType::ALL[..4], 6);
    let pre_cfg = MetaConfig {
        inner_lr: 0.2,
        outer_lr: 1.0,
        pretrain_epochs: 3,
        iters_per_epoch: 10,
        task_batch: 3,
        support_size: 2,
        query_size: 2,
        ..MetaConfig::default()
    };
    let pre = meta_train(&ds, &pre_cfg, init(&arch, 0).unwrap(), |_| {}).unwrap();
    let pairs = real_pairs(8);
    let cfg = MetaConfig {
        finetune_lr: 3e-3,
        finetune_epochs: 30,
        ..MetaConfig::default()
    };
    let clean_only = LossWeights::new(1.0, 0.0, 0.0, 0.0);
    let before = score(&pre, &pairs, &clean_only).unwrap();
    let mut log = Vec::new();
    let tuned = fine_tune(pre, &pairs, &cfg, |r| log.push(r.clone())).unwrap();
    let after = score(&tuned, &pairs, &clean_only).unwrap();
    assert!(
        after.loss < before.loss,
        "{} -> {}",
        before.loss,
        after.loss
    );
    assert_eq!(log.len(), 30);
    assert!((log[2].lr - 2.4e-3).abs() < 1e-15);
}

#[test]
fn fine_tune_weights_reach_all_heads_through_physics_term() {
    let p = init(&tiny_arch(), 1).unwrap();
    let pairs = real_pairs(2);
    let (_, g) = forward_backward(&p, &pairs, &LossWeights::FINETUNE).unwrap();
    let (_, gj) = forward_backward(&p, &pairs, &LossWeights::new(1.0, 0.0, 0.0, 0.0)).unwrap();
    let (_, gi) = forward_backward(&p, &pairs, &LossWeights::new(0.0, 0.0, 0.0, 1.0)).unwrap();
    for ((a, b), c) in g.iter().zip(gj.iter()).zip(gi.iter()) {
        assert!((a - (b + c)).abs() <= 1e-12 * a.abs().max(1e-6));
    }
    assert!(g.head(Head::Background).iter().any(|&v| v != 0.0));
    assert!(g.head(Head::Transmission).iter().any(|&v| v != 0.0));
}

#[test]
fn enhance_pads_and_crops() {
    let p = init(&tiny_arch(), 0).unwrap();
    let img = Field3::from_fn(7, 10, |c, y, x| (c + y + x) as f64 / 20.0);
    let a = enhance(&p, &img).unwrap();
    assert_eq!(a.clean.shape(), (7, 10));
    assert_eq!(a.transmission.shape(), (7, 10));
    assert_eq!(a, enhance(&p, &img).unwrap());
    let exact = Field3::filled(8, 8, 0.4);
    assert_eq!(enhance(&p, &exact).unwrap(), forward(&p, &exact).unwrap());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut adam = Adam::new(2);
    let mut p = [1.0, -1.0];
    let g = [0.5, -2.0];
    adam.update(p.iter_mut(), g.iter(), 0.1);
    assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7);
}
