use super::*;
use crate::image::Field3;
use crate::rng::Rng;
use crate::uwmodel::compose_underwater;

fn tiny(base: usize, levels: usize) -> ArchConfig {
    ArchConfig {
        num_enc_blocks: levels,
        num_dec_blocks: levels,
        base_channels: base,
        patch_size: 8,
        ..ArchConfig::default()
    }
}

fn random_field(rng: &mut Rng, h: usize, w: usize, lo: f64, hi: f64) -> Field3 {
    Field3::from_fn(h, w, |_, _, _| rng.uniform(lo, hi).unwrap())
}

/// Pixels near 0 or 1, far from anything the recomposition of a freshly
/// initialised model can produce, so the L1 of the physics term is smooth.
fn extreme_field(rng: &mut Rng, h: usize, w: usize) -> Field3 {
    Field3::from_fn(h, w, |_, _, _| {
        let v = rng.uniform(0.0, 0.12).unwrap();
        if rng.below(2) == 0 {
            v
        } else {
            1.0 - v
        }
    })
}

/// Targets offset from the prediction by at least 0.05 in a random
/// direction, keeping every L1 residual away from its kink.
fn offset_from(rng: &mut Rng, pred: &Field3) -> Field3 {
    let data = pred
        .data()
        .iter()
        .map(|&p| {
            let d = rng.uniform(0.05, 0.3).unwrap();
            if rng.below(2) == 0 {
                p + d
            } else {
                p - d
            }
        })
        .collect();
    Field3::new(pred.height(), pred.width(), data).unwrap()
}

fn smooth_batch(params: &ModelParams, n: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let input = extreme_field(&mut rng, 8, 8);
            let pred = forward(params, &input).unwrap();
            let recomposed =
                compose_underwater(&pred.clean, &pred.transmission, &pred.background).unwrap();
            assert!(input
                .data()
                .iter()
                .zip(recomposed.data())
                .all(|(a, b)| (a - b).abs() > 0.05));
            TrainExample {
                clean: offset_from(&mut rng, &pred.clean),
                background: Some(offset_from(&mut rng, &pred.background)),
                transmission: Some(offset_from(&mut rng, &pred.transmission)),
                input,
            }
        })
        .collect()
}

/// Forward-only loss; shares no code with the backward pass.
fn loss_only(params: &ModelParams, batch: &[TrainExample], w: &LossWeights) -> f64 {
    total_loss(&evaluate(params, batch).unwrap(), w)
}

fn flat_get(p: &ModelParams, i: usize) -> f64 {
    *p.iter().nth(i).unwrap()
}

fn flat_set(p: &mut ModelParams, i: usize, v: f64) {
    *p.iter_mut().nth(i).unwrap() = v;
}

fn max_fd_error(
    params: &ModelParams,
    batch: &[TrainExample],
    w: &LossWeights,
    coords: usize,
    seed: u64,
) -> f64 {
    let (_, grad) = forward_backward(params, batch, w).unwrap();
    let mut rng = Rng::new(seed);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in rng.choose_distinct(params.len(), coords) {
        let x = flat_get(params, i);
        let mut p = params.clone();
        flat_set(&mut p, i, x + h);
        let up = loss_only(&p, batch, w);
        flat_set(&mut p, i, x - h);
        let down = loss_only(&p, batch, w);
        let fd = (up - down) / (2.0 * h);
        let an = flat_get(&grad, i);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn init_is_deterministic() {
    let cfg = tiny(2, 2);
    assert_eq!(init(&cfg, 5).unwrap(), init(&cfg, 5).unwrap());
    assert_ne!(init(&cfg, 5).unwrap(), init(&cfg, 6).unwrap());
}

#[test]
fn heads_get_independent_weights() {
    let p = init(&tiny(2, 2), 1).unwrap();
    assert_ne!(p.head(Head::Clean), p.head(Head::Background));
    assert_ne!(p.head(Head::Background), p.head(Head::Transmission));
}

/// Layer-by-layer count written independently of the layout builder.
fn expected_head_len(cfg: &ArchConfig) -> usize {
    let n = cfg.num_enc_blocks;
    let ch: Vec<usize> = (0..n)
        .map(|l| (cfg.base_channels << l).min(cfg.max_channels))
        .collect();
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let block = |cin: usize, cout: usize| {
        conv(cin, cout, 3)
            + conv(cout, cout, 3)
            + if cfg.use_shortcut && cin != cout {
                conv(cin, cout, 1)
            } else {
                0
            }
    };
    let mut total = 0;
    let mut cin = 3;
    for &c in &ch {
        total += block(cin, c);
        cin = c;
    }
    for l in 0..n {
        let below = ch[(l + 1).min(n - 1)];
        total += block(below + if cfg.use_skip { ch[l] } else { 0 }, ch[l]);
    }
    total + conv(ch[0], 3, 1)
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ArchConfig::default();
    let p = init(&cfg, 0).unwrap();
    assert_eq!(p.len(), 3 * expected_head_len(&cfg));
    // 8,16,32,64 channels: hand-summed.
    let enc = (9 * 3 * 8 + 8 + 9 * 64 + 8 + 3 * 8 + 8)
        + (9 * 8 * 16 + 16 + 9 * 256 + 16 + 8 * 16 + 16)
        + (9 * 16 * 32 + 32 + 9 * 1024 + 32 + 16 * 32 + 32)
        + (9 * 32 * 64 + 64 + 9 * 4096 + 64 + 32 * 64 + 64);
    let dec = (9 * 128 * 64 + 64 + 9 * 4096 + 64 + 128 * 64 + 64)
        + (9 * 96 * 32 + 32 + 9 * 1024 + 32 + 96 * 32 + 32)
        + (9 * 48 * 16 + 16 + 9 * 256 + 16 + 48 * 16 + 16)
        + (9 * 24 * 8 + 8 + 9 * 64 + 8 + 24 * 8 + 8);
    assert_eq!(expected_head_len(&cfg), enc + dec + 8 * 3 + 3);
    for flags in [(false, true), (true, false), (false, false)] {
        let cfg = ArchConfig {
            use_skip: flags.0,
            use_shortcut: flags.1,
            ..ArchConfig::default()
        };
        assert_eq!(init(&cfg, 0).unwrap().len(), 3 * expected_head_len(&cfg));
    }
}

#[test]
fn capped_channels() {
    let cfg = ArchConfig {
        max_channels: 16,
        ..ArchConfig::default()
    };
    assert_eq!(
        (0..4).map(|l| cfg.channels_at(l)).collect::<Vec<_>>(),
        [8, 16, 16, 16]
    );
    assert_eq!(init(&cfg, 0).unwrap().len(), 3 * expected_head_len(&cfg));
}

#[test]
fn smallest_config_runs() {
    let cfg = tiny(1, 1);
    let p = init(&cfg, 0).unwrap();
    let pred = forward(&p, &Field3::filled(2, 4, 0.3)).unwrap();
    assert_eq!(pred.clean.shape(), (2, 4));
}

#[test]
fn output_shapes_and_ranges() {
    let p = init(&tiny(2, 3), 3).unwrap();
    let mut rng = Rng::new(0);
    let img = random_field(&mut rng, 16, 24, 0.0, 1.0);
    let pred = forward(&p, &img).unwrap();
    for head in Head::ALL {
        assert_eq!(pred.field(head).shape(), (16, 24));
    }
    assert!(pred.clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(pred
        .transmission
        .data()
        .iter()
        .all(|v| (T_FLOOR..=1.0).contains(v)));
    assert_eq!(pred, forward(&p, &img).unwrap());
}

#[test]
fn zero_network_is_constant() {
    let mut p = init(&tiny(2, 2), 0).unwrap();
    p.iter_mut().for_each(|v| *v = 0.0);
    let mut rng = Rng::new(1);
    let pred = forward(&p, &random_field(&mut rng, 8, 8, 0.0, 1.0)).unwrap();
    assert!(pred.clean.data().iter().all(|&v| v == 0.5));
    assert!(pred.background.data().iter().all(|&v| v == 0.5));
    assert!(pred
        .transmission
        .data()
        .iter()
        .all(|&v| (v - 0.525).abs() < 1e-15));
}

#[test]
fn indivisible_input_names_multiple() {
    let p = init(&tiny(2, 3), 0).unwrap();
    let err = forward(&p, &Field3::filled(12, 16, 0.5)).unwrap_err();
    assert!(matches!(err, Error::Indivisible { multiple: 8, .. }));
    assert!(err.to_string().contains('8'));
}

#[test]
fn zero_weights_give_zero_loss_and_gradient() {
    let p = init(&tiny(2, 2), 0).unwrap();
    let batch = smooth_batch(&p, 2, 0);
    let (loss, grad) = forward_backward(&p, &batch, &LossWeights::ZERO).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn mean_reduction_is_invariant() {
    let p = init(&tiny(2, 2), 0).unwrap();
    let batch = smooth_batch(&p, 3, 1);
    let w = LossWeights::PRETRAIN;
    let (l1, g1) = forward_backward(&p, &batch[..1], &w).unwrap();
    let (l2, g2) = forward_backward(&p, &[batch[0].clone(), batch[0].clone()], &w).unwrap();
    assert!((l1 - l2).abs() < 1e-15);
    for (a, b) in g1.iter().zip(g2.iter()) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }
    let (la, ga) = forward_backward(&p, &batch, &w).unwrap();
    let rev: Vec<_> = batch.iter().rev().cloned().collect();
    let (lb, gb) = forward_backward(&p, &rev, &w).unwrap();
    assert!((la - lb).abs() < 1e-14);
    for (a, b) in ga.iter().zip(gb.iter()) {
        assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-3));
    }
}

#[test]
fn missing_targets_are_rejected_only_when_weighted() {
    let p = init(&tiny(2, 2), 0).unwrap();
    let mut batch = smooth_batch(&p, 1, 2);
    batch[0].background = None;
    batch[0].transmission = None;
    assert!(matches!(
        forward_backward(&p, &batch, &LossWeights::PRETRAIN),
        Err(Error::MissingTarget { .. })
    ));
    forward_backward(&p, &batch, &LossWeights::FINETUNE).unwrap();
}

#[test]
fn finite_differences_per_term() {
    let p = init(&tiny(2, 2), 11).unwrap();
    let batch = smooth_batch(&p, 2, 3);
    let cases = [
        LossWeights::new(1.0, 0.0, 0.0, 0.0),
        LossWeights::new(0.0, 1.0, 0.0, 0.0),
        LossWeights::new(0.0, 0.0, 1.0, 0.0),
        LossWeights::new(0.0, 0.0, 0.0, 1.0),
        LossWeights::PRETRAIN,
    ];
    for (k, w) in cases.iter().enumerate() {
        let err = max_fd_error(&p, &batch, w, 60, k as u64);
        assert!(err <= 1e-3, "weights {w:?}: relative error {err}");
    }
}

#[test]
fn isolated_terms_only_touch_their_heads() {
    let p = init(&tiny(2, 2), 4).unwrap();
    let batch = smooth_batch(&p, 1, 4);
    let (_, g) = forward_backward(&p, &batch, &LossWeights::new(1.0, 0.0, 0.0, 0.0)).unwrap();
    assert!(g.head(Head::Clean).iter().any(|&v| v != 0.0));
    assert!(g.head(Head::Background).iter().all(|&v| v == 0.0));
    assert!(g.head(Head::Transmission).iter().all(|&v| v == 0.0));
    let (_, g) = forward_backward(&p, &batch, &LossWeights::FINETUNE).unwrap();
    for head in Head::ALL {
        assert!(g.head(head).iter().any(|&v| v != 0.0), "{head:?}");
    }
}

#[test]
fn gradient_is_thread_count_independent() {
    let p = init(&tiny(2, 2), 2).unwrap();
    let batch = smooth_batch(&p, 4, 5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| forward_backward(&p, &batch, &LossWeights::PRETRAIN).unwrap())
    };
    assert_eq!(run(1), run(3));
}
