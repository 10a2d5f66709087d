use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fusad::model::{is_trunk_param, FusAD, FusADConfig, HeadKind, Task};
use fusad::tensor::{AdamW, Tape, Tensor};
use fusad::training::label_smooth_ce;

fn input(s: usize, n: usize, t: usize, seed: u64) -> Tensor {
    Tensor::randn(&[s, n, t], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn damped_second_layer_is_near_identity() {
    let mut one = FusADConfig::new(64, 2, Task::Anomaly);
    one.layers = 1;
    one.patch.embed_dim = 16;
    let mut two = one.clone();
    two.layers = 2;
    let shallow = FusAD::new(one, 3).unwrap();
    let mut deep = FusAD::new(two, 4).unwrap();
    for (_, p) in shallow.store.iter() {
        let id = deep.store.id(&p.name).expect("shared parameter");
        deep.store.get_mut(id).value = p.value.clone();
    }
    deep.damp_layer(1, 1e-3).unwrap();
    let x = input(3, 2, 64, 5);
    let a = shallow.reconstruct(&x, None).unwrap();
    let b = deep.reconstruct(&x, None).unwrap();
    let r = rel_diff(&b, &a);
    assert!(r < 0.1, "relative difference {r}");
}

#[test]
fn classification_step_leaves_reconstruction_head_untouched() {
    let mut cfg = FusADConfig::new(32, 1, Task::Classification { classes: 3 });
    cfg.patch.embed_dim = 8;
    let mut model = FusAD::new(cfg, 1).unwrap();
    let x = input(4, 1, 32, 2);
    model.calibrate(&x).unwrap();
    let before = model.store.snapshot();
    let grads = {
        let tape = Tape::new();
        let logits = model.forward(&tape, &x, true).unwrap();
        let loss = label_smooth_ce(logits, &[0, 1, 2, 0], 0.1).unwrap();
        tape.backward(loss).unwrap()
    };
    AdamW::new(1e-2, 1e-4).step(&mut model.store, &grads).unwrap();
    let mut moved_trunk = false;
    for ((_, p), old) in model.store.iter().zip(&before) {
        let changed = p.value.max_abs_diff(old) > 0.0;
        if p.name.starts_with("head.recon") {
            assert!(!changed, "{} changed", p.name);
        }
        moved_trunk |= changed && is_trunk_param(&p.name);
    }
    assert!(moved_trunk);
}

#[test]
fn spikes_get_the_top_anomaly_score_in_an_untrained_pass() {
    // with thresholds wide open the round trip is smooth, so a lone spike
    // dominates its reconstruction error even before training
    let mut cfg = FusADConfig::new(64, 1, Task::Anomaly);
    cfg.patch.embed_dim = 8;
    let model = FusAD::new(cfg, 9).unwrap();
    let mut x = Tensor::from_vec((0..64).map(|t| (t as f64 / 5.0).sin()).collect())
        .reshape(&[1, 1, 64])
        .unwrap();
    x.data_mut()[37] += 25.0;
    let scores = model.anomaly_scores(&x).unwrap();
    let top = (0..64).max_by(|&a, &b| scores.data()[a].total_cmp(&scores.data()[b])).unwrap();
    assert_eq!(top, 37);
}

#[test]
fn heads_produce_task_shapes() {
    let x = input(2, 3, 48, 7);
    for (task, shape) in [
        (Task::Classification { classes: 4 }, vec![2, 4]),
        (Task::Forecasting { horizon: 12 }, vec![2, 3, 12]),
        (Task::Anomaly, vec![2, 3, 48]),
    ] {
        let mut cfg = FusADConfig::new(48, 3, task);
        cfg.patch.embed_dim = 8;
        let model = FusAD::new(cfg, 0).unwrap();
        let tape = Tape::new();
        assert_eq!(model.forward(&tape, &x, false).unwrap().shape(), shape);
        let recon = model.forward_head(&tape, &x, HeadKind::Reconstruction, None, false).unwrap();
        assert_eq!(recon.shape(), vec![2, 3, 48]);
    }
}
