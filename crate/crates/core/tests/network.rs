mod common;

use common::*;
use tplconv::nn::{
    evaluate, forward_loss, make_synthetic_dataset, metrics_csv, softmax_cross_entropy, train,
    Layer, Network, TrainConfig,
};
use tplconv::pruning::PruneSchedule;
use tplconv::{Tensor4, TransformFamily};

#[test]
fn uniform_logits_give_log_classes() {
    let logits = Tensor4::zeros([3, 10, 1, 1]);
    let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let mut logits = Tensor4::zeros([1, 4, 1, 1]);
    logits.as_mut_slice()[2] = 60.0;
    let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
    assert!(loss < 1e-20);
}

#[test]
fn loss_matches_log_sum_exp_oracle() {
    let net = probe_network(TransformFamily::Scalar, 3);
    let x = random_tensor([4, 2, 5, 5], &mut rng(4));
    let labels = [0, 2, 1, 2];
    let (loss, logits) = forward_loss(&net, &x, &labels, true).unwrap();
    assert!((loss - lse_loss(&logits, &labels)).abs() < 1e-10);
}

#[test]
fn bad_labels_and_shapes_rejected() {
    let logits = Tensor4::zeros([2, 3, 1, 1]);
    assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
    assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    let net = probe_network(TransformFamily::Scalar, 0);
    assert!(net.forward(&Tensor4::zeros([1, 3, 5, 5]), false).is_err());
    assert!(net.shape_trace([1, 2, 5, 5]).is_ok());
}

#[test]
fn end_to_end_gradients_scalar() {
    let net = probe_network(TransformFamily::Scalar, 11);
    assert!(net.param_count() <= 500, "{}", net.param_count());
    let x = random_tensor([4, 2, 5, 5], &mut rng(12));
    let err = network_gradient_error(&net, &x, &[0, 1, 2, 1], 1e-5);
    assert!(err <= 1e-5, "worst relative error {err:e}");
}

#[test]
fn end_to_end_gradients_affine() {
    let net = probe_network(TransformFamily::Affine, 13);
    let x = random_tensor([4, 2, 5, 5], &mut rng(14));
    let err = network_gradient_error(&net, &x, &[2, 1, 0, 0], 1e-5);
    assert!(err <= 1e-5, "worst relative error {err:e}");
}

#[test]
fn pooling_and_relu_gradients() {
    let mut r = rng(21);
    let mut net = Network::small_cnn(2, &[3], 2, 6, &mut r).unwrap();
    // Spread inputs so no ReLU or pooling tie sits within the step.
    let x = Tensor4::from_fn([3, 2, 6, 6], |[n, c, y, xx]| {
        ((n * 72 + c * 36 + y * 6 + xx) as f64 * 0.7548776662).fract() - 0.5
    });
    if let Layer::BatchNorm(bn) = &mut net.layers[1] {
        bn.beta = vec![0.3, -0.1, 0.2];
    }
    let err = network_gradient_error(&net, &x, &[0, 1, 1], 1e-6);
    assert!(err <= 1e-5, "worst relative error {err:e}");
}

#[test]
fn eval_mode_uses_running_stats() {
    let mut net = probe_network(TransformFamily::Scalar, 5);
    let x = random_tensor([4, 2, 5, 5], &mut rng(6));
    let (before, _) = net.forward(&x, false).unwrap();
    let (_, tape) = net.forward(&x, true).unwrap();
    net.update_running_stats(&tape);
    let (after, _) = net.forward(&x, false).unwrap();
    assert!(before.max_abs_diff(&after) > 0.0);
    // Same batch in train mode is unaffected by running statistics.
    let (t1, _) = net.forward(&x, true).unwrap();
    let (t2, _) = probe_network(TransformFamily::Scalar, 5)
        .forward(&x, true)
        .unwrap();
    assert_eq!(t1, t2);
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 0.05,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_data_is_learnable() {
    let data = make_synthetic_dataset(4, 512, 1).unwrap();
    let net = Network::small_cnn(3, &[8, 8], 4, 32, &mut rng(2)).unwrap();
    let (net, history) = train(net, &data, None, &quick_config(5)).unwrap();
    let last = history.last().unwrap();
    assert!(last.train_acc >= 0.95, "train accuracy {}", last.train_acc);
    assert!(evaluate(&net, &data, 64).unwrap() >= 0.9);
}

#[test]
fn training_is_deterministic_and_rate_zero_is_a_no_op() {
    let data = make_synthetic_dataset(3, 96, 7).unwrap();
    let make = || Network::small_cnn(3, &[4, 8], 3, 32, &mut rng(8)).unwrap();
    let base = quick_config(2);
    let (_, a) = train(make(), &data, None, &base).unwrap();
    let (_, b) = train(make(), &data, None, &base).unwrap();
    assert_eq!(metrics_csv(&a), metrics_csv(&b));
    let hooked = TrainConfig {
        schedule: PruneSchedule {
            target_rate: 0.0,
            ramp_epochs: 1,
            min_templates: 1,
        },
        ..base.clone()
    };
    let (_, c) = train(make(), &data, None, &hooked).unwrap();
    assert_eq!(a, c);
}

#[test]
fn schedule_replay_during_training() {
    let data = make_synthetic_dataset(3, 64, 9).unwrap();
    let net = Network::small_cnn(3, &[8, 8], 3, 32, &mut rng(10)).unwrap();
    let schedule = PruneSchedule {
        target_rate: 0.5,
        ramp_epochs: 3,
        min_templates: 2,
    };
    let config = TrainConfig {
        schedule,
        ..quick_config(5)
    };
    let (net, history) = train(net, &data, None, &config).unwrap();
    for m in &history {
        let want = schedule.templates_at_epoch(8, m.epoch);
        assert_eq!(m.templates, vec![want, want], "epoch {}", m.epoch);
    }
    for pair in history.windows(2) {
        for (later, earlier) in pair[1].kept.iter().zip(&pair[0].kept) {
            assert!(later.iter().all(|k| earlier.contains(k)));
        }
    }
    assert!(matches!(net.layers[0], Layer::TemplateConv(_)));
    let csv = metrics_csv(&history);
    assert!(csv.lines().nth(5).unwrap().ends_with(",4;4"));
}
