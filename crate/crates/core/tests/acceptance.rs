//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines reach stdout.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use tplconv::bench::{inversions, run_bench, two_stage_medians, BenchConfig, Impl};
use tplconv::cost::{flops_reduction, params_reduction, template_layer_cost};
use tplconv::equiv::{run_sweep, RELATIVE_TOLERANCE};
use tplconv::nn::{make_synthetic_dataset, train, Layer, Network, TemplateConv, TrainConfig};
use tplconv::pruning::{templates_for_rate, ConvertOptions, PruneSchedule};
use tplconv::viz::{pgm_pixels, render_layer, tile_pixels};
use tplconv::{ConvGeometry, TemplateConvLayer, Tensor4, TransformFamily};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn path_equivalence() -> Outcome {
    let start = Instant::now();
    let cases = run_sweep(200, 0, false).unwrap();
    let elapsed = start.elapsed();
    let worst = cases
        .iter()
        .map(|c| c.relative_deviation())
        .fold(0.0, f64::max);
    let in_range = cases.iter().all(|c| {
        let g = c.config;
        [1, 3, 5].contains(&g.kernel)
            && [1, 2, 4].contains(&g.groups)
            && (1..=2).contains(&g.stride)
            && g.padding <= 2
            && g.in_channels <= 32
            && g.out_channels <= 64
    });
    outcome(
        cases.len() >= 200
            && in_range
            && worst <= RELATIVE_TOLERANCE
            && elapsed < Duration::from_secs(60),
        format!(
            "{} configs, worst relative deviation {worst:.2e}, {:.1} s",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let scalar = layer_gradient_error(TransformFamily::Scalar, 21);
    let affine = layer_gradient_error(TransformFamily::Affine, 22);
    let x = random_tensor([4, 2, 5, 5], &mut rng(23));
    let net_scalar = probe_network(TransformFamily::Scalar, 24);
    let net_affine = probe_network(TransformFamily::Affine, 25);
    let small = net_scalar.param_count() <= 500 && net_affine.param_count() <= 500;
    let e2e = network_gradient_error(&net_scalar, &x, &[0, 1, 2, 1], 1e-5)
        .max(network_gradient_error(&net_affine, &x, &[2, 1, 0, 0], 1e-5));
    let elapsed = start.elapsed();
    outcome(
        scalar <= 1e-6
            && affine <= 1e-6
            && e2e <= 1e-5
            && small
            && elapsed < Duration::from_secs(120),
        format!(
            "layer scalar {scalar:.2e}, layer affine {affine:.2e}, end-to-end {e2e:.2e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn cost_agreement() -> Outcome {
    let mut configs = 0;
    let mut mismatches = 0;
    for &(c, n) in &[(4, 6), (8, 8), (16, 32), (12, 5), (6, 9)] {
        for g in [1, 2, 4] {
            if c % g != 0 {
                continue;
            }
            for k in [1, 3] {
                for m in [1, n / 2, n - 1] {
                    let w = random_tensor([n, c, k, k], &mut rng(configs));
                    let kept: Vec<usize> = (0..m).collect();
                    let geom = ConvGeometry::new(k, 1, k / 2, 1).unwrap();
                    let layer = TemplateConvLayer::from_dense(
                        &w,
                        &geom,
                        &kept,
                        TransformFamily::Scalar,
                        g,
                        false,
                    )
                    .unwrap();
                    let counted = layer.count_macs(7, 6).unwrap();
                    let closed =
                        template_layer_cost(c, n, m, g, k, 7, 6, TransformFamily::Scalar).unwrap();
                    if closed.template_macs != counted.template_stage
                        || closed.transform_macs != counted.transform_stage
                        || closed.params as usize != layer.param_count()
                    {
                        mismatches += 1;
                    }
                    configs += 1;
                }
            }
        }
    }
    let f1 = flops_reduction(16, 32, 8, 1);
    let f2 = flops_reduction(16, 32, 8, 2);
    let p1 = params_reduction(16, 32, 8, 1);
    let p2 = params_reduction(16, 32, 8, 2);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    outcome(
        configs >= 50
            && mismatches == 0
            && close(f1, 0.296875)
            && close(f2, 0.34375)
            && close(p1, f1)
            && close(p2, 0.21875),
        format!(
            "{configs} configs, {mismatches} mismatches; flops {f1} / {f2}, params {p1} / {p2}"
        ),
    )
}

fn function_preserving() -> Outcome {
    let net = Network::small_cnn(3, &[6, 8], 4, 8, &mut rng(31)).unwrap();
    let x = random_tensor([3, 3, 8, 8], &mut rng(32));
    let (reference, _) = net.forward(&x, false).unwrap();
    let mut worst_rate0: f64 = 0.0;
    for family in TransformFamily::ALL {
        let mut converted = net.clone();
        for id in net.conv_layer_ids() {
            let Layer::Conv(conv) = &net.layers[id] else {
                unreachable!()
            };
            let all: Vec<usize> = (0..conv.weight.batch()).collect();
            let layer =
                TemplateConvLayer::from_dense(&conv.weight, &conv.geom, &all, family, 1, false)
                    .unwrap();
            converted.layers[id] = Layer::TemplateConv(TemplateConv {
                layer,
                bias: conv.bias.clone(),
            });
        }
        let (logits, _) = converted.forward(&x, false).unwrap();
        worst_rate0 = worst_rate0.max(logits.max_abs_diff(&reference));
    }

    let mut r = rng(33);
    let base = random_tensor([1, 3, 3, 3], &mut r);
    let scales: Vec<f64> = (0..8)
        .map(|_| r.random_range(0.2..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let weight = Tensor4::from_fn([8, 3, 3, 3], |[n, c, y, x]| {
        scales[n] * base.get(0, c, y, x)
    });
    let geom = ConvGeometry::new(3, 1, 1, 1).unwrap();
    let mut worst_rank1: f64 = 0.0;
    for rate in [0.25, 0.5, 0.75, 0.875] {
        let m = templates_for_rate(8, rate, 1);
        let kept: Vec<usize> = (0..m).collect();
        let layer =
            TemplateConvLayer::from_dense(&weight, &geom, &kept, TransformFamily::Scalar, 1, false)
                .unwrap();
        worst_rank1 =
            worst_rank1.max(layer.reconstruct_filters().max_abs_diff(&weight) / weight.max_abs());
    }
    outcome(
        worst_rate0 <= 1e-12 && worst_rank1 <= 1e-12,
        format!("rate-0 logit change {worst_rate0:.2e}, rank-1 relative reconstruction error {worst_rank1:.2e}"),
    )
}

fn schedule_conformance() -> Outcome {
    let data = make_synthetic_dataset(4, 256, 41).unwrap();
    let widths = [8, 16, 32];
    let net = Network::small_cnn(3, &widths, 4, 32, &mut rng(42)).unwrap();
    let schedule = PruneSchedule {
        target_rate: 0.9,
        ramp_epochs: 8,
        min_templates: 8,
    };
    let config = TrainConfig {
        epochs: 10,
        schedule,
        seed: 43,
        ..TrainConfig::default()
    };
    let (_, history) = train(net, &data, None, &config).unwrap();
    let trace_ok = history.len() == 10
        && history.iter().enumerate().all(|(e, m)| {
            m.epoch == e
                && m.templates
                    == widths
                        .iter()
                        .map(|&n| templates_for_rate(n, schedule.rate_at_epoch(e), 8))
                        .collect::<Vec<_>>()
        });
    let nested = history.windows(2).all(|pair| {
        pair[1]
            .kept
            .iter()
            .zip(&pair[0].kept)
            .all(|(later, earlier)| later.iter().all(|k| earlier.contains(k)))
    });
    let last = &history.last().unwrap().templates;
    let clamped = last.iter().all(|&m| m == 8);
    let trace: Vec<String> = history
        .iter()
        .map(|m| format!("{:?}", m.templates))
        .collect();
    outcome(
        trace_ok && nested && clamped,
        format!(
            "trace {}; nested {nested}; clamped {clamped}",
            trace.join(" ")
        ),
    )
}

fn final_train_acc(seed: u64, rate: f64, groups: usize, min_templates: usize) -> f64 {
    let data = make_synthetic_dataset(4, 2048, 1000 + seed).unwrap();
    let net = Network::small_cnn(3, &[8, 16, 16], 4, 32, &mut rng(seed)).unwrap();
    let config = TrainConfig {
        epochs: 15,
        seed,
        schedule: PruneSchedule {
            target_rate: rate,
            ramp_epochs: 8,
            min_templates,
        },
        convert: ConvertOptions {
            family: TransformFamily::Scalar,
            groups,
            independent_group_templates: false,
        },
        ..TrainConfig::default()
    };
    let (_, history) = train(net, &data, None, &config).unwrap();
    history.last().unwrap().train_acc
}

fn training_parity() -> Outcome {
    let start = Instant::now();
    let dense = final_train_acc(0, 0.0, 1, 4);
    let pruned = final_train_acc(0, 0.5, 1, 4);
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=5 {
        let g1 = final_train_acc(seed, 0.9, 1, 1);
        let g2 = final_train_acc(seed, 0.9, 2, 1);
        if g2 >= g1 {
            wins += 1;
        }
        pairs.push(format!("{g1:.3}/{g2:.3}"));
    }
    let elapsed = start.elapsed();
    let gap = (dense - pruned) * 100.0;
    outcome(
        gap <= 5.0 && wins >= 3 && elapsed < Duration::from_secs(600),
        format!(
            "dense {dense:.4}, rate 0.5 {pruned:.4} (gap {gap:.2} pts); rate 0.9 G=1/G=2 {} ({wins} of 5 with G=2 ahead or level); {:.0} s",
            pairs.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn benchmark_trend() -> Outcome {
    let rows = run_bench(&BenchConfig::default()).unwrap();
    let medians = two_stage_medians(&rows);
    let inv = inversions(&medians);
    let at_half = rows
        .iter()
        .find(|r| r.imp == Impl::TwoStage && r.rate == 0.5)
        .unwrap();
    let shares = at_half.stage_transform_us < at_half.stage_template_us;
    let medians_text: Vec<String> = medians.iter().map(|m| format!("{m:.0}")).collect();
    outcome(
        inv <= 1 && shares,
        format!(
            "two-stage medians {} us ({inv} inversions); at 0.5 template {:.0} us, transform {:.0} us",
            medians_text.join(" / "),
            at_half.stage_template_us,
            at_half.stage_transform_us
        ),
    )
}

fn visualization_contract() -> Outcome {
    let mut r = rng(51);
    let mut weight = random_tensor([6, 3, 3, 3], &mut r);
    for c in 0..3 {
        weight.as_mut_slice()[(2 * 3 + c) * 9 + 4] = 0.0;
    }
    let geom = ConvGeometry::new(3, 1, 1, 1).unwrap();
    let kept = [0, 2, 5];
    let layer =
        TemplateConvLayer::from_dense(&weight, &geom, &kept, TransformFamily::Scalar, 1, false)
            .unwrap();
    let rendered = render_layer(&weight, &layer.reconstruct_filters(), &kept).unwrap();
    let [original, reconstructed, pruned] =
        [0, 1, 2].map(|v| pgm_pixels(&rendered.images[v]).to_vec());
    let identical = kept
        .iter()
        .all(|&f| tile_pixels(&original, 3, 6, f) == tile_pixels(&reconstructed, 3, 6, f));
    let zero_tap_black = tile_pixels(&original, 3, 6, 2)[4] == 0;
    let pruned_black = (0..6)
        .filter(|f| !kept.contains(f))
        .all(|f| tile_pixels(&pruned, 3, 6, f).iter().all(|&p| p == 0));
    outcome(
        identical && zero_tap_black && pruned_black,
        format!("identity tiles identical {identical}; zero tap black {zero_tap_black}; pruned tiles black {pruned_black}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("path equivalence", path_equivalence),
        ("gradient correctness", gradient_correctness),
        ("cost-model agreement", cost_agreement),
        ("function-preserving conversion", function_preserving),
        ("schedule conformance", schedule_conformance),
        ("training parity", training_parity),
        ("benchmark trend", benchmark_trend),
        ("visualization contract", visualization_contract),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} {} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
