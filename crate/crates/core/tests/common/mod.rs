#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tplconv::nn::{
    softmax_cross_entropy, BatchNorm, DenseConv, Layer, Linear, Network, TemplateConv,
};
use tplconv::{ConvGeometry, TemplateConvLayer, Tensor4, TransformFamily};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(dims: [usize; 4], rng: &mut impl Rng) -> Tensor4 {
    let len = dims.iter().product();
    Tensor4::new(
        dims,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Plain log-sum-exp cross-entropy, written out independently.
pub fn lse_loss(logits: &Tensor4, labels: &[usize]) -> f64 {
    let n = logits.batch();
    let mut total = 0.0;
    for b in 0..n {
        let row = logits.item(b);
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[b]];
    }
    total / n as f64
}

pub fn loss_of(net: &Network, x: &Tensor4, labels: &[usize]) -> f64 {
    let (logits, _) = net.forward(x, true).unwrap();
    softmax_cross_entropy(&logits, labels).unwrap().0
}

/// Relative error with a floor on the scale so exact zeros compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter and every input entry.
pub fn network_gradient_error(net: &Network, x: &Tensor4, labels: &[usize], h: f64) -> f64 {
    let (logits, tape) = net.forward(x, true).unwrap();
    let (_, grad_logits) = softmax_cross_entropy(&logits, labels).unwrap();
    let grads = net.backward(&tape, &grad_logits, true).unwrap();
    let mut worst: f64 = 0.0;
    for (i, lg) in grads.layers.iter().enumerate() {
        for (k, analytic) in lg.params.iter().enumerate() {
            for j in 0..analytic.len() {
                let mut plus = net.clone();
                plus.param_groups_mut(i)[k].values[j] += h;
                let mut minus = net.clone();
                minus.param_groups_mut(i)[k].values[j] -= h;
                let numeric = (loss_of(&plus, x, labels) - loss_of(&minus, x, labels)) / (2.0 * h);
                worst = worst.max(rel_err(analytic[j], numeric));
            }
        }
    }
    let dx = grads.input.unwrap();
    for j in 0..x.len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[j] += h;
        let mut minus = x.clone();
        minus.as_mut_slice()[j] -= h;
        let numeric = (loss_of(net, &plus, labels) - loss_of(net, &minus, labels)) / (2.0 * h);
        worst = worst.max(rel_err(dx.as_slice()[j], numeric));
    }
    worst
}

/// Dense conv, template conv, batch norm, linear head; under 500 parameters.
pub fn probe_network(family: TransformFamily, seed: u64) -> Network {
    let mut r = rng(seed);
    let conv = DenseConv::init(2, 4, ConvGeometry::new(3, 1, 1, 1).unwrap(), &mut r).unwrap();
    let dense = random_tensor([4, 4, 3, 3], &mut r);
    let mut tl = TemplateConvLayer::from_dense(
        &dense,
        &ConvGeometry::new(3, 1, 0, 1).unwrap(),
        &[0, 2],
        family,
        1,
        false,
    )
    .unwrap();
    for p in tl.transform_params_mut() {
        *p += r.random_range(-0.2..0.2);
    }
    let mut bn = BatchNorm::new(4);
    bn.gamma = (0..4).map(|_| r.random_range(0.5..1.5)).collect();
    bn.beta = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
    let mut conv_bias = conv;
    conv_bias.bias = (0..4).map(|_| r.random_range(-0.1..0.1)).collect();
    Network::new(vec![
        Layer::Conv(conv_bias),
        Layer::TemplateConv(TemplateConv {
            layer: tl,
            bias: vec![0.1, -0.2, 0.05, 0.0],
        }),
        Layer::BatchNorm(bn),
        Layer::Flatten,
        Layer::Linear(Linear::init(36, 3, &mut r)),
    ])
}

/// `sum(forward(x) * u)`.
pub fn probe_loss(layer: &TemplateConvLayer, x: &Tensor4, u: &Tensor4) -> f64 {
    let y = layer.forward_two_stage(x).unwrap();
    y.as_slice()
        .iter()
        .zip(u.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

/// Worst relative error of template, transform and input gradients of a
/// grouped 4 -> 5 layer with two templates against central differences.
/// The output is linear in templates and input, so those use a wide step
/// that keeps rounding noise low; transforms use a narrow one.
pub fn layer_gradient_error(family: TransformFamily, seed: u64) -> f64 {
    let mut r = rng(seed);
    let dense = random_tensor([5, 4, 3, 3], &mut r);
    let geom = ConvGeometry::new(3, 1, 1, 1).unwrap();
    let mut layer =
        TemplateConvLayer::from_dense(&dense, &geom, &[1, 3], family, 2, false).unwrap();
    for p in layer.transform_params_mut() {
        *p += r.random_range(-0.2..0.2);
    }
    let x = random_tensor([2, 4, 5, 5], &mut r);
    let u = random_tensor([2, 5, 5, 5], &mut r);
    let grads = layer.backward(&x, &u).unwrap();
    let (wide, narrow) = (1e-3, 1e-5);
    let mut worst: f64 = 0.0;
    for j in 0..layer.templates().len() {
        let (mut plus, mut minus) = (layer.clone(), layer.clone());
        plus.templates_mut()[j] += wide;
        minus.templates_mut()[j] -= wide;
        let numeric = (probe_loss(&plus, &x, &u) - probe_loss(&minus, &x, &u)) / (2.0 * wide);
        worst = worst.max(rel_err(grads.templates[j], numeric));
    }
    for j in 0..layer.transform_params().len() {
        let (mut plus, mut minus) = (layer.clone(), layer.clone());
        plus.transform_params_mut()[j] += narrow;
        minus.transform_params_mut()[j] -= narrow;
        let numeric = (probe_loss(&plus, &x, &u) - probe_loss(&minus, &x, &u)) / (2.0 * narrow);
        worst = worst.max(rel_err(grads.transforms[j], numeric));
    }
    for j in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.as_mut_slice()[j] += wide;
        minus.as_mut_slice()[j] -= wide;
        let numeric =
            (probe_loss(&layer, &plus, &u) - probe_loss(&layer, &minus, &u)) / (2.0 * wide);
        worst = worst.max(rel_err(grads.input.as_slice()[j], numeric));
    }
    worst
}
