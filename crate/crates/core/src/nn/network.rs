use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::layer::TemplateConvLayer;
use crate::tensor::{conv2d, conv2d_backward, ConvGeometry, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseConv {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateConv {
    pub layer: TemplateConvLayer,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Fully connected layer, `weight` row-major `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(DenseConv),
    TemplateConv(TemplateConv),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear(Linear),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::TemplateConv(_) => "template_conv",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::TemplateConv(_))
    }

    /// Output dims for a given input, or a shape error.
    pub fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        match self {
            Layer::Conv(conv) => {
                let [out, cg, _, _] = conv.weight.dims();
                check_dim("conv input channels", cg * conv.geom.groups, c)?;
                let (oh, ow) = conv.geom.output_size(h, w)?;
                Ok([n, out, oh, ow])
            }
            Layer::TemplateConv(t) => {
                check_dim("template conv input channels", t.layer.in_channels(), c)?;
                let (oh, ow) = t.layer.output_size(h, w)?;
                Ok([n, t.layer.out_channels(), oh, ow])
            }
            Layer::BatchNorm(bn) => {
                check_dim("batch norm channels", bn.channels(), c)?;
                Ok(input)
            }
            Layer::Relu => Ok(input),
            Layer::MaxPool { kernel, stride } => {
                if h < *kernel || w < *kernel {
                    return Err(Error::Geometry("pooling window larger than input".into()));
                }
                Ok([n, c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            Layer::Flatten => Ok([n, c * h * w, 1, 1]),
            Layer::Linear(l) => {
                check_dim("linear input features", l.in_features, c * h * w)?;
                Ok([n, l.out_features, 1, 1])
            }
        }
    }
}

/// What a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
enum Saved {
    Input(Tensor4),
    BatchNorm {
        normalized: Tensor4,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Relu(Tensor4),
    MaxPool {
        argmax: Vec<usize>,
        input_dims: [usize; 4],
    },
    Flatten([usize; 4]),
}

/// Activations recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    saved: Vec<Saved>,
    train: bool,
}

/// Parameter gradients of one layer, one vector per parameter group (same
/// order as [`Network::param_groups_mut`]), plus the gradient on the layer's
/// dense filters for convolution layers.
#[derive(Debug, Clone, Default)]
pub struct LayerGradient {
    pub params: Vec<Vec<f64>>,
    pub filter: Option<Tensor4>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub input: Option<Tensor4>,
}

/// A mutable view of one parameter buffer.
pub struct ParamGroup<'a> {
    pub values: &'a mut [f64],
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Layer stack ending in a softmax cross-entropy head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

fn kaiming_uniform(len: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

impl DenseConv {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_ch % geom.groups != 0 || out_ch % geom.groups != 0 {
            return Err(Error::Geometry("groups must divide channel counts".into()));
        }
        let cg = in_ch / geom.groups;
        let dims = [out_ch, cg, geom.kernel_h, geom.kernel_w];
        let fan_in = cg * geom.kernel_area();
        let weight = Tensor4::new(dims, kaiming_uniform(dims.iter().product(), fan_in, rng))?;
        Ok(Self {
            weight,
            bias: vec![0.0; out_ch],
            geom,
        })
    }
}

impl Linear {
    pub fn init(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: (0..in_features * out_features)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: vec![0.0; out_features],
            in_features,
            out_features,
        }
    }
}

fn add_channel_bias(y: &mut Tensor4, bias: &[f64]) {
    let [n, c, h, w] = y.dims();
    let plane = h * w;
    for b in 0..n {
        let item = y.item_mut(b);
        for ch in 0..c {
            item[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bias[ch]);
        }
    }
}

fn channel_sums(t: &Tensor4) -> Vec<f64> {
    let [n, c, h, w] = t.dims();
    let plane = h * w;
    let mut sums = vec![0.0; c];
    for b in 0..n {
        let item = t.item(b);
        for ch in 0..c {
            sums[ch] += item[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
    }
    sums
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// `widths.len()` blocks of 3x3 conv, batch norm, ReLU and 2x2 max-pool,
    /// then a linear classifier.
    pub fn small_cnn(
        in_channels: usize,
        widths: &[usize],
        classes: usize,
        image_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut ch = in_channels;
        let mut size = image_size;
        for &width in widths {
            let geom = ConvGeometry::new(3, 1, 1, 1)?;
            layers.push(Layer::Conv(DenseConv::init(ch, width, geom, rng)?));
            layers.push(Layer::BatchNorm(BatchNorm::new(width)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool {
                kernel: 2,
                stride: 2,
            });
            ch = width;
            size /= 2;
        }
        if size == 0 {
            return Err(Error::Geometry(
                "too many pooling stages for the image size".into(),
            ));
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear(Linear::init(ch * size * size, classes, rng)));
        Ok(Self { layers })
    }

    /// Dims after every layer; fails on the first incompatible layer.
    pub fn shape_trace(&self, input: [usize; 4]) -> Result<Vec<[usize; 4]>> {
        let mut dims = input;
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            dims = layer.output_dims(dims)?;
            trace.push(dims);
        }
        Ok(trace)
    }

    /// Indices of convolution layers (dense or template).
    pub fn conv_layer_ids(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weight.len() + c.bias.len(),
                Layer::TemplateConv(t) => t.layer.param_count() + t.bias.len(),
                Layer::BatchNorm(b) => 2 * b.channels(),
                Layer::Linear(l) => l.weight.len() + l.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Forward pass. In training mode batch norm uses batch statistics (the
    /// running statistics are left alone; see
    /// [`update_running_stats`](Self::update_running_stats)).
    pub fn forward(&self, x: &Tensor4, train: bool) -> Result<(Tensor4, Tape)> {
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for layer in &self.layers {
            let (next, keep) = forward_layer(layer, act, train)?;
            saved.push(keep);
            act = next;
        }
        Ok((act, Tape { saved, train }))
    }

    /// Folds the batch statistics recorded on `tape` into the running
    /// statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        if !tape.train {
            return;
        }
        for (layer, saved) in self.layers.iter_mut().zip(&tape.saved) {
            if let (
                Layer::BatchNorm(bn),
                Saved::BatchNorm {
                    normalized,
                    mean,
                    var,
                    ..
                },
            ) = (layer, saved)
            {
                let [n, _, h, w] = normalized.dims();
                let batch_elems = n * h * w;
                let unbias = if batch_elems > 1 {
                    batch_elems as f64 / (batch_elems - 1) as f64
                } else {
                    1.0
                };
                for c in 0..bn.channels() {
                    bn.running_mean[c] =
                        (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c];
                    bn.running_var[c] =
                        (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * var[c] * unbias;
                }
            }
        }
    }

    /// Backward pass from the gradient on the logits. The input gradient is
    /// only produced when `need_input` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_logits: &Tensor4,
        need_input: bool,
    ) -> Result<Gradients> {
        let mut grads = vec![LayerGradient::default(); self.layers.len()];
        let mut upstream = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let want_input = need_input || i > 0;
            let (down, lg) =
                backward_layer(&self.layers[i], &tape.saved[i], &upstream, want_input)?;
            grads[i] = lg;
            upstream = down;
        }
        Ok(Gradients {
            layers: grads,
            input: need_input.then_some(upstream),
        })
    }

    /// Parameter buffers of layer `i`, in gradient order.
    pub fn param_groups_mut(&mut self, i: usize) -> Vec<ParamGroup<'_>> {
        match &mut self.layers[i] {
            Layer::Conv(c) => vec![
                ParamGroup {
                    values: c.weight.as_mut_slice(),
                    decay: true,
                },
                ParamGroup {
                    values: &mut c.bias,
                    decay: false,
                },
            ],
            Layer::TemplateConv(t) => {
                let (templates, transforms) = t.layer.params_mut();
                vec![
                    ParamGroup {
                        values: templates,
                        decay: true,
                    },
                    ParamGroup {
                        values: transforms,
                        decay: false,
                    },
                    ParamGroup {
                        values: &mut t.bias,
                        decay: false,
                    },
                ]
            }
            Layer::BatchNorm(b) => vec![
                ParamGroup {
                    values: &mut b.gamma,
                    decay: false,
                },
                ParamGroup {
                    values: &mut b.beta,
                    decay: false,
                },
            ],
            Layer::Linear(l) => vec![
                ParamGroup {
                    values: &mut l.weight,
                    decay: true,
                },
                ParamGroup {
                    values: &mut l.bias,
                    decay: false,
                },
            ],
            _ => Vec::new(),
        }
    }

    /// Dense `(N, C, K, K)` filters of a convolution layer (rebuilt for
    /// template layers).
    pub fn filters(&self, i: usize) -> Option<Tensor4> {
        match &self.layers[i] {
            Layer::Conv(c) => Some(c.weight.clone()),
            Layer::TemplateConv(t) => Some(t.layer.reconstruct_filters()),
            _ => None,
        }
    }
}

fn forward_layer(layer: &Layer, x: Tensor4, train: bool) -> Result<(Tensor4, Saved)> {
    match layer {
        Layer::Conv(c) => {
            let mut y = conv2d(&x, &c.weight, &c.geom)?;
            add_channel_bias(&mut y, &c.bias);
            Ok((y, Saved::Input(x)))
        }
        Layer::TemplateConv(t) => {
            let mut y = t.layer.forward_two_stage(&x)?;
            add_channel_bias(&mut y, &t.bias);
            Ok((y, Saved::Input(x)))
        }
        Layer::BatchNorm(bn) => {
            let [n, c, h, w] = x.dims();
            check_dim("batch norm channels", bn.channels(), c)?;
            let plane = h * w;
            let count = (n * plane) as f64;
            let (mean, var) = if train {
                let mean: Vec<f64> = channel_sums(&x).iter().map(|s| s / count).collect();
                let mut var = vec![0.0; c];
                for b in 0..n {
                    let item = x.item(b);
                    for ch in 0..c {
                        var[ch] += item[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            } else {
                (bn.running_mean.clone(), bn.running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let mut normalized = x;
            for b in 0..n {
                let item = normalized.item_mut(b);
                for ch in 0..c {
                    item[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
                }
            }
            let mut y = normalized.clone();
            for b in 0..n {
                let item = y.item_mut(b);
                for ch in 0..c {
                    item[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v = bn.gamma[ch] * *v + bn.beta[ch]);
                }
            }
            let saved = if train {
                Saved::BatchNorm {
                    normalized,
                    inv_std,
                    mean,
                    var,
                }
            } else {
                Saved::BatchNorm {
                    normalized,
                    inv_std,
                    mean: Vec::new(),
                    var: Vec::new(),
                }
            };
            Ok((y, saved))
        }
        Layer::Relu => {
            let y = x.map(|v| v.max(0.0));
            Ok((y, Saved::Relu(x)))
        }
        Layer::MaxPool { kernel, stride } => {
            let out_dims = layer.output_dims(x.dims())?;
            let [n, c, oh, ow] = out_dims;
            let (h, w) = (x.height(), x.width());
            let mut y = Tensor4::zeros(out_dims);
            let mut argmax = vec![0; y.len()];
            let mut idx = 0;
            for b in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let off = x.offset(b, ch, oy * stride + ky, ox * stride + kx);
                                    let v = x.as_slice()[off];
                                    if v > best {
                                        best = v;
                                        at = off;
                                    }
                                }
                            }
                            debug_assert!(oy * stride + kernel <= h && ox * stride + kernel <= w);
                            y.as_mut_slice()[idx] = best;
                            argmax[idx] = at;
                            idx += 1;
                        }
                    }
                }
            }
            Ok((
                y,
                Saved::MaxPool {
                    argmax,
                    input_dims: x.dims(),
                },
            ))
        }
        Layer::Flatten => {
            let dims = x.dims();
            let y = x.reshape([dims[0], dims[1] * dims[2] * dims[3], 1, 1])?;
            Ok((y, Saved::Flatten(dims)))
        }
        Layer::Linear(l) => {
            let [n, c, h, w] = x.dims();
            check_dim("linear input features", l.in_features, c * h * w)?;
            let mut out = vec![0.0; n * l.out_features];
            for b in 0..n {
                out[b * l.out_features..(b + 1) * l.out_features].copy_from_slice(&l.bias);
            }
            gemm(
                MatRef::row_major(x.as_slice(), n, l.in_features),
                MatRef::row_major(&l.weight, l.out_features, l.in_features).t(),
                &mut out,
                1.0,
            );
            Ok((
                Tensor4::new([n, l.out_features, 1, 1], out)?,
                Saved::Input(x),
            ))
        }
    }
}

fn backward_layer(
    layer: &Layer,
    saved: &Saved,
    dy: &Tensor4,
    need_input: bool,
) -> Result<(Tensor4, LayerGradient)> {
    match (layer, saved) {
        (Layer::Conv(c), Saved::Input(x)) => {
            let (dx, dw) = conv2d_backward(x, &c.weight, &c.geom, dy, need_input)?;
            let db = channel_sums(dy);
            Ok((
                dx.unwrap_or_else(|| Tensor4::zeros(x.dims())),
                LayerGradient {
                    params: vec![dw.as_slice().to_vec(), db],
                    filter: Some(dw),
                },
            ))
        }
        (Layer::TemplateConv(t), Saved::Input(x)) => {
            let g = t.layer.backward_inner(x, dy, need_input)?;
            let db = channel_sums(dy);
            Ok((
                g.input,
                LayerGradient {
                    params: vec![g.templates, g.transforms, db],
                    filter: Some(g.weight),
                },
            ))
        }
        (
            Layer::BatchNorm(bn),
            Saved::BatchNorm {
                normalized,
                inv_std,
                mean,
                ..
            },
        ) => {
            let [n, c, h, w] = dy.dims();
            let plane = h * w;
            let count = (n * plane) as f64;
            let mut dgamma = vec![0.0; c];
            let dbeta = channel_sums(dy);
            for b in 0..n {
                let (g_item, x_item) = (dy.item(b), normalized.item(b));
                for ch in 0..c {
                    dgamma[ch] += g_item[ch * plane..(ch + 1) * plane]
                        .iter()
                        .zip(&x_item[ch * plane..(ch + 1) * plane])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
            let train = !mean.is_empty();
            let mut dx = Tensor4::zeros(dy.dims());
            for b in 0..n {
                let (g_item, x_item) = (dy.item(b), normalized.item(b));
                let dst = dx.item_mut(b);
                for ch in 0..c {
                    let scale = bn.gamma[ch] * inv_std[ch];
                    for i in ch * plane..(ch + 1) * plane {
                        dst[i] = if train {
                            scale * (g_item[i] - dbeta[ch] / count - x_item[i] * dgamma[ch] / count)
                        } else {
                            scale * g_item[i]
                        };
                    }
                }
            }
            Ok((
                dx,
                LayerGradient {
                    params: vec![dgamma, dbeta],
                    filter: None,
                },
            ))
        }
        (Layer::Relu, Saved::Relu(x)) => {
            let mut dx = dy.clone();
            dx.as_mut_slice()
                .iter_mut()
                .zip(x.as_slice())
                .for_each(|(g, v)| {
                    if *v <= 0.0 {
                        *g = 0.0
                    }
                });
            Ok((dx, LayerGradient::default()))
        }
        (Layer::MaxPool { .. }, Saved::MaxPool { argmax, input_dims }) => {
            let mut dx = Tensor4::zeros(*input_dims);
            for (g, &at) in dy.as_slice().iter().zip(argmax) {
                dx.as_mut_slice()[at] += g;
            }
            Ok((dx, LayerGradient::default()))
        }
        (Layer::Flatten, Saved::Flatten(dims)) => {
            Ok((dy.clone().reshape(*dims)?, LayerGradient::default()))
        }
        (Layer::Linear(l), Saved::Input(x)) => {
            let n = x.batch();
            let mut dw = vec![0.0; l.weight.len()];
            gemm(
                MatRef::row_major(dy.as_slice(), n, l.out_features).t(),
                MatRef::row_major(x.as_slice(), n, l.in_features),
                &mut dw,
                0.0,
            );
            let db = channel_sums(dy);
            let mut dx = vec![0.0; x.len()];
            if need_input {
                gemm(
                    MatRef::row_major(dy.as_slice(), n, l.out_features),
                    MatRef::row_major(&l.weight, l.out_features, l.in_features),
                    &mut dx,
                    0.0,
                );
            }
            Ok((
                Tensor4::new(x.dims(), dx)?,
                LayerGradient {
                    params: vec![dw, db],
                    filter: None,
                },
            ))
        }
        _ => Err(Error::InvalidArgument("tape does not match network".into())),
    }
}

/// Mean softmax cross-entropy of `(n, classes, 1, 1)` logits and the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let [n, classes, h, w] = logits.dims();
    check_dim("logit spatial size", 1, h * w)?;
    check_dim("labels", n, labels.len())?;
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = 0.0;
    for b in 0..n {
        let row = logits.item(b);
        let label = labels[b];
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} >= {classes} classes"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.item_mut(b);
        for k in 0..classes {
            g[k] = ((row[k] - log_z).exp() - if k == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Predicted class per batch item.
pub fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    (0..logits.batch())
        .map(|b| {
            let row = logits.item(b);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Loss and logits for a batch.
pub fn forward_loss(
    net: &Network,
    batch: &Tensor4,
    labels: &[usize],
    train: bool,
) -> Result<(f64, Tensor4)> {
    let (logits, _) = net.forward(batch, train)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels)?;
    Ok((loss, logits))
}
