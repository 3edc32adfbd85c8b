use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::network_report;
use crate::error::{Error, Result};
use crate::pruning::{
    apply_plan, build_plan, ConvertOptions, FilterGrads, PruneSchedule, SaliencyMeasure,
};

use super::augment::{augment, AugmentFlags};
use super::data::Dataset;
use super::network::{argmax_rows, softmax_cross_entropy, Network};
use super::optim::{step_lr, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
    pub schedule: PruneSchedule,
    pub measure: SaliencyMeasure,
    pub convert: ConvertOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            seed: 0,
            augment: AugmentFlags::default(),
            schedule: PruneSchedule::default(),
            measure: SaliencyMeasure::Magnitude,
            convert: ConvertOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.lr_decay_factor > 0.0)
        {
            return Err(Error::InvalidArgument(
                "optimizer settings must be non-negative".into(),
            ));
        }
        if self.convert.groups == 0 {
            return Err(Error::InvalidArgument("groups must be positive".into()));
        }
        self.schedule.validate()
    }

    fn prunes(&self) -> bool {
        self.schedule.target_rate > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub total_params: usize,
    pub total_macs: u64,
    /// Template count of every convolution layer during this epoch.
    pub templates: Vec<usize>,
    /// Kept filter indices of every convolution layer during this epoch.
    pub kept: Vec<Vec<usize>>,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,val_acc,total_params,total_macs,templates";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let templates: Vec<String> = m.templates.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            m.total_params,
            m.total_macs,
            templates.join(";")
        );
    }
    out
}

/// Eval-mode accuracy in batches of `batch_size`.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(data.len());
        let (logits, _) = net.forward(&data.images.batch_range(start, end), false)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs `config.epochs` epochs. When the schedule has a positive target,
/// each epoch starts by building and applying the plan for that epoch; the
/// first-order measure scores with filter gradients summed over the
/// previous epoch.
pub fn train(
    mut net: Network,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Network, Vec<EpochMetrics>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let [_, c, h, w] = data.images.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut filter_grads = FilterGrads::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        if config.prunes() {
            let grads = (!filter_grads.is_empty()).then_some(&filter_grads);
            let plan = build_plan(&net, config.measure, epoch, &config.schedule, grads)?;
            for id in apply_plan(&mut net, &plan, &config.convert)? {
                sgd.reset_layer(id);
            }
        }
        let collect = config.prunes() && config.measure.needs_grads();
        filter_grads.clear();

        let lr = step_lr(
            config.lr,
            config.lr_decay_factor,
            &config.lr_decay_epochs,
            epoch,
        );
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch = augment(&data.images.select_batch(chunk), config.augment, &mut rng);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (logits, tape) = net.forward(&batch, true)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            let grads = net.backward(&tape, &grad_logits, false)?;
            if collect {
                for (id, lg) in grads.layers.iter().enumerate() {
                    if let Some(f) = &lg.filter {
                        match filter_grads.get_mut(&id) {
                            Some(acc) => *acc = acc.axpy(1.0, f)?,
                            None => {
                                filter_grads.insert(id, f.clone());
                            }
                        }
                    }
                }
            }
            net.update_running_stats(&tape);
            sgd.step(&mut net, &grads, lr)?;
        }

        let report = network_report(&net, [c, h, w])?;
        let conv_ids = net.conv_layer_ids();
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc: val
                .map(|v| evaluate(&net, v, config.batch_size))
                .transpose()?,
            total_params: net.param_count(),
            total_macs: report.total_macs(),
            templates: report.rows.iter().map(|r| r.templates).collect(),
            kept: conv_ids
                .iter()
                .map(|&id| crate::pruning::current_kept(&net.layers[id]).expect("conv layer"))
                .collect(),
        });
    }
    Ok((net, history))
}
