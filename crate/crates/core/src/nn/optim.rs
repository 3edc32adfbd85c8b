use std::collections::HashMap;

use crate::error::{check_dim, Result};

use super::network::{Gradients, Network};

/// One SGD-with-momentum update in place:
/// `v = momentum * v + g + decay * w`, `w -= lr * v`.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    decay: f64,
) {
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + decay * *w;
        *w -= lr * *v;
    }
}

/// Step decay: `base * factor^(boundaries passed)`.
pub fn step_lr(base: f64, factor: f64, boundaries: &[usize], epoch: usize) -> f64 {
    let passed = boundaries.iter().filter(|&&b| epoch >= b).count();
    base * factor.powi(passed as i32)
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<(usize, usize), Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Drops the momentum buffers of a layer whose parameters changed shape
    /// or meaning.
    pub fn reset_layer(&mut self, layer: usize) {
        self.velocity.retain(|(l, _), _| *l != layer);
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        for (i, lg) in grads.layers.iter().enumerate() {
            let groups = net.param_groups_mut(i);
            check_dim("parameter groups", groups.len(), lg.params.len())?;
            for (k, (group, g)) in groups.into_iter().zip(&lg.params).enumerate() {
                check_dim("parameter length", group.values.len(), g.len())?;
                let v = self
                    .velocity
                    .entry((i, k))
                    .or_insert_with(|| vec![0.0; g.len()]);
                if v.len() != g.len() {
                    *v = vec![0.0; g.len()];
                }
                let decay = if group.decay { self.weight_decay } else { 0.0 };
                sgd_update(group.values, g, v, lr, self.momentum, decay);
            }
        }
        Ok(())
    }
}
