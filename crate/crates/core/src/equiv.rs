//! Randomized agreement check between the rebuild-then-convolve reference
//! and the two-stage forward pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layer::{TemplateConvConfig, TemplateConvLayer};
use crate::tensor::Tensor4;
use crate::transforms::TransformFamily;

pub const RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EquivCase {
    pub index: usize,
    /// Seed that regenerates exactly this case.
    pub seed: u64,
    pub config: TemplateConvConfig,
    pub templates: usize,
    pub input: [usize; 4],
    pub max_deviation: f64,
    pub max_reference: f64,
}

impl EquivCase {
    pub fn relative_deviation(&self) -> f64 {
        self.max_deviation / (1.0 + self.max_reference)
    }

    pub fn passed(&self) -> bool {
        self.relative_deviation() <= RELATIVE_TOLERANCE
    }

    pub fn describe(&self) -> String {
        let c = &self.config;
        format!(
            "case {} seed {}: C={} N={} M={} K={} G={} s={} p={} independent={} input={:?} rel_dev={:.3e}",
            self.index,
            self.seed,
            c.in_channels,
            c.out_channels,
            self.templates,
            c.kernel,
            c.groups,
            c.stride,
            c.padding,
            c.independent_group_templates,
            self.input,
            self.relative_deviation()
        )
    }
}

/// Seed for case `index` of a sweep started at `seed`; a one-case sweep
/// at this seed reruns the case.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// A random scalar-family layer and input. With `force_transform`, at least
/// one output is a transformed copy.
pub fn random_case(seed: u64, force_transform: bool) -> Result<(TemplateConvLayer, Tensor4)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    let groups = [1, 2, 4][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=2);
    let in_channels = groups * rng.random_range(1..=32 / groups);
    let min_out = if force_transform { 2 } else { 1 };
    let out_channels = rng.random_range(min_out..=64);
    let max_m = if force_transform {
        out_channels - 1
    } else {
        out_channels
    };
    let m = rng.random_range(1..=max_m);
    let mut kept = sample(&mut rng, out_channels, m).into_vec();
    kept.sort_unstable();
    let config = TemplateConvConfig {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
        groups,
        family: TransformFamily::Scalar,
        independent_group_templates: rng.random_bool(0.5),
    };
    let min_size = kernel.saturating_sub(2 * padding).max(1);
    let h = rng.random_range(min_size..=min_size + 8);
    let w = rng.random_range(min_size..=min_size + 8);
    let batch = rng.random_range(1..=2);
    let templates = (0..config.template_count(m) * config.template_len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let transforms = (0..(out_channels - m) * groups * config.params_per_transform())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let layer = TemplateConvLayer::from_parts(config, &kept, templates, transforms)?;
    let x = Tensor4::from_fn([batch, in_channels, h, w], |_| rng.random_range(-1.0..1.0));
    Ok((layer, x))
}

/// Runs `count` cases. With `inject_fault`, the first transform's weights
/// are perturbed after the reference output is computed, so every case should
/// fail.
pub fn run_sweep(count: usize, seed: u64, inject_fault: bool) -> Result<Vec<EquivCase>> {
    (0..count)
        .map(|index| {
            let case = case_seed(seed, index);
            let (layer, x) = random_case(case, inject_fault)?;
            let reference = layer.forward_reference(&x)?;
            let mut fast_layer = layer.clone();
            if inject_fault {
                let per = layer.config().groups * layer.config().params_per_transform();
                fast_layer.transform_params_mut()[..per]
                    .iter_mut()
                    .for_each(|w| *w += 0.5);
            }
            let fast = fast_layer.forward_two_stage(&x)?;
            Ok(EquivCase {
                index,
                seed: case,
                config: *layer.config(),
                templates: layer.num_templates(),
                input: x.dims(),
                max_deviation: fast.max_abs_diff(&reference),
                max_reference: reference.max_abs(),
            })
        })
        .collect()
}
