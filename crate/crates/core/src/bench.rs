//! Wall-clock comparison of the dense convolution and the two-stage template
//! path across pruning rates.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{StageTimes, TemplateConvLayer};
use crate::pruning::templates_for_rate;
use crate::tensor::{conv2d, ConvGeometry, Tensor4};
use crate::transforms::TransformFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub size: usize,
    pub batch: usize,
    pub rates: Vec<f64>,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            out_channels: 64,
            kernel: 3,
            size: 32,
            batch: 1,
            rates: vec![0.25, 0.5, 0.7, 0.9],
            warmup: 2,
            repetitions: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Impl {
    Dense,
    TwoStage,
}

impl Impl {
    pub fn name(self) -> &'static str {
        match self {
            Impl::Dense => "dense",
            Impl::TwoStage => "two_stage",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub rate: f64,
    pub templates: usize,
    pub imp: Impl,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
    /// Median per-stage times; zero for the dense path.
    pub stage_gather_us: f64,
    pub stage_template_us: f64,
    pub stage_transform_us: f64,
}

impl BenchRow {
    /// Median time outside the three named stages.
    pub fn stage_other_us(&self) -> f64 {
        if self.imp == Impl::Dense {
            return 0.0;
        }
        (self.median_us - self.stage_gather_us - self.stage_template_us - self.stage_transform_us)
            .max(0.0)
    }
}

/// Linear-interpolated percentile of sorted samples, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64, f64) {
    samples.sort_by(f64::total_cmp);
    (
        percentile(&samples, 0.5),
        percentile(&samples, 0.1),
        percentile(&samples, 0.9),
    )
}

fn median_of(samples: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = samples.collect();
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.repetitions < 5 {
        return Err(Error::InvalidArgument(
            "at least 5 repetitions are required".into(),
        ));
    }
    if config.rates.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::InvalidArgument("rates must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, n, k) = (config.in_channels, config.out_channels, config.kernel);
    let weight = Tensor4::from_fn([n, c, k, k], |_| rng.random_range(-1.0..1.0));
    let x = Tensor4::from_fn([config.batch, c, config.size, config.size], |_| {
        rng.random_range(-1.0..1.0)
    });
    let geom = ConvGeometry::new(k, 1, k / 2, 1)?;

    let mut rows = Vec::new();
    for &rate in &config.rates {
        let m = templates_for_rate(n, rate, 1);
        for _ in 0..config.warmup {
            std::hint::black_box(conv2d(&x, &weight, &geom)?);
        }
        let mut dense = Vec::with_capacity(config.repetitions);
        for _ in 0..config.repetitions {
            let start = Instant::now();
            std::hint::black_box(conv2d(&x, &weight, &geom)?);
            dense.push(micros(start.elapsed()));
        }
        let (median_us, p10_us, p90_us) = summarize(dense);
        rows.push(BenchRow {
            rate,
            templates: m,
            imp: Impl::Dense,
            median_us,
            p10_us,
            p90_us,
            stage_gather_us: 0.0,
            stage_template_us: 0.0,
            stage_transform_us: 0.0,
        });

        let kept: Vec<usize> = (0..m).collect();
        let layer = TemplateConvLayer::from_dense(
            &weight,
            &geom,
            &kept,
            TransformFamily::Scalar,
            1,
            false,
        )?;
        for _ in 0..config.warmup {
            std::hint::black_box(layer.forward_two_stage_timed(&x)?);
        }
        let mut times: Vec<StageTimes> = Vec::with_capacity(config.repetitions);
        for _ in 0..config.repetitions {
            let (out, t) = layer.forward_two_stage_timed(&x)?;
            std::hint::black_box(out);
            times.push(t);
        }
        let (median_us, p10_us, p90_us) =
            summarize(times.iter().map(|t| micros(t.total)).collect());
        rows.push(BenchRow {
            rate,
            templates: m,
            imp: Impl::TwoStage,
            median_us,
            p10_us,
            p90_us,
            stage_gather_us: median_of(times.iter().map(|t| micros(t.gather))),
            stage_template_us: median_of(times.iter().map(|t| micros(t.template))),
            stage_transform_us: median_of(times.iter().map(|t| micros(t.transform))),
        });
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str =
    "rate,impl,templates,median_us,p10,p90,stage_gather,stage_template,stage_transform,stage_other";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            r.rate,
            r.imp.name(),
            r.templates,
            r.median_us,
            r.p10_us,
            r.p90_us,
            r.stage_gather_us,
            r.stage_template_us,
            r.stage_transform_us,
            r.stage_other_us()
        );
    }
    out
}

/// Number of consecutive increases in a sequence.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Two-stage medians in rate order.
pub fn two_stage_medians(rows: &[BenchRow]) -> Vec<f64> {
    let mut ts: Vec<&BenchRow> = rows.iter().filter(|r| r.imp == Impl::TwoStage).collect();
    ts.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    ts.iter().map(|r| r.median_us).collect()
}
