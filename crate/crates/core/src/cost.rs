//! Closed-form multiply-accumulate and parameter accounting for dense and
//! template convolutions, and per-network compression reports.
//!
//! "FLOPs" in reports means multiply-accumulates. Reduction ratios cover
//! convolution layers only; biases, batch norm and linear layers are
//! reported separately.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layer::TemplateConvConfig;
use crate::nn::{Layer, Network};
use crate::transforms::TransformFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCost {
    pub macs: u64,
    pub params: u64,
    pub template_macs: u64,
    pub transform_macs: u64,
}

impl LayerCost {
    fn from_stages(template_macs: u64, transform_macs: u64, params: u64) -> Self {
        Self {
            macs: template_macs + transform_macs,
            params,
            template_macs,
            transform_macs,
        }
    }
}

pub fn dense_layer_cost(c: usize, n: usize, k: usize, h_out: usize, w_out: usize) -> LayerCost {
    let macs = (h_out * w_out * k * k * c * n) as u64;
    LayerCost::from_stages(macs, 0, (k * k * c * n) as u64)
}

/// Cost of a template layer with shared group templates.
pub fn template_layer_cost(
    c: usize,
    n: usize,
    m: usize,
    g: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    family: TransformFamily,
) -> Result<LayerCost> {
    let config = TemplateConvConfig {
        in_channels: c,
        out_channels: n,
        kernel: k,
        stride: 1,
        padding: 0,
        groups: g,
        family,
        independent_group_templates: false,
    };
    template_config_cost(&config, m, h_out, w_out)
}

pub fn template_config_cost(
    config: &TemplateConvConfig,
    m: usize,
    h_out: usize,
    w_out: usize,
) -> Result<LayerCost> {
    let (c, n, g, k) = (
        config.in_channels,
        config.out_channels,
        config.groups,
        config.kernel,
    );
    if g == 0 || c % g != 0 {
        return Err(Error::Geometry(format!(
            "groups {g} must divide input channels {c}"
        )));
    }
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "template count {m} outside 1..={n}"
        )));
    }
    let positions = (h_out * w_out * k * k) as u64;
    let template_macs = positions * (c / g * m * g) as u64;
    let transform_macs = positions * (g * (n - m) * config.family.macs_per_position()) as u64;
    let params = config.template_count(m) * config.template_len()
        + (n - m) * g * config.params_per_transform();
    Ok(LayerCost::from_stages(
        template_macs,
        transform_macs,
        params as u64,
    ))
}

/// `M/N + G/C - GM/(CN)`.
pub fn flops_reduction(c: usize, n: usize, m: usize, g: usize) -> f64 {
    let (c, n, m, g) = (c as f64, n as f64, m as f64, g as f64);
    m / n + g / c - g * m / (c * n)
}

/// `M/(GN) + G/C - GM/(CN)`; equal to [`flops_reduction`] only when `G = 1`.
pub fn params_reduction(c: usize, n: usize, m: usize, g: usize) -> f64 {
    let (c, n, m, g) = (c as f64, n as f64, m as f64, g as f64);
    m / (g * n) + g / c - g * m / (c * n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub kind: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub templates: usize,
    pub groups: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub family: Option<TransformFamily>,
    pub baseline: LayerCost,
    pub compressed: LayerCost,
}

impl LayerRow {
    pub fn flops_ratio(&self) -> f64 {
        self.compressed.macs as f64 / self.baseline.macs as f64
    }

    pub fn params_ratio(&self) -> f64 {
        self.compressed.params as f64 / self.baseline.params as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostReport {
    pub rows: Vec<LayerRow>,
    pub baseline: LayerCost,
    pub compressed: LayerCost,
    /// Linear-layer MACs.
    pub other_macs: u64,
    /// Bias, batch-norm and linear parameters.
    pub other_params: u64,
}

impl CostReport {
    pub fn flops_reduction(&self) -> f64 {
        if self.baseline.macs == 0 {
            return 1.0;
        }
        self.compressed.macs as f64 / self.baseline.macs as f64
    }

    pub fn params_reduction(&self) -> f64 {
        if self.baseline.params == 0 {
            return 1.0;
        }
        self.compressed.params as f64 / self.baseline.params as f64
    }

    pub fn total_macs(&self) -> u64 {
        self.compressed.macs + self.other_macs
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,kind,in_channels,out_channels,templates,groups,kernel,out_h,out_w,family,\
             baseline_macs,macs,template_macs,transform_macs,baseline_params,params,flops_ratio,params_ratio\n",
        );
        for r in &self.rows {
            let family = r.family.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.layer,
                r.kind,
                r.in_channels,
                r.out_channels,
                r.templates,
                r.groups,
                r.kernel,
                r.out_h,
                r.out_w,
                family,
                r.baseline.macs,
                r.compressed.macs,
                r.compressed.template_macs,
                r.compressed.transform_macs,
                r.baseline.params,
                r.compressed.params,
                r.flops_ratio(),
                r.params_ratio()
            );
        }
        let _ = writeln!(
            out,
            "total,,,,,,,,,,{},{},{},{},{},{},{},{}",
            self.baseline.macs,
            self.compressed.macs,
            self.compressed.template_macs,
            self.compressed.transform_macs,
            self.baseline.params,
            self.compressed.params,
            self.flops_reduction(),
            self.params_reduction()
        );
        out
    }

    pub fn to_table(&self) -> String {
        let header = [
            "layer",
            "kind",
            "C",
            "N",
            "M",
            "G",
            "K",
            "out",
            "family",
            "MACs base",
            "MACs",
            "params base",
            "params",
            "flops ratio",
            "params ratio",
        ];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            rows.push(vec![
                r.layer.to_string(),
                r.kind.to_string(),
                r.in_channels.to_string(),
                r.out_channels.to_string(),
                r.templates.to_string(),
                r.groups.to_string(),
                r.kernel.to_string(),
                format!("{}x{}", r.out_h, r.out_w),
                r.family
                    .map(|f| f.to_string())
                    .unwrap_or_else(|| "-".into()),
                r.baseline.macs.to_string(),
                r.compressed.macs.to_string(),
                r.baseline.params.to_string(),
                r.compressed.params.to_string(),
                format!("{:.6}", r.flops_ratio()),
                format!("{:.6}", r.params_ratio()),
            ]);
        }
        let mut total = vec![String::from("total")];
        total.extend(std::iter::repeat_n(String::new(), 8));
        total.extend([
            self.baseline.macs.to_string(),
            self.compressed.macs.to_string(),
            self.baseline.params.to_string(),
            self.compressed.params.to_string(),
            format!("{:.6}", self.flops_reduction()),
            format!("{:.6}", self.params_reduction()),
        ]);
        rows.push(total);
        let widths: Vec<usize> = (0..header.len())
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(
            out,
            "other (not in ratios): {} MACs, {} params",
            self.other_macs, self.other_params
        );
        if self.rows.iter().any(|r| r.groups > 1) {
            let _ = writeln!(
                out,
                "note: grouped layers have a params ratio below the flops ratio; the two agree only at G = 1"
            );
        }
        out
    }
}

/// Per-layer costs for one `(c, h, w)` input, counting template layers with
/// their instrumented MAC counters.
pub fn network_report(net: &Network, input: [usize; 3]) -> Result<CostReport> {
    let [c, h, w] = input;
    let mut dims = [1, c, h, w];
    let mut report = CostReport::default();
    for (id, layer) in net.layers.iter().enumerate() {
        let out = layer.output_dims(dims)?;
        let [_, in_c, in_h, in_w] = dims;
        let [_, out_c, out_h, out_w] = out;
        match layer {
            Layer::Conv(conv) => {
                let k = conv.geom.kernel_h;
                let mut cost = dense_layer_cost(in_c, out_c, k, out_h, out_w);
                if conv.geom.groups > 1 || conv.geom.kernel_w != k {
                    let macs = (out_h * out_w * conv.weight.len()) as u64;
                    cost = LayerCost::from_stages(macs, 0, conv.weight.len() as u64);
                }
                report.rows.push(LayerRow {
                    layer: id,
                    kind: layer.name(),
                    in_channels: in_c,
                    out_channels: out_c,
                    templates: out_c,
                    groups: conv.geom.groups,
                    kernel: k,
                    out_h,
                    out_w,
                    family: None,
                    baseline: cost,
                    compressed: cost,
                });
                report.other_params += conv.bias.len() as u64;
            }
            Layer::TemplateConv(t) => {
                let cfg = t.layer.config();
                let counted = t.layer.count_macs(in_h, in_w)?;
                let compressed = LayerCost::from_stages(
                    counted.template_stage,
                    counted.transform_stage,
                    t.layer.param_count() as u64,
                );
                report.rows.push(LayerRow {
                    layer: id,
                    kind: layer.name(),
                    in_channels: in_c,
                    out_channels: out_c,
                    templates: t.layer.num_templates(),
                    groups: cfg.groups,
                    kernel: cfg.kernel,
                    out_h,
                    out_w,
                    family: Some(cfg.family),
                    baseline: dense_layer_cost(in_c, out_c, cfg.kernel, out_h, out_w),
                    compressed,
                });
                report.other_params += t.bias.len() as u64;
            }
            Layer::BatchNorm(bn) => report.other_params += 2 * bn.channels() as u64,
            Layer::Linear(l) => {
                report.other_macs += (l.in_features * l.out_features) as u64;
                report.other_params += (l.weight.len() + l.bias.len()) as u64;
            }
            _ => {}
        }
        dims = out;
    }
    for row in &report.rows {
        for (total, cost) in [
            (&mut report.baseline, row.baseline),
            (&mut report.compressed, row.compressed),
        ] {
            total.macs += cost.macs;
            total.params += cost.params;
            total.template_macs += cost.template_macs;
            total.transform_macs += cost.transform_macs;
        }
    }
    Ok(report)
}
