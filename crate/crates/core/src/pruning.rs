//! Filter saliency, the linear pruning schedule, template selection and
//! whole-network conversion to template layers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::layer::TemplateConvLayer;
use crate::nn::{Layer, Network, TemplateConv};
use crate::tensor::Tensor4;
use crate::transforms::TransformFamily;

/// Dense filter gradients keyed by layer index.
pub type FilterGrads = BTreeMap<usize, Tensor4>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMeasure {
    #[serde(alias = "mag")]
    Magnitude,
    #[serde(alias = "taylor")]
    TaylorFo,
}

impl SaliencyMeasure {
    pub fn needs_grads(self) -> bool {
        self == SaliencyMeasure::TaylorFo
    }
}

impl fmt::Display for SaliencyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaliencyMeasure::Magnitude => "mag",
            SaliencyMeasure::TaylorFo => "taylor",
        })
    }
}

impl FromStr for SaliencyMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mag" | "magnitude" => Ok(SaliencyMeasure::Magnitude),
            "taylor" | "taylorfo" | "fo" => Ok(SaliencyMeasure::TaylorFo),
            other => Err(Error::InvalidArgument(format!(
                "unknown saliency measure `{other}`"
            ))),
        }
    }
}

/// Per-filter importance: L1 norm for magnitude, `|sum(w * g)|` for the
/// first-order Taylor measure.
pub fn filter_saliency(
    measure: SaliencyMeasure,
    weight: &Tensor4,
    grad: Option<&Tensor4>,
) -> Result<Vec<f64>> {
    let n = weight.batch();
    match measure {
        SaliencyMeasure::Magnitude => Ok((0..n)
            .map(|i| weight.item(i).iter().map(|w| w.abs()).sum())
            .collect()),
        SaliencyMeasure::TaylorFo => {
            let grad = grad.ok_or(Error::MissingGradient("first-order saliency"))?;
            if grad.dims() != weight.dims() {
                return Err(Error::Shape {
                    axis: "saliency gradient",
                    expected: weight.len(),
                    got: grad.len(),
                });
            }
            Ok((0..n)
                .map(|i| {
                    weight
                        .item(i)
                        .iter()
                        .zip(grad.item(i))
                        .map(|(w, g)| w * g)
                        .sum::<f64>()
                        .abs()
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    pub target_rate: f64,
    pub ramp_epochs: usize,
    pub min_templates: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            target_rate: 0.0,
            ramp_epochs: 40,
            min_templates: 8,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(Error::InvalidArgument(format!(
                "target rate {} outside [0, 1)",
                self.target_rate
            )));
        }
        Ok(())
    }

    pub fn rate_at_epoch(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 {
            return self.target_rate;
        }
        self.target_rate * (epoch as f64 / self.ramp_epochs as f64).min(1.0)
    }

    pub fn templates_at_epoch(&self, n_filters: usize, epoch: usize) -> usize {
        templates_for_rate(n_filters, self.rate_at_epoch(epoch), self.min_templates)
    }
}

/// `max(min_templates, ceil((1 - rate) * n))` clamped to `[1, n]`.
pub fn templates_for_rate(n_filters: usize, rate: f64, min_templates: usize) -> usize {
    // The tolerance keeps products like 0.3 * 10 from rounding up past 3.
    let kept = ((1.0 - rate) * n_filters as f64 - 1e-9).ceil().max(0.0) as usize;
    kept.max(min_templates).clamp(1, n_filters.max(1))
}

/// Top `k` candidates by score, ties to the lower index, returned ascending.
pub fn select_top(scores: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub layer: usize,
    pub filters: usize,
    pub kept: Vec<usize>,
    pub rate: f64,
}

impl PlanEntry {
    pub fn templates(&self) -> usize {
        self.kept.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruningPlan {
    pub entries: Vec<PlanEntry>,
}

impl PruningPlan {
    pub fn entry(&self, layer: usize) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// One line per layer: `layer_id M rate idx0 idx1 ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} {} {}", e.layer, e.templates(), e.rate));
            for k in &e.kept {
                out.push_str(&format!(" {k}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output. The filter count is not
    /// stored and is recovered from `rate` and `M`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("plan line {}: {what}", no + 1));
            let mut fields = line.split_whitespace();
            let layer: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("layer id"))?;
            let m: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("template count"))?;
            let rate: f64 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad("rate"))?;
            let kept = fields
                .map(|f| f.parse::<usize>().map_err(|_| bad("index")))
                .collect::<Result<Vec<_>>>()?;
            if kept.len() != m || m == 0 {
                return Err(bad("index count differs from M"));
            }
            if kept.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("indices must be strictly ascending"));
            }
            let filters = if rate < 1.0 {
                (m as f64 / (1.0 - rate)).round() as usize
            } else {
                m
            };
            entries.push(PlanEntry {
                layer,
                filters: filters.max(kept[m - 1] + 1),
                kept,
                rate,
            });
        }
        Ok(Self { entries })
    }
}

/// Filters currently acting as templates (all filters for a dense layer).
pub fn current_kept(layer: &Layer) -> Option<Vec<usize>> {
    match layer {
        Layer::Conv(c) => Some((0..c.weight.batch()).collect()),
        Layer::TemplateConv(t) => Some(t.layer.kept().to_vec()),
        _ => None,
    }
}

/// Plan for `epoch`. New kept sets are chosen among the current ones, so a
/// layer's template count never grows. Scores are taken on the dense or
/// reconstructed filters.
pub fn build_plan(
    net: &Network,
    measure: SaliencyMeasure,
    epoch: usize,
    schedule: &PruneSchedule,
    grads: Option<&FilterGrads>,
) -> Result<PruningPlan> {
    schedule.validate()?;
    let rate = schedule.rate_at_epoch(epoch);
    let mut entries = Vec::new();
    for id in net.conv_layer_ids() {
        let current = current_kept(&net.layers[id]).expect("conv layer");
        let weight = net.filters(id).expect("conv layer");
        let filters = weight.batch();
        let m = templates_for_rate(filters, rate, schedule.min_templates).min(current.len());
        let kept = if m == current.len() {
            current
        } else {
            let scores = filter_saliency(measure, &weight, grads.and_then(|g| g.get(&id)))?;
            select_top(&scores, &current, m)
        };
        entries.push(PlanEntry {
            layer: id,
            filters,
            rate: 1.0 - kept.len() as f64 / filters as f64,
            kept,
        });
    }
    Ok(PruningPlan { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertOptions {
    pub family: TransformFamily,
    pub groups: usize,
    pub independent_group_templates: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            family: TransformFamily::Scalar,
            groups: 1,
            independent_group_templates: false,
        }
    }
}

/// Rewrites the layers named in `plan`. Dense layers keeping every filter
/// and template layers with an unchanged kept set are left alone; other
/// layers are rebuilt from their (reconstructed) filters. Layers whose input
/// channels are not divisible by `options.groups` use one group. Returns
/// the indices of rewritten layers.
pub fn apply_plan(
    net: &mut Network,
    plan: &PruningPlan,
    options: &ConvertOptions,
) -> Result<Vec<usize>> {
    let mut changed = Vec::new();
    for entry in &plan.entries {
        let layer = net.layers.get(entry.layer).ok_or_else(|| {
            Error::InvalidArgument(format!("plan names missing layer {}", entry.layer))
        })?;
        let current = current_kept(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {} is not a convolution", entry.layer))
        })?;
        let weight = net.filters(entry.layer).expect("conv layer");
        check_dim("plan filter count", weight.batch(), entry.filters)?;
        if entry.kept == current
            && (matches!(layer, Layer::TemplateConv(_)) || current.len() == weight.batch())
        {
            continue;
        }
        let (geom, bias) = match layer {
            Layer::Conv(c) => {
                if c.geom.groups != 1 {
                    return Err(Error::Geometry(
                        "grouped dense layers cannot be converted".into(),
                    ));
                }
                (c.geom, c.bias.clone())
            }
            Layer::TemplateConv(t) => (t.layer.config().dense_geometry(), t.bias.clone()),
            _ => unreachable!(),
        };
        let channels = weight.channels();
        let groups = if options.groups > 0 && channels % options.groups == 0 {
            options.groups
        } else {
            1
        };
        let converted = TemplateConvLayer::from_dense(
            &weight,
            &geom,
            &entry.kept,
            options.family,
            groups,
            options.independent_group_templates,
        )?;
        net.layers[entry.layer] = Layer::TemplateConv(TemplateConv {
            layer: converted,
            bias,
        });
        changed.push(entry.layer);
    }
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnitude_is_l1() {
        let w = Tensor4::new([2, 2, 1, 1], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            filter_saliency(SaliencyMeasure::Magnitude, &w, None).unwrap(),
            vec![2.0, 0.0]
        );
    }

    #[test]
    fn taylor_with_grad_equal_weight_is_sum_of_squares() {
        let w = Tensor4::new([2, 1, 1, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let s = filter_saliency(SaliencyMeasure::TaylorFo, &w, Some(&w)).unwrap();
        assert_eq!(s, vec![5.0, 9.25]);
    }

    #[test]
    fn taylor_needs_matching_grad() {
        let w = Tensor4::zeros([2, 1, 1, 2]);
        assert!(matches!(
            filter_saliency(SaliencyMeasure::TaylorFo, &w, None),
            Err(Error::MissingGradient(_))
        ));
        let g = Tensor4::zeros([2, 1, 2, 1]);
        assert!(filter_saliency(SaliencyMeasure::TaylorFo, &w, Some(&g)).is_err());
    }

    #[test]
    fn schedule_ramp() {
        let s = PruneSchedule {
            target_rate: 0.8,
            ramp_epochs: 40,
            min_templates: 8,
        };
        assert_eq!(s.rate_at_epoch(0), 0.0);
        assert!((s.rate_at_epoch(20) - 0.4).abs() < 1e-15);
        let s7 = PruneSchedule {
            target_rate: 0.7,
            ..s
        };
        assert_eq!(s7.rate_at_epoch(40), 0.7);
        assert_eq!(s7.rate_at_epoch(100), 0.7);
    }

    #[test]
    fn template_counts() {
        assert_eq!(templates_for_rate(64, 0.7, 8), 20);
        assert_eq!(templates_for_rate(16, 0.9, 8), 8);
        assert_eq!(templates_for_rate(16, 0.0, 8), 16);
        assert_eq!(templates_for_rate(4, 0.5, 8), 4);
        assert_eq!(templates_for_rate(10, 0.7, 1), 3);
        assert_eq!(templates_for_rate(10, 0.99, 0), 1);
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(
            select_top(&[3.0, 1.0, 2.0, 0.0], &[0, 1, 2, 3], 2),
            vec![0, 2]
        );
        assert_eq!(
            select_top(&[1.0, 1.0, 1.0, 1.0], &[0, 1, 2, 3], 2),
            vec![0, 1]
        );
        assert_eq!(select_top(&[5.0, 1.0, 2.0, 9.0], &[1, 2], 1), vec![2]);
    }

    #[test]
    fn plan_text_round_trip() {
        let plan = PruningPlan {
            entries: vec![
                PlanEntry {
                    layer: 0,
                    filters: 8,
                    kept: vec![1, 4, 6, 7],
                    rate: 0.5,
                },
                PlanEntry {
                    layer: 4,
                    filters: 16,
                    kept: (0..16).collect(),
                    rate: 0.0,
                },
            ],
        };
        assert_eq!(PruningPlan::from_text(&plan.to_text()).unwrap(), plan);
        assert!(PruningPlan::from_text("0 2 0.5 3").is_err());
        assert!(PruningPlan::from_text("0 2 0.5 3 1").is_err());
        assert!(PruningPlan::from_text("x").is_err());
    }

    #[test]
    fn measure_parsing() {
        assert_eq!(
            "mag".parse::<SaliencyMeasure>().unwrap(),
            SaliencyMeasure::Magnitude
        );
        assert_eq!(
            "taylor".parse::<SaliencyMeasure>().unwrap(),
            SaliencyMeasure::TaylorFo
        );
        assert!("l2".parse::<SaliencyMeasure>().is_err());
    }
}
