use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tplconv::bench::BenchConfig;
use tplconv::nn::TrainConfig;
use tplconv::pruning::{ConvertOptions, SaliencyMeasure};

/// Config file layout: global keys plus one optional section per command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equiv_check: Option<EquivSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_report: Option<ConvertSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub viz_filters: Option<ConvertSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivSection {
    pub configs: usize,
    pub inject_fault: bool,
}

impl Default for EquivSection {
    fn default() -> Self {
        Self {
            configs: 200,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: bool,
    /// CIFAR-10 binary directory; used when `synthetic` is off.
    pub dir: Option<PathBuf>,
    pub classes: usize,
    pub samples: usize,
    /// Fraction of synthetic samples held out for validation.
    pub val_fraction: f64,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            synthetic: true,
            dir: None,
            classes: 4,
            samples: 2048,
            val_fraction: 0.0,
            max_train: None,
            max_test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: vec![8, 16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub checkpoint: Option<PathBuf>,
    pub rate: f64,
    pub min_templates: usize,
    pub measure: SaliencyMeasure,
    pub convert: ConvertOptions,
    /// Probe batch used for the deviation report and first-order saliency.
    pub probe_batch: usize,
    pub data: DataSection,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            rate: 0.5,
            min_templates: 8,
            measure: SaliencyMeasure::Magnitude,
            convert: ConvertOptions::default(),
            probe_batch: 64,
            data: DataSection {
                samples: 256,
                ..DataSection::default()
            },
        }
    }
}

/// A checkpoint, or a freshly initialized architecture, optionally pruned
/// in one shot by magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertSection {
    pub checkpoint: Option<PathBuf>,
    pub in_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub rate: f64,
    pub min_templates: usize,
    pub measure: SaliencyMeasure,
    pub convert: ConvertOptions,
}

impl Default for ConvertSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            in_channels: 3,
            image_size: 32,
            classes: 10,
            widths: vec![8, 16, 16],
            rate: 0.0,
            min_templates: 1,
            measure: SaliencyMeasure::Magnitude,
            convert: ConvertOptions::default(),
        }
    }
}
