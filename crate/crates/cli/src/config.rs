//! JSON run configuration: `{"model": {...}, "train": {...}}`.
//!
//! Only `model.variant` is required. Missing model fields take the variant's
//! defaults and missing train fields take [`TrainConfig::default`].

use std::path::Path;

use nntc_core::architectures::{LayerPlan, ModelConfig, Variant, WeightPolicy};
use nntc_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    variant: Variant,
    weight_policy: Option<WeightPolicy>,
    patch_size: Option<usize>,
    bits_per_iteration: Option<usize>,
    max_iterations: Option<usize>,
    channels: Option<usize>,
    layers: Option<LayerSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSection {
    widths: Option<Vec<usize>>,
    kernel: Option<usize>,
    recurrent_kernel: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    model: ModelSection,
    #[serde(default)]
    train: TrainConfig,
}

/// Fully resolved configuration; its JSON form re-parses to the same value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawRunConfig = serde_json::from_str(text).map_err(CliError::Config)?;
        let m = raw.model;
        let mut model = ModelConfig::default_for(m.variant);
        if let Some(v) = m.weight_policy {
            model.weight_policy = v;
        }
        if let Some(v) = m.patch_size {
            model.patch_size = v;
        }
        if let Some(v) = m.bits_per_iteration {
            model.bits_per_iteration = v;
        }
        if let Some(v) = m.max_iterations {
            model.max_iterations = v;
        }
        if let Some(v) = m.channels {
            model.channels = v;
        }
        if let Some(l) = m.layers {
            let d = model.layers.clone();
            model.layers = LayerPlan {
                widths: l.widths.unwrap_or(d.widths),
                kernel: l.kernel.unwrap_or(d.kernel),
                recurrent_kernel: l.recurrent_kernel.unwrap_or(d.recurrent_kernel),
            };
        }
        model.validate()?;
        raw.train.validate()?;
        Ok(RunConfig { model, train: raw.train })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
