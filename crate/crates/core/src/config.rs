//! Experiment configuration: one JSON document with optional sections.
//! Missing fields take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distortions::DistortionSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::robustness::{Norm, ProbeHead};
use crate::saliency::{CentroidWeighting, MapKind};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub distortion: DistortionConfig,
    pub eval: EvalConfig,
    pub robustness: RobustnessConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 400,
            test_size: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionConfig {
    pub awgn_sigmas: Vec<f64>,
    pub dct_qualities: Vec<u8>,
    pub seed: u64,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            awgn_sigmas: vec![0.02, 0.05, 0.1, 0.2],
            dct_qualities: vec![80, 50, 30],
            seed: 0,
        }
    }
}

impl DistortionConfig {
    /// AWGN by increasing sigma, then quantization by decreasing quality.
    pub fn specs(&self) -> Vec<DistortionSpec> {
        let mut sigmas = self.awgn_sigmas.clone();
        sigmas.sort_by(f64::total_cmp);
        let mut qualities = self.dct_qualities.clone();
        qualities.sort_unstable_by(|a, b| b.cmp(a));
        sigmas
            .into_iter()
            .map(DistortionSpec::awgn)
            .chain(qualities.into_iter().map(DistortionSpec::dct_quant))
            .map(|s| DistortionSpec {
                seed: self.seed,
                ..s
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub map: MapKind,
    pub weighting: CentroidWeighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub head: ProbeHead,
    pub norm: Norm,
    pub mc_p: f64,
    pub mc_t: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            head: ProbeHead::Metric,
            norm: Norm::L2,
            mc_p: 2.0,
            mc_t: 1e-4,
            mc_samples: 200,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.train_size == 0 {
            return Err(Error::config("data.train_size", "must be >= 1"));
        }
        for spec in self.distortion.specs() {
            spec.validate()?;
        }
        if !(self.robustness.mc_t > 0.0) {
            return Err(Error::config("robustness.mc_t", "must be > 0"));
        }
        if !(self.robustness.mc_p >= 1.0) {
            return Err(Error::config("robustness.mc_p", "must be >= 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: byte_offset(text, e.line(), e.column()),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = ExperimentConfig::from_json("{}", Path::new("c.json")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let e = ExperimentConfig::from_json(r#"{"train": {"lr": 0.1}}"#, Path::new("c.json"))
            .unwrap_err();
        assert!(e.to_string().contains("lr"), "{e}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let e = ExperimentConfig::from_json(r#"{"train": {"batch_size": 1}}"#, Path::new("c.json"))
            .unwrap_err();
        assert!(e.to_string().contains("train.batch_size"), "{e}");
    }

    #[test]
    fn distortion_columns_increase_in_strength() {
        let specs = DistortionConfig {
            awgn_sigmas: vec![0.2, 0.02],
            dct_qualities: vec![30, 80],
            seed: 4,
        }
        .specs();
        let labels: Vec<String> = specs
            .iter()
            .map(crate::experiment::distortion_label)
            .collect();
        assert_eq!(labels, ["awgn_0.02", "awgn_0.2", "dct_q80", "dct_q30"]);
    }
}
