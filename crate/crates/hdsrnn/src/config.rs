//! Experiment configuration file handling for the command-line tool.
//!
//! One TOML file describes data source, pretreatment, model, and training
//! settings. Unknown keys are rejected. Command-line flags override file
//! values, and the resolved configuration is echoed into the output
//! directory for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpatialMode};
use crate::pipeline::{split_from_ratio, SeriesPanel, DEFAULT_PERIOD};
use crate::synthdata::{default_wds_generator, default_wds_spec, GeneratorConfig, NetworkSpec};
use crate::training::{GridSpec, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Default output directory; the `--out` flag overrides it.
    pub output_dir: Option<PathBuf>,
    /// Seasonal slots per cycle.
    #[serde(default = "default_period")]
    pub period: usize,
    /// Train : validation : test proportions.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: [usize; 3],
    /// Target sensor id, e.g. "F8".
    pub target_sensor: String,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Optional hyperparameter grid; when present, `train` runs a grid
    /// search before fitting the best configuration.
    pub grid: Option<GridSpec>,
}

fn default_period() -> usize {
    DEFAULT_PERIOD
}

fn default_split_ratio() -> [usize; 3] {
    [4, 1, 1]
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Panel CSV path, relative to the config file.
    pub csv: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Use the built-in 18-sensor network.
    #[serde(default)]
    pub default_wds: bool,
    /// Or a network specification JSON path.
    pub spec: Option<PathBuf>,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub spatial_variant: SpatialMode,
    pub temporal_attention: bool,
    pub encoder_length: usize,
    pub decoder_length: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub dropout: f64,
    pub teacher_forcing: bool,
    pub attention_width: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::new(1, 0);
        Self {
            spatial_variant: base.spatial_variant,
            temporal_attention: base.temporal_attention,
            encoder_length: base.encoder_length,
            decoder_length: base.decoder_length,
            hidden_dim: base.hidden_dim,
            layer_count: base.layer_count,
            dropout: base.dropout,
            teacher_forcing: base.teacher_forcing,
            attention_width: base.attention_width,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, n_sensors: usize, target_sensor: usize) -> ModelConfig {
        ModelConfig {
            n_sensors,
            encoder_length: self.encoder_length,
            decoder_length: self.decoder_length,
            hidden_dim: self.hidden_dim,
            layer_count: self.layer_count,
            spatial_variant: self.spatial_variant,
            temporal_attention: self.temporal_attention,
            dropout: self.dropout,
            target_sensor,
            teacher_forcing: self.teacher_forcing,
            attention_width: self.attention_width,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("period must be positive".into()));
        }
        if self.split_ratio[0] == 0 || self.split_ratio.iter().sum::<usize>() == 0 {
            return Err(Error::Config(format!(
                "invalid split ratio {:?}",
                self.split_ratio
            )));
        }
        match (&self.data.csv, &self.data.synth) {
            (None, None) => {
                return Err(Error::Config(
                    "data section needs either `csv` or `synth`".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data section must set only one of `csv` and `synth`".into(),
                ))
            }
            _ => {}
        }
        if let Some(synth) = &self.data.synth {
            if synth.default_wds == synth.spec.is_some() {
                return Err(Error::Config(
                    "synth data needs exactly one of `default_wds = true` or `spec`".into(),
                ));
            }
        }
        self.train.validate()
    }

    /// Load (or generate) the panel, apply the configured split, and resolve
    /// the target sensor. Returns the network spec when one is known.
    pub fn load_panel(&self, base_dir: &Path) -> Result<(SeriesPanel, Option<NetworkSpec>)> {
        let ratio = (self.split_ratio[0], self.split_ratio[1], self.split_ratio[2]);
        if let Some(csv) = &self.data.csv {
            let mut panel = SeriesPanel::read_csv(&base_dir.join(csv))?;
            panel.set_split(split_from_ratio(panel.len(), ratio)?)?;
            return Ok((panel, None));
        }
        let synth = self.data.synth.as_ref().expect("validated");
        let (spec, gen) = if synth.default_wds {
            (
                default_wds_spec(),
                default_wds_generator(synth.length, synth.seed),
            )
        } else {
            let spec = NetworkSpec::from_json_file(&base_dir.join(synth.spec.as_ref().unwrap()))?;
            (spec, GeneratorConfig::new(synth.length, synth.seed))
        };
        let mut panel = crate::synthdata::generate_panel(&spec, &gen)?;
        panel.set_split(split_from_ratio(panel.len(), ratio)?)?;
        Ok((panel, Some(spec)))
    }
}
