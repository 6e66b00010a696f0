//! Run configuration: one TOML file with `[model]`, `[train]` and a
//! `[data.synthetic]` or `[data.celeba]` table.

use std::path::{Path, PathBuf};

use anyhow::Context;
use introvac::data::{
    generate_synthetic, load_celeba_format, DatasetSpec, LoadedDataset, SyntheticSpec, SYNTHETIC_ATTRIBUTES,
};
use introvac::model::ModelConfig;
use introvac::rng::{derive_seed, Stream};
use introvac::trainer::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated faces; image size and attribute count follow `[model]`.
    Synthetic(SyntheticData),
    /// A CelebA-style directory with an attribute list.
    Celeba(DatasetSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub count: usize,
    #[serde(default)]
    pub correlation: f64,
    #[serde(default = "default_fractions")]
    pub split_fractions: Vec<f64>,
}

fn default_fractions() -> Vec<f64> {
    vec![0.8, 0.1, 0.1]
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {}", e.message().trim())).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.train.mode = mode;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: introvac::error::Error| UsageError(e.to_string());
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(UsageError("output_dir must not be empty".into()).into());
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if s.count == 0 {
                    return Err(UsageError("data.synthetic.count must be positive".into()).into());
                }
                if self.model.num_attributes > SYNTHETIC_ATTRIBUTES.len() {
                    return Err(UsageError(format!(
                        "synthetic data has at most {} attributes, model asks for {}",
                        SYNTHETIC_ATTRIBUTES.len(),
                        self.model.num_attributes
                    ))
                    .into());
                }
            }
            DataSource::Celeba(spec) => {
                if spec.selected_attributes.len() != self.model.num_attributes {
                    return Err(UsageError(format!(
                        "data selects {} attributes but model.num_attributes is {}",
                        spec.selected_attributes.len(),
                        self.model.num_attributes
                    ))
                    .into());
                }
                if spec.image_size != self.model.image_size {
                    return Err(UsageError(format!(
                        "data.celeba.image_size {} differs from model.image_size {}",
                        spec.image_size, self.model.image_size
                    ))
                    .into());
                }
            }
        }
        Ok(())
    }

    /// Loads or generates the train / validation / test splits. Synthetic
    /// data and its split derive from the training seed.
    pub fn load_data(&self) -> anyhow::Result<LoadedDataset> {
        let loaded = match &self.data {
            DataSource::Synthetic(s) => {
                let spec = SyntheticSpec {
                    count: s.count,
                    image_size: self.model.image_size,
                    num_attributes: self.model.num_attributes,
                    seed: derive_seed(self.train.seed, Stream::Data, 0),
                    correlation: s.correlation,
                };
                let data = generate_synthetic(&spec)?;
                let mut parts = data.split(&s.split_fractions, derive_seed(self.train.seed, Stream::Split, 0))?;
                parts.resize_with(3, Default::default);
                let mut it = parts.into_iter();
                let (train, val, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                LoadedDataset {
                    train,
                    val,
                    test,
                    missing_images: 0,
                }
            }
            DataSource::Celeba(spec) => load_celeba_format(spec)?,
        };
        if loaded.missing_images > 0 {
            log::warn!("{} listed images could not be read and were skipped", loaded.missing_images);
        }
        Ok(loaded)
    }

    /// The model configuration with attribute names filled in from the data.
    pub fn resolved_model(&self, attribute_names: &[String]) -> anyhow::Result<ModelConfig> {
        let mut model = self.model.clone();
        if model.attribute_names.is_empty() {
            model.attribute_names = attribute_names.to_vec();
        } else if model.attribute_names != attribute_names {
            return Err(UsageError(format!(
                "model.attribute_names {:?} do not match the data's {:?}",
                model.attribute_names, attribute_names
            ))
            .into());
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
output_dir = "runs/smoke"

[model]
image_size = 32
image_channels = 3
latent_dim = 16
channel_plan = [8, 16, 32]
num_attributes = 2

[train]
epochs = 2
batch_size = 32
seed = 3

[data.synthetic]
count = 200
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::parse(EXAMPLE).unwrap();
        assert_eq!(cfg.model.latent_dim, 16);
        assert_eq!(cfg.train.mode, Mode::Introvac);
        assert!(matches!(&cfg.data, DataSource::Synthetic(s) if s.split_fractions == vec![0.8, 0.1, 0.1]));
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = EXAMPLE.replace("latent_dim = 16\n", "");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("latent_dim"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text = EXAMPLE.replace("latent_dim = 16", "latent_dim = 16\nlatent = 3");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse(EXAMPLE).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            mode: Some(Mode::Vac),
            output_dir: Some("elsewhere".into()),
        });
        assert_eq!((cfg.train.seed, cfg.train.mode), (9, Mode::Vac));
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn synthetic_splits_are_seeded() {
        let cfg = RunConfig::parse(EXAMPLE).unwrap();
        let a = cfg.load_data().unwrap();
        let b = cfg.load_data().unwrap();
        assert_eq!(a.train.ids, b.train.ids);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 200);
        assert_eq!(a.train.attribute_names, vec!["glasses", "beard"]);
    }
}
