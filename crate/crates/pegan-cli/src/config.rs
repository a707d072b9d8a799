//! The run configuration document: one JSON file with model, train, data and
//! eval sections plus the run seed. Unknown keys are rejected and every path
//! is validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pegan::error::{Error, Result};
use pegan::model::{DiscriminatorConfig, GeneratorConfig};
use pegan::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFont {
    pub name: String,
    pub dir: PathBuf,
    pub category_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source_dir: PathBuf,
    pub targets: Vec<TargetFont>,
}

fn default_max_value() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub eval_set: PathBuf,
    #[serde(default = "default_max_value")]
    pub max_value: f64,
    #[serde(default)]
    pub recognizer: Option<PathBuf>,
    /// Category to evaluate; may be omitted when only one target font is
    /// configured.
    #[serde(default)]
    pub category: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // The run seed governs everything; the discriminator mirrors the
        // generator's geometry and category count.
        cfg.train.seed = cfg.seed;
        cfg.model.discriminator.input_size = cfg.model.generator.input_size;
        cfg.model.discriminator.num_categories = cfg.model.generator.num_categories;
        cfg.model.generator.validate()?;
        cfg.model.discriminator.validate()?;
        cfg.train.validate()?;
        cfg.validate_data()?;
        Ok(cfg)
    }

    fn validate_data(&self) -> Result<()> {
        let check_dir = |p: &Path| -> Result<()> {
            if !p.is_dir() {
                return Err(Error::Data(format!("{}: not a directory", p.display())));
            }
            Ok(())
        };
        check_dir(&self.data.source_dir)?;
        if self.data.targets.is_empty() {
            return Err(Error::Config("data.targets is empty".into()));
        }
        for t in &self.data.targets {
            check_dir(&t.dir)?;
            if t.category_id >= self.model.generator.num_categories {
                return Err(Error::Config(format!(
                    "target {} has category {} outside 0..{}",
                    t.name,
                    t.category_id,
                    self.model.generator.num_categories
                )));
            }
        }
        if let Some(eval) = &self.eval {
            if !eval.eval_set.is_file() {
                return Err(Error::Data(format!(
                    "{}: eval set not found",
                    eval.eval_set.display()
                )));
            }
            if let Some(rec) = &eval.recognizer {
                if !rec.is_file() {
                    return Err(Error::Data(format!(
                        "{}: recognizer archive not found",
                        rec.display()
                    )));
                }
            }
            if !(eval.max_value > 0.0) {
                return Err(Error::Config("eval.max_value must be > 0".into()));
            }
        }
        Ok(())
    }

    /// The category to evaluate, defaulting to the sole target font.
    pub fn eval_category(&self) -> Result<usize> {
        let eval = self
            .eval
            .as_ref()
            .ok_or_else(|| Error::Config("config has no eval section".into()))?;
        match eval.category {
            Some(c) => Ok(c),
            None if self.data.targets.len() == 1 => Ok(self.data.targets[0].category_id),
            None => Err(Error::Config(
                "eval.category required when several target fonts are configured".into(),
            )),
        }
    }
}
