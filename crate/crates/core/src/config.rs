//! Run configuration: the JSON document behind `rose train`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Result, RoseError};
use crate::losses::SceSource;
use crate::model::ModelSpec;
use crate::optimizer::{check_rose_compatible, Hyper};
use crate::probe::{generate_probe_task, ProbeTaskSpec};
use crate::rose::RoseConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Rose,
    Rdrop,
    RdropRose,
}

impl Mode {
    fn uses_rose(self) -> bool {
        matches!(self, Mode::Rose | Mode::RdropRose)
    }

    fn uses_rdrop(self) -> bool {
        matches!(self, Mode::Rdrop | Mode::RdropRose)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(ProbeTaskSpec),
    Csv { train: PathBuf, eval: PathBuf },
}

impl DataSource {
    /// Training and evaluation splits. Relative CSV paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<(LabeledSet, LabeledSet)> {
        match self {
            DataSource::Synthetic(task) => generate_probe_task(task),
            DataSource::Csv { train, eval } => {
                let resolve = |p: &PathBuf| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                Ok((
                    LabeledSet::read_csv(&resolve(train))?,
                    LabeledSet::read_csv(&resolve(eval))?,
                ))
            }
        }
    }
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: Hyper,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rose: Option<RoseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rdrop_weight: Option<f64>,
    #[serde(default)]
    pub sce_source: SceSource,
    pub data: DataSource,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| RoseError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RoseError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rewrites relative CSV paths as `base`-relative so the config can be
    /// used from any working directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Csv { train, eval } = &mut self.data {
            for p in [train, eval] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        match (&self.rose, self.mode.uses_rose()) {
            (None, true) => {
                return Err(RoseError::config(format!(
                    "mode {:?} requires a `rose` section",
                    self.mode
                )))
            }
            (Some(_), false) => {
                return Err(RoseError::config(format!(
                    "mode {:?} does not accept a `rose` section",
                    self.mode
                )))
            }
            (Some(rose), true) => check_rose_compatible(&self.model, rose)?,
            (None, false) => {}
        }
        match (self.rdrop_weight, self.mode.uses_rdrop()) {
            (None, true) => return Err(RoseError::config("R-Drop modes require `rdrop_weight`")),
            (Some(_), false) => {
                return Err(RoseError::config(format!(
                    "mode {:?} does not accept `rdrop_weight`",
                    self.mode
                )))
            }
            (Some(w), true) if !(w >= 0.0 && w.is_finite()) => {
                return Err(RoseError::config(
                    "rdrop_weight must be finite and non-negative",
                ))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(RoseError::config("batch_size must be positive"));
        }
        if let DataSource::Synthetic(task) = &self.data {
            task.validate()?;
            if task.input_dim() != self.model.input_dim {
                return Err(RoseError::config(format!(
                    "model input_dim {} does not match the synthetic task's {} features",
                    self.model.input_dim,
                    task.input_dim()
                )));
            }
        }
        Ok(())
    }
}
