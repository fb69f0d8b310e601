//! Run configuration, stored as TOML.
//!
//! ```toml
//! output_dir = "runs/desk"
//!
//! [data]
//! root = "data"
//! train = "synth"
//!
//! [model]
//! width = 32
//! reduction = 4
//! [model.backbone]
//! kind = "tiny"
//!
//! [train]
//! epochs = 25
//! batch_size = 8
//! ```
//!
//! Every section except `data` may be omitted. Relative paths resolve
//! against the working directory.

use std::path::{Path, PathBuf};

use gcpa_core::network::{AblationFlags, NetworkConfig};
use gcpa_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::status::{CliError, CliResult};

/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "GCPA_DATA_ROOT";

/// File name of the configuration snapshot written into every output directory.
pub const SNAPSHOT_NAME: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default = "NetworkConfig::desk_scale")]
    pub model: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

/// Datasets live at `<root>/<name>/{images,masks}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Training set name.
    pub train: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Square side images are resized to for inference; defaults to the
    /// training crop.
    pub input_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub flags: AblationFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Rows of the component table, in order.
    pub variants: Vec<Variant>,
    /// Also train the shared context-flow variant and report it next to
    /// the full model.
    pub shared_pair: bool,
    /// Dataset scored after training; defaults to the training set.
    pub eval_dataset: Option<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: progressive_variants(),
            shared_pair: true,
            eval_dataset: None,
        }
    }
}

/// Baseline, then each component added on top of the previous row.
pub fn progressive_variants() -> Vec<Variant> {
    let base = AblationFlags::baseline();
    let fia = AblationFlags { use_fia: true, ..base };
    let sr = AblationFlags { use_sr: true, ..fia };
    let ha = AblationFlags { use_ha: true, ..sr };
    let gcf = AblationFlags { use_gcf: true, ..ha };
    [("baseline", base), ("+fia", fia), ("+sr", sr), ("+ha", ha), ("+gcf", gcf)]
        .into_iter()
        .map(|(name, flags)| Variant {
            name: name.into(),
            flags,
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::usage(format!("cannot serialize configuration: {e}")))
    }

    /// Reads, applies the environment override and validates.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            log::info!("data root overridden by {DATA_ROOT_ENV}: {}", Path::new(&root).display());
            self.data.root = root.into();
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.train.is_empty() {
            return Err(CliError::usage("data.train must name a dataset"));
        }
        let side = self.input_size();
        let divisor = self.model.backbone.divisor();
        if side == 0 || side % divisor != 0 {
            return Err(CliError::usage(format!(
                "inference size {side} must be a positive multiple of {divisor}"
            )));
        }
        for v in &self.ablate.variants {
            v.flags
                .validate()
                .map_err(|e| CliError::usage(format!("ablation variant `{}`: {e}", v.name)))?;
        }
        let mut names: Vec<&str> = self.ablate.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::usage("ablation variant names must be unique"));
        }
        Ok(())
    }

    /// Square inference side.
    pub fn input_size(&self) -> usize {
        self.eval.input_size.unwrap_or(self.train.augment.crop)
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_snapshot(&self, dir: &Path) -> CliResult<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
