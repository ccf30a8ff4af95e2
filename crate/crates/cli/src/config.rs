//! Run configuration: a TOML file with flag overrides, resolved once before
//! any command runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use madiff_core::editor::EditConfig;
use madiff_core::masknet::{MaskNetConfig, TrainConfig};
use madiff_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Training triples.
    pub train: usize,
    /// Evaluation tasks per task type.
    pub eval_per_task: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            eval_per_task: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Synthetic attention noise levels swept by `attn-stats`.
    pub noise_levels: Vec<f64>,
    /// Images in the round-trip fixture.
    pub roundtrip_images: usize,
    /// Largest mean relative error `roundtrip` accepts.
    pub roundtrip_tolerance: f64,
    /// Rows in contact sheets.
    pub contact_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise_levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            roundtrip_images: 12,
            roundtrip_tolerance: 0.05,
            contact_rows: 12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Mask-prompt extraction endpoint; `MADIFF_LLM_ENDPOINT` is used when unset.
    pub endpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub masknet: Option<PathBuf>,
    pub vocabulary: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every module seed is derived from it.
    pub seed: u64,
    pub jobs: Option<usize>,
    pub edit: EditConfig,
    pub masknet: MaskNetConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
    pub llm: LlmConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// Fills module seeds from the root seed.
    pub fn resolve(mut self) -> Self {
        self.edit.seed = self.seed_for("edit");
        self.train.seed = self.seed_for("masknet");
        self
    }

    pub fn seed_for(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [
            "edit",
            "masknet",
            "datagen/train",
            "datagen/eval",
            "roundtrip",
        ]
        .into_iter()
        .map(|m| (m.to_string(), self.seed_for(m)))
        .chain([("root".to_string(), self.seed)])
        .collect()
    }
}
