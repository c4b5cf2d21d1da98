//! Run configuration: defaults, then the `--config` file, then explicit flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use negprompt_core::dataengine::SynthConfig;
use negprompt_core::detector::{DetectorConfig, TrainConfig};
use negprompt_core::evalkit::EvalSettings;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: String,
    pub grid: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub scene: Option<u64>,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub score_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Where the resolved config itself is written, so not recorded in it.
    #[serde(skip)]
    pub out: PathBuf,
}

/// Everything a run reads. The top-level seed overrides the per-section seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub paths: Paths,
    pub data: SynthConfig,
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub sweep: SweepConfig,
    pub infer: InferConfig,
    pub serve: ServeConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn propagate_seed(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG), toml::to_string(self)?)?;
        Ok(())
    }
}
