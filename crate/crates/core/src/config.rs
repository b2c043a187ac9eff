//! TOML experiment configuration.
//!
//! ```toml
//! [task]
//! vocab_size = 10
//! answer_length = 2
//! num_prompts = 16
//! seed = 0
//!
//! [train]
//! algorithm = "tepo"
//! learning_rate = 0.2
//!
//! [output]
//! format = "csv"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricsFormat;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; when unset the caller picks one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: MetricsFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })?;
        self.train.validate()?;
        if self.train.prompts_per_batch > self.task.num_prompts {
            return Err(Error::Config(format!(
                "prompts_per_batch {} exceeds num_prompts {}",
                self.train.prompts_per_batch, self.task.num_prompts
            )));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Algorithm;

    const MINIMAL: &str = r#"
[task]
vocab_size = 10
answer_length = 2
num_prompts = 16
seed = 4
"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.output.format, MetricsFormat::Jsonl);
        assert_eq!(c.task.seed, 4);
    }

    #[test]
    fn full_config() {
        let text = format!(
            "{MINIMAL}\n[train]\nalgorithm = \"clip_higher\"\nlearning_rate = 0.5\nclip = {{ eps_low = 0.1, eps_high = 0.3 }}\nmini_batch_groups = 4\n\n[output]\nformat = \"csv\"\ndir = \"runs/x\"\n"
        );
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.train.algorithm, Algorithm::ClipHigher);
        assert_eq!(c.train.clip_config().eps_high, 0.3);
        assert_eq!(c.train.mini_batch_groups, Some(4));
        assert_eq!(c.output.dir.as_deref(), Some(Path::new("runs/x")));
        assert_eq!(c.output.format, MetricsFormat::Csv);
    }

    #[test]
    fn unknown_keys_rejected() {
        for extra in ["\n[train]\nlearning_rte = 0.1\n", "\n[extra]\nx = 1\n", "\n[output]\nfmt = \"csv\"\n"] {
            let text = format!("{MINIMAL}{extra}");
            assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))), "{extra}");
        }
        let text = MINIMAL.replace("seed = 4", "seed = 4\nvocab = 3");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let text = format!("{MINIMAL}\n[train]\ngroup_size = 1\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}\n[train]\nprompts_per_batch = 17\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = MINIMAL.replace("vocab_size = 10", "vocab_size = 1");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = format!("{MINIMAL}\n[train]\nalgorithm = \"tepo_kl\"\nkl_coef = 0.5\n");
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
