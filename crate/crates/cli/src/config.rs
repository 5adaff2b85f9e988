use std::fs;
use std::path::{Path, PathBuf};

use elicit_core::corpus::SplitFractions;
use elicit_core::exec::Exec;
use elicit_core::lm::LmConfig;
use elicit_core::metrics::ProgressionConfig;
use elicit_core::providers::DecodingParams;
use elicit_core::segmentation::SegmentationConfig;
use elicit_core::training::AwrConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus files, or directories whose `*.jsonl` files are read in name
    /// order. Relative paths resolve against the config file's directory.
    pub corpus: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub shard_size: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        let f = SplitFractions::default();
        SplitSection {
            train: f.train,
            dev: f.dev,
            test: f.test,
            shard_size: 128,
        }
    }
}

impl SplitSection {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train,
            dev: self.dev,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    /// Only `reference` ships with the toolkit.
    pub profile: String,
    /// Where pretrained base models are cached. Overridden by
    /// `ELICIT_PROVIDER_CACHE`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            profile: "reference".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub dim: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    /// Caps the number of training blocks (first blocks in file order).
    pub max_train_blocks: Option<usize>,
}

impl Default for LmSection {
    fn default() -> Self {
        let lm = LmConfig::default();
        LmSection {
            dim: lm.dim,
            rank: lm.rank,
            lora_alpha: lm.lora_alpha,
            pretrain_epochs: 3,
            pretrain_batch_size: 16,
            pretrain_learning_rate: 0.01,
            max_train_blocks: None,
        }
    }
}

pub const MODEL_BASE: &str = "base";
pub const MODEL_TUNED: &str = "fine-tuned";
pub const MODEL_PROMPTED: &str = "base+prompt";
const KNOWN_MODELS: [&str; 3] = [MODEL_BASE, MODEL_TUNED, MODEL_PROMPTED];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Model rows to evaluate from the `train` artifact: `base`,
    /// `fine-tuned`, and `base+prompt` (base model with the bundled
    /// baseline prompt as its system message). Empty evaluates the
    /// references only.
    pub models: Vec<String>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            models: vec![MODEL_BASE.into(), MODEL_TUNED.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub plots: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { plots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the split, the shuffled baseline, model initialization,
    /// batch order and sampling.
    pub seed: u64,
    pub execution: Execution,
    pub paths: Paths,
    pub split: SplitSection,
    pub segmentation: SegmentationConfig,
    pub progression: ProgressionConfig,
    pub providers: ProviderSection,
    pub lm: LmSection,
    pub awr: AwrConfig,
    pub decoding: DecodingParams,
    pub evaluate: EvaluateSection,
    pub report: ReportSection,
}

fn invalid(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {message}"))
}

impl RunConfig {
    /// Reads a TOML file and resolves relative corpus paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.paths.corpus {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.paths.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    /// Applies the global seed to every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.awr.seed = seed;
        self.decoding.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: elicit_core::Error| CliError::Config(e.to_string());
        self.split
            .fractions()
            .validate()
            .map_err(|e| invalid("split", e))?;
        if self.split.shard_size == 0 {
            return Err(invalid("split.shard_size", "must be >= 1"));
        }
        self.segmentation.validate().map_err(core)?;
        self.progression.validate().map_err(core)?;
        self.awr.validate().map_err(core)?;
        if self.providers.profile != "reference" {
            return Err(invalid(
                "providers.profile",
                format!("unknown profile {:?} (available: reference)", self.providers.profile),
            ));
        }
        if self.lm.dim == 0 || self.lm.rank == 0 {
            return Err(invalid("lm", "dim and rank must be >= 1"));
        }
        if self.lm.pretrain_batch_size == 0 || !(self.lm.pretrain_learning_rate > 0.0) {
            return Err(invalid("lm", "pretraining batch size and learning rate must be positive"));
        }
        if self.decoding.max_new_tokens == 0 {
            return Err(invalid("decoding.max_new_tokens", "must be >= 1"));
        }
        if !(self.decoding.temperature >= 0.0) {
            return Err(invalid("decoding.temperature", "must be >= 0"));
        }
        for (i, m) in self.evaluate.models.iter().enumerate() {
            if !KNOWN_MODELS.contains(&m.as_str()) {
                return Err(invalid(
                    &format!("evaluate.models[{i}]"),
                    format!("unknown model {m:?} (expected one of {KNOWN_MODELS:?})"),
                ));
            }
        }
        Ok(())
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            dim: self.lm.dim,
            rank: self.lm.rank,
            lora_alpha: self.lm.lora_alpha,
            seed: self.seed,
        }
    }

    pub fn exec(&self) -> Exec {
        match self.execution {
            Execution::Sequential => Exec::Sequential,
            Execution::Parallel => Exec::Parallel,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.decoding.max_new_tokens, 64);
        assert_eq!(cfg.decoding.temperature, 0.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.evaluate.models.push("gpt".into());
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("evaluate.models[2]"), "{e}");

        let cfg: RunConfig = toml::from_str("[awr]\nalpha = 2.0").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("awr.alpha"));

        let e = toml::from_str::<RunConfig>("[split]\ntrian = 0.8").unwrap_err().to_string();
        assert!(e.contains("trian"), "{e}");
    }
}
