use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::TransformerConfig;
use crate::error::{CoolError, Result};
use crate::knowledge::ClientConfig;
use crate::model::ModelConfig;
use crate::training::TrainingConfig;
use crate::variant::AblationVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Toy,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// One token per line. Optional for the toy encoder, which otherwise
    /// builds its vocabulary from the datasets, template and verbalizer.
    pub vocab: Option<PathBuf>,
    /// Parameter archive; required for `pretrained`.
    pub weights: Option<PathBuf>,
    /// Layout override. Defaults to the toy layout or the base layout.
    pub transformer: Option<TransformerConfig>,
    /// Initialization seed of the toy encoder.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            vocab: None,
            weights: None,
            transformer: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Knowledge snapshot archive.
    #[serde(default)]
    pub snapshot: Option<PathBuf>,
    /// On-disk knowledge cache directory, used when no snapshot is given.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Skip malformed dataset lines instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

fn default_k() -> usize {
    16
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// Everything one experiment needs. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub data: DataConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub variant: AblationVariant,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub knowledge: ClientConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Run seeds concurrently.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CoolError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoolError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.source);
        fix(&mut self.data.target);
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.snapshot,
            &mut self.data.cache_dir,
            &mut self.encoder.vocab,
            &mut self.encoder.weights,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.seeds.is_empty() {
            return Err(CoolError::Config("at least one seed is required".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(CoolError::Config("seeds must be distinct".into()));
        }
        if self.data.snapshot.is_none() && self.data.cache_dir.is_none() {
            return Err(CoolError::Config(
                "offline runs need data.snapshot or data.cache_dir".into(),
            ));
        }
        if self.encoder.kind == EncoderKind::Pretrained
            && (self.encoder.vocab.is_none() || self.encoder.weights.is_none())
        {
            return Err(CoolError::Config(
                "pretrained encoder needs encoder.vocab and encoder.weights".into(),
            ));
        }
        Ok(())
    }

    /// Copy for one ablation run: sets the variant and its training switches.
    pub fn with_variant(&self, variant: AblationVariant) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        if !variant.has(crate::variant::Component::Adversarial) {
            c.training.adv_enabled = false;
        }
        if !variant.has(crate::variant::Component::Contrastive) {
            c.training.cl_enabled = false;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        source = "src.jsonl"
        target = "/abs/tgt.jsonl"
        snapshot = "kb.snap"
    "#;

    #[test]
    fn defaults_and_relative_paths() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, Path::new("/work/exp")).unwrap();
        assert_eq!(c.seeds.len(), 10);
        assert_eq!(c.k, 16);
        assert_eq!(c.variant, AblationVariant::Full);
        assert_eq!(c.data.source, PathBuf::from("/work/exp/src.jsonl"));
        assert_eq!(c.data.target, PathBuf::from("/abs/tgt.jsonl"));
        assert_eq!(c.data.snapshot, Some(PathBuf::from("/work/exp/kb.snap")));
        assert_eq!(c.training.alpha, 0.5);
        assert_eq!(c.training.tau, 0.1);
        assert_eq!(c.training.learning_rate, 2e-5);
    }

    #[test]
    fn overrides_round_trip() {
        let text = format!(
            "k = 4\nseeds = [3, 5]\nvariant = \"wo_CK\"\n{MINIMAL}\n[training]\nalpha = 0.7\nsteps = 12\n[model]\nverbalizer_true = [\"real\"]\n"
        );
        let c = ExperimentConfig::from_toml_str(&text, Path::new("/w")).unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.seeds, vec![3, 5]);
        assert_eq!(c.variant, AblationVariant::WoCk);
        assert_eq!(c.training.alpha, 0.7);
        assert_eq!(c.training.steps, Some(12));
        assert_eq!(c.model.verbalizer_true, vec!["real".to_string()]);
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let no_kb = "[data]\nsource = \"a\"\ntarget = \"b\"\n";
        assert!(ExperimentConfig::from_toml_str(no_kb, Path::new(".")).is_err());
        let bad_variant = format!("variant = \"wo_XYZ\"\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml_str(&bad_variant, Path::new(".")).is_err());
        let dup = format!("seeds = [1, 1]\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml_str(&dup, Path::new(".")).is_err());
        let typo = format!("seedz = [1]\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml_str(&typo, Path::new(".")).is_err());
        let pre = format!("{MINIMAL}\n[encoder]\nkind = \"pretrained\"\n");
        assert!(ExperimentConfig::from_toml_str(&pre, Path::new(".")).is_err());
    }

    #[test]
    fn variant_switches_training_flags() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, Path::new(".")).unwrap();
        let a = c.with_variant(AblationVariant::WoAct);
        assert!(!a.training.adv_enabled && !a.training.cl_enabled);
        let a = c.with_variant(AblationVariant::WoAd);
        assert!(!a.training.adv_enabled && a.training.cl_enabled);
    }
}
