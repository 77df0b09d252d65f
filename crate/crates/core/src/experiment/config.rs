//! Versioned experiment configuration.
//!
//! One top-level seed feeds every named stream. Unknown keys are a hard
//! error so a typo never silently falls back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorruptionOptions, CutLimit, MixtureFractions};
use crate::error::{Error, Result};
use crate::federation::PartitionScheme;
use crate::model::ModelConfig;
use crate::scoring::{InfluenceBackend, MethodKind};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every named stream derives from it.
    pub seed: u64,
    #[serde(default = "default_version")]
    pub version: u32,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub scoring: ScoringSection,
    pub federation: FederationSection,
    pub selection: SelectionSection,
    pub paths: PathsSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub entities: usize,
    pub attributes: usize,
    pub values: usize,
    /// Client training pool size (the part that gets corrupted).
    pub train_samples: usize,
    /// Clean public corpus for base pretraining, disjoint from everything.
    pub pretrain_samples: usize,
    /// Clean public validation set shared by server and clients.
    pub validation_samples: usize,
    /// Clean server-held anchor set.
    pub anchor_samples: usize,
    pub mixture: MixtureSection,
    /// Answer-token fraction removed by delete corruption.
    pub delete_fraction: f64,
    /// Literal cut budget in tokens; absent means "half the answer".
    pub cut_limit_tokens: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub cut: f64,
    pub delete: f64,
    pub exchange: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub context_window: usize,
    pub hidden_dim: usize,
    pub adapter_rank: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    pub method: MethodKind,
    /// Influence damping; absent means the trace-scaled default.
    pub influence_damping: Option<f64>,
    pub influence_backend: InfluenceBackend,
    /// Adapter warmup on the server validation split before influence scoring.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub icl_demonstrations: usize,
    pub icl_max_prompt_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub participation: f64,
    pub partition: PartitionKind,
    pub dirichlet_beta: f64,
    /// Per-client dataset size for the two-group partition; absent picks the
    /// largest size the mixture can supply.
    pub niid2_client_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    Niid1,
    Niid2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub principle: PrincipleKind,
    /// Known global low-quality fraction, used by the two baselines that
    /// require it.
    pub proportion_q: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PrincipleKind {
    /// No filtering (low-quality baseline).
    None,
    /// Ground-truth clean-only training (upper-bound baseline).
    Oracle,
    ByProportion,
    GlobalQuantile,
    Anchor,
}

impl PrincipleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrincipleKind::None => "none",
            PrincipleKind::Oracle => "oracle",
            PrincipleKind::ByProportion => "by-proportion",
            PrincipleKind::GlobalQuantile => "global-quantile",
            PrincipleKind::Anchor => "anchor",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml_str(&text)
    }

    /// Canonical TOML echo; embedding it in a report suffices to rerun the
    /// experiment bit-identically.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let c = &self.corpus;
        if c.train_samples == 0 || c.pretrain_samples == 0 || c.validation_samples == 0 {
            return Err(Error::config(
                "corpus: train_samples, pretrain_samples and validation_samples must be positive",
            ));
        }
        if c.anchor_samples == 0 {
            return Err(Error::config("corpus.anchor_samples must be positive"));
        }
        self.mixture_fractions()
            .validate()
            .map_err(|e| Error::config(format!("corpus.mixture: {e}")))?;
        if !(c.delete_fraction > 0.0 && c.delete_fraction < 1.0) {
            return Err(Error::config(format!(
                "corpus.delete_fraction must lie in (0, 1), got {}",
                c.delete_fraction
            )));
        }
        let f = &self.federation;
        if f.clients == 0 || f.rounds == 0 || f.local_steps == 0 || f.batch_size == 0 {
            return Err(Error::config(
                "federation: clients, rounds, local_steps and batch_size must be positive",
            ));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::config(format!(
                "federation.participation must lie in (0, 1], got {}",
                f.participation
            )));
        }
        if f.partition == PartitionKind::Niid2 && !f.clients.is_multiple_of(2) {
            return Err(Error::config(
                "federation.partition = niid2 requires an even client count",
            ));
        }
        let s = &self.scoring;
        if s.icl_demonstrations == 0 {
            return Err(Error::config("scoring.icl_demonstrations must be >= 1"));
        }
        if let Some(damping) = s.influence_damping {
            if damping <= 0.0 {
                return Err(Error::config(format!(
                    "scoring.influence_damping must be positive, got {damping}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.selection.proportion_q) {
            return Err(Error::config(format!(
                "selection.proportion_q must lie in [0, 1), got {}",
                self.selection.proportion_q
            )));
        }
        self.model_config(5).validate()?;
        Ok(())
    }

    pub fn mixture_fractions(&self) -> MixtureFractions {
        MixtureFractions {
            cut: self.corpus.mixture.cut,
            delete: self.corpus.mixture.delete,
            exchange: self.corpus.mixture.exchange,
        }
    }

    pub fn corruption_options(&self) -> CorruptionOptions {
        CorruptionOptions {
            cut_limit: match self.corpus.cut_limit_tokens {
                Some(n) => CutLimit::Fixed(n),
                None => CutLimit::HalfAnswer,
            },
            delete_fraction: self.corpus.delete_fraction,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            context_window: self.model.context_window,
            hidden_dim: self.model.hidden_dim,
            adapter_rank: self.model.adapter_rank,
            seed: self.seed,
        }
    }

    pub fn partition_scheme(&self) -> PartitionScheme {
        match self.federation.partition {
            PartitionKind::Iid => PartitionScheme::Iid,
            PartitionKind::Niid1 => PartitionScheme::Niid1 {
                beta: self.federation.dirichlet_beta,
            },
            PartitionKind::Niid2 => PartitionScheme::Niid2,
        }
    }

    /// Desk-scale default configuration.
    pub fn default_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 42,
            version: CONFIG_VERSION,
            corpus: CorpusSection {
                entities: 30,
                attributes: 10,
                values: 40,
                train_samples: 16_000,
                pretrain_samples: 1_000,
                validation_samples: 200,
                anchor_samples: 10,
                mixture: MixtureSection {
                    cut: 0.10,
                    delete: 0.15,
                    exchange: 0.15,
                },
                delete_fraction: 0.4,
                cut_limit_tokens: None,
            },
            model: ModelSection {
                embed_dim: 16,
                context_window: 8,
                hidden_dim: 32,
                adapter_rank: 4,
                pretrain_epochs: 40,
                pretrain_lr: 0.5,
            },
            scoring: ScoringSection {
                method: MethodKind::ConProb,
                influence_damping: None,
                influence_backend: InfluenceBackend::Exact,
                warmup_steps: 50,
                warmup_lr: 0.2,
                icl_demonstrations: 1,
                icl_max_prompt_tokens: 512,
            },
            federation: FederationSection {
                clients: 8,
                rounds: 50,
                local_steps: 10,
                batch_size: 16,
                learning_rate: 0.2,
                participation: 1.0,
                partition: PartitionKind::Iid,
                dirichlet_beta: 1.0,
                niid2_client_size: None,
            },
            selection: SelectionSection {
                principle: PrincipleKind::Anchor,
                proportion_q: 0.4,
            },
            paths: PathsSection {
                out_dir: PathBuf::from("runs/default"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let config = ExperimentConfig::default_config();
        let echo = config.echo();
        let back = ExperimentConfig::from_toml_str(&echo).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn default_config_matches_reference_scales() {
        // 16k training samples, 10/15/15 mixture, 10 anchors.
        let config = ExperimentConfig::default_config();
        assert_eq!(config.corpus.train_samples, 16_000);
        assert_eq!(config.corpus.anchor_samples, 10);
        let mix = config.mixture_fractions();
        assert_eq!((mix.cut, mix.delete, mix.exchange), (0.10, 0.15, 0.15));
        assert!((mix.total() - 0.40).abs() < 1e-12);
        assert_eq!(config.corpus.delete_fraction, 0.4);
    }

    #[test]
    fn unknown_keys_are_a_hard_error() {
        let mut text = ExperimentConfig::default_config().echo();
        text.push_str("\n[corpus2]\nfoo = 1\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let typo = ExperimentConfig::default_config()
            .echo()
            .replace("delete_fraction", "delete_fractoin");
        assert!(ExperimentConfig::from_toml_str(&typo).is_err());
    }

    #[test]
    fn bad_mixture_sum_names_the_section() {
        let text = ExperimentConfig::default_config()
            .echo()
            .replace("cut = 0.1", "cut = 0.9");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("mixture"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
