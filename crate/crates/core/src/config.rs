//! Flat key/value run configuration (TOML) and the variant → training config
//! mapping.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SynthConfig;
use crate::evalkit::{EvalConfig, TieRule};
use crate::model::{EncoderKind, FusionInit, MergeMode, ModelSpec};
use crate::objective::{BetaRule, GenLossConfig, InterMode, NForBeta};
use crate::trainer::{AdamConfig, FusionConfig, Purity, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Model variants and the ablations of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Ranking loss only, no fusion.
    Sem,
    /// Both generalization terms plus pattern fusion.
    RecG,
    /// Without item-level generalization (α = 0).
    NoIg,
    /// Without the intra-domain diversity term.
    NoId,
    /// Without the inter-domain compactness term.
    NoIc,
    /// Without sequence-level fusion.
    NoSg,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Sem,
        Variant::RecG,
        Variant::NoIg,
        Variant::NoId,
        Variant::NoIc,
        Variant::NoSg,
    ];

    pub fn label(self, encoder: EncoderKind) -> String {
        let e = encoder.label();
        match self {
            Variant::Sem => format!("{e}-Sem"),
            Variant::RecG => format!("{e}-RecG"),
            Variant::NoIg => format!("{e}-RecG w/o IG"),
            Variant::NoId => format!("{e}-RecG w/o ID"),
            Variant::NoIc => format!("{e}-RecG w/o IC"),
            Variant::NoSg => format!("{e}-RecG w/o SG"),
        }
    }

    pub fn uses_fusion(self) -> bool {
        !matches!(self, Variant::Sem | Variant::NoSg)
    }

    /// The full-model config with this variant's single change applied.
    pub fn apply(self, full: &TrainConfig) -> TrainConfig {
        let mut c = full.clone();
        match self {
            Variant::RecG => {}
            Variant::Sem => {
                c.gen = None;
                c.fusion.enabled = false;
            }
            Variant::NoIg => c.gen = None,
            Variant::NoId => {
                if let Some(g) = c.gen.as_mut() {
                    g.use_intra = false;
                }
            }
            Variant::NoIc => {
                if let Some(g) = c.gen.as_mut() {
                    g.use_inter = false;
                }
            }
            Variant::NoSg => c.fusion.enabled = false,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sem" => Ok(Variant::Sem),
            "recg" => Ok(Variant::RecG),
            "no-ig" | "wo-ig" => Ok(Variant::NoIg),
            "no-id" | "wo-id" => Ok(Variant::NoId),
            "no-ic" | "wo-ic" => Ok(Variant::NoIc),
            "no-sg" | "wo-sg" => Ok(Variant::NoSg),
            other => Err(ConfigError::Invalid(format!(
                "unknown variant {other:?} (expected sem, recg, no-ig, no-id, no-ic, no-sg)"
            ))),
        }
    }
}

/// Every tunable in one flat table. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // model
    pub d_l: usize,
    pub encoder: EncoderKind,
    pub max_seq_len: usize,
    pub fusion_init: FusionInit,

    // training
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: Option<usize>,
    pub grad_clip: Option<f64>,
    pub val_negatives: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    // generalization losses (alpha = 0 disables them)
    pub alpha: f64,
    pub tau: f64,
    pub beta_rule: BetaRule,
    pub manual_beta: Option<f64>,
    pub n_for_beta: NForBeta,
    pub include_self_pairs: bool,
    pub inter_mode: InterMode,
    pub sample_size: usize,
    pub purity: Purity,

    // sequence-level generalization
    pub fusion: bool,
    pub k: usize,
    pub warm_fraction: f64,

    // evaluation
    pub cutoffs: Vec<usize>,
    pub n_negatives: usize,
    pub n_repeats: usize,
    pub tie_rule: TieRule,

    // preprocessing
    pub min_interactions: usize,

    // synthetic corpus
    pub n_items: usize,
    pub n_users: usize,
    pub d_h: usize,
    pub bias_strength: f64,
    pub n_latent_topics: usize,
    pub transition_sharpness: f64,
    pub noise_std: f64,
    pub min_seq_len: usize,
    pub max_synth_seq_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let g = GenLossConfig::default();
        let e = EvalConfig::default();
        let s = SynthConfig::default();
        Self {
            seed: 0,
            d_l: 32,
            encoder: EncoderKind::RecurrentGate,
            max_seq_len: 50,
            fusion_init: FusionInit::LeftIdentity,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            grad_clip: t.grad_clip,
            val_negatives: t.val_negatives,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            alpha: g.alpha,
            tau: g.tau,
            beta_rule: g.beta_rule,
            manual_beta: g.manual_beta,
            n_for_beta: g.n_for_beta,
            include_self_pairs: g.include_self_pairs,
            inter_mode: g.inter_mode,
            sample_size: g.sample_size,
            purity: t.purity,
            fusion: true,
            k: t.fusion.k,
            warm_fraction: t.fusion.warm_fraction,
            cutoffs: e.cutoffs,
            n_negatives: e.n_negatives,
            n_repeats: e.n_repeats,
            tie_rule: e.tie_rule,
            min_interactions: 10,
            n_items: s.n_items,
            n_users: s.n_users,
            d_h: s.d_h,
            bias_strength: s.bias_strength,
            n_latent_topics: s.n_latent_topics,
            transition_sharpness: s.transition_sharpness,
            noise_std: s.noise_std,
            min_seq_len: s.min_seq_len,
            max_synth_seq_len: s.max_seq_len,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self, d_h: usize) -> ModelSpec {
        ModelSpec {
            d_h,
            d_l: self.d_l,
            encoder: self.encoder,
            max_seq_len: self.max_seq_len,
            merge: MergeMode::Sum,
        }
    }

    /// Generalization settings; `None` when `alpha` is 0.
    pub fn gen_config(&self) -> Result<Option<GenLossConfig>, ConfigError> {
        if self.alpha == 0.0 {
            return Ok(None);
        }
        let g = GenLossConfig {
            alpha: self.alpha,
            tau: self.tau,
            beta_rule: self.beta_rule,
            manual_beta: self.manual_beta,
            n_for_beta: self.n_for_beta,
            include_self_pairs: self.include_self_pairs,
            inter_mode: self.inter_mode,
            sample_size: self.sample_size,
            use_intra: true,
            use_inter: true,
        };
        g.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Some(g))
    }

    /// Full-model training config (apply a [`Variant`] for the others).
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let c = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            grad_clip: self.grad_clip,
            patience: self.patience,
            val_negatives: self.val_negatives,
            gen: self.gen_config()?,
            purity: self.purity,
            fusion: FusionConfig {
                enabled: self.fusion,
                k: self.k,
                warm_fraction: self.warm_fraction,
            },
        };
        c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }

    pub fn eval_config(&self) -> Result<EvalConfig, ConfigError> {
        let c = EvalConfig {
            cutoffs: self.cutoffs.clone(),
            n_negatives: self.n_negatives,
            n_repeats: self.n_repeats,
            seed: self.seed,
            tie_rule: self.tie_rule,
        };
        c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }

    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let c = SynthConfig {
            n_items: self.n_items,
            n_users: self.n_users,
            d_h: self.d_h,
            bias_strength: self.bias_strength,
            n_latent_topics: self.n_latent_topics,
            transition_sharpness: self.transition_sharpness,
            noise_std: self.noise_std,
            min_seq_len: self.min_seq_len,
            max_seq_len: self.max_synth_seq_len,
            seed: self.seed,
            ..Default::default()
        };
        c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig {
            alpha: 0.01,
            encoder: EncoderKind::MeanPool,
            ..Default::default()
        };
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("alhpa = 0.1"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn zero_alpha_disables_generalization() {
        let c = RunConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(c.train_config().unwrap().gen.is_none());
        let c = RunConfig {
            alpha: -0.5,
            ..Default::default()
        };
        assert!(c.train_config().is_err());
    }

    #[test]
    fn each_variant_changes_one_mechanism() {
        let full = RunConfig::default().train_config().unwrap();
        let sem = Variant::Sem.apply(&full);
        assert!(sem.gen.is_none() && !sem.fusion.enabled);
        assert_eq!(Variant::RecG.apply(&full), full);
        assert!(Variant::NoIg.apply(&full).gen.is_none());
        assert!(!Variant::NoId.apply(&full).gen.unwrap().use_intra);
        assert!(!Variant::NoIc.apply(&full).gen.unwrap().use_inter);
        assert!(!Variant::NoSg.apply(&full).fusion.enabled);
        assert_eq!(Variant::NoId.label(EncoderKind::RecurrentGate), "GRU-RecG w/o ID");
        assert_eq!(Variant::Sem.label(EncoderKind::MeanPool), "MeanPool-Sem");
        assert_eq!("no-sg".parse::<Variant>().unwrap(), Variant::NoSg);
    }
}
