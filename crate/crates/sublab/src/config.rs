//! Experiment configuration.
//!
//! Configs are flat `key = value` text with `#` comments; dotted prefixes
//! group related keys (`attack.k = 5`). Every run is identified by the
//! SHA-256 hash of its canonical (sorted, fully defaulted) key-value map
//! plus the seed, and every artifact carries that hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Root seed for every derived random stream.
    pub seed: u64,

    /// Embedding dimension of the token space.
    pub dim: usize,
    /// Number of vocabulary tokens.
    pub n_tokens: usize,
    /// Number of concepts in the universe.
    pub concepts: usize,
    /// Component standard deviation of the latent mixture.
    pub sigma: f64,
    /// Norm of a concept token along its private axis.
    pub concept_scale: f64,
    /// Axis component of tokens associated with a concept.
    pub kin_scale: f64,
    /// Associated (and anti-associated) tokens per concept.
    pub kin_per_concept: usize,
    pub anti_per_concept: usize,
    /// Norm scale of filler and generic tokens.
    pub filler_scale: f64,
    pub generic_scale: f64,

    /// Latents drawn per concept for the training dataset.
    pub data_per_concept: usize,

    /// Hidden width of the encoder mixing network.
    pub encoder_hidden: usize,
    /// Scale of the additive positional vectors.
    pub encoder_pos_scale: f64,

    /// Diffusion timesteps.
    pub timesteps: usize,
    /// Hidden width of the denoiser.
    pub denoiser_hidden: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    /// Conditioning jitter during pretraining; widens the denoiser's
    /// response basins around each prompt conditioning.
    pub pretrain_cond_noise: f64,

    pub unlearn_steps: usize,
    pub unlearn_batch: usize,
    pub unlearn_lr: f64,
    pub unlearn_momentum: f64,
    /// Weight of the retention term on non-target concepts.
    pub unlearn_retain_weight: f64,
    /// Gate: no-attack ASR ceiling on the target concept (percent).
    pub unlearn_asr_ceiling: f64,
    /// Gate: oracle-accuracy floor on safe concepts (percent).
    pub unlearn_safe_floor: f64,
    /// Extra training rounds allowed to meet the gates.
    pub unlearn_max_rounds: usize,
    /// Samples per gate measurement.
    pub unlearn_gate_samples: usize,

    /// Target concept index.
    pub target_concept: usize,

    /// Attack basis size.
    pub attack_k: usize,
    pub attack_steps: usize,
    pub attack_batch: usize,
    pub attack_lr: f64,
    pub attack_momentum: f64,
    /// Hidden width of the coefficient head.
    pub attack_hidden: usize,
    /// Feed vocabulary rows to the coefficient head normalized to unit norm.
    pub attack_normalize_inputs: bool,
    /// Gate: required ASR lift over the no-attack baseline (points).
    pub attack_margin: f64,

    pub cce_steps: usize,
    pub cce_lr: f64,
    pub cce_momentum: f64,

    /// Appended token positions for the discrete baseline.
    pub discrete_budget: usize,

    /// Requested blocked-column count; clamped to `dim - 1`.
    pub defense_n_block: usize,
    /// Optimizer steps per defense-basis column.
    pub defense_basis_steps: usize,
    /// Utility budgets for the defended model.
    pub defense_accuracy_budget: f64,
    pub defense_energy_budget: f64,
    /// Blocked-column counts for the utility sweep.
    pub sweep_block_counts: Vec<usize>,
    /// SubAttack columns relearned per sweep point.
    pub sweep_attack_k: usize,

    pub eval_prompts: usize,
    pub eval_seeds_per_prompt: usize,
    /// Oracle reject distance in units of sigma.
    pub eval_reject_sigma: f64,
    /// Samples per concept for utility proxies and gate measurements.
    pub eval_utility_samples: usize,

    /// Tokens reported per attack column in interpretability tables.
    pub interpret_top_m: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            dim: 128,
            n_tokens: 192,
            concepts: 4,
            sigma: 0.15,
            concept_scale: 2.0,
            kin_scale: 1.0,
            kin_per_concept: 6,
            anti_per_concept: 2,
            filler_scale: 0.4,
            generic_scale: 0.7,
            data_per_concept: 100,
            encoder_hidden: 48,
            encoder_pos_scale: 0.2,
            timesteps: 50,
            denoiser_hidden: 64,
            pretrain_steps: 4000,
            pretrain_batch: 64,
            pretrain_lr: 0.02,
            pretrain_momentum: 0.9,
            pretrain_cond_noise: 0.05,
            unlearn_steps: 1200,
            unlearn_batch: 32,
            unlearn_lr: 0.01,
            unlearn_momentum: 0.9,
            unlearn_retain_weight: 2.0,
            unlearn_asr_ceiling: 20.0,
            unlearn_safe_floor: 80.0,
            unlearn_max_rounds: 3,
            unlearn_gate_samples: 200,
            target_concept: 0,
            attack_k: 5,
            attack_steps: 1500,
            attack_batch: 16,
            attack_lr: 0.01,
            attack_momentum: 0.9,
            attack_hidden: 32,
            attack_normalize_inputs: false,
            attack_margin: 30.0,
            cce_steps: 800,
            cce_lr: 0.05,
            cce_momentum: 0.9,
            discrete_budget: 2,
            defense_n_block: 100,
            defense_basis_steps: 500,
            defense_accuracy_budget: 5.0,
            defense_energy_budget: 0.10,
            sweep_block_counts: vec![0, 5, 15, 50, 100],
            sweep_attack_k: 3,
            eval_prompts: 30,
            eval_seeds_per_prompt: 10,
            eval_reject_sigma: 4.0,
            eval_utility_samples: 200,
            interpret_top_m: 50,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl Config {
            /// Canonical sorted `key = value` rendering of the full config.
            pub fn canonical_text(&self) -> String {
                let mut map = BTreeMap::new();
                $(map.insert($key, render_value!(self, $field, $kind));)+
                let mut out = String::new();
                for (k, v) in map {
                    let _ = writeln!(out, "{k} = {v}");
                }
                out
            }

            /// Set one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { parse_value!(self, $field, $kind, key, value); Ok(()) })+
                    _ => Err(Error::BadConfig {
                        key: key.to_string(),
                        reason: "unknown key".into(),
                    }),
                }
            }
        }
    };
}

macro_rules! render_value {
    ($self:ident, $field:ident, usize) => {
        $self.$field.to_string()
    };
    ($self:ident, $field:ident, u64) => {
        $self.$field.to_string()
    };
    ($self:ident, $field:ident, f64) => {
        format!("{:?}", $self.$field)
    };
    ($self:ident, $field:ident, bool) => {
        $self.$field.to_string()
    };
    ($self:ident, $field:ident, usize_list) => {
        $self
            .$field
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
}

macro_rules! parse_value {
    ($self:ident, $field:ident, usize, $key:ident, $value:ident) => {
        $self.$field = $value.trim().parse::<usize>().map_err(|e| Error::BadConfig {
            key: $key.to_string(),
            reason: e.to_string(),
        })?
    };
    ($self:ident, $field:ident, u64, $key:ident, $value:ident) => {
        $self.$field = $value.trim().parse::<u64>().map_err(|e| Error::BadConfig {
            key: $key.to_string(),
            reason: e.to_string(),
        })?
    };
    ($self:ident, $field:ident, f64, $key:ident, $value:ident) => {
        $self.$field = $value.trim().parse::<f64>().map_err(|e| Error::BadConfig {
            key: $key.to_string(),
            reason: e.to_string(),
        })?
    };
    ($self:ident, $field:ident, bool, $key:ident, $value:ident) => {
        $self.$field = $value.trim().parse::<bool>().map_err(|e| Error::BadConfig {
            key: $key.to_string(),
            reason: e.to_string(),
        })?
    };
    ($self:ident, $field:ident, usize_list, $key:ident, $value:ident) => {
        $self.$field = $value
            .split(',')
            .map(|v| {
                v.trim().parse::<usize>().map_err(|e| Error::BadConfig {
                    key: $key.to_string(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
}

config_keys! {
    "seed" => seed: u64,
    "universe.dim" => dim: usize,
    "universe.tokens" => n_tokens: usize,
    "universe.concepts" => concepts: usize,
    "universe.sigma" => sigma: f64,
    "universe.concept_scale" => concept_scale: f64,
    "universe.kin_scale" => kin_scale: f64,
    "universe.kin_per_concept" => kin_per_concept: usize,
    "universe.anti_per_concept" => anti_per_concept: usize,
    "universe.filler_scale" => filler_scale: f64,
    "universe.generic_scale" => generic_scale: f64,
    "data.per_concept" => data_per_concept: usize,
    "encoder.hidden" => encoder_hidden: usize,
    "encoder.pos_scale" => encoder_pos_scale: f64,
    "diffusion.timesteps" => timesteps: usize,
    "denoiser.hidden" => denoiser_hidden: usize,
    "pretrain.steps" => pretrain_steps: usize,
    "pretrain.batch" => pretrain_batch: usize,
    "pretrain.lr" => pretrain_lr: f64,
    "pretrain.momentum" => pretrain_momentum: f64,
    "pretrain.cond_noise" => pretrain_cond_noise: f64,
    "unlearn.steps" => unlearn_steps: usize,
    "unlearn.batch" => unlearn_batch: usize,
    "unlearn.lr" => unlearn_lr: f64,
    "unlearn.momentum" => unlearn_momentum: f64,
    "unlearn.retain_weight" => unlearn_retain_weight: f64,
    "unlearn.asr_ceiling" => unlearn_asr_ceiling: f64,
    "unlearn.safe_floor" => unlearn_safe_floor: f64,
    "unlearn.max_rounds" => unlearn_max_rounds: usize,
    "unlearn.gate_samples" => unlearn_gate_samples: usize,
    "concept.target" => target_concept: usize,
    "attack.k" => attack_k: usize,
    "attack.steps" => attack_steps: usize,
    "attack.batch" => attack_batch: usize,
    "attack.lr" => attack_lr: f64,
    "attack.momentum" => attack_momentum: f64,
    "attack.hidden" => attack_hidden: usize,
    "attack.normalize_inputs" => attack_normalize_inputs: bool,
    "attack.margin" => attack_margin: f64,
    "cce.steps" => cce_steps: usize,
    "cce.lr" => cce_lr: f64,
    "cce.momentum" => cce_momentum: f64,
    "discrete.budget" => discrete_budget: usize,
    "defense.n_block" => defense_n_block: usize,
    "defense.basis_steps" => defense_basis_steps: usize,
    "defense.accuracy_budget" => defense_accuracy_budget: f64,
    "defense.energy_budget" => defense_energy_budget: f64,
    "sweep.block_counts" => sweep_block_counts: usize_list,
    "sweep.attack_k" => sweep_attack_k: usize,
    "eval.prompts" => eval_prompts: usize,
    "eval.seeds_per_prompt" => eval_seeds_per_prompt: usize,
    "eval.reject_sigma" => eval_reject_sigma: f64,
    "eval.utility_samples" => eval_utility_samples: usize,
    "interpret.top_m" => interpret_top_m: usize,
}

impl Config {
    /// Parse a config file's text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Config::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::BadConfig {
                key: format!("line {}", lineno + 1),
                reason: format!("expected `key = value`, got {raw:?}"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Basic cross-field validation.
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::BadConfig {
                key: "universe.dim".into(),
                reason: format!("must be >= 2, got {}", self.dim),
            });
        }
        if self.concepts < 2 {
            return Err(Error::BadConfig {
                key: "universe.concepts".into(),
                reason: format!("must be >= 2, got {}", self.concepts),
            });
        }
        if self.target_concept >= self.concepts {
            return Err(Error::BadConfig {
                key: "concept.target".into(),
                reason: format!(
                    "target {} out of range for {} concepts",
                    self.target_concept, self.concepts
                ),
            });
        }
        if self.n_tokens < self.concepts * (1 + self.kin_per_concept + self.anti_per_concept) + 8 {
            return Err(Error::BadConfig {
                key: "universe.tokens".into(),
                reason: "too few tokens for the concept families plus fillers".into(),
            });
        }
        if self.attack_k == 0 || self.attack_k > self.dim {
            return Err(Error::BadConfig {
                key: "attack.k".into(),
                reason: format!("must be in 1..=dim, got {}", self.attack_k),
            });
        }
        if self.sigma <= 0.0 {
            return Err(Error::BadConfig {
                key: "universe.sigma".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Blocked-column count actually used by the default defense:
    /// the configured count clamped to `dim - 1`.
    pub fn effective_n_block(&self) -> usize {
        self.defense_n_block.min(self.dim - 1)
    }

    /// Hex SHA-256 of the canonical config text (seed included).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short run-directory name: first 12 hash hex chars plus the seed.
    pub fn run_name(&self) -> String {
        format!("{}-s{}", &self.hash()[..12], self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn parse_round_trip() {
        let config = Config::default();
        let text = config.canonical_text();
        let parsed = Config::from_text(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\nseed = 9   # trailing comment\nattack.k = 3\n";
        let config = Config::from_text(text).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.attack_k, 3);
    }

    #[test]
    fn unknown_key_is_rejected() {
        match Config::from_text("no.such.key = 1") {
            Err(Error::BadConfig { key, .. }) => assert_eq!(key, "no.such.key"),
            other => panic!("expected BadConfig, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_is_rejected_with_key() {
        match Config::from_text("attack.k = banana") {
            Err(Error::BadConfig { key, .. }) => assert_eq!(key, "attack.k"),
            other => panic!("expected BadConfig, got {other:?}"),
        }
    }

    #[test]
    fn hash_changes_with_any_key() {
        let base = Config::default();
        let mut changed = base.clone();
        changed.set("seed", "2").unwrap();
        assert_ne!(base.hash(), changed.hash());
        let mut changed2 = base.clone();
        changed2.set("attack.lr", "0.02").unwrap();
        assert_ne!(base.hash(), changed2.hash());
    }

    #[test]
    fn effective_n_block_is_clamped() {
        let mut config = Config::default();
        config.dim = 16;
        assert_eq!(config.effective_n_block(), 15);
        config.dim = 128;
        assert_eq!(config.effective_n_block(), 100);
    }

    #[test]
    fn block_count_list_parses() {
        let config = Config::from_text("sweep.block_counts = 0, 10, 20").unwrap();
        assert_eq!(config.sweep_block_counts, vec![0, 10, 20]);
    }
}
