//! Configuration types for models, training, datasets, and ablation runs.
//!
//! A run config file is a single document with `dataset` / `model` / `train`
//! / `ablation` sections. Unknown keys are rejected everywhere so typos fail
//! loudly, and every run logs the resolved config plus its hash.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

fn default_mlp_head() -> Vec<usize> {
    vec![256, 128, 1]
}

fn default_rank() -> usize {
    8
}

fn default_k_pool() -> usize {
    2
}

fn default_cat_vocab() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionMechanism {
    #[default]
    None,
    Global,
    AbsEmb,
    QuerySpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct Switches {
    #[serde(default)]
    pub seq_pooling_tokens: bool,
    #[serde(default)]
    pub ns_tokens_in_boosting: bool,
    #[serde(default)]
    pub per_query_ffn: bool,
}

/// How the LENS condition vector is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    Auto,
    Item,
    ItemSeq,
}

/// Resolved condition source (after the density rule has been applied).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    Item,
    ItemSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub tcqg: bool,
    #[serde(default)]
    pub tcpb: bool,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub condition_source: ConditionMode,
}

impl Default for LensConfig {
    fn default() -> Self {
        LensConfig {
            enabled: false,
            tcqg: true,
            tcpb: true,
            rank: default_rank(),
            condition_source: ConditionMode::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub q: usize,
    pub d: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub l_max: usize,
    #[serde(default = "default_mlp_head")]
    pub mlp_head: Vec<usize>,
    #[serde(default)]
    pub switches: Switches,
    #[serde(default)]
    pub position_mechanism: PositionMechanism,
    #[serde(default)]
    pub lens: LensConfig,
    /// Number of real items; the table reserves one extra row for padding id 0.
    #[serde(default)]
    pub item_vocab: usize,
    #[serde(default)]
    pub n_cat_fields: usize,
    #[serde(default = "default_cat_vocab")]
    pub cat_vocab: usize,
    #[serde(default)]
    pub n_dense_fields: usize,
    #[serde(default = "default_k_pool")]
    pub k_pool: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Width of the full-side feature vector: target D + per-field D + seq mean D.
    pub fn fullside_dim(&self) -> usize {
        self.d + self.ns_token_count() * self.d + self.d
    }

    /// Non-sequential feature tokens: one per categorical field plus one for
    /// the projected dense block when dense fields exist.
    pub fn ns_token_count(&self) -> usize {
        self.n_cat_fields + usize::from(self.n_dense_fields > 0)
    }

    /// Query slots flowing through the decoder (latent queries + pooled tokens).
    pub fn q_total(&self) -> usize {
        self.q + if self.switches.seq_pooling_tokens { self.k_pool } else { 0 }
    }

    pub fn condition_dim(&self, source: ConditionSource) -> usize {
        match source {
            ConditionSource::Item => self.d,
            ConditionSource::ItemSeq => 2 * self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.d == 0 || self.n_layers == 0 || self.heads == 0 || self.l_max == 0 {
            return Err(CoreError::InvalidConfig(
                "q, d, n_layers, heads, l_max must all be >= 1".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "d = {} not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.mlp_head.last() != Some(&1) {
            return Err(CoreError::InvalidConfig(format!(
                "mlp_head must end in 1, got {:?}",
                self.mlp_head
            )));
        }
        if self.lens.enabled {
            if self.position_mechanism != PositionMechanism::QuerySpecific {
                return Err(CoreError::InvalidConfig(
                    "lens.enabled requires position_mechanism = query_specific".into(),
                ));
            }
            if self.lens.tcpb && self.lens.rank == 0 {
                return Err(CoreError::InvalidConfig("lens.rank must be >= 1 when tcpb is on".into()));
            }
        }
        if self.item_vocab == 0 {
            return Err(CoreError::InvalidConfig(
                "item_vocab not set (provide it or resolve from a dataset manifest)".into(),
            ));
        }
        Ok(())
    }
}

/// Target-attention baseline configuration. Shares the embedding layout of
/// the latent-query models so comparisons use identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinConfig {
    pub d: usize,
    pub l_max: usize,
    #[serde(default = "default_attn_mlp")]
    pub attn_mlp: Vec<usize>,
    #[serde(default = "default_mlp_head")]
    pub mlp_head: Vec<usize>,
    #[serde(default = "default_true")]
    pub full_side: bool,
    #[serde(default)]
    pub item_vocab: usize,
    #[serde(default)]
    pub n_cat_fields: usize,
    #[serde(default = "default_cat_vocab")]
    pub cat_vocab: usize,
    #[serde(default)]
    pub n_dense_fields: usize,
}

fn default_attn_mlp() -> Vec<usize> {
    vec![32, 1]
}

fn default_true() -> bool {
    true
}

impl DinConfig {
    pub fn from_model(m: &ModelConfig, full_side: bool) -> Self {
        DinConfig {
            d: m.d,
            l_max: m.l_max,
            attn_mlp: default_attn_mlp(),
            mlp_head: m.mlp_head.clone(),
            full_side,
            item_vocab: m.item_vocab,
            n_cat_fields: m.n_cat_fields,
            cat_vocab: m.cat_vocab,
            n_dense_fields: m.n_dense_fields,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.l_max == 0 || self.item_vocab == 0 {
            return Err(CoreError::InvalidConfig("d, l_max, item_vocab must be >= 1".into()));
        }
        if self.attn_mlp.last() != Some(&1) || self.mlp_head.last() != Some(&1) {
            return Err(CoreError::InvalidConfig("attention and head MLPs must end in 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Evaluate every N steps in addition to end-of-training; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    2
}
fn default_seed() -> u64 {
    42
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: default_seed(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryProtocol {
    AllExposure,
    ClickOnly,
    #[default]
    TypedExposure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSignal {
    #[serde(default)]
    pub recency_weight: f64,
    #[serde(default)]
    pub target_match_weight: f64,
    #[serde(default = "default_profiles")]
    pub position_profile_count: usize,
    #[serde(default)]
    pub metadata_weight: f64,
}

fn default_profiles() -> usize {
    4
}

impl Default for PlantedSignal {
    fn default() -> Self {
        PlantedSignal {
            recency_weight: 0.0,
            target_match_weight: 0.0,
            position_profile_count: default_profiles(),
            metadata_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub n_samples: usize,
    pub l_max: usize,
    #[serde(default = "default_n_fields")]
    pub n_nonseq_fields: usize,
    pub target_samples_per_item: f64,
    #[serde(default = "default_pos_rate")]
    pub positive_rate: f64,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(default)]
    pub planted_signal: PlantedSignal,
    #[serde(default)]
    pub history_protocol: HistoryProtocol,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_n_fields() -> usize {
    2
}
fn default_pos_rate() -> f64 {
    0.1
}
fn default_zipf() -> f64 {
    1.1
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_users == 0 || self.n_samples == 0 || self.l_max == 0 {
            return Err(CoreError::InvalidConfig(
                "n_items, n_users, n_samples, l_max must all be >= 1".into(),
            ));
        }
        if self.target_samples_per_item <= 0.0 {
            return Err(CoreError::InvalidConfig("target_samples_per_item must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.positive_rate) || self.positive_rate <= 0.0 {
            return Err(CoreError::InvalidConfig("positive_rate must be in (0, 1)".into()));
        }
        if self.planted_signal.position_profile_count == 0 {
            return Err(CoreError::InvalidConfig("position_profile_count must be >= 1".into()));
        }
        let realised = self.n_samples as f64 / self.n_items as f64;
        let target = self.target_samples_per_item;
        if (realised - target).abs() / target > 0.15 {
            return Err(CoreError::InfeasibleDensity { realised, target });
        }
        Ok(())
    }

    /// Vocabulary-level density proxy (train samples / item vocabulary).
    pub fn samples_per_item(&self) -> f64 {
        self.n_samples as f64 / self.n_items as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_parts")]
    pub parts: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_parts() -> Vec<String> {
    vec!["I".into(), "II".into(), "III".into(), "IV".into(), "V".into()]
}

fn default_seeds() -> Vec<u64> {
    vec![42, 123, 456]
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { parts: default_parts(), seeds: default_seeds() }
    }
}

/// One structured config document per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    /// Load a previously generated dataset instead of generating from `dataset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

impl RunConfig {
    /// Canonical 12-hex-digit hash of the resolved config.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&canonical);
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}
