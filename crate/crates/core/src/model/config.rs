use std::collections::BTreeMap;

use crate::error::{MoceError, Result};
use crate::moce::{
    LayerConfig, RoutingMode, DEFAULT_ADAPTER_RANK, DEFAULT_EXPERTS_PER_GROUP, DEFAULT_TOP_K,
};
use crate::tensor::Activation;

pub const DEFAULT_MAX_SEQ_LEN: usize = 512;

/// Shape and routing hyperparameters of a [`MoceModel`](super::MoceModel).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the dense feed-forward blocks.
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rank: usize,
    pub n_groups: usize,
    pub n_experts: usize,
    pub k: usize,
    pub mode: RoutingMode,
    pub renormalize: bool,
    pub variant: bool,
    pub activation: Activation,
    pub output_scale: f64,
    pub freeze_attention: bool,
    /// Freezes token/position embeddings and the output projection.
    pub freeze_embeddings: bool,
    pub router_init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            rank: DEFAULT_ADAPTER_RANK,
            n_groups: 1,
            n_experts: DEFAULT_EXPERTS_PER_GROUP,
            k: DEFAULT_TOP_K,
            mode: RoutingMode::TopK,
            renormalize: false,
            variant: false,
            activation: Activation::Gelu,
            output_scale: 1.0,
            freeze_attention: true,
            freeze_embeddings: true,
            router_init_std: 0.02,
            seed: 0,
        }
    }
}

/// Keys accepted by [`ModelConfig::set`], in manifest order.
pub const MODEL_CONFIG_KEYS: &[&str] = &[
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "max_seq_len",
    "rank",
    "n_groups",
    "n_experts",
    "k",
    "mode",
    "renormalize",
    "variant",
    "activation",
    "output_scale",
    "freeze_attention",
    "freeze_embeddings",
    "router_init_std",
    "seed",
];

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| MoceError::config(format!("invalid value {value:?} for '{key}'")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MoceError::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MoceError::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.router_init_std.is_finite() && self.router_init_std >= 0.0) {
            return Err(MoceError::config(
                "router_init_std must be finite and non-negative",
            ));
        }
        self.layer_config().validate()
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            n_groups: self.n_groups,
            n_experts: self.n_experts,
            rank: self.rank,
            k: self.k,
            mode: self.mode,
            renormalize: self.renormalize,
            variant: self.variant,
            activation: self.activation,
            output_scale: self.output_scale,
        }
    }

    /// Updates one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, value)?,
            "rank" => self.rank = parse_value(key, value)?,
            "n_groups" => self.n_groups = parse_value(key, value)?,
            "n_experts" => self.n_experts = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "renormalize" => self.renormalize = parse_value(key, value)?,
            "variant" => self.variant = parse_value(key, value)?,
            "activation" => self.activation = value.trim().parse()?,
            "output_scale" => self.output_scale = parse_value(key, value)?,
            "freeze_attention" => self.freeze_attention = parse_value(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = parse_value(key, value)?,
            "router_init_std" => self.router_init_std = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(MoceError::config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "vocab_size" => self.vocab_size.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "rank" => self.rank.to_string(),
            "n_groups" => self.n_groups.to_string(),
            "n_experts" => self.n_experts.to_string(),
            "k" => self.k.to_string(),
            "mode" => self.mode.name().to_string(),
            "renormalize" => self.renormalize.to_string(),
            "variant" => self.variant.to_string(),
            "activation" => self.activation.name().to_string(),
            // Debug formatting of f64 round-trips exactly
            "output_scale" => format!("{:?}", self.output_scale),
            "freeze_attention" => self.freeze_attention.to_string(),
            "freeze_embeddings" => self.freeze_embeddings.to_string(),
            "router_init_std" => format!("{:?}", self.router_init_std),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        MODEL_CONFIG_KEYS
            .iter()
            .map(|k| (*k, self.get(k).expect("listed key")))
            .collect()
    }

    /// Builds a config from key/value pairs; every key must be known, missing keys keep defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let cfg = ModelConfig {
            mode: RoutingMode::Soft,
            output_scale: 0.1 + 0.2,
            variant: true,
            activation: Activation::Silu,
            seed: u64::MAX,
            ..ModelConfig::default()
        };
        let pairs: BTreeMap<String, String> = cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(ModelConfig::from_pairs(&pairs).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_heads() {
        let mut cfg = ModelConfig::default();
        assert!(matches!(cfg.set("d_modle", "8"), Err(MoceError::Config(_))));
        assert!(matches!(cfg.set("k", "two"), Err(MoceError::Config(_))));
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(MoceError::Config(_))));
    }
}
