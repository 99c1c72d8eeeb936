use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::embedding::DEFAULT_EMBED_DIM;
use crate::error::{MoceError, Result};
use crate::moce::{RoutingMode, DEFAULT_BALANCE_COEF};
use crate::model::{parse_value, ModelConfig, MODEL_CONFIG_KEYS};

/// Where sequence embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingSource {
    /// Built-in feature-hashing embedder.
    #[default]
    Toy,
    /// Precomputed vectors in an embedding file, one row per record in dataset order.
    File,
}

/// Which text of a record is embedded for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbedField {
    #[default]
    Instruction,
    InstructionResponse,
}

/// Flat run configuration. See [`RunConfig::parse`] for the file syntax.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub embedding_source: EmbeddingSource,
    pub embedding_file: Option<PathBuf>,
    pub embed_dim: usize,
    pub embed_field: EmbedField,
    /// Elbow search bound; exclusive with `groups`.
    pub k_max: Option<usize>,
    /// Fixed cluster and group count; exclusive with `k_max`.
    pub groups: Option<usize>,
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed number of optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lambda: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub base_pretrain_steps: usize,
    pub base_lr: f64,
    pub max_new_tokens: usize,
    /// Single expert group; clustering is skipped.
    pub no_clustering: bool,
    /// One expert per group, so no token-level choice remains.
    pub no_token_routing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            eval_data: None,
            out_dir: None,
            embedding_source: EmbeddingSource::Toy,
            embedding_file: None,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_field: EmbedField::Instruction,
            k_max: None,
            groups: None,
            model: ModelConfig::default(),
            lr: 2e-4,
            batch_size: 32,
            epochs: 1,
            steps: None,
            lambda: DEFAULT_BALANCE_COEF,
            clip_norm: 1.0,
            seed: 0,
            base_pretrain_steps: 0,
            base_lr: 1e-2,
            max_new_tokens: 32,
            no_clustering: false,
            no_token_routing: false,
        }
    }
}

/// Run-level keys; model keys other than `n_groups` and `seed` are accepted as well.
pub const RUN_KEYS: &[&str] = &[
    "train_data",
    "eval_data",
    "out_dir",
    "embedding_source",
    "embedding_file",
    "embed_dim",
    "embed_field",
    "k_max",
    "groups",
    "lr",
    "batch_size",
    "epochs",
    "steps",
    "lambda",
    "clip_norm",
    "seed",
    "base_pretrain_steps",
    "base_lr",
    "max_new_tokens",
    "no_clustering",
    "no_token_routing",
];

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
    /// Unknown and repeated keys are configuration errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MoceError::config(format!("line {}: expected 'key = value'", i + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(MoceError::config(format!(
                    "line {}: key '{k}' given twice",
                    i + 1
                )));
            }
            cfg.set(k, v.trim())
                .map_err(|e| MoceError::config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MoceError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_data" => self.train_data = optional(key, value)?,
            "eval_data" => self.eval_data = optional(key, value)?,
            "out_dir" => self.out_dir = optional(key, value)?,
            "embedding_source" => {
                self.embedding_source = match value {
                    "toy" => EmbeddingSource::Toy,
                    "file" => EmbeddingSource::File,
                    other => {
                        return Err(MoceError::config(format!(
                            "unknown embedding_source '{other}'"
                        )))
                    }
                }
            }
            "embedding_file" => self.embedding_file = optional(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "embed_field" => {
                self.embed_field = match value {
                    "instruction" => EmbedField::Instruction,
                    "instruction_response" => EmbedField::InstructionResponse,
                    other => {
                        return Err(MoceError::config(format!("unknown embed_field '{other}'")))
                    }
                }
            }
            "k_max" => self.k_max = optional(key, value)?,
            "groups" => self.groups = optional(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "steps" => self.steps = optional(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "seed" => {
                self.seed = parse_value(key, value)?;
                self.model.seed = self.seed;
            }
            "base_pretrain_steps" => self.base_pretrain_steps = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "max_new_tokens" => self.max_new_tokens = parse_value(key, value)?,
            "no_clustering" => self.no_clustering = parse_value(key, value)?,
            "no_token_routing" => self.no_token_routing = parse_value(key, value)?,
            "n_groups" => {
                return Err(MoceError::config(
                    "'n_groups' is derived; set 'groups' or 'k_max'",
                ))
            }
            k if MODEL_CONFIG_KEYS.contains(&k) => self.model.set(k, value)?,
            other => return Err(MoceError::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Checks field ranges and that the ablation switches agree with each other.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MoceError::config("batch_size must be positive"));
        }
        if self.steps.is_none() && self.epochs == 0 {
            return Err(MoceError::config(
                "epochs must be positive when steps is unset",
            ));
        }
        if self.embed_dim == 0 {
            return Err(MoceError::config("embed_dim must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("base_lr", self.base_lr),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MoceError::config(format!(
                    "{name} must be positive and finite"
                )));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(MoceError::config("lambda must be non-negative and finite"));
        }
        if self.embedding_source == EmbeddingSource::File && self.embedding_file.is_none() {
            return Err(MoceError::config(
                "embedding_source = file needs embedding_file",
            ));
        }
        if self.no_clustering {
            if self.k_max.is_some() || self.groups.is_some_and(|g| g != 1) {
                return Err(MoceError::config(
                    "no_clustering cannot be combined with k_max or groups > 1",
                ));
            }
        } else {
            match (self.k_max, self.groups) {
                (Some(_), Some(_)) => {
                    return Err(MoceError::config(
                        "set exactly one of k_max and groups, not both",
                    ))
                }
                (None, None) => {
                    return Err(MoceError::config("set exactly one of k_max and groups"))
                }
                (Some(k), None) if k < 3 => {
                    return Err(MoceError::config("k_max must be at least 3"))
                }
                (None, Some(0)) => return Err(MoceError::config("groups must be positive")),
                _ => {}
            }
        }
        if self.no_token_routing && self.model.n_experts != 1 && self.model.k > 1 {
            return Err(MoceError::config(
                "no_token_routing uses one expert per group; k must be 1",
            ));
        }
        let mut m = self.effective_model(self.groups.unwrap_or(1), self.model.vocab_size);
        m.vocab_size = m.vocab_size.max(1);
        m.validate()
    }

    /// Model configuration after applying the ablation switches, for `groups` groups.
    pub fn effective_model(&self, groups: usize, vocab_size: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = vocab_size;
        m.n_groups = if self.no_clustering { 1 } else { groups };
        m.seed = self.seed;
        if self.no_token_routing {
            m.n_experts = 1;
            m.k = 1;
        }
        if m.mode == RoutingMode::Soft {
            m.k = m.k.min(m.n_experts);
        }
        m
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let run = [
            ("train_data", show_path(&self.train_data)),
            ("eval_data", show_path(&self.eval_data)),
            ("out_dir", show_path(&self.out_dir)),
            (
                "embedding_source",
                match self.embedding_source {
                    EmbeddingSource::Toy => "toy".into(),
                    EmbeddingSource::File => "file".into(),
                },
            ),
            ("embedding_file", show_path(&self.embedding_file)),
            ("embed_dim", self.embed_dim.to_string()),
            (
                "embed_field",
                match self.embed_field {
                    EmbedField::Instruction => "instruction".into(),
                    EmbedField::InstructionResponse => "instruction_response".into(),
                },
            ),
            ("k_max", show(&self.k_max)),
            ("groups", show(&self.groups)),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps", show(&self.steps)),
            ("lambda", format!("{:?}", self.lambda)),
            ("clip_norm", format!("{:?}", self.clip_norm)),
            ("seed", self.seed.to_string()),
            ("base_pretrain_steps", self.base_pretrain_steps.to_string()),
            ("base_lr", format!("{:?}", self.base_lr)),
            ("max_new_tokens", self.max_new_tokens.to_string()),
            ("no_clustering", self.no_clustering.to_string()),
            ("no_token_routing", self.no_token_routing.to_string()),
        ];
        for (k, v) in run {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        for (k, v) in self.model.to_pairs() {
            if k != "n_groups" && k != "seed" {
                writeln!(out, "{k} = {v}").expect("write to string");
            }
        }
        out
    }
}

fn strip_prefix(e: &MoceError) -> String {
    match e {
        MoceError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_model_keys() {
        let cfg = RunConfig::parse(
            "# toy run\ngroups = 2\nd_model = 16 # narrow\nmode = soft\nseed = 7\nsteps = 300\n",
        )
        .unwrap();
        assert_eq!(cfg.groups, Some(2));
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.mode, RoutingMode::Soft);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.steps, Some(300));
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let e = RunConfig::parse("groups = 2\nlearning_rate = 0.1\n").unwrap_err();
        assert!(
            matches!(&e, MoceError::Config(m) if m.contains("line 2") && m.contains("learning_rate")),
            "{e}"
        );
        assert!(matches!(
            RunConfig::parse("groups = 2\ngroups = 3\n"),
            Err(MoceError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("groups = 2\nn_groups = 3\n"),
            Err(MoceError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("groups 2\n"),
            Err(MoceError::Config(_))
        ));
    }

    #[test]
    fn exactly_one_of_k_max_and_groups() {
        assert!(RunConfig::parse("lr = 0.1\n").is_err());
        assert!(RunConfig::parse("k_max = 6\ngroups = 2\n").is_err());
        assert!(RunConfig::parse("k_max = 2\n").is_err());
        assert!(RunConfig::parse("k_max = 6\n").is_ok());
        assert!(RunConfig::parse("no_clustering = true\n").is_ok());
        assert!(RunConfig::parse("no_clustering = true\ngroups = 3\n").is_err());
    }

    #[test]
    fn ablation_switches_shape_the_model() {
        let cfg = RunConfig::parse("groups = 3\nno_token_routing = true\nk = 1\n").unwrap();
        let m = cfg.effective_model(3, 20);
        assert_eq!((m.n_groups, m.n_experts, m.k, m.vocab_size), (3, 1, 1, 20));
        assert!(RunConfig::parse("groups = 3\nno_token_routing = true\nk = 2\n").is_err());
        let cfg = RunConfig::parse("no_clustering = true\n").unwrap();
        assert_eq!(cfg.effective_model(4, 20).n_groups, 1);
    }

    #[test]
    fn text_form_round_trips() {
        let mut cfg =
            RunConfig::parse("groups = 2\nlambda = 0.3\nsteps = 12\nvariant = true\n").unwrap();
        cfg.train_data = Some("data/train.jsonl".into());
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}
