//! Run configuration: flat `key = value` lines, `#` starts a comment.
//!
//! Every key has a default; unknown keys are rejected. The echoed form lists
//! all keys with their effective values and is what the run hash covers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dgtl::DgtlConfig;
use crate::diffattn::AttentionKind;
use crate::model::{ModelConfig, TrainConfig};
use crate::optim::AdamConfig;
use crate::plda::MaxBlockSource;
use crate::scenes::SceneConfig;

/// `(key, default, description)`
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "master seed for parameters, batching and scene sampling",
    ),
    ("model.d_model", "32", "feature width shared by all stages"),
    ("model.n_sem", "16", "coarsest visual token count"),
    (
        "model.group_k",
        "8",
        "neighbours pooled per token by the visual encoder",
    ),
    ("model.max_tokens", "16", "positional table length"),
    (
        "model.decoder_layers",
        "1",
        "residual MLP layers on the visual features before the heads",
    ),
    (
        "attention.kind",
        "diff",
        "diff or standard, applied in every attention block",
    ),
    (
        "plda.enabled",
        "true",
        "coarse cross-modal alignment; off feeds encoder features straight through",
    ),
    ("plda.n_heads", "2", "differential heads"),
    (
        "plda.head_ln",
        "true",
        "per-head layer norm after the differential combination",
    ),
    ("plda.max_block_source", "kv2t", "fv4, kt2v, ft or kv2t"),
    (
        "clda.enabled",
        "true",
        "fine alignment; off uses one standard cross-attention block",
    ),
    ("clda.n_heads", "2", "differential heads"),
    ("clda.n_clust", "8", "local clusters"),
    ("clda.k_graph", "4", "cluster graph neighbours"),
    (
        "clda.fps_random_start",
        "false",
        "per-scene random first FPS index instead of 0",
    ),
    (
        "loss.dgtl_enabled",
        "true",
        "learned weights, conflict penalty and geometry term; off is a plain sum",
    ),
    ("loss.tau", "0.5", "cosine threshold of the conflict hinge"),
    (
        "loss.rho",
        "1.0",
        "weight of every detection/segmentation pair",
    ),
    (
        "loss.lambda_floor",
        "0.1",
        "lower bound of each task weight",
    ),
    (
        "loss.t_warm_frac",
        "0.2",
        "geometry warm-up length as a fraction of steps",
    ),
    (
        "loss.t_decay_frac",
        "1.0",
        "penalty decay length as a fraction of steps",
    ),
    ("loss.eta_min", "0.0", "penalty scale floor"),
    ("loss.mask_k", "20", "sharpness of the soft box-to-mask map"),
    ("lr.encoder", "0.002", "Adam rate for encoder parameters"),
    ("lr.rest", "0.002", "Adam rate for everything else"),
    (
        "lr.weights",
        "0.001",
        "Adam rate for the task-weight vector",
    ),
    ("train.steps", "2000", "optimizer steps"),
    ("train.batch", "4", "samples per step"),
    ("train.log_every", "1", "metrics line interval"),
    ("scenes.n_train", "32", "training scenes"),
    ("scenes.n_eval", "32", "held-out scenes"),
    ("scenes.per_scene", "1", "expressions per scene"),
    ("scenes.n_points", "256", "points per scene"),
    ("scenes.n_objects", "4", "objects per scene"),
    (
        "scenes.n_distractors",
        "1",
        "same-class distractors per scene",
    ),
    ("gradcheck.tol", "0.0001", "max relative error"),
    ("gradcheck.step", "0.00001", "central-difference step"),
    ("gradcheck.seeds", "20", "random configurations per check"),
    (
        "gradcheck.max_coords",
        "6",
        "coordinates sampled per parameter tensor",
    ),
    (
        "filter.llm",
        "false",
        "consult the LLM backend on rule-negative texts",
    ),
    ("filter.timeout_ms", "10000", "per-request timeout"),
    ("filter.retries", "3", "attempts per request"),
    (
        "trace.dump",
        "false",
        "write attention maps and lambda after evaluation",
    ),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(k, _, _)| *k)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            c.set(k.trim(), v.trim().trim_matches('"'))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; the value is checked by [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = known(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[known(key).unwrap_or_else(|| panic!("unregistered key {key}"))]
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let v = self.raw(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").expect("validated")
    }

    /// Parses every key and builds every section once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, _, _) in KEYS {
            if k.ends_with("enabled")
                || matches!(
                    *k,
                    "plda.head_ln" | "clda.fps_random_start" | "filter.llm" | "trace.dump"
                )
            {
                self.get::<bool>(k)?;
            }
        }
        let m = self.try_model()?;
        m.validate().map_err(ConfigError::Invalid)?;
        self.try_train()?;
        self.try_scene()?;
        self.get::<f64>("gradcheck.tol")?;
        self.get::<f64>("gradcheck.step")?;
        self.get::<usize>("gradcheck.seeds")?;
        self.get::<usize>("gradcheck.max_coords")?;
        self.get::<u64>("filter.timeout_ms")?;
        self.get::<u32>("filter.retries")?;
        self.get::<u64>("seed")?;
        Ok(())
    }

    fn try_model(&self) -> Result<ModelConfig, ConfigError> {
        Ok(ModelConfig {
            d_model: self.get("model.d_model")?,
            n_sem: self.get("model.n_sem")?,
            group_k: self.get("model.group_k")?,
            max_tokens: self.get("model.max_tokens")?,
            decoder_layers: self.get("model.decoder_layers")?,
            attention: self.get::<AttentionKind>("attention.kind")?,
            plda_enabled: self.get("plda.enabled")?,
            plda_heads: self.get("plda.n_heads")?,
            head_ln: self.get("plda.head_ln")?,
            max_block_source: self.get::<MaxBlockSource>("plda.max_block_source")?,
            clda_enabled: self.get("clda.enabled")?,
            clda_heads: self.get("clda.n_heads")?,
            n_clust: self.get("clda.n_clust")?,
            k_graph: self.get("clda.k_graph")?,
            fps_random_start: self.get("clda.fps_random_start")?,
            n_points: self.get("scenes.n_points")?,
            dgtl_enabled: self.get("loss.dgtl_enabled")?,
        })
    }

    fn try_train(&self) -> Result<TrainConfig, ConfigError> {
        let t = TrainConfig {
            steps: self.get("train.steps")?,
            batch: self.get("train.batch")?,
            log_every: self.get("train.log_every")?,
            adam: AdamConfig {
                lr_encoder: self.get("lr.encoder")?,
                lr_rest: self.get("lr.rest")?,
                ..AdamConfig::default()
            },
            lr_weights: self.get("lr.weights")?,
            dgtl: DgtlConfig {
                tau: self.get("loss.tau")?,
                rho: self.get("loss.rho")?,
                lambda_floor: self.get("loss.lambda_floor")?,
                t_warm_frac: self.get("loss.t_warm_frac")?,
                t_decay_frac: self.get("loss.t_decay_frac")?,
                eta_min: self.get("loss.eta_min")?,
                mask_k: self.get("loss.mask_k")?,
            },
            seed: self.get("seed")?,
        };
        if t.batch == 0 || t.log_every == 0 {
            return Err(ConfigError::Invalid(
                "train.batch and train.log_every must be positive".into(),
            ));
        }
        Ok(t)
    }

    fn try_scene(&self) -> Result<SceneConfig, ConfigError> {
        Ok(SceneConfig {
            n_points: self.get("scenes.n_points")?,
            n_objects: self.get("scenes.n_objects")?,
            n_distractors: self.get("scenes.n_distractors")?,
            ..SceneConfig::default()
        })
    }

    pub fn model(&self) -> ModelConfig {
        self.try_model().expect("validated")
    }

    pub fn train(&self) -> TrainConfig {
        self.try_train().expect("validated")
    }

    pub fn scene(&self) -> SceneConfig {
        self.try_scene().expect("validated")
    }

    /// All keys in sorted order, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Commented listing of every key with its default.
    pub fn documented_defaults() -> String {
        let mut s = String::new();
        for (k, d, help) in KEYS {
            let _ = writeln!(s, "# {help}\n{k} = {d}\n");
        }
        s
    }

    /// First 12 hex digits of the SHA-256 of [`echo`](Self::echo).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        hex::encode(digest)[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_echo() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
        assert_eq!(
            RunConfig::parse(&RunConfig::documented_defaults()).unwrap(),
            c
        );
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::parse(
            "# header\nplda.n_heads = 4   # more heads\n\nattention.kind=standard\n",
        )
        .unwrap();
        assert_eq!(c.model().plda_heads, 4);
        assert_eq!(c.model().attention, AttentionKind::Standard);
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert_eq!(c.hash().len(), 12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            RunConfig::parse("plda.heads = 2"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("plda.n_heads"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            RunConfig::parse("loss.tau = half"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("plda.enabled = maybe"),
            Err(ConfigError::BadValue { .. })
        ));
        // 32 is not divisible into 2 * 3 heads
        assert!(matches!(
            RunConfig::parse("plda.n_heads = 3"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
