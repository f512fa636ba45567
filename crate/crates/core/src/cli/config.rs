//! Run configuration: defaults, then a TOML/JSON file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ntm::{NtmConfig, ThetaMode};
use crate::summarizer::{GateMode, TransformerConfig};
use crate::training::{TopicPath, TrainConfig};
use crate::{Error, Result};

pub const SEED_ENV: &str = "TOPICFLOW_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_count: u64,
    pub n_max: usize,
    pub m_max: usize,
    /// 0 keeps every content word.
    pub bow_max_size: usize,
    /// Stopword file; empty selects the bundled English list.
    pub stopwords: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            n_max: 256,
            m_max: 64,
            bow_max_size: 0,
            stopwords: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtmSection {
    pub hidden: usize,
    pub topics: usize,
    pub flow_length: usize,
    /// 0 means equal to `topics`.
    pub latent_dim: usize,
}

impl Default for NtmSection {
    fn default() -> Self {
        Self {
            hidden: 256,
            topics: 100,
            flow_length: 4,
            latent_dim: 0,
        }
    }
}

impl NtmSection {
    pub fn config(&self, vocab_size: usize) -> NtmConfig {
        let mut c = NtmConfig::new(vocab_size, self.hidden, self.topics, self.flow_length);
        if self.latent_dim > 0 {
            c.latent_dim = self.latent_dim;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Feed the topic mixture to the summarizer gates.
    pub topic_path: bool,
    /// `"learned"` or a constant gate value in [0, 1].
    pub gate: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            topic_path: true,
            gate: "learned".into(),
        }
    }
}

impl ModelSection {
    pub fn topic_path(&self) -> Result<TopicPath> {
        if !self.topic_path {
            return Ok(TopicPath::Off);
        }
        if self.gate == "learned" {
            return Ok(TopicPath::Gated(GateMode::Learned));
        }
        match self.gate.parse::<f64>() {
            Ok(v) if (0.0..=1.0).contains(&v) => Ok(TopicPath::Gated(GateMode::Forced(v))),
            _ => Err(Error::Config(format!(
                "model.gate must be \"learned\" or a number in [0, 1], got {:?}",
                self.gate
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beam: usize,
    pub length_penalty: f64,
    pub theta_mode: ThetaMode,
    pub window: usize,
    pub top_words: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            beam: 8,
            length_penalty: 1.0,
            theta_mode: ThetaMode::Mean,
            window: crate::eval::DEFAULT_WINDOW,
            top_words: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Holds train.jsonl, valid.jsonl and test.jsonl.
    pub data_dir: String,
    /// Vocabularies, checkpoints, metrics and summaries.
    pub out_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub ntm: NtmSection,
    pub summarizer: TransformerConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// A config field exposed as a flag.
pub struct Field {
    pub section: &'static str,
    pub key: &'static str,
    pub flag: &'static str,
    pub help: &'static str,
}

macro_rules! fields {
    ($( $section:literal . $key:literal => $flag:literal : $help:literal ),* $(,)?) => {
        pub const FIELDS: &[Field] = &[$(Field { section: $section, key: $key, flag: $flag, help: $help }),*];
    };
}

fields! {
    "corpus"."min_count" => "min-count": "Minimum corpus frequency for the token vocabulary",
    "corpus"."n_max" => "n-max": "Maximum source length in tokens, CLS included",
    "corpus"."m_max" => "m-max": "Maximum target length in tokens, BOS and EOS included",
    "corpus"."bow_max_size" => "bow-max-size": "Cap on the BoW vocabulary size (0 = unlimited)",
    "corpus"."stopwords" => "stopwords": "Stopword file, one token per line (empty = bundled list)",
    "ntm"."hidden" => "ntm-hidden": "Topic-model encoder width",
    "ntm"."topics" => "topics": "Number of topics",
    "ntm"."flow_length" => "flow-length": "Number of planar flow layers",
    "ntm"."latent_dim" => "latent-dim": "Latent dimension (0 = number of topics)",
    "summarizer"."layers_enc" => "layers-enc": "Encoder layers",
    "summarizer"."layers_dec" => "layers-dec": "Decoder layers",
    "summarizer"."model_dim" => "model-dim": "Transformer width",
    "summarizer"."heads" => "heads": "Attention heads",
    "summarizer"."ffn_dim" => "ffn-dim": "Feed-forward width",
    "summarizer"."max_positions" => "max-positions": "Longest supported sequence",
    "summarizer"."dropout" => "dropout": "Dropout rate during training",
    "summarizer"."tie_embeddings" => "tie-embeddings": "Share input and output embeddings",
    "model"."topic_path" => "topic-path": "Feed the topic mixture to the gates (false = topic-free baseline)",
    "model"."gate" => "gate": "\"learned\" or a constant gate value in [0, 1]",
    "training"."lambda_ntm" => "lambda-ntm": "Weight of the topic-model loss in joint training",
    "training"."lr_ntm" => "lr-ntm": "Topic-model pretraining learning rate",
    "training"."lr_joint" => "lr-joint": "Joint training learning rate",
    "training"."batch_size" => "batch-size": "Examples per step",
    "training"."pretrain_epochs" => "pretrain-epochs": "Topic-model pretraining epochs",
    "training"."max_steps" => "max-steps": "Joint training steps",
    "training"."eval_interval" => "eval-interval": "Steps between validation passes",
    "training"."seed" => "seed": "Seed for every random draw (falls back to TOPICFLOW_SEED)",
    "training"."checkpoint_top_k" => "checkpoint-top-k": "Checkpoints retained by validation loss",
    "training"."clip_norm" => "clip-norm": "Global gradient-norm bound (0 = off)",
    "training"."warmup_steps" => "warmup-steps": "Linear learning-rate warmup steps",
    "training"."ntm_optimizer" => "ntm-optimizer": "Pretraining optimizer: adam or adadelta",
    "training"."freeze_ntm" => "freeze-ntm": "Keep topic-model parameters fixed during joint training",
    "training"."eval_rouge" => "eval-rouge": "Decode the validation set at every evaluation",
    "training"."eval_beam" => "eval-beam": "Beam width used for validation decoding",
    "eval"."beam" => "beam": "Beam width for summarize",
    "eval"."length_penalty" => "length-penalty": "Length-normalization exponent",
    "eval"."theta_mode" => "theta-mode": "Topic mixture at inference: mean or sample",
    "eval"."window" => "window": "Sliding window for C_V coherence",
    "eval"."top_words" => "top-words": "Words per topic used for coherence",
    "paths"."data_dir" => "data-dir": "Directory with train/valid/test JSONL files",
    "paths"."out_dir" => "out-dir": "Directory for vocabularies, checkpoints and reports",
}

/// Field defaults as JSON.
pub fn defaults() -> Value {
    serde_json::to_value(RunConfig::default()).expect("serializable config")
}

pub fn default_text(field: &Field) -> String {
    match &defaults()[field.section][field.key] {
        Value::String(s) if s.is_empty() => "\"\"".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    } else {
        let v: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    }
}

/// Parses a flag value into the JSON type of the field's default.
pub fn flag_value(field: &Field, raw: &str) -> std::result::Result<Value, String> {
    let bad = |what: &str| format!("--{}: expected {what}, got {raw:?}", field.flag);
    match &defaults()[field.section][field.key] {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("true or false")),
        Value::Number(n) if n.is_f64() => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| bad("a number")),
        Value::Number(_) => raw
            .parse::<u64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| bad("a non-negative integer")),
        _ => Ok(Value::String(raw.to_string())),
    }
}

/// Defaults, overlaid by the file, then the seed fallback, then flags.
pub fn resolve(file: Option<Value>, flags: &[(&Field, Value)], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut v = defaults();
    let file_has_seed = file
        .as_ref()
        .is_some_and(|f| f.get("training").and_then(|t| t.get("seed")).is_some());
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::Config("config file must be a table".into()));
        }
        merge(&mut v, f);
    }
    if let (false, Some(s)) = (file_has_seed, env_seed) {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an integer, got {s:?}")))?;
        v["training"]["seed"] = Value::from(seed);
    }
    for (field, value) in flags {
        let section = v
            .as_object_mut()
            .expect("object")
            .entry(field.section)
            .or_insert_with(|| Value::Object(Map::new()));
        section[field.key] = value.clone();
    }
    let config: RunConfig =
        serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.summarizer.validate()?;
        self.model.topic_path()?;
        let c = &self.corpus;
        if c.n_max < 2 || c.m_max < 3 {
            return Err(Error::Config("corpus.n_max must be >= 2 and corpus.m_max >= 3".into()));
        }
        if c.n_max > self.summarizer.max_positions || c.m_max > self.summarizer.max_positions {
            return Err(Error::Config(format!(
                "corpus.n_max ({}) and corpus.m_max ({}) must not exceed summarizer.max_positions ({})",
                c.n_max, c.m_max, self.summarizer.max_positions
            )));
        }
        if self.ntm.topics == 0 || self.ntm.hidden == 0 {
            return Err(Error::Config("ntm.topics and ntm.hidden must be >= 1".into()));
        }
        if self.eval.beam == 0 || self.eval.top_words == 0 || self.eval.window == 0 {
            return Err(Error::Config("eval.beam, eval.top_words and eval.window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(flag: &str) -> &'static Field {
        FIELDS.iter().find(|f| f.flag == flag).unwrap()
    }

    #[test]
    fn every_field_is_a_config_key() {
        let d = defaults();
        for f in FIELDS {
            assert!(d[f.section].get(f.key).is_some(), "{}.{}", f.section, f.key);
        }
        let total: usize = d.as_object().unwrap().values().map(|s| s.as_object().unwrap().len()).sum();
        assert_eq!(total, FIELDS.len());
        let mut flags: Vec<&str> = FIELDS.iter().map(|f| f.flag).collect();
        flags.sort();
        flags.dedup();
        assert_eq!(flags.len(), FIELDS.len());
    }

    #[test]
    fn precedence_is_flags_then_file_then_defaults() {
        let file = serde_json::json!({"training": {"lambda_ntm": 0.5, "max_steps": 10}});
        let flags = [(field("max-steps"), Value::from(20u64))];
        let c = resolve(Some(file), &flags, None).unwrap();
        assert_eq!(c.training.lambda_ntm, 0.5);
        assert_eq!(c.training.max_steps, 20);
        assert_eq!(c.training.batch_size, 8);
        assert_eq!(resolve(None, &[], None).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().training.lambda_ntm, 0.75);
    }

    #[test]
    fn env_seed_is_only_a_fallback() {
        assert_eq!(resolve(None, &[], Some("9")).unwrap().training.seed, 9);
        let file = serde_json::json!({"training": {"seed": 3}});
        assert_eq!(resolve(Some(file), &[], Some("9")).unwrap().training.seed, 3);
        let flags = [(field("seed"), Value::from(5u64))];
        assert_eq!(resolve(None, &flags, Some("9")).unwrap().training.seed, 5);
        assert!(resolve(None, &[], Some("x")).is_err());
    }

    #[test]
    fn flag_values_follow_default_types() {
        assert_eq!(flag_value(field("lambda-ntm"), "0.5").unwrap(), serde_json::json!(0.5));
        assert_eq!(flag_value(field("freeze-ntm"), "true").unwrap(), Value::Bool(true));
        assert!(flag_value(field("batch-size"), "1.5").is_err());
        assert_eq!(flag_value(field("gate"), "0").unwrap(), Value::from("0"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(resolve(Some(serde_json::json!({"training": {"bogus": 1}})), &[], None).is_err());
        assert!(resolve(Some(serde_json::json!({"bogus": {}})), &[], None).is_err());
        assert!(resolve(Some(serde_json::json!({"model": {"gate": "2"}})), &[], None).is_err());
        assert!(resolve(Some(serde_json::json!({"corpus": {"n_max": 1000}})), &[], None).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(resolve(Some(read_file(&p).unwrap()), &[], None).unwrap(), c);
    }
}
