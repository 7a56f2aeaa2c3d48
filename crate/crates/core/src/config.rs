//! Run configuration: one JSON document covering geometry, tokenizer, LM,
//! stages, reward, data and optimizer. Unknown keys are rejected and every
//! error names the JSON pointer of the offending value.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{CorpusConfig, Task};
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::model::ModelConfig;
use crate::numerics::AdamWConfig;
use crate::rewards::RewardConfig;
use crate::tokenizer::{Pooling, TokenizerConfig};
use crate::training::StageConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub n_samples: usize,
    pub k_neighbors: usize,
    pub fps_seed: Option<u64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_samples: 512,
            k_neighbors: 81,
            fps_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub codebook_size: usize,
    pub d_geo: usize,
    pub d_llm: usize,
    pub in_dim: usize,
    pub beta: f64,
    pub lambda: f64,
    pub pooling: Pooling,
    pub continuous: bool,
    pub codebook_from_ntp: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            codebook_size: 8192,
            d_geo: 64,
            d_llm: 128,
            in_dim: 6,
            beta: 0.25,
            lambda: 0.5,
            pooling: Pooling::Max,
            continuous: false,
            codebook_from_ntp: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    pub resolutions: Vec<usize>,
    /// Temperature draws per prompt when estimating the policy's reward.
    pub reward_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_new_tokens: 16,
            resolutions: vec![256, 1024, 4096],
            reward_samples: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub tokenizer: TokenizerSection,
    pub lm: LmConfig,
    pub stages: Vec<StageConfig>,
    pub reward: RewardConfig,
    pub data: CorpusConfig,
    pub optimizer: AdamWConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    /// Full-scale hyperparameters with desk-scale widths and corpus sizes.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            geometry: GeometryConfig::default(),
            tokenizer: TokenizerSection::default(),
            // room for 512 point tokens plus text
            lm: LmConfig {
                max_ctx: 576,
                ..Default::default()
            },
            stages: (1..=3).map(StageConfig::full).collect(),
            reward: RewardConfig::default(),
            data: CorpusConfig::default(),
            optimizer: AdamWConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["full", "desk", "tiny"];

/// Convert a `serde_path_to_error` path to a JSON pointer.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

fn cfg_err(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Settings used for the end-to-end acceptance runs: 36-class corpus,
    /// 512-point clouds, 32 centers of 8 neighbours, 256 codes, a 4-layer
    /// 128-wide LM.
    pub fn desk() -> Self {
        let stage = |stage: u8, epochs: usize, batch_size: usize, lr: f64| StageConfig {
            epochs,
            batch_size,
            lr,
            ..StageConfig::full(stage)
        };
        RunConfig {
            seed: 0,
            geometry: GeometryConfig {
                n_samples: 32,
                k_neighbors: 8,
                fps_seed: None,
            },
            tokenizer: TokenizerSection {
                codebook_size: 256,
                ..Default::default()
            },
            lm: LmConfig {
                d_model: 128,
                n_layers: 4,
                n_heads: 4,
                max_ctx: 64,
                d_mlp: 256,
            },
            stages: vec![
                StageConfig {
                    dead_code_reset: Some(5),
                    ..stage(1, 2, 32, 1e-3)
                },
                StageConfig {
                    dead_code_reset: Some(20),
                    ..stage(2, 12, 16, 5e-4)
                },
                stage(3, 1, 8, 1e-4),
            ],
            reward: RewardConfig::default(),
            data: CorpusConfig::default(),
            optimizer: AdamWConfig::default(),
            eval: EvalSection::default(),
        }
    }

    /// Seconds-scale settings for smoke tests and determinism checks.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.geometry = GeometryConfig {
            n_samples: 8,
            k_neighbors: 4,
            fps_seed: None,
        };
        c.tokenizer.codebook_size = 32;
        c.tokenizer.d_geo = 16;
        c.tokenizer.d_llm = 16;
        c.lm = LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_ctx: 40,
            d_mlp: 32,
        };
        c.data = CorpusConfig {
            train: 48,
            val: 8,
            test: 16,
            n_points: 64,
            ..Default::default()
        };
        for s in &mut c.stages {
            s.epochs = 1;
            s.batch_size = 8;
            s.trainable_layers = 1;
            s.max_samples = Some(16);
            s.max_new_tokens = 8;
            if s.stage == 3 {
                s.max_samples = Some(8);
            }
        }
        c.reward.group_size = 4;
        c.eval.resolutions = vec![16, 64, 128];
        c.eval.max_new_tokens = 8;
        c.eval.reward_samples = 2;
        c
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let p = pointer(e.path());
            cfg_err(&p, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                n_samples: self.geometry.n_samples,
                k_neighbors: self.geometry.k_neighbors,
                codebook_size: self.tokenizer.codebook_size,
                d_geo: self.tokenizer.d_geo,
                d_llm: self.tokenizer.d_llm,
                in_dim: self.tokenizer.in_dim,
                beta: self.tokenizer.beta,
                pooling: self.tokenizer.pooling,
                continuous: self.tokenizer.continuous,
                codebook_from_ntp: self.tokenizer.codebook_from_ntp,
                fps_seed: self.geometry.fps_seed,
            },
            lm: self.lm.clone(),
            lambda: self.tokenizer.lambda,
        }
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| cfg_err("/stages", format!("no entry for stage {stage}")))
    }

    /// Semantic checks beyond the JSON shape.
    pub fn validate(&self) -> Result<()> {
        let wrap = |p: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidArgument(m) => cfg_err(p, m),
                other => other,
            })
        };
        let m = self.model_config();
        wrap("/tokenizer", m.tokenizer.validate())?;
        wrap("/lm", m.lm.validate())?;
        if m.tokenizer.d_llm != m.lm.d_model {
            return Err(cfg_err(
                "/tokenizer/d_llm",
                format!("must equal lm.d_model ({})", m.lm.d_model),
            ));
        }
        wrap("", m.validate())?;
        wrap("/reward", self.reward.validate())?;
        let mut seen = [false; 4];
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("/stages/{i}");
            wrap(&p, s.validate(self.lm.n_layers))?;
            if std::mem::replace(&mut seen[s.stage as usize], true) {
                return Err(cfg_err(&format!("{p}/stage"), format!("stage {} listed twice", s.stage)));
            }
        }
        if [self.data.train, self.data.val, self.data.test].contains(&0) {
            return Err(cfg_err("/data", "every split needs at least one sample"));
        }
        if self.data.n_points < 8 {
            return Err(cfg_err("/data/n_points", "clouds need at least 8 points"));
        }
        if self.eval.max_new_tokens == 0 || self.eval.reward_samples == 0 {
            return Err(cfg_err("/eval", "max_new_tokens and reward_samples must be positive"));
        }
        if self.eval.resolutions.contains(&0) {
            return Err(cfg_err("/eval/resolutions", "resolutions must be positive"));
        }
        Ok(())
    }

    /// JSON Schema (draft 2020-12) for the document.
    pub fn schema() -> Value {
        let int = |min: u64| json!({"type": "integer", "minimum": min});
        let num = json!({"type": "number"});
        let pos = json!({"type": "number", "exclusiveMinimum": 0});
        let obj = |props: Value, required: &[&str]| {
            json!({"type": "object", "additionalProperties": false, "properties": props, "required": required})
        };
        let tasks: Vec<&str> = Task::ALL.iter().map(|t| t.word()).collect();
        let stage = obj(
            json!({
                "stage": {"type": "integer", "enum": [1, 2, 3]},
                "epochs": int(1),
                "batch_size": int(1),
                "lr": pos,
                "trainable_layers": int(0),
                "tasks": {"type": "array", "items": {"enum": tasks}},
                "max_samples": {"type": ["integer", "null"], "minimum": 1},
                "temperature": pos,
                "max_new_tokens": int(1),
                "dead_code_reset": {"type": ["integer", "null"], "minimum": 1},
            }),
            &["stage", "epochs", "batch_size", "lr"],
        );
        json!({
            "$schema": "https://json-schema.org/draft/2020-12/schema",
            "title": "pointlang run configuration",
            "type": "object",
            "additionalProperties": false,
            "properties": {
                "seed": int(0),
                "geometry": obj(json!({
                    "n_samples": int(1),
                    "k_neighbors": int(1),
                    "fps_seed": {"type": ["integer", "null"], "minimum": 0},
                }), &[]),
                "tokenizer": obj(json!({
                    "codebook_size": int(1),
                    "d_geo": int(1),
                    "d_llm": int(1),
                    "in_dim": int(3),
                    "beta": {"type": "number", "minimum": 0},
                    "lambda": {"type": "number", "minimum": 0},
                    "pooling": {"enum": ["max", "mean", "attention"]},
                    "continuous": {"type": "boolean"},
                    "codebook_from_ntp": {"type": "boolean"},
                }), &[]),
                "lm": obj(json!({
                    "d_model": int(1),
                    "n_layers": int(1),
                    "n_heads": int(1),
                    "max_ctx": int(1),
                    "d_mlp": int(1),
                }), &["d_model", "n_layers", "n_heads", "max_ctx", "d_mlp"]),
                "stages": {"type": "array", "items": stage},
                "reward": obj(json!({
                    "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                    "sigma": pos,
                    "group_size": int(2),
                    "epsilon": {"type": "number", "minimum": 0},
                }), &["alpha", "sigma", "group_size", "epsilon"]),
                "data": obj(json!({
                    "train": int(1),
                    "val": int(1),
                    "test": int(1),
                    "n_points": int(8),
                    "noise": {"type": "number", "minimum": 0},
                    "task_weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                }), &["train", "val", "test", "n_points", "noise", "task_weights"]),
                "optimizer": obj(json!({
                    "beta1": num,
                    "beta2": num,
                    "eps": pos,
                    "weight_decay": {"type": "number", "minimum": 0},
                    "warmup_ratio": {"type": "number", "minimum": 0, "maximum": 1},
                }), &["beta1", "beta2", "eps", "weight_decay", "warmup_ratio"]),
                "eval": obj(json!({
                    "max_new_tokens": int(1),
                    "resolutions": {"type": "array", "items": int(1)},
                    "reward_samples": int(1),
                }), &[]),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.tokenizer.beta, 0.25);
        assert_eq!(c.tokenizer.lambda, 0.5);
        assert_eq!(c.tokenizer.codebook_size, 8192);
        assert_eq!((c.geometry.n_samples, c.geometry.k_neighbors), (512, 81));
        assert_eq!(c.optimizer.warmup_ratio, 0.03);
        assert_eq!(c.optimizer.weight_decay, 0.05);
        assert_eq!(c.reward.alpha, 0.95);
        assert_eq!(c.reward.group_size, 8);
        assert_eq!(c.reward.epsilon, 1e-9);
        let s: Vec<(usize, usize, f64)> = c.stages.iter().map(|s| (s.epochs, s.batch_size, s.lr)).collect();
        assert_eq!(s, vec![(3, 128, 4e-4), (3, 32, 2e-5), (1, 8, 1e-6)]);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json_str(&c.to_json()).unwrap(), c);
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_pointer() {
        let err = RunConfig::from_json_str(r#"{"tokenizer": {"codebok_size": 3}}"#).unwrap_err();
        match err {
            Error::Config { pointer, message } => {
                assert_eq!(pointer, "/tokenizer/codebok_size");
                assert!(message.contains("unknown field"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_and_semantic_errors_report_pointer() {
        let bad_type = r#"{"stages": [{"stage": 1, "epochs": "three", "batch_size": 1, "lr": 0.1}]}"#;
        assert!(matches!(RunConfig::from_json_str(bad_type), Err(Error::Config { pointer, .. }) if pointer == "/stages/0/epochs"));
        let mut c = RunConfig::desk();
        c.tokenizer.d_llm = 64;
        assert!(matches!(RunConfig::from_json_str(&c.to_json()), Err(Error::Config { pointer, .. }) if pointer == "/tokenizer/d_llm"));
        let mut c = RunConfig::desk();
        c.stages[1].lr = -1.0;
        assert!(matches!(RunConfig::from_json_str(&c.to_json()), Err(Error::Config { pointer, .. }) if pointer == "/stages/1"));
        let mut c = RunConfig::desk();
        c.reward.group_size = 1;
        assert!(matches!(RunConfig::from_json_str(&c.to_json()), Err(Error::Config { pointer, .. }) if pointer == "/reward"));
    }

    fn check_against_schema(value: &Value, schema: &Value, at: &str) {
        if let (Some(obj), Some(props)) = (value.as_object(), schema.get("properties").and_then(|p| p.as_object())) {
            for (k, v) in obj {
                let sub = props.get(k).unwrap_or_else(|| panic!("{at}/{k} missing from schema"));
                check_against_schema(v, sub, &format!("{at}/{k}"));
            }
            for r in schema.get("required").and_then(|r| r.as_array()).into_iter().flatten() {
                assert!(obj.contains_key(r.as_str().unwrap()), "{at}: required {r} absent");
            }
        }
        if let (Some(arr), Some(items)) = (value.as_array(), schema.get("items")) {
            for (i, v) in arr.iter().enumerate() {
                check_against_schema(v, items, &format!("{at}/{i}"));
            }
        }
    }

    #[test]
    fn schema_covers_every_serialized_field() {
        let schema = RunConfig::schema();
        for p in PRESETS {
            let v = serde_json::to_value(RunConfig::preset(p).unwrap()).unwrap();
            check_against_schema(&v, &schema, "");
        }
    }
}
