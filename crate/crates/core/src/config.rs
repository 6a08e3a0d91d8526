//! Run configuration: every tunable with its default, loadable from
//! `key = value` text with `#` comments. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::alignment::StageTwoConfig;
use crate::error::{CxsError, Result};
use crate::predictor::{PredictorConfig, StageOneConfig, Variant};
use crate::sampler::{SupervisionMode, DEFAULT_THRESHOLD};
use crate::scene::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub scene: SceneSpec,
    /// Visual token width.
    pub dim: usize,
    /// Width of the shared vision-language space.
    pub text_dim: usize,
    pub encoder_seed: u64,
    /// LR discount in the semantic gain.
    pub lambda: f64,
    pub blocks: usize,
    pub momentum: f64,
    pub sampler_epochs: usize,
    pub sampler_lr: f64,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    pub seed: u64,
    /// Seeds `seed, seed + 1, ...` run by the ablation.
    pub seeds: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub threshold: f64,
    pub target_obr: f64,
    pub supervision: String,
    pub variant: String,
    /// Record wall-clock times in reports; off keeps CSVs reproducible.
    pub timing: bool,
    /// Dataset paths; empty means the default file in the output directory.
    pub train_data: String,
    pub test_data: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            dim: 32,
            text_dim: 32,
            encoder_seed: 0x5EED,
            lambda: 1.0,
            blocks: 4,
            momentum: 0.99,
            sampler_epochs: 20,
            sampler_lr: 0.05,
            stage1_epochs: 30,
            stage1_lr: 0.005,
            stage2_epochs: 30,
            stage2_lr: 0.5,
            stage2_batch: 8,
            seed: 0,
            seeds: 5,
            train_scenes: 512,
            test_scenes: 128,
            threshold: DEFAULT_THRESHOLD,
            target_obr: 0.15,
            supervision: SupervisionMode::Multiplicative.name().into(),
            variant: Variant::Full.name().into(),
            timing: false,
            train_data: String::new(),
            test_data: String::new(),
        }
    }
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        Self::default().as_map().keys().cloned().collect()
    }

    fn as_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    /// Set one key from its text form, typed by the current value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut map = self.as_map();
        let slot = map
            .get_mut(key)
            .ok_or_else(|| CxsError::Config(format!("unknown key {key:?}")))?;
        let bad = || CxsError::Config(format!("bad value {raw:?} for {key}"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
            Value::String(_) => Value::String(raw.to_string()),
            _ => return Err(bad()),
        };
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| CxsError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CxsError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CxsError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Check cross-field constraints and the enum-valued keys.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.supervision_mode()?;
        self.predictor_variant()?;
        if self.dim == 0 || self.text_dim == 0 {
            return Err(CxsError::Config("dim and text_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CxsError::InvalidThreshold(self.threshold));
        }
        if !(0.0..=1.0).contains(&self.target_obr) {
            return Err(CxsError::InvalidTarget(self.target_obr));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(CxsError::Config(format!("momentum {} outside (0, 1)", self.momentum)));
        }
        if self.stage2_batch == 0 {
            return Err(CxsError::Config("stage2_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn supervision_mode(&self) -> Result<SupervisionMode> {
        self.supervision
            .parse()
            .map_err(|_| CxsError::Config(format!("unknown supervision mode {:?}", self.supervision)))
    }

    pub fn predictor_variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            grid: self.scene.grid,
            dim: self.dim,
            lr_side: self.scene.lr_token_side(),
            blocks: self.blocks,
        }
    }

    pub fn stage_one(&self) -> StageOneConfig {
        StageOneConfig {
            epochs: self.stage1_epochs,
            learning_rate: self.stage1_lr,
            momentum: self.momentum,
        }
    }

    pub fn stage_two(&self) -> StageTwoConfig {
        StageTwoConfig {
            epochs: self.stage2_epochs,
            learning_rate: self.stage2_lr,
            batch: self.stage2_batch,
        }
    }

    /// `key = value` lines for every key, in key order; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.as_map()
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.as_map())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().to_string().as_bytes()))
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
