//! Run configuration: one JSON document with namespaced sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{SplitMode, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RouterConfig};
use crate::objectives::{LambdaShape, MmdConfig, StageSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda0: f64,
    pub t_c: usize,
    pub lambda_schedule: LambdaShape,
    pub mmd_multipliers: Vec<f64>,
    pub tau_init: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda0: 0.5,
            t_c: 20,
            lambda_schedule: LambdaShape::Linear,
            mmd_multipliers: MmdConfig::default().multipliers,
            tau_init: 0.07,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Intra,
    Loso,
    Pooled,
}

impl SplitKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "intra" => Some(SplitKind::Intra),
            "loso" => Some(SplitKind::Loso),
            "pooled" => Some(SplitKind::Pooled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub stage2_lr_multiplier: f64,
    pub freeze_shared_stage2: bool,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub eval_every: usize,
    pub split_mode: SplitKind,
    pub subject: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            stage2_lr_multiplier: 0.1,
            freeze_shared_stage2: true,
            patience: 5,
            eval_every: 1,
            split_mode: SplitKind::Intra,
            subject: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k_list: vec![1, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: SynthConfig,
    pub router: RouterConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs".into(),
            data: SynthConfig::default(),
            router: RouterConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn from_value(value: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        let reason = e.into_inner().to_string();
        Error::Config { key, reason }
    })
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config {
            key: "<document>".into(),
            reason: e.to_string(),
        })?;
        from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Overrides one dotted key (e.g. `train.lr`) with a JSON-parsed value;
    /// bare words are taken as strings.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let new_value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = slot.as_object_mut().ok_or_else(|| Error::Config {
                key: key.into(),
                reason: format!("`{}` is not a section", parts[..i].join(".")),
            })?;
            // Optional fields serialize as null and so are present too.
            slot = obj.get_mut(*part).ok_or_else(|| Error::Config {
                key: key.into(),
                reason: "unknown key".into(),
            })?;
        }
        *slot = new_value;
        *self = from_value(doc)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            epochs: self.train.epochs,
            t_c: self.loss.t_c,
            lambda0: self.loss.lambda0,
            stage2_lr_multiplier: self.train.stage2_lr_multiplier,
            shape: self.loss.lambda_schedule,
        }
    }

    pub fn mmd(&self) -> MmdConfig {
        MmdConfig {
            multipliers: self.loss.mmd_multipliers.clone(),
        }
    }

    /// Split mode resolved from `train.split_mode` and `train.subject`.
    pub fn split_mode(&self) -> Result<SplitMode> {
        if self.train.split_mode == SplitKind::Pooled {
            return Ok(SplitMode::Pooled);
        }
        let subject = self.train.subject.ok_or_else(|| Error::Config {
            key: "train.subject".into(),
            reason: format!("required for split mode `{:?}`", self.train.split_mode).to_lowercase(),
        })?;
        Ok(match self.train.split_mode {
            SplitKind::Intra => SplitMode::IntraSubject(subject),
            SplitKind::Loso => SplitMode::LeaveOneSubjectOut(subject),
            SplitKind::Pooled => unreachable!("handled above"),
        })
    }

    /// Checks everything except dataset-dependent shapes.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule().validate()?;
        self.mmd().validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if t.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        if t.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        if self.eval.k_list.is_empty() || self.eval.k_list.contains(&0) {
            return Err(Error::config("eval.k_list", "must be a non-empty list of positive integers"));
        }
        if !(self.loss.tau_init > 0.0 && self.loss.tau_init.is_finite()) {
            return Err(Error::config("loss.tau_init", "must be positive"));
        }
        let r = &self.router;
        if !(r.tau > 0.0) {
            return Err(Error::config("router.tau", "must be positive"));
        }
        for (key, p) in [("router.p_subject", r.p_subject), ("router.p_layer", r.p_layer)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if let Some(w) = &r.fixed_weights {
            if w.len() != self.data.num_layers() {
                return Err(Error::config(
                    "router.fixed_weights",
                    format!("length {} does not match K = {}", w.len(), self.data.num_layers()),
                ));
            }
        }
        if self.model.d_common == 0 {
            return Err(Error::config("model.d_common", "must be positive"));
        }
        Ok(())
    }
}

/// Sorted, de-duplicated k list.
pub fn normalize_k_list(k_list: &[usize]) -> Vec<usize> {
    let mut k = k_list.to_vec();
    k.sort_unstable();
    k.dedup();
    k
}
