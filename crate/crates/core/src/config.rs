//! TOML run configuration with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::{ModelConfig, Task, Variant};
use crate::synth::DataConfig;
use crate::train::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub variant: Variant,
    pub hidden: usize,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub dropout: f64,
    /// Optional `token v1 ... vn` file whose rows initialize the embedding table.
    pub embeddings: Option<PathBuf>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            variant: Variant::Concat,
            hidden: 32,
            embed_dim: 32,
            attention_hidden: 32,
            dropout: 0.2,
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    /// Extra steps of the spatial phase for the spatial-temporal variant,
    /// which first trains its temporal part alone for `steps` steps.
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 2000,
            finetune_steps: 1000,
            batch_size: 16,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 10.0,
            eval_every: 0,
            resume: None,
        }
    }
}

impl TrainSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn train_config(&self, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            adam: self.adam(),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            eval_every: self.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    /// Variants to check; all seven when empty.
    pub variants: Vec<Variant>,
    pub hidden: usize,
    pub steps: usize,
    pub grid: usize,
    pub frame_channels: usize,
    pub clip_channels: usize,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error. Central differences at
    /// `eps = 1e-5` carry about 3e-10 of absolute rounding noise on these
    /// losses, so a smaller floor measures that noise on near-zero entries.
    pub floor: f64,
    /// Standard deviation of the random parameters the check runs at.
    pub param_scale: f64,
    /// Primitive whose adjoint is deliberately scaled (negative control).
    pub corrupt: Option<String>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            variants: Vec::new(),
            hidden: 8,
            steps: 4,
            grid: 2,
            frame_channels: 4,
            clip_channels: 2,
            embed_dim: 6,
            attention_hidden: 6,
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            param_scale: 0.3,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub protocol: Protocol,
    /// Checkpoint to evaluate.
    pub checkpoint: Option<PathBuf>,
    /// Split to evaluate, `test` when unset.
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub variants: Vec<Variant>,
    pub tasks: Vec<Task>,
    pub seeds: Vec<u64>,
    /// Directory of existing `<variant>-<task>-<seed>.ckpt` checkpoints;
    /// when set nothing is trained.
    pub checkpoints: Option<PathBuf>,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), tasks: Task::ALL.to_vec(), seeds: vec![1, 2, 3], checkpoints: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory written by `generate`; when unset, commands build the
    /// dataset in memory from `[data]` and the seed.
    pub dataset: Option<PathBuf>,
    /// Restricts training and evaluation to one task; all tasks when unset.
    pub task: Option<Task>,
    pub data: DataConfig,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub gradcheck: GradcheckSettings,
    pub eval: EvalSettings,
    pub report: ReportSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset: None,
            task: None,
            data: DataConfig::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            gradcheck: GradcheckSettings::default(),
            eval: EvalSettings::default(),
            report: ReportSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` and applies `overrides` (`dotted.key=value`, value in
    /// TOML syntax or a bare string).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.model.dropout)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.train.lr >= 0.0) {
            return Err(Error::Config("train.lr must be non-negative".into()));
        }
        if self.gradcheck.eps <= 0.0 {
            return Err(Error::Config("gradcheck.eps must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration for `variant` over the given vocabularies, with
    /// channel layout taken from the data settings.
    pub fn model_config(&self, variant: Variant, tokens: Vec<String>, answers: Vec<String>) -> ModelConfig {
        let m = &self.model;
        let r = &self.data.render;
        ModelConfig {
            variant,
            hidden: m.hidden,
            embed_dim: m.embed_dim,
            attention_hidden: m.attention_hidden,
            frame_channels: r.frame_channels,
            clip_channels: r.clip_channels,
            grid: r.grid,
            dropout: m.dropout,
            tokens,
            answers,
        }
    }
}

fn apply_override(table: &mut toml::Table, o: &str) -> Result<()> {
    let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{o}` has an empty key segment")));
    }
    let value = parse_value(raw.trim());
    let mut t = table;
    for seg in &path[..path.len() - 1] {
        let entry = t.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{seg}` in `{key}` is not a section")))?;
    }
    t.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::from_toml(
            "seed = 4\n[model]\nhidden = 16\n",
            &[
                "model.variant=temporal".into(),
                "train.steps=10".into(),
                "data.render.noise=0.5".into(),
                "gradcheck.corrupt=tanh".into(),
                "report.seeds=[7, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.model.variant, Variant::Temporal);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.data.render.noise, 0.5);
        assert_eq!(c.gradcheck.corrupt.as_deref(), Some("tanh"));
        assert_eq!(c.report.seeds, vec![7, 8]);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::from_toml("[model]\nhiden = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["model.variant=nope".into()]).is_err());
        assert!(RunConfig::from_toml("", &["model.dropout=1.5".into()]).is_err());
        assert!(RunConfig::from_toml("", &["novalue".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.task = Some(Task::Transition);
        c.eval.checkpoint = Some("a/b.ckpt".into());
        let back = RunConfig::from_toml(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
