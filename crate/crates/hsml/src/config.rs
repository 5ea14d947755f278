//! Run configuration: TOML schema, flag overrides, and validation.
//!
//! A config file is merged over built-in defaults (the toy-regression
//! hyperparameters), then dotted-path overrides from the command line are
//! applied on top (`--set train.inner_lr=0.01`); named flags like `--seed`
//! are sugar for such paths. Validation checks every field and reports all
//! problems at once.

use crate::aggregator::{AggregatorCfg, AggregatorKind, PoolMode};
use crate::cluster::ClusterCfg;
use crate::error::{Error, Result};
use crate::learner::{Activation, LossForm, MlpArch};
use crate::params::OuterOpt;
use crate::taskgen::{FamilyKind, StreamSchedule};
use crate::trainer::{Mode, TrainerConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub mode: Mode,
    pub iterations: u64,
    pub out: String,
    /// Periodic checkpoint cadence in iterations; 0 disables.
    pub checkpoint_every: u64,
    /// Periodic evaluation cadence in iterations; 0 disables.
    pub eval_every: u64,
    /// Task count for evaluations (cmd_eval default and periodic eval).
    pub eval_tasks: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            mode: Mode::Hsml,
            iterations: 10_000,
            out: "runs/default".into(),
            checkpoint_every: 0,
            eval_every: 0,
            eval_tasks: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSection {
    pub families: Vec<FamilyKind>,
    pub shots: usize,
    pub query_size: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            families: FamilyKind::ALL.to_vec(),
            shots: 5,
            query_size: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub aggregator: AggregatorKind,
    pub pool: PoolMode,
    pub repr_dim: usize,
    pub embed_dim: usize,
    pub hierarchy: Vec<usize>,
    pub sigma: f64,
    pub learnable_sigma: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![40, 40],
            activation: Activation::Relu,
            aggregator: AggregatorKind::Raa,
            pool: PoolMode::Mean,
            repr_dim: 40,
            embed_dim: 40,
            hierarchy: vec![4, 2, 1],
            sigma: 1.0,
            learnable_sigma: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub test_inner_steps: usize,
    pub recon_weight: f64,
    pub expand_threshold: f64,
    pub expand_window: u64,
    pub expansion_enabled: bool,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub outer_opt: OuterOpt,
    pub loss_form: LossForm,
    pub first_order: bool,
    pub gate_identity: bool,
    pub eval_perms: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            inner_lr: 0.001,
            outer_lr: 0.001,
            meta_batch: 25,
            inner_steps: 5,
            test_inner_steps: 10,
            recon_weight: 0.01,
            expand_threshold: 1.25,
            expand_window: 1000,
            expansion_enabled: false,
            clip_norm: 10.0,
            outer_opt: OuterOpt::Adam,
            loss_form: LossForm::Mean,
            first_order: false,
            gate_identity: false,
            eval_perms: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSection {
    pub at: u64,
    pub families: Vec<FamilyKind>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub schedule: Vec<StageSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Loads a file (when given) over defaults and applies dotted-path
    /// overrides in order.
    pub fn load(path: Option<&std::path::Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Toml(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::Table(toml::map::Map::new()),
        };
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Toml(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks every field, reporting all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.task.families.is_empty() {
            errs.push("task.families: must not be empty".into());
        }
        if self.task.shots == 0 {
            errs.push("task.shots: must be at least 1".into());
        }
        if self.task.query_size == 0 {
            errs.push("task.query_size: must be at least 1".into());
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            errs.push("model.hidden: layer widths must be positive".into());
        }
        if self.model.hierarchy.last() != Some(&1) {
            errs.push("model.hierarchy: the top level must have exactly one cluster".into());
        }
        if self.model.hierarchy.contains(&0) {
            errs.push("model.hierarchy: cluster counts must be positive".into());
        }
        if self.model.repr_dim == 0 {
            errs.push("model.repr_dim: must be positive".into());
        }
        if self.model.aggregator == AggregatorKind::Raa
            && self.model.repr_dim != self.model.embed_dim
        {
            errs.push(format!(
                "model.embed_dim: the recurrent aggregator requires embed_dim == repr_dim ({} != {})",
                self.model.embed_dim, self.model.repr_dim
            ));
        }
        if self.model.sigma <= 0.0 {
            errs.push("model.sigma: must be strictly positive".into());
        }
        if self.train.inner_lr <= 0.0 {
            errs.push("train.inner_lr: must be strictly positive".into());
        }
        if self.train.outer_lr <= 0.0 {
            errs.push("train.outer_lr: must be strictly positive".into());
        }
        if self.train.meta_batch == 0 {
            errs.push("train.meta_batch: must be at least 1".into());
        }
        if self.train.inner_steps == 0 {
            errs.push("train.inner_steps: must be at least 1".into());
        }
        if self.train.test_inner_steps == 0 {
            errs.push("train.test_inner_steps: must be at least 1".into());
        }
        if self.train.recon_weight < 0.0 {
            errs.push("train.recon_weight: must be non-negative".into());
        }
        if self.train.expand_threshold <= 0.0 {
            errs.push("train.expand_threshold: must be strictly positive".into());
        }
        if self.train.expand_window == 0 {
            errs.push("train.expand_window: must be at least 1".into());
        }
        if self.train.clip_norm < 0.0 {
            errs.push("train.clip_norm: must be non-negative (0 disables)".into());
        }
        if self.train.eval_perms == 0 {
            errs.push("train.eval_perms: must be at least 1".into());
        }
        let mut last: Option<u64> = None;
        for (i, stage) in self.schedule.iter().enumerate() {
            if let Some(prev) = last {
                if stage.at <= prev {
                    errs.push(format!(
                        "schedule[{i}].at: thresholds must be strictly increasing"
                    ));
                }
            }
            if stage.families.is_empty() {
                errs.push(format!("schedule[{i}].families: must not be empty"));
            }
            last = Some(stage.at);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            mode: self.run.mode,
            arch: MlpArch {
                input: 1,
                hidden: self.model.hidden.clone(),
                output: 1,
                activation: self.model.activation,
            },
            aggregator: AggregatorCfg {
                kind: self.model.aggregator,
                repr_dim: self.model.repr_dim,
                embed_dim: self.model.embed_dim,
                pool: self.model.pool,
            },
            cluster: ClusterCfg {
                sizes: self.model.hierarchy.clone(),
                dim: self.model.repr_dim,
                sigma: self.model.sigma,
                learnable_sigma: self.model.learnable_sigma,
            },
            families: self.task.families.clone(),
            shots: self.task.shots,
            query_size: self.task.query_size,
            inner_lr: self.train.inner_lr,
            outer_lr: self.train.outer_lr,
            meta_batch: self.train.meta_batch,
            inner_steps: self.train.inner_steps,
            test_inner_steps: self.train.test_inner_steps,
            recon_weight: self.train.recon_weight,
            expand_threshold: self.train.expand_threshold,
            expand_window: self.train.expand_window,
            expansion_enabled: self.train.expansion_enabled,
            clip_norm: if self.train.clip_norm > 0.0 {
                Some(self.train.clip_norm)
            } else {
                None
            },
            outer_opt: self.train.outer_opt,
            loss_form: self.train.loss_form,
            first_order: self.train.first_order,
            gate_identity: self.train.gate_identity,
            eval_perms: self.train.eval_perms,
            seed: self.run.seed,
        }
    }

    pub fn stream_schedule(&self) -> Result<StreamSchedule> {
        StreamSchedule::new(
            self.schedule
                .iter()
                .map(|s| (s.at, s.families.clone()))
                .collect(),
        )
    }
}

/// Sets a dotted path inside a TOML value tree. The raw string is parsed as
/// a TOML literal, falling back to a plain string.
pub fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let literal: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(t)) => t["v"].clone(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            Error::Toml(format!("override path '{path}' does not address a table"))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), literal);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("path has at least one segment")
}
