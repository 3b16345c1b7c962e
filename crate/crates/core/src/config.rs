//! Experiment configuration: one TOML file covering the environment, tools,
//! reward profiles, trainer, phase plan, policy init and evaluation.
//!
//! Loading applies `key=value` overrides on dotted paths before typed
//! decoding. Path segments into arrays of named tables (`tools`, `rewards`,
//! `phases`) accept either an index or the element's `name`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::env::{AugmentConfig, EnvConfig, ScenarioKind, SplitPlan};
use crate::grpo::{EvalConfig, GrpoConfig, Phase, PhasePlan, Workload};
use crate::policy::PolicyInit;
use crate::reward::{diagnosis_profile, grounding_profile, RewardProfile};
use crate::toolsim::{ToolProfile, ToolRegistry};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    OverrideSyntax(String),
    #[error("override path `{path}`: {message}")]
    OverridePath { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

/// One phase of the plan, naming its reward profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub reward: String,
    pub iterations: u64,
    #[serde(default = "diagnosis_kind")]
    pub kind: ScenarioKind,
}

fn diagnosis_kind() -> ScenarioKind {
    ScenarioKind::Diagnosis
}

fn default_thresholds() -> Vec<f64> {
    crate::eval::DEFAULT_THRESHOLDS.to_vec()
}

fn default_train_tool() -> String {
    "sparse".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the scene streams.
    #[serde(default)]
    pub seed: u64,
    /// Tool profile used by `train`.
    #[serde(default = "default_train_tool")]
    pub train_tool: String,
    /// Output directory when neither `--out` nor `ECHOLOOP_OUT_DIR` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub splits: SplitPlan,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub init: PolicyInit,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_tools")]
    pub tools: Vec<ToolProfile>,
    #[serde(default = "default_rewards")]
    pub rewards: Vec<RewardProfile>,
    #[serde(default = "default_phases")]
    pub phases: Vec<PhaseSpec>,
}

fn default_tools() -> Vec<ToolProfile> {
    vec![ToolProfile::sparse(), ToolProfile::dense()]
}

fn default_rewards() -> Vec<RewardProfile> {
    vec![grounding_profile(), diagnosis_profile()]
}

fn default_phases() -> Vec<PhaseSpec> {
    ["grounding", "diagnosis"]
        .into_iter()
        .map(|r| PhaseSpec {
            reward: r.into(),
            iterations: 150,
            kind: ScenarioKind::Diagnosis,
        })
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_tool: default_train_tool(),
            out_dir: None,
            thresholds: default_thresholds(),
            env: EnvConfig::default(),
            splits: SplitPlan::default(),
            augment: AugmentConfig::default(),
            grpo: GrpoConfig::default(),
            init: PolicyInit::default(),
            eval: EvalConfig::default(),
            tools: default_tools(),
            rewards: default_rewards(),
            phases: default_phases(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides, decodes and validates.
    pub fn load_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: Value = toml::from_str::<toml::Table>(text)
            .map(Value::Table)
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML text. Loading it yields the same config.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(invalid)?;
        self.splits.validate().map_err(invalid)?;
        self.augment.validate().map_err(invalid)?;
        self.grpo.validate().map_err(invalid)?;
        self.init.validate().map_err(invalid)?;
        self.registry()?;
        self.tool(&self.train_tool)?;
        let mut names = BTreeSet::new();
        for r in &self.rewards {
            r.validate().map_err(|e| invalid(format!("reward `{}`: {e}", r.name)))?;
            if !names.insert(r.name.as_str()) {
                return Err(invalid(format!("duplicate reward profile `{}`", r.name)));
            }
        }
        self.phase_plan()?.validate().map_err(invalid)?;
        if self.eval.episodes == 0 {
            return Err(invalid("eval.episodes must be positive"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(invalid("thresholds must be nonempty and inside (0, 1)"));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<ToolRegistry, ConfigError> {
        let mut reg = ToolRegistry::new();
        for t in &self.tools {
            reg.register(t.clone()).map_err(|e| invalid(format!("tool `{}`: {e}", t.name)))?;
        }
        Ok(reg)
    }

    pub fn tool(&self, name: &str) -> Result<&ToolProfile, ConfigError> {
        self.tools
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| invalid(format!("unknown tool profile `{name}`")))
    }

    pub fn reward(&self, name: &str) -> Result<&RewardProfile, ConfigError> {
        self.rewards
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| invalid(format!("unknown reward profile `{name}`")))
    }

    pub fn phase_plan(&self) -> Result<PhasePlan, ConfigError> {
        let phases = self
            .phases
            .iter()
            .map(|p| {
                Ok(Phase {
                    profile: self.reward(&p.reward)?.clone(),
                    iterations: p.iterations,
                    kind: p.kind,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(PhasePlan { phases })
    }

    /// Scene source paired with the named tool.
    pub fn workload(&self, tool: &str) -> Result<Workload, ConfigError> {
        Ok(Workload {
            env: self.env.clone(),
            splits: self.splits.clone(),
            augment: self.augment.clone(),
            tool: self.tool(tool)?.clone(),
            env_seed: self.seed,
        })
    }

    /// Sets the scene and rollout seeds together.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.grpo.seed = seed;
    }

    /// Spreads `total` iterations over the phases, earlier phases taking the
    /// remainder.
    pub fn set_total_iterations(&mut self, total: u64) {
        let n = self.phases.len() as u64;
        if n == 0 {
            return;
        }
        for (i, p) in self.phases.iter_mut().enumerate() {
            p.iterations = total / n + u64::from((i as u64) < total % n);
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override in place.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::OverrideSyntax(spec.to_string()))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::OverrideSyntax(spec.to_string()));
    }
    let err = |message: String| ConfigError::OverridePath {
        path: path.to_string(),
        message,
    };
    let defaults = Value::try_from(ExperimentConfig::default()).expect("representable in TOML");
    let mut fallback = Some(&defaults);
    let mut node = root;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        fallback = fallback.and_then(|d| child(d, key));
        node = match node {
            Value::Table(t) => {
                if last {
                    t.insert(key.to_string(), parse_value(raw.trim()));
                    return Ok(());
                }
                // Missing sections start from their defaults so a single
                // leaf override leaves its siblings intact.
                t.entry(key.to_string())
                    .or_insert_with(|| fallback.cloned().unwrap_or_else(|| Value::Table(toml::Table::new())))
            }
            Value::Array(items) => {
                let idx = match key.parse::<usize>() {
                    Ok(i) if i < items.len() => i,
                    Ok(i) => return Err(err(format!("index {i} out of range"))),
                    Err(_) => position(items, key).ok_or_else(|| err(format!("no element named `{key}`")))?,
                };
                if last {
                    items[idx] = parse_value(raw.trim());
                    return Ok(());
                }
                &mut items[idx]
            }
            _ => return Err(err(format!("`{key}` is not inside a table"))),
        };
    }
    unreachable!("loop returns on the last key")
}

/// Array elements are addressed by index, `name` or (for phases) `reward`.
fn position(items: &[Value], key: &str) -> Option<usize> {
    items
        .iter()
        .position(|v| v.get("name").or_else(|| v.get("reward")).and_then(Value::as_str) == Some(key))
}

fn child<'a>(node: &'a Value, key: &str) -> Option<&'a Value> {
    match node {
        Value::Table(t) => t.get(key),
        Value::Array(items) => key
            .parse::<usize>()
            .ok()
            .or_else(|| position(items, key))
            .and_then(|i| items.get(i)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::load_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.phase_plan().unwrap(), PhasePlan::default());
    }

    #[test]
    fn canonical_is_a_fixed_point() {
        let cfg = ExperimentConfig::load_str("", &["grpo.learning_rate=0.03".into()]).unwrap();
        let once = cfg.canonical();
        let again = ExperimentConfig::load_str(&once, &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.canonical(), once);
    }

    #[test]
    fn overrides_reach_named_elements() {
        let cfg = ExperimentConfig::load_str(
            "",
            &[
                "rewards.diagnosis.tool_cost=0.5".into(),
                "tools.dense.coverage=0.9".into(),
                "phases.0.iterations=7".into(),
                "train_tool=dense".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.reward("diagnosis").unwrap().tool_cost, 0.5);
        assert_eq!(cfg.tool("dense").unwrap().coverage, 0.9);
        assert_eq!(cfg.phases[0].iterations, 7);
        assert_eq!(cfg.train_tool, "dense");
    }

    #[test]
    fn validation_rejects_bad_values() {
        for o in [
            "rewards.grounding.w_loc=0.9",
            "env.negative_rate=1.5",
            "splits.val.start=0",
            "train_tool=missing",
            "phases.1.reward=missing",
            "eval.episodes=0",
            "thresholds=[0.5, 1.0]",
        ] {
            assert!(
                matches!(ExperimentConfig::load_str("", &[o.into()]), Err(ConfigError::Invalid(_))),
                "{o}"
            );
        }
        assert!(matches!(
            ExperimentConfig::load_str("", &["nonsense".into()]),
            Err(ConfigError::OverrideSyntax(_))
        ));
        assert!(matches!(
            ExperimentConfig::load_str("bogus = 1", &[]),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            ExperimentConfig::load_str("", &["tools.9.coverage=1".into()]),
            Err(ConfigError::OverridePath { .. })
        ));
    }

    #[test]
    fn total_iterations_are_spread() {
        let mut cfg = ExperimentConfig::default();
        cfg.set_total_iterations(7);
        assert_eq!(cfg.phases.iter().map(|p| p.iterations).collect::<Vec<_>>(), vec![4, 3]);
        cfg.set_total_iterations(0);
        assert_eq!(cfg.phase_plan().unwrap().total_iterations(), 0);
    }
}
