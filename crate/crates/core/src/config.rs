//! Run configuration: JSON files layered over per-environment defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::deepen::DeepenConfig;
use crate::envs::EnvRegistry;
use crate::error::{Error, Result};
use crate::icct::Variant;
use crate::policy::{ModelConfig, PolicyRegistry};
use crate::sac::TrainerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Active features per leaf.
    E,
    /// Leaf count; must be a power of two.
    Leaves,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Random states used for the act/crisp agreement check.
    pub consistency_states: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            consistency_states: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Run directory name under `out`; derived from env and model when absent.
    #[serde(default)]
    pub name: Option<String>,
    /// Swap the straight-through router for Gumbel-softmax sampling.
    #[serde(default)]
    pub gumbel: bool,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub deepen: DeepenConfig,
}

/// One row of a hyperparameter table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableRow {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub size: NetSize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NetSize {
    Leaves(usize),
    Hidden(usize),
}

/// Table row name for a model: `icct` splits by `e` into `icct-{e}-feature`
/// for e in 1..=3 and `icct-complete` otherwise.
pub fn method_name(model: &ModelConfig, obs_dim: usize) -> String {
    match (model.kind.as_str(), model.e) {
        ("icct", Some(e)) if (1..=3).contains(&e) && e < obs_dim => format!("icct-{e}-feature"),
        ("icct", _) => "icct-complete".into(),
        (k, _) => k.into(),
    }
}

fn row(lr: f64, batch: usize, size: NetSize) -> TableRow {
    TableRow {
        actor_lr: lr,
        critic_lr: lr,
        batch_size: batch,
        size,
    }
}

/// Published learning rates, batch sizes and network sizes.
pub fn table_row(env: &str, method: &str) -> Option<TableRow> {
    use NetSize::{Hidden, Leaves};
    let r = match (env, method) {
        ("pendulum", "icct-complete") => row(3e-4, 1024, Leaves(2)),
        ("pendulum", "icct-1-feature") => row(6e-4, 1024, Leaves(8)),
        ("pendulum", "icct-2-feature") => row(5e-4, 1024, Leaves(4)),
        ("pendulum", "icct-3-feature") => row(5e-4, 1024, Leaves(2)),
        ("pendulum", "icct-static") => row(5e-4, 1024, Leaves(32)),
        ("pendulum", "icct-l1") => row(3e-4, 256, Leaves(4)),
        ("pendulum", "cddt") | ("pendulum", "cddt-controllers") => row(3e-4, 1024, Leaves(2)),
        ("pendulum", "mlp-max") => row(3e-4, 1024, Hidden(256)),
        ("pendulum", "mlp-u") => row(3e-4, 1024, Hidden(8)),
        ("pendulum", "mlp-l") => row(3e-4, 1024, Hidden(6)),

        ("lane", "icct-static") => row(2e-4, 1024, Leaves(16)),
        ("lane", "cddt") => row(3e-4, 256, Leaves(16)),
        ("lane", "cddt-controllers") => row(3e-4, 512, Leaves(16)),
        ("lane", "mlp-max") => row(3e-4, 256, Hidden(256)),
        ("lane", "mlp-u") => row(3e-4, 256, Hidden(14)),
        ("lane", "mlp-l") => row(3e-4, 256, Hidden(6)),
        ("lane", m) if m.starts_with("icct") => row(3e-4, 1024, Leaves(16)),

        ("ring", "mlp-max") => row(3e-4, 1024, Hidden(256)),
        ("ring", "mlp-u") => row(3e-4, 1024, Hidden(12)),
        ("ring", "mlp-l") => row(3e-4, 1024, Hidden(3)),
        ("ring", m) if m.starts_with("icct") || m.starts_with("cddt") => row(5e-4, 1024, Leaves(16)),
        _ => return None,
    };
    Some(r)
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn depth_for_leaves(leaves: usize) -> Result<usize> {
    if leaves < 2 || !leaves.is_power_of_two() {
        return Err(Error::config(
            "model.leaves",
            format!("{leaves} is not a power of two >= 2"),
        ));
    }
    Ok(leaves.trailing_zeros() as usize)
}

/// Defaults for `env` and the partially specified `model` object.
pub fn defaults(env: &str, model: &Value, obs_dim: usize) -> Result<Value> {
    let kind = model
        .get("kind")
        .and_then(Value::as_str)
        .unwrap_or("icct")
        .to_ascii_lowercase();
    let e = model.get("e").and_then(Value::as_u64).map(|e| e as usize);
    let probe = ModelConfig {
        kind: kind.clone(),
        e,
        ..ModelConfig::default()
    };
    let method = method_name(&probe, obs_dim);
    let mut model_defaults = Map::new();
    model_defaults.insert("kind".into(), json!(kind));
    let mut trainer = json!({
        "gamma": 0.99,
        "buffer_capacity": 1_000_000,
        "critic_hidden": [256, 256],
        "total_steps": if env == "ring" { 100_000 } else { 500_000 },
        "tau": if env == "pendulum" && method == "icct-static" { 0.005 } else { 0.01 },
    });
    if let Some(r) = table_row(env, &method) {
        match r.size {
            NetSize::Leaves(l) => {
                model_defaults.insert("depth".into(), json!(depth_for_leaves(l)?));
            }
            NetSize::Hidden(h) => {
                model_defaults.insert("hidden".into(), json!([h, h]));
            }
        }
        merge(
            &mut trainer,
            &json!({
                "actor_lr": r.actor_lr,
                "critic_lr": r.critic_lr,
                "batch_size": r.batch_size,
            }),
        );
    }
    Ok(json!({
        "model": Value::Object(model_defaults),
        "trainer": trainer,
        "seeds": [0, 1, 2, 3, 4],
        "out": "runs",
    }))
}

impl RunConfig {
    /// Layers `user` over the defaults for its env and model.
    pub fn resolve(user: &Value, envs: &EnvRegistry, policies: &PolicyRegistry) -> Result<Self> {
        if !user.is_object() {
            return Err(Error::config("config", "must be a JSON object"));
        }
        let env = user.get("env").and_then(Value::as_str).unwrap_or("");
        if !envs.names().contains(&env) {
            return Err(Error::config("env", format!("unknown '{env}'")));
        }
        let obs_dim = envs.make(env)?.spec().obs_dim;
        let mut user = user.clone();
        // leaf counts are accepted in place of depth
        if let Some(model) = user.get_mut("model").and_then(Value::as_object_mut) {
            if let Some(kind) = model.get("kind").and_then(Value::as_str) {
                let lower = kind.to_ascii_lowercase();
                model.insert("kind".into(), json!(lower));
            }
            if let Some(l) = model.remove("leaves") {
                let l = l
                    .as_u64()
                    .ok_or_else(|| Error::config("model.leaves", "must be a positive integer"))?;
                model.insert("depth".into(), json!(depth_for_leaves(l as usize)?));
            }
        }
        let mut merged = defaults(env, user.get("model").unwrap_or(&Value::Null), obs_dim)?;
        merge(&mut merged, &user);
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate(envs, policies)?;
        if cfg.gumbel && !matches!(cfg.model.variant, Variant::Gumbel { .. }) {
            cfg.model.variant = Variant::Gumbel { tau: 1.0 };
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path, envs: &EnvRegistry, policies: &PolicyRegistry) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
        Self::resolve(&v, envs, policies)
    }

    pub fn validate(&self, envs: &EnvRegistry, policies: &PolicyRegistry) -> Result<()> {
        if !envs.names().contains(&self.env.as_str()) {
            return Err(Error::config("env", format!("unknown '{}'", self.env)));
        }
        if !policies.names().contains(&self.model.kind.as_str()) {
            return Err(Error::config("model.kind", format!("unknown '{}'", self.model.kind)));
        }
        if self.model.depth == 0 {
            return Err(Error::config("model.depth", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::config("sweep.values", "must not be empty"));
            }
            if s.axis == SweepAxis::Leaves {
                for &l in &s.values {
                    depth_for_leaves(l)?;
                }
            }
        }
        self.trainer.validate()
    }

    /// `{env}-{method}` unless a name is given.
    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let mut n = format!("{}-{}", self.env, self.model.kind);
            if let Some(e) = self.model.e {
                n.push_str(&format!("-e{e}"));
            }
            n.push_str(&format!("-d{}", self.model.depth));
            if self.gumbel {
                n.push_str("-gumbel");
            }
            n
        })
    }
}
