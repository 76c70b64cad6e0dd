//! Built-in control environments behind a common episodic interface.
//!
//! Environments are registered by name and constructed at runtime from
//! configuration. Observations are normalized with the constants carried in
//! each [`EnvSpec`], which also travel with checkpoints so that exported trees
//! can be printed in physical units.

mod lane;
mod pendulum;
mod plateau;
mod ring;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lane::{LaneKeeping, LaneParams, LaneState};
pub use pendulum::{CartPole, CartPoleParams, PendulumState};
pub use plateau::{Plateau, PLATEAU_LEVELS};
pub use ring::{idm_accel, IdmParams, Ring, RingParams, RingState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// `[lo, hi]` per action dimension, in physical units.
    pub action_bounds: Vec<[f64; 2]>,
    pub horizon: usize,
    pub feature_names: Vec<String>,
    pub action_names: Vec<String>,
    /// Normalized feature `k` is `(raw_k - obs_offset[k]) / obs_scale[k]`.
    pub obs_offset: Vec<f64>,
    pub obs_scale: Vec<f64>,
}

impl EnvSpec {
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.obs_offset)
            .zip(&self.obs_scale)
            .map(|((r, o), s)| (r - o) / s)
            .collect()
    }

    pub fn denormalize_feature(&self, k: usize, v: f64) -> f64 {
        v * self.obs_scale[k] + self.obs_offset[k]
    }

    /// Clips `action` into bounds, reporting whether anything was clipped.
    pub fn clip_action(&self, action: &[f64]) -> Result<(Vec<f64>, bool)> {
        if action.len() != self.action_dim {
            return Err(Error::Dimension(format!(
                "{}: action has {} entries, expected {}",
                self.name,
                action.len(),
                self.action_dim
            )));
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::NonFinite(format!("{} action", self.name)));
        }
        let mut clipped = false;
        let out = action
            .iter()
            .zip(&self.action_bounds)
            .map(|(&a, &[lo, hi])| {
                let c = a.clamp(lo, hi);
                clipped |= c != a;
                c
            })
            .collect();
        if clipped {
            log::warn!("{}: action {:?} clipped into bounds", self.name, action);
        }
        Ok((out, clipped))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// True terminal state (no bootstrapping past it).
    pub terminated: bool,
    /// Horizon reached.
    pub truncated: bool,
    pub crashed: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Samples an initial state deterministically from `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one tick. Out-of-bound actions are clipped; NaN is an error.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;

    /// Physical state for trajectory dumps.
    fn raw_state(&self) -> Vec<f64>;

    fn state_names(&self) -> Vec<String>;
}

pub type EnvFactory = fn() -> Box<dyn Env>;

/// Name-indexed environment constructors.
pub struct EnvRegistry {
    entries: Vec<(&'static str, EnvFactory)>,
}

impl EnvRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("pendulum", || Box::new(CartPole::new(CartPoleParams::default())));
        r.register("lane", || Box::new(LaneKeeping::new(LaneParams::default())));
        r.register("ring", || Box::new(Ring::new(RingParams::default())));
        r.register("plateau", || Box::new(Plateau::new()));
        r
    }

    /// Registers (or replaces) a constructor.
    pub fn register(&mut self, name: &'static str, f: EnvFactory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, f));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn make(&self, name: &str) -> Result<Box<dyn Env>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| Error::config("env", format!("unknown '{name}'")))
    }
}

pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    EnvRegistry::builtin().make(name)
}

/// Zero action in every dimension, the control baseline for evaluation.
pub fn no_op_policy(spec: &EnvSpec) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
    let n = spec.action_dim;
    move |_| Ok(vec![0.0; n])
}

/// One row of a trajectory dump.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub tick: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Runs one episode with `policy` mapping normalized observations to actions.
pub fn rollout(
    env: &mut dyn Env,
    seed: u64,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<(f64, Vec<TrajectoryRow>)> {
    let mut obs = env.reset(seed);
    let mut rows = Vec::new();
    let mut ret = 0.0;
    for tick in 0..env.spec().horizon {
        let state = env.raw_state();
        let action = policy(&obs)?;
        let step = env.step(&action)?;
        ret += step.reward;
        rows.push(TrajectoryRow {
            tick,
            state,
            action,
            reward: step.reward,
        });
        let done = step.done();
        obs = step.obs;
        if done {
            break;
        }
    }
    Ok((ret, rows))
}

/// Writes `tick, state..., action..., reward` as CSV.
pub fn write_trajectory_csv(path: &Path, env: &dyn Env, rows: &[TrajectoryRow]) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = vec!["tick".to_string()];
    header.extend(env.state_names());
    header.extend(env.spec().action_names.iter().cloned());
    header.push("reward".into());
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        let mut fields = vec![r.tick.to_string()];
        fields.extend(r.state.iter().map(|v| v.to_string()));
        fields.extend(r.action.iter().map(|v| v.to_string()));
        fields.push(r.reward.to_string());
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_env_names_the_field() {
        let err = make_env("").err().unwrap();
        assert_eq!(err.to_string(), "env: unknown ''");
    }

    #[test]
    fn registry_lists_builtins() {
        let names = EnvRegistry::builtin().names();
        for n in ["pendulum", "lane", "ring", "plateau"] {
            assert!(names.contains(&n));
        }
    }

    #[test]
    fn every_builtin_resets_deterministically_with_finite_observations() {
        for name in EnvRegistry::builtin().names() {
            let mut a = make_env(name).unwrap();
            let mut b = make_env(name).unwrap();
            let oa = a.reset(17);
            assert_eq!(oa, b.reset(17));
            assert_eq!(oa.len(), a.spec().obs_dim);
            assert!(oa.iter().all(|v| v.is_finite()));
            let spec = a.spec().clone();
            assert_eq!(spec.feature_names.len(), spec.obs_dim);
            assert!(spec.horizon > 0);
            assert!(spec
                .action_bounds
                .iter()
                .all(|[lo, hi]| lo.is_finite() && hi.is_finite() && lo < hi));
        }
    }

    #[test]
    fn nan_actions_are_rejected() {
        for name in EnvRegistry::builtin().names() {
            let mut env = make_env(name).unwrap();
            env.reset(0);
            let a = vec![f64::NAN; env.spec().action_dim];
            assert!(matches!(env.step(&a), Err(Error::NonFinite(_))));
        }
    }

    #[test]
    fn replaying_a_seed_reproduces_the_trajectory() {
        for name in EnvRegistry::builtin().names() {
            let run = || {
                let mut env = make_env(name).unwrap();
                let mut k = 0.0_f64;
                rollout(env.as_mut(), 5, |obs| {
                    k += 0.37;
                    Ok(vec![k.sin() * 0.5 + 0.01 * obs[0]; 1])
                })
                .unwrap()
            };
            let (ra, ta) = run();
            let (rb, tb) = run();
            assert_eq!(ra.to_bits(), rb.to_bits());
            assert_eq!(ta, tb);
        }
    }
}
