use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, StepResult};
use crate::error::Result;

/// Optimal action on each quarter of the input range.
pub const PLATEAU_LEVELS: [f64; 4] = [-0.75, -0.25, 0.25, 0.75];

/// Contextual bandit with a piecewise-constant optimal action.
///
/// Each tick draws `x ~ U[-1, 1]` independently; the best action is the
/// level for the quarter containing `x`. A two-leaf tree can only capture two
/// of the four plateaus, which makes this a clean test for tree growth.
pub struct Plateau {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    x: f64,
    tick: usize,
}

impl Plateau {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "plateau".into(),
                obs_dim: 1,
                action_dim: 1,
                action_bounds: vec![[-1.0, 1.0]],
                horizon: 50,
                feature_names: vec!["x".into()],
                action_names: vec!["a".into()],
                obs_offset: vec![0.0],
                obs_scale: vec![1.0],
            },
            rng: ChaCha8Rng::seed_from_u64(0),
            x: 0.0,
            tick: 0,
        }
    }

    pub fn target(x: f64) -> f64 {
        let q = (((x + 1.0) * 2.0).floor() as i64).clamp(0, 3) as usize;
        PLATEAU_LEVELS[q]
    }
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Plateau {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.x = self.rng.random_range(-1.0..=1.0);
        self.tick = 0;
        vec![self.x]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let (a, _) = self.spec.clip_action(action)?;
        let reward = 1.0 - (a[0] - Self::target(self.x)).powi(2);
        self.x = self.rng.random_range(-1.0..=1.0);
        self.tick += 1;
        Ok(StepResult {
            obs: vec![self.x],
            reward,
            terminated: false,
            truncated: self.tick >= self.spec.horizon,
            crashed: false,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        vec![self.x]
    }

    fn state_names(&self) -> Vec<String> {
        vec!["x".into()]
    }
}
