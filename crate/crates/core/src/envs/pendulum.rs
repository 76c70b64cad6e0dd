use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, StepResult};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from pivot to the pole's center of mass.
    pub half_length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub force_limit: f64,
    pub angle_limit: f64,
    pub position_limit: f64,
    pub horizon: usize,
    /// Half-width of the uniform initial-state distribution.
    pub init_spread: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
            dt: 0.02,
            force_limit: 3.0,
            angle_limit: 0.2,
            position_limit: 2.4,
            horizon: 1000,
            init_spread: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PendulumState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

/// Cart-pole with a continuous horizontal force, +1 per surviving tick.
pub struct CartPole {
    params: CartPoleParams,
    spec: EnvSpec,
    state: PendulumState,
    tick: usize,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Self {
        let spec = EnvSpec {
            name: "pendulum".into(),
            obs_dim: 4,
            action_dim: 1,
            action_bounds: vec![[-params.force_limit, params.force_limit]],
            horizon: params.horizon,
            feature_names: ["cart_position", "cart_velocity", "pole_angle", "pole_angular_velocity"]
                .map(String::from)
                .to_vec(),
            action_names: vec!["force".into()],
            obs_offset: vec![0.0; 4],
            obs_scale: vec![params.position_limit, 3.0, params.angle_limit, 3.0],
        };
        Self {
            params,
            spec,
            state: PendulumState::default(),
            tick: 0,
        }
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    pub fn set_state(&mut self, s: PendulumState) {
        self.state = s;
    }

    fn observe(&self) -> Vec<f64> {
        let s = self.state;
        self.spec.normalize(&[s.x, s.x_dot, s.theta, s.theta_dot])
    }

    /// Mechanical energy of the cart and the uniform-rod pole, with potential
    /// measured from the hanging position so it is never negative.
    pub fn energy(&self) -> f64 {
        let p = &self.params;
        let s = self.state;
        let total = p.cart_mass + p.pole_mass;
        let l = p.half_length;
        0.5 * total * s.x_dot * s.x_dot
            + p.pole_mass * l * s.theta.cos() * s.x_dot * s.theta_dot
            + 0.5 * (4.0 / 3.0) * p.pole_mass * l * l * s.theta_dot * s.theta_dot
            + p.pole_mass * p.gravity * l * (1.0 + s.theta.cos())
    }

    /// One semi-implicit Euler tick under `force`, without termination logic.
    pub fn integrate(&mut self, force: f64) {
        let p = &self.params;
        let s = &mut self.state;
        let total = p.cart_mass + p.pole_mass;
        let pml = p.pole_mass * p.half_length;
        let (sin, cos) = s.theta.sin_cos();
        let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total;
        let theta_acc =
            (p.gravity * sin - cos * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        s.x_dot += p.dt * x_acc;
        s.x += p.dt * s.x_dot;
        s.theta_dot += p.dt * theta_acc;
        s.theta += p.dt * s.theta_dot;
    }
}

impl Env for CartPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.params.init_spread;
        let mut draw = || rng.random_range(-w..=w);
        self.state = PendulumState {
            x: draw(),
            x_dot: draw(),
            theta: draw(),
            theta_dot: draw(),
        };
        self.tick = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let (a, _) = self.spec.clip_action(action)?;
        self.integrate(a[0]);
        self.tick += 1;
        let s = self.state;
        let terminated = s.theta.abs() > self.params.angle_limit || s.x.abs() > self.params.position_limit;
        Ok(StepResult {
            obs: self.observe(),
            reward: if terminated { 0.0 } else { 1.0 },
            terminated,
            truncated: !terminated && self.tick >= self.params.horizon,
            crashed: false,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        let s = self.state;
        vec![s.x, s.x_dot, s.theta, s.theta_dot]
    }

    fn state_names(&self) -> Vec<String> {
        self.spec.feature_names.clone()
    }
}
