use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Env, EnvSpec, StepResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IdmParams {
    pub v0: f64,
    pub time_headway: f64,
    pub s0: f64,
    pub a_max: f64,
    pub b_comf: f64,
    /// Hard braking limit for the clamp.
    pub b_max: f64,
    pub noise_std: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 5.0,
            time_headway: 1.0,
            s0: 2.0,
            a_max: 1.0,
            b_comf: 1.5,
            b_max: 7.5,
            noise_std: 0.2,
        }
    }
}

/// Intelligent Driver Model acceleration with additive Gaussian noise.
///
/// `gap` is bumper-to-bumper distance to the leader. The dynamic part of the
/// desired gap is floored at zero so a faster leader never shrinks it below
/// `s0`.
pub fn idm_accel(gap: f64, speed: f64, lead_speed: f64, p: &IdmParams, rng: &mut dyn RngCore) -> Result<f64> {
    if gap <= 0.0 || gap.is_nan() {
        return Err(Error::Collision { gap });
    }
    let dv = speed - lead_speed;
    let s_star = p.s0 + (speed * p.time_headway + speed * dv / (2.0 * (p.a_max * p.b_comf).sqrt())).max(0.0);
    let mut a = p.a_max * (1.0 - (speed / p.v0).powi(4) - (s_star / gap).powi(2));
    if p.noise_std > 0.0 {
        let n = Normal::new(0.0, p.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
        a += n.sample(rng);
    }
    Ok(a.clamp(-p.b_max, p.a_max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingParams {
    pub length: f64,
    pub vehicles: usize,
    pub vehicle_length: f64,
    pub dt: f64,
    pub horizon: usize,
    pub target_speed: f64,
    pub max_speed: f64,
    pub ego_accel: f64,
    pub idm: IdmParams,
}

impl Default for RingParams {
    fn default() -> Self {
        Self {
            length: 260.0,
            vehicles: 22,
            vehicle_length: 5.0,
            dt: 0.1,
            horizon: 750,
            target_speed: 4.5,
            max_speed: 10.0,
            ego_accel: 1.0,
            idm: IdmParams::default(),
        }
    }
}

/// Vehicle `i` follows vehicle `i + 1` (mod n). Positions are unwrapped arc
/// lengths so ordering can be checked directly; observations wrap them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RingState {
    pub positions: Vec<f64>,
    pub speeds: Vec<f64>,
    /// `None` makes every vehicle an IDM driver.
    pub ego: Option<usize>,
}

/// Single-lane ring road with IDM humans and one learned vehicle.
pub struct Ring {
    params: RingParams,
    spec: EnvSpec,
    state: RingState,
    rng: ChaCha8Rng,
    tick: usize,
}

impl Ring {
    pub fn new(params: RingParams) -> Self {
        let n = params.vehicles;
        let mut names = vec!["ego_position".to_string()];
        names.extend((1..n).map(|k| format!("ahead{k}_rel_position")));
        names.push("ego_speed".into());
        names.extend((1..n).map(|k| format!("ahead{k}_speed")));
        let mut scale = vec![params.length; n];
        scale.extend(vec![params.max_speed; n]);
        let spec = EnvSpec {
            name: "ring".into(),
            obs_dim: 2 * n,
            action_dim: 1,
            action_bounds: vec![[-params.ego_accel, params.ego_accel]],
            horizon: params.horizon,
            feature_names: names,
            action_names: vec!["ego_acceleration".into()],
            obs_offset: vec![0.0; 2 * n],
            obs_scale: scale,
        };
        Self {
            params,
            spec,
            state: RingState::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
            tick: 0,
        }
    }

    pub fn state(&self) -> &RingState {
        &self.state
    }

    pub fn set_state(&mut self, s: RingState) {
        self.state = s;
    }

    pub fn params(&self) -> &RingParams {
        &self.params
    }

    /// Bumper-to-bumper gap from vehicle `i` to its leader.
    pub fn gap(&self, i: usize) -> f64 {
        let n = self.state.positions.len();
        let j = (i + 1) % n;
        let mut d = self.state.positions[j] - self.state.positions[i];
        if j == 0 {
            d += self.params.length;
        }
        d - self.params.vehicle_length
    }

    pub fn mean_speed(&self) -> f64 {
        self.state.speeds.iter().sum::<f64>() / self.state.speeds.len() as f64
    }

    pub fn reward(&self) -> f64 {
        let v = self.params.target_speed;
        (1.0 - (self.mean_speed() - v).abs() / v).max(0.0)
    }

    fn observe(&self) -> Vec<f64> {
        let s = &self.state;
        let n = s.positions.len();
        let l = self.params.length;
        let ego = s.ego.unwrap_or(0);
        let ego_pos = s.positions[ego];
        let mut raw = Vec::with_capacity(2 * n);
        raw.push(ego_pos.rem_euclid(l));
        for k in 1..n {
            let j = (ego + k) % n;
            raw.push((s.positions[j] - ego_pos).rem_euclid(l));
        }
        for k in 0..n {
            raw.push(s.speeds[(ego + k) % n]);
        }
        self.spec.normalize(&raw)
    }

    fn crash_result(&self) -> StepResult {
        StepResult {
            obs: self.observe(),
            reward: 0.0,
            terminated: true,
            truncated: false,
            crashed: true,
        }
    }
}

impl Env for Ring {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Vehicles start at rest and equally spaced; the noise stream is seeded.
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let n = self.params.vehicles;
        let spacing = self.params.length / n as f64;
        self.state = RingState {
            positions: (0..n).map(|i| i as f64 * spacing).collect(),
            speeds: vec![0.0; n],
            ego: Some(0),
        };
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.tick = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let (a, _) = self.spec.clip_action(action)?;
        let n = self.state.positions.len();
        let mut accel = vec![0.0; n];
        for i in 0..n {
            if Some(i) == self.state.ego {
                accel[i] = a[0];
                continue;
            }
            let lead = self.state.speeds[(i + 1) % n];
            match idm_accel(self.gap(i), self.state.speeds[i], lead, &self.params.idm, &mut self.rng) {
                Ok(v) => accel[i] = v,
                Err(Error::Collision { .. }) => return Ok(self.crash_result()),
                Err(e) => return Err(e),
            }
        }
        let p = &self.params;
        for i in 0..n {
            let v = (self.state.speeds[i] + p.dt * accel[i]).clamp(0.0, p.max_speed);
            self.state.speeds[i] = v;
            self.state.positions[i] += p.dt * v;
        }
        self.tick += 1;
        if (0..n).any(|i| self.gap(i) <= 0.0) {
            return Ok(self.crash_result());
        }
        Ok(StepResult {
            obs: self.observe(),
            reward: self.reward(),
            terminated: false,
            truncated: self.tick >= self.params.horizon,
            crashed: false,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        let l = self.params.length;
        let mut v: Vec<f64> = self.state.positions.iter().map(|p| p.rem_euclid(l)).collect();
        v.extend(&self.state.speeds);
        v
    }

    fn state_names(&self) -> Vec<String> {
        let n = self.params.vehicles;
        let mut names: Vec<String> = (0..n).map(|i| format!("pos{i}")).collect();
        names.extend((0..n).map(|i| format!("speed{i}")));
        names
    }
}
