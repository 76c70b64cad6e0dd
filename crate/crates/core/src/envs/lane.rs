use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, StepResult};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LaneParams {
    pub wheelbase: f64,
    pub speed: f64,
    pub dt: f64,
    pub max_steer: f64,
    pub amplitude: f64,
    pub wavelength: f64,
    /// Offset that zeroes the per-step reward.
    pub reward_width: f64,
    /// Offset beyond which the vehicle is reported as off the lane.
    pub lane_half_width: f64,
    /// Look-ahead distances for the curvature and heading preview features.
    pub preview: [f64; 2],
    pub horizon: usize,
}

impl Default for LaneParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            speed: 10.0,
            dt: 0.1,
            max_steer: 0.3,
            amplitude: 5.0,
            wavelength: 200.0,
            reward_width: 1.0,
            lane_half_width: 2.0,
            preview: [10.0, 20.0],
            horizon: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LaneState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    pub phase: f64,
}

/// Kinematic bicycle following a sinusoidal centerline.
pub struct LaneKeeping {
    params: LaneParams,
    spec: EnvSpec,
    state: LaneState,
    tick: usize,
}

impl LaneKeeping {
    pub fn new(params: LaneParams) -> Self {
        let k = 2.0 * PI / params.wavelength;
        let max_curv = params.amplitude * k * k;
        let max_yaw = params.speed / params.wheelbase * params.max_steer.tan();
        let names = [
            "lateral_offset",
            "heading_error",
            "lateral_speed",
            "yaw_rate",
            "speed",
            "velocity_x",
            "velocity_y",
            "curvature_here",
            "curvature_near",
            "curvature_far",
            "path_heading_near",
            "path_heading_far",
        ];
        let scale = vec![
            params.lane_half_width,
            0.5,
            params.speed * 0.5,
            max_yaw,
            params.speed,
            params.speed,
            params.speed,
            max_curv,
            max_curv,
            max_curv,
            0.5,
            0.5,
        ];
        let spec = EnvSpec {
            name: "lane".into(),
            obs_dim: 12,
            action_dim: 1,
            action_bounds: vec![[-params.max_steer, params.max_steer]],
            horizon: params.horizon,
            feature_names: names.map(String::from).to_vec(),
            action_names: vec!["steering".into()],
            obs_offset: vec![0.0; 12],
            obs_scale: scale,
        };
        Self {
            params,
            spec,
            state: LaneState::default(),
            tick: 0,
        }
    }

    pub fn state(&self) -> LaneState {
        self.state
    }

    fn k(&self) -> f64 {
        2.0 * PI / self.params.wavelength
    }

    pub fn path_y(&self, x: f64) -> f64 {
        self.params.amplitude * (self.k() * x + self.state.phase).sin()
    }

    fn path_slope(&self, x: f64) -> f64 {
        self.params.amplitude * self.k() * (self.k() * x + self.state.phase).cos()
    }

    fn path_curvature(&self, x: f64) -> f64 {
        let d1 = self.path_slope(x);
        let d2 = -self.params.amplitude * self.k() * self.k() * (self.k() * x + self.state.phase).sin();
        d2 / (1.0 + d1 * d1).powf(1.5)
    }

    /// Signed distance to the centerline, positive to the left of the path.
    pub fn lateral_offset(&self) -> f64 {
        let s = self.state;
        let slope_angle = self.path_slope(s.x).atan();
        (s.y - self.path_y(s.x)) * slope_angle.cos()
    }

    fn heading_error(&self) -> f64 {
        wrap_angle(self.state.heading - self.path_slope(self.state.x).atan())
    }

    fn raw_obs(&self) -> Vec<f64> {
        let s = self.state;
        let he = self.heading_error();
        let [near, far] = self.params.preview;
        vec![
            self.lateral_offset(),
            he,
            s.speed * he.sin(),
            s.yaw_rate,
            s.speed,
            s.speed * s.heading.cos(),
            s.speed * s.heading.sin(),
            self.path_curvature(s.x),
            self.path_curvature(s.x + near),
            self.path_curvature(s.x + far),
            wrap_angle(self.path_slope(s.x + near).atan() - s.heading),
            wrap_angle(self.path_slope(s.x + far).atan() - s.heading),
        ]
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl Env for LaneKeeping {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = LaneState {
            phase: rng.random_range(0.0..2.0 * PI),
            speed: self.params.speed,
            ..Default::default()
        };
        let y0 = self.path_y(0.0);
        self.state.y = y0 + rng.random_range(-0.2..0.2);
        self.state.heading = self.path_slope(0.0).atan() + rng.random_range(-0.02..0.02);
        self.tick = 0;
        self.spec.normalize(&self.raw_obs())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let (a, _) = self.spec.clip_action(action)?;
        let p = &self.params;
        let s = &mut self.state;
        s.yaw_rate = s.speed / p.wheelbase * a[0].tan();
        s.x += p.dt * s.speed * s.heading.cos();
        s.y += p.dt * s.speed * s.heading.sin();
        s.heading = wrap_angle(s.heading + p.dt * s.yaw_rate);
        self.tick += 1;
        let offset = self.lateral_offset();
        let reward = (1.0 - (offset / self.params.reward_width).powi(2)).max(0.0);
        Ok(StepResult {
            obs: self.spec.normalize(&self.raw_obs()),
            reward,
            terminated: false,
            truncated: self.tick >= self.params.horizon,
            crashed: offset.abs() > self.params.lane_half_width,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        let s = self.state;
        vec![s.x, s.y, s.heading, s.speed, self.lateral_offset()]
    }

    fn state_names(&self) -> Vec<String> {
        ["x", "y", "heading", "speed", "lateral_offset"]
            .map(String::from)
            .to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_has_twelve_features() {
        let mut env = LaneKeeping::new(LaneParams::default());
        assert_eq!(env.reset(1).len(), 12);
    }

    #[test]
    fn centered_vehicle_gets_full_reward() {
        let mut env = LaneKeeping::new(LaneParams::default());
        env.reset(0);
        env.state.y = env.path_y(env.state.x);
        env.state.heading = env.path_slope(env.state.x).atan();
        let r = env.step(&[0.0]).unwrap();
        assert!(r.reward > 0.99, "{}", r.reward);
    }

    #[test]
    fn no_op_departs_the_lane_on_a_curved_path() {
        for seed in 0..10 {
            let mut env = LaneKeeping::new(LaneParams::default());
            env.reset(seed);
            let mut departed = None;
            for t in 0..500 {
                let r = env.step(&[0.0]).unwrap();
                if r.crashed {
                    departed = Some(t);
                    break;
                }
            }
            assert!(departed.is_some(), "seed {seed} stayed in lane");
        }
    }

    #[test]
    fn curvature_feedforward_tracks_the_path() {
        // Steering from the path curvature plus a proportional correction
        // keeps the vehicle on the centerline.
        let mut env = LaneKeeping::new(LaneParams::default());
        env.reset(3);
        let mut total = 0.0;
        for _ in 0..500 {
            let kappa = env.path_curvature(env.state.x);
            let steer = (2.5 * kappa).atan() - 0.3 * env.lateral_offset() - 1.0 * env.heading_error();
            let r = env.step(&[steer]).unwrap();
            total += r.reward;
            assert!(!r.crashed);
        }
        assert!(total > 450.0, "return {total}");
    }
}
