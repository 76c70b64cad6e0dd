//! The actor interface shared by trees, soft trees and MLPs, the squashed
//! Gaussian action head, and the name registry used to build actors from
//! configuration or checkpoints.

use icct_autodiff::optim::ParamStore;
use icct_autodiff::{Graph, Tensor, Var};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{Cddt, LeafKind, Mlp};
use crate::crisp::CrispTree;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::icct::{Icct, IcctConfig, Variant};

/// Pre-squash Gaussian parameters for a batch, both `B x A`.
#[derive(Clone, Debug)]
pub struct Head {
    pub mean: Var,
    pub std: Var,
    /// Leaf reached by each row, for hard-routed trees.
    pub leaves: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub active: usize,
}

pub trait Policy: Send + Sync {
    fn kind(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn bounds(&self) -> &[[f64; 2]];
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the forward pass for `obs (B x m)` with parameters bound as
    /// `p`. Stochastic variants draw their noise from `rng`.
    fn forward(&self, g: &mut Graph, p: &[Var], obs: Var, rng: &mut dyn RngCore) -> Result<Head>;

    /// Extra actor-loss term such as an L1 penalty.
    fn penalty(&self, _g: &mut Graph, _p: &[Var]) -> Result<Option<Var>> {
        Ok(None)
    }

    fn count_params(&self) -> ParamCount;

    /// Interpretable form, if the architecture has one.
    fn crisp(&self) -> Result<Option<CrispTree>> {
        Ok(None)
    }

    /// Self-describing JSON with a `kind` discriminator.
    fn to_json(&self) -> serde_json::Value;

    fn clone_box(&self) -> Box<dyn Policy>;

    fn as_any(&self) -> &dyn std::any::Any;
}

impl Clone for Box<dyn Policy> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Maps a normalized action in `[-1, 1]` to environment units.
pub fn scale_action(a: f64, [lo, hi]: [f64; 2]) -> f64 {
    lo + 0.5 * (a + 1.0) * (hi - lo)
}

/// `tanh` squashing into `[lo, hi]`.
pub fn squash_scalar(u: f64, bounds: [f64; 2]) -> f64 {
    scale_action(u.tanh(), bounds)
}

/// Reparameterized squashed sample.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `tanh(u)`, `B x A`.
    pub action: Var,
    /// `B`.
    pub log_prob: Var,
}

const SQUASH_EPS: f64 = 1e-6;

/// `u = mean + std * eps`, `a = tanh(u)`, with the change-of-variables
/// correction `-sum ln(1 - a^2 + 1e-6)` on the log-density.
pub fn sample_squashed(g: &mut Graph, head: &Head, eps: Tensor) -> Result<Sample> {
    let eps = g.constant(eps);
    let noise = g.mul(head.std, eps)?;
    let u = g.add(head.mean, noise)?;
    let lp = g.gaussian_log_pdf(head.mean, head.std, u)?;
    let lp = g.row_sum(lp);
    let a = g.tanh(u);
    let a2 = g.mul(a, a)?;
    let one_minus = g.rsub(1.0 + SQUASH_EPS, a2);
    let corr = g.ln(one_minus)?;
    let corr = g.row_sum(corr);
    let log_prob = g.sub(lp, corr)?;
    Ok(Sample { action: a, log_prob })
}

pub fn standard_normal(rng: &mut dyn RngCore, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionOutput {
    /// Pre-squash mean.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// In environment units.
    pub action: Vec<f64>,
    /// In `[-1, 1]`.
    pub action_norm: Vec<f64>,
    /// Zero for deterministic actions.
    pub log_prob: f64,
    pub leaf: Option<usize>,
}

pub fn states_tensor(xs: &[Vec<f64>], m: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(xs.len() * m);
    for x in xs {
        if x.len() != m {
            return Err(Error::Dimension(format!(
                "state has {} features, policy expects {m}",
                x.len()
            )));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("state".into()));
        }
        data.extend_from_slice(x);
    }
    Ok(Tensor::matrix(xs.len(), m, data)?)
}

/// Actions for a batch of states. With `training` the action is sampled from
/// the squashed Gaussian; otherwise it is the squashed mean.
pub fn act_batch(
    policy: &dyn Policy,
    xs: &[Vec<f64>],
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Vec<ActionOutput>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let a_dim = policy.action_dim();
    let mut g = Graph::new();
    let p = policy.params().bind_frozen(&mut g);
    let obs = g.constant(states_tensor(xs, policy.obs_dim())?);
    let head = policy.forward(&mut g, &p, obs, rng)?;
    let (a_norm, log_prob) = if training {
        let eps = standard_normal(rng, &[xs.len(), a_dim]);
        let s = sample_squashed(&mut g, &head, eps)?;
        (g.value(s.action).data().to_vec(), g.value(s.log_prob).data().to_vec())
    } else {
        let t = g.tanh(head.mean);
        (g.value(t).data().to_vec(), vec![0.0; xs.len()])
    };
    let mean = g.value(head.mean).data();
    let std = g.value(head.std).data();
    let bounds = policy.bounds();
    let mut out = Vec::with_capacity(xs.len());
    for r in 0..xs.len() {
        let span = r * a_dim..(r + 1) * a_dim;
        let an = a_norm[span.clone()].to_vec();
        if !log_prob[r].is_finite() || an.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy output".into()));
        }
        out.push(ActionOutput {
            mean: mean[span.clone()].to_vec(),
            std: std[span].to_vec(),
            action: an.iter().zip(bounds).map(|(&a, &b)| scale_action(a, b)).collect(),
            action_norm: an,
            log_prob: log_prob[r],
            leaf: head.leaves.as_ref().map(|l| l[r]),
        });
    }
    Ok(out)
}

pub fn act(policy: &dyn Policy, x: &[f64], training: bool, rng: &mut dyn RngCore) -> Result<ActionOutput> {
    let mut v = act_batch(policy, &[x.to_vec()], training, rng)?;
    Ok(v.remove(0))
}

/// Architecture settings shared by every registered actor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: String,
    pub depth: usize,
    /// Active features per leaf controller; `None` means all of them.
    pub e: Option<usize>,
    pub variant: Variant,
    /// One standard deviation per leaf instead of one per leaf and action.
    pub shared_std: bool,
    /// L1 coefficient for the sparse-complete baseline.
    pub l1: f64,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: "icct".into(),
            depth: 1,
            e: None,
            variant: Variant::StraightThrough,
            shared_std: false,
            l1: 5e-3,
            hidden: vec![256, 256],
        }
    }
}

impl ModelConfig {
    pub fn leaves(&self) -> usize {
        1 << self.depth
    }
}

pub type PolicyBuilder = fn(&ModelConfig, &EnvSpec, u64) -> Result<Box<dyn Policy>>;
pub type PolicyLoader = fn(&serde_json::Value) -> Result<Box<dyn Policy>>;

struct Entry {
    name: &'static str,
    build: PolicyBuilder,
}

/// Name-indexed actor constructors plus kind-indexed checkpoint loaders.
pub struct PolicyRegistry {
    builders: Vec<Entry>,
    loaders: Vec<(&'static str, PolicyLoader)>,
}

fn icct_config(cfg: &ModelConfig, spec: &EnvSpec, e: usize, l1: f64) -> IcctConfig {
    IcctConfig {
        depth: cfg.depth,
        m: spec.obs_dim,
        action_dim: spec.action_dim,
        e,
        variant: cfg.variant,
        shared_std: cfg.shared_std,
        l1,
        bounds: spec.action_bounds.clone(),
    }
}

fn build_icct(cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
    let e = cfg.e.unwrap_or(spec.obs_dim);
    Ok(Box::new(Icct::init(icct_config(cfg, spec, e, 0.0), seed)?))
}

fn build_icct_static(cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
    Ok(Box::new(Icct::init(icct_config(cfg, spec, 0, 0.0), seed)?))
}

fn build_icct_l1(cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
    Ok(Box::new(Icct::init(
        icct_config(cfg, spec, spec.obs_dim, cfg.l1),
        seed,
    )?))
}

fn build_icct_gumbel(cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
    let mut c = icct_config(cfg, spec, cfg.e.unwrap_or(spec.obs_dim), 0.0);
    if !matches!(c.variant, Variant::Gumbel { .. }) {
        c.variant = Variant::Gumbel { tau: 1.0 };
    }
    Ok(Box::new(Icct::init(c, seed)?))
}

fn build_cddt(cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
    Ok(Box::new(Cddt::init(cfg.depth, spec, LeafKind::Static, seed)?))
}

fn build_cddt_controllers(cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
    Ok(Box::new(Cddt::init(cfg.depth, spec, LeafKind::Controller, seed)?))
}

fn build_mlp(cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
    Ok(Box::new(Mlp::init(spec, &cfg.hidden, seed)?))
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            builders: Vec::new(),
            loaders: Vec::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("icct", build_icct);
        r.register("icct-static", build_icct_static);
        r.register("icct-l1", build_icct_l1);
        r.register("icct-gumbel", build_icct_gumbel);
        r.register("cddt", build_cddt);
        r.register("cddt-controllers", build_cddt_controllers);
        // size presets differ only in `hidden`, filled in by the config layer
        for name in ["mlp", "mlp-max", "mlp-u", "mlp-l"] {
            r.register(name, build_mlp);
        }
        r.register_loader(Icct::KIND, |v| Ok(Box::new(Icct::from_json(v)?)));
        r.register_loader(Cddt::KIND, |v| Ok(Box::new(Cddt::from_json(v)?)));
        r.register_loader(Mlp::KIND, |v| Ok(Box::new(Mlp::from_json(v)?)));
        r
    }

    pub fn register(&mut self, name: &'static str, build: PolicyBuilder) {
        self.builders.retain(|e| e.name != name);
        self.builders.push(Entry { name, build });
    }

    pub fn register_loader(&mut self, kind: &'static str, load: PolicyLoader) {
        self.loaders.retain(|(k, _)| *k != kind);
        self.loaders.push((kind, load));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.iter().map(|e| e.name).collect()
    }

    pub fn build(&self, cfg: &ModelConfig, spec: &EnvSpec, seed: u64) -> Result<Box<dyn Policy>> {
        let entry = self
            .builders
            .iter()
            .find(|e| e.name == cfg.kind)
            .ok_or_else(|| Error::config("model.kind", format!("unknown '{}'", cfg.kind)))?;
        (entry.build)(cfg, spec, seed)
    }

    pub fn load(&self, v: &serde_json::Value) -> Result<Box<dyn Policy>> {
        let kind = v
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::Checkpoint("missing 'kind'".into()))?;
        let (_, load) = self
            .loaders
            .iter()
            .find(|(k, _)| *k == kind)
            .ok_or_else(|| Error::Unknown {
                what: "policy kind",
                name: kind.to_string(),
            })?;
        load(v)
    }
}
