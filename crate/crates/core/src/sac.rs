//! Soft actor-critic with twin critics, Polyak-averaged targets and uniform
//! replay. Works with any [`Policy`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use icct_autodiff::optim::{Adam, ParamStore};
use icct_autodiff::{Graph, Tensor, Var};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{dense_forward, push_dense};
use crate::checkpoint::{checkpoint_path, save_checkpoint};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::policy::{act, sample_squashed, scale_action, standard_normal, states_tensor, Policy};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Squashed action in `[-1, 1]`.
    pub action: Vec<f64>,
    /// Pre-squash sample.
    pub raw_action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True termination only; time-limit truncation still bootstraps.
    pub done: bool,
}

/// FIFO ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        let first = ts.first().ok_or(Error::EmptyBuffer)?;
        let (m, a) = (first.state.len(), first.action.len());
        let states: Vec<Vec<f64>> = ts.iter().map(|t| t.state.clone()).collect();
        let next: Vec<Vec<f64>> = ts.iter().map(|t| t.next_state.clone()).collect();
        let actions = ts.iter().flat_map(|t| t.action.iter().copied()).collect();
        Ok(Self {
            states: states_tensor(&states, m)?,
            actions: Tensor::matrix(ts.len(), a, actions)?,
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_states: states_tensor(&next, m)?,
            dones: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        })
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("trainer.buffer_capacity", "must be positive"));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("reward".into()));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (new, old) = self.items.split_at(self.head);
        old.iter().chain(new)
    }

    /// Uniform without replacement; at most `len()` rows.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Batch> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let picks = index::sample(rng, self.items.len(), n.min(self.items.len()));
        let ts: Vec<&Transition> = picks.iter().map(|i| &self.items[i]).collect();
        Batch::from_transitions(&ts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntropyMode {
    Fixed {
        value: f64,
    },
    /// Tuned toward a target entropy of `-|A|`.
    Auto {
        initial: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub entropy: EntropyMode,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Env steps between update rounds; each round runs this many updates.
    pub update_every: usize,
    pub buffer_capacity: usize,
    pub critic_hidden: Vec<usize>,
    /// 0 writes only the first and last checkpoints.
    pub checkpoint_every: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once a periodic evaluation reaches this mean return.
    pub target_return: Option<f64>,
    pub record_wallclock: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            entropy_lr: 3e-4,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            entropy: EntropyMode::Auto { initial: 1.0 },
            total_steps: 500_000,
            warmup_steps: 1000,
            update_every: 1,
            buffer_capacity: 1_000_000,
            critic_hidden: vec![256, 256],
            checkpoint_every: 50_000,
            eval_every: 0,
            eval_episodes: 10,
            target_return: None,
            record_wallclock: false,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.actor_lr) {
            return Err(Error::config("trainer.actor_lr", "must be positive"));
        }
        if !positive(self.critic_lr) {
            return Err(Error::config("trainer.critic_lr", "must be positive"));
        }
        if !positive(self.entropy_lr) {
            return Err(Error::config("trainer.entropy_lr", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("trainer.tau", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("trainer.gamma", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be positive"));
        }
        if self.update_every == 0 {
            return Err(Error::config("trainer.update_every", "must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("trainer.buffer_capacity", "must be positive"));
        }
        match self.entropy {
            EntropyMode::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                Err(Error::config("trainer.entropy.value", "must be non-negative"))
            }
            EntropyMode::Auto { initial } if !positive(initial) => {
                Err(Error::config("trainer.entropy.initial", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

pub fn critic_init(obs_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> ParamStore {
    let mut sizes = vec![obs_dim + action_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut p = ParamStore::new();
    push_dense(&mut p, &sizes, rng);
    p
}

/// `Q(s, a)` as a length-`B` vector.
pub fn q_values(g: &mut Graph, p: &[Var], s: Var, a: Var) -> Result<Var> {
    let sa = g.concat_cols(&[s, a])?;
    let q = dense_forward(g, p, sa)?;
    let b = g.value(q).rows();
    Ok(g.reshape(q, vec![b])?)
}

/// Mean squared TD error of each critic against fixed targets `y`.
pub fn critic_losses(g: &mut Graph, p1: &[Var], p2: &[Var], batch: &Batch, y: &[f64]) -> Result<(Var, Var)> {
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let y = g.constant(Tensor::vector(y.to_vec()));
    let mut losses = [None, None];
    for (slot, p) in [p1, p2].into_iter().enumerate() {
        let q = q_values(g, p, s, a)?;
        let err = g.sq_err(q, y)?;
        losses[slot] = Some(g.mean(err)?);
    }
    Ok((losses[0].expect("set"), losses[1].expect("set")))
}

/// `mean(alpha * log pi(a|s) - min(Q1, Q2)(s, a))` with `a` reparameterized
/// through `eps`, plus the actor's own penalty. Returns the loss and the
/// per-row log-probabilities.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    g: &mut Graph,
    actor: &dyn Policy,
    p: &[Var],
    q1: &ParamStore,
    q2: &ParamStore,
    states: &Tensor,
    eps: Tensor,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<(Var, Var)> {
    let s = g.constant(states.clone());
    let head = actor.forward(g, p, s, rng)?;
    let sample = sample_squashed(g, &head, eps)?;
    let p1 = q1.bind_frozen(g);
    let p2 = q2.bind_frozen(g);
    let qa = q_values(g, &p1, s, sample.action)?;
    let qb = q_values(g, &p2, s, sample.action)?;
    let q = g.min(qa, qb)?;
    let weighted = g.scale(sample.log_prob, alpha);
    let diff = g.sub(weighted, q)?;
    let mut loss = g.mean(diff)?;
    if let Some(pen) = actor.penalty(g, p)? {
        loss = g.add(loss, pen)?;
    }
    Ok((loss, sample.log_prob))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub actor_loss: f64,
    pub entropy_coef: f64,
}

/// Learner state: actor, twin critics, their targets and optimizers.
pub struct Sac {
    pub actor: Box<dyn Policy>,
    pub q1: ParamStore,
    pub q2: ParamStore,
    pub q1_target: ParamStore,
    pub q2_target: ParamStore,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    log_alpha: ParamStore,
    alpha_opt: Adam,
    target_entropy: f64,
    cfg: TrainerConfig,
    pub rng: ChaCha8Rng,
}

impl Sac {
    pub fn new(actor: Box<dyn Policy>, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (m, a) = (actor.obs_dim(), actor.action_dim());
        let q1 = critic_init(m, a, &cfg.critic_hidden, &mut rng);
        let q2 = critic_init(m, a, &cfg.critic_hidden, &mut rng);
        let initial = match cfg.entropy {
            EntropyMode::Fixed { value } => value,
            EntropyMode::Auto { initial } => initial,
        };
        let mut log_alpha = ParamStore::new();
        log_alpha.push(Tensor::scalar(initial.ln()));
        Ok(Self {
            target_entropy: -(a as f64),
            actor,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            actor_opt: Adam::new(cfg.actor_lr),
            q1_opt: Adam::new(cfg.critic_lr),
            q2_opt: Adam::new(cfg.critic_lr),
            log_alpha,
            alpha_opt: Adam::new(cfg.entropy_lr),
            cfg,
            rng,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Swaps in a new actor and restarts its optimizer.
    pub fn replace_actor(&mut self, actor: Box<dyn Policy>) -> Result<()> {
        if actor.obs_dim() != self.actor.obs_dim() || actor.action_dim() != self.actor.action_dim() {
            return Err(Error::Dimension("replacement actor has different dimensions".into()));
        }
        self.actor = actor;
        self.actor_opt = Adam::new(self.cfg.actor_lr);
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        match self.cfg.entropy {
            EntropyMode::Fixed { value } => value,
            EntropyMode::Auto { .. } => self.log_alpha.get(0).data()[0].exp(),
        }
    }

    /// `r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s'))`
    /// with `a'` freshly sampled from the current actor.
    pub fn critic_targets(&mut self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.actor.params().bind_frozen(&mut g);
        let s2 = g.constant(batch.next_states.clone());
        let head = self.actor.forward(&mut g, &p, s2, &mut self.rng)?;
        let eps = standard_normal(&mut self.rng, &[batch.len(), self.actor.action_dim()]);
        let next = sample_squashed(&mut g, &head, eps)?;
        let t1 = self.q1_target.bind_frozen(&mut g);
        let t2 = self.q2_target.bind_frozen(&mut g);
        let qa = q_values(&mut g, &t1, s2, next.action)?;
        let qb = q_values(&mut g, &t2, s2, next.action)?;
        let q = g.min(qa, qb)?;
        let (q, lp) = (g.value(q).data(), g.value(next.log_prob).data());
        let alpha = self.alpha();
        Ok((0..batch.len())
            .map(|i| batch.rewards[i] + self.cfg.gamma * (1.0 - batch.dones[i]) * (q[i] - alpha * lp[i]))
            .collect())
    }

    pub fn critic_update(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let y = self.critic_targets(batch)?;
        let mut g = Graph::new();
        let p1 = self.q1.bind(&mut g);
        let p2 = self.q2.bind(&mut g);
        let (l1, l2) = critic_losses(&mut g, &p1, &p2, batch, &y)?;
        let total = g.add(l1, l2)?;
        let grads = g.backward(total)?;
        let (v1, v2) = (g.value(l1).item()?, g.value(l2).item()?);
        if !(v1.is_finite() && v2.is_finite()) {
            return Err(Error::NonFinite(format!("critic loss ({v1}, {v2})")));
        }
        let g1 = self.q1.collect(&grads, &p1);
        let g2 = self.q2.collect(&grads, &p2);
        self.q1_opt.step(&mut self.q1, &g1);
        self.q2_opt.step(&mut self.q2, &g2);
        Ok((v1, v2))
    }

    /// One actor step, followed by the entropy-coefficient step in auto mode.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let eps = standard_normal(&mut self.rng, &[batch.len(), self.actor.action_dim()]);
        let alpha = self.alpha();
        let mut g = Graph::new();
        let p = self.actor.params().bind(&mut g);
        let (loss, log_prob) = actor_loss(
            &mut g,
            self.actor.as_ref(),
            &p,
            &self.q1,
            &self.q2,
            &batch.states,
            eps,
            alpha,
            &mut self.rng,
        )?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("actor loss {value}")));
        }
        let grads = g.backward(loss)?;
        let ga = self.actor.params().collect(&grads, &p);
        self.actor_opt.step(self.actor.params_mut(), &ga);
        if let EntropyMode::Auto { .. } = self.cfg.entropy {
            let lp = g.value(log_prob).data();
            let mean = lp.iter().sum::<f64>() / lp.len() as f64;
            // d/d(log alpha) of -log_alpha * (log pi + target)
            let grad = Tensor::scalar(-(mean + self.target_entropy));
            self.alpha_opt.step(&mut self.log_alpha, &[grad]);
        }
        Ok(value)
    }

    pub fn soft_update(&mut self) {
        self.q1_target.soft_update(&self.q1, self.cfg.tau);
        self.q2_target.soft_update(&self.q2, self.cfg.tau);
    }

    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<UpdateStats> {
        let batch = buffer.sample(self.cfg.batch_size, &mut self.rng)?;
        let (c1, c2) = self.critic_update(&batch)?;
        let a = self.actor_update(&batch)?;
        self.soft_update();
        Ok(UpdateStats {
            critic1_loss: c1,
            critic2_loss: c2,
            actor_loss: a,
            entropy_coef: self.alpha(),
        })
    }
}

/// Seeds of the evaluation episodes; disjoint from training seeds in practice.
pub fn eval_seeds(n: usize) -> impl Iterator<Item = u64> {
    (0..n as u64).map(|i| 1_000_000_007 + i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Deterministic actions from the trained model.
    Fuzzy,
    /// Actions from the exported crisp tree.
    Crisp,
}

/// Episode returns of `policy` on `env` for each seed.
pub fn evaluate(
    policy: &dyn Policy,
    env: &mut dyn Env,
    seeds: impl IntoIterator<Item = u64>,
    mode: EvalMode,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let crisp = match mode {
        EvalMode::Fuzzy => None,
        EvalMode::Crisp => Some(
            policy
                .crisp()?
                .ok_or_else(|| Error::config("eval.mode", format!("'{}' has no crisp form", policy.kind())))?,
        ),
    };
    let mut out = Vec::new();
    for seed in seeds {
        let (ret, _) = crate::envs::rollout(env, seed, |obs| match &crisp {
            Some(t) => t.predict(obs),
            None => Ok(act(policy, obs, false, rng)?.action),
        })?;
        out.push(ret);
    }
    Ok(out)
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One row per finished episode. Loss columns average the updates made
/// during that episode and are empty during warmup.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub episode: usize,
    pub episode_return: f64,
    pub critic1_loss: Option<f64>,
    pub critic2_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub entropy_coef: f64,
    pub wallclock_s: Option<f64>,
}

pub fn write_metrics_csv(w: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    if rows.is_empty() {
        csv.write_record([
            "step",
            "episode",
            "episode_return",
            "critic1_loss",
            "critic2_loss",
            "actor_loss",
            "entropy_coef",
            "wallclock_s",
        ])?;
    }
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush().map_err(|e| Error::io(Path::new("metrics.csv"), e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_return: f64,
    pub stderr: f64,
}

pub struct TrainReport {
    pub steps: usize,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalPoint>,
    /// Actor snapshot at the best periodic evaluation, if any ran.
    pub best: Option<(EvalPoint, Box<dyn Policy>)>,
    pub checkpoints: Vec<PathBuf>,
    pub reached_target: bool,
}

fn checkpoint(out: Option<&Path>, actor: &dyn Policy, step: usize, saved: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = out {
        let path = checkpoint_path(dir, step);
        save_checkpoint(&path, actor, step)?;
        saved.push(path);
    }
    Ok(())
}

fn dump_on_failure(out: Option<&Path>, sac: &Sac, step: usize, err: &Error) {
    let Some(dir) = out else { return };
    let doc = serde_json::json!({
        "step": step,
        "error": err.to_string(),
        "entropy_coef": sac.alpha(),
        "actor": sac.actor.to_json(),
    });
    let path = dir.join("failure_dump.json");
    match serde_json::to_string_pretty(&doc) {
        Ok(text) => {
            if let Err(e) = fs::write(&path, text) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Err(e) => log::error!("could not serialize failure dump: {e}"),
    }
}

struct EpisodeAcc {
    ret: f64,
    sums: [f64; 3],
    updates: usize,
}

impl EpisodeAcc {
    fn new() -> Self {
        Self {
            ret: 0.0,
            sums: [0.0; 3],
            updates: 0,
        }
    }

    fn mean(&self, i: usize) -> Option<f64> {
        (self.updates > 0).then(|| self.sums[i] / self.updates as f64)
    }
}

/// Runs the SAC loop. With `out`, metrics go to `out/metrics.csv` and
/// checkpoints to `out/ckpt_{step}.json`.
pub fn train(
    sac: &mut Sac,
    env: &mut dyn Env,
    mut eval_env: Option<&mut dyn Env>,
    out: Option<&Path>,
) -> Result<TrainReport> {
    let spec = env.spec().clone();
    if spec.obs_dim != sac.actor.obs_dim() || spec.action_dim != sac.actor.action_dim() {
        return Err(Error::Dimension(format!(
            "env {} has {} features and {} actions, actor expects {} and {}",
            spec.name,
            spec.obs_dim,
            spec.action_dim,
            sac.actor.obs_dim(),
            sac.actor.action_dim()
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cfg = sac.cfg.clone();
    let started = Instant::now();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_e9150de5);
    let mut report = TrainReport {
        steps: 0,
        metrics: Vec::new(),
        evals: Vec::new(),
        best: None,
        checkpoints: Vec::new(),
        reached_target: false,
    };
    checkpoint(out, sac.actor.as_ref(), 0, &mut report.checkpoints)?;

    let mut obs = env.reset(seeds.next_u64());
    let mut acc = EpisodeAcc::new();
    let mut ep_len = 0;
    let mut step = 0;
    while step < cfg.total_steps {
        let (action, raw) = if step < cfg.warmup_steps {
            let a: Vec<f64> = (0..spec.action_dim).map(|_| sac.rng.random_range(-1.0..1.0)).collect();
            let raw = a.iter().map(|v: &f64| v.clamp(-0.999_999, 0.999_999).atanh()).collect();
            (a, raw)
        } else {
            let o = act(sac.actor.as_ref(), &obs, true, &mut sac.rng)?;
            let raw = o
                .action_norm
                .iter()
                .map(|v| v.clamp(-0.999_999, 0.999_999).atanh())
                .collect();
            (o.action_norm, raw)
        };
        let physical: Vec<f64> = action
            .iter()
            .zip(&spec.action_bounds)
            .map(|(&a, &b)| scale_action(a, b))
            .collect();
        let res = env.step(&physical)?;
        step += 1;
        ep_len += 1;
        acc.ret += res.reward;
        let truncated = res.truncated || ep_len >= spec.horizon;
        buffer.push(Transition {
            state: obs.clone(),
            action,
            raw_action: raw,
            reward: res.reward,
            next_state: res.obs.clone(),
            done: res.terminated,
        })?;
        obs = res.obs;

        if step >= cfg.warmup_steps && step % cfg.update_every == 0 {
            for _ in 0..cfg.update_every {
                match sac.update(&buffer) {
                    Ok(s) => {
                        acc.sums[0] += s.critic1_loss;
                        acc.sums[1] += s.critic2_loss;
                        acc.sums[2] += s.actor_loss;
                        acc.updates += 1;
                    }
                    Err(e) => {
                        dump_on_failure(out, sac, step, &e);
                        return Err(e);
                    }
                }
            }
        }

        if res.terminated || truncated {
            report.metrics.push(MetricsRow {
                step,
                episode: report.metrics.len(),
                episode_return: acc.ret,
                critic1_loss: acc.mean(0),
                critic2_loss: acc.mean(1),
                actor_loss: acc.mean(2),
                entropy_coef: sac.alpha(),
                wallclock_s: cfg.record_wallclock.then(|| started.elapsed().as_secs_f64()),
            });
            log::debug!("step {step} episode {} return {:.2}", report.metrics.len() - 1, acc.ret);
            obs = env.reset(seeds.next_u64());
            acc = EpisodeAcc::new();
            ep_len = 0;
        }

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
            checkpoint(out, sac.actor.as_ref(), step, &mut report.checkpoints)?;
        }

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            if let Some(ev) = eval_env.as_deref_mut() {
                let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(step as u64));
                let rets = evaluate(
                    sac.actor.as_ref(),
                    ev,
                    eval_seeds(cfg.eval_episodes),
                    EvalMode::Fuzzy,
                    &mut eval_rng,
                )?;
                let (mean_return, stderr) = mean_stderr(&rets);
                let point = EvalPoint {
                    step,
                    mean_return,
                    stderr,
                };
                log::info!("step {step} eval return {mean_return:.2} +- {stderr:.2}");
                report.evals.push(point);
                if report.best.as_ref().is_none_or(|(b, _)| mean_return > b.mean_return) {
                    report.best = Some((point, sac.actor.clone_box()));
                }
                if cfg.target_return.is_some_and(|t| mean_return >= t) {
                    report.reached_target = true;
                    break;
                }
            }
        }
    }
    report.steps = step;
    if step > 0 {
        checkpoint(out, sac.actor.as_ref(), step, &mut report.checkpoints)?;
    }
    if let Some(dir) = out {
        let path = dir.join("metrics.csv");
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_metrics_csv(f, &report.metrics)?;
        if !report.evals.is_empty() {
            let path = dir.join("eval.csv");
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(f);
            for p in &report.evals {
                w.serialize(p)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(report)
}
