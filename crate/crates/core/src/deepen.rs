//! Online tree growth: keep a one-level-deeper candidate in imitation of the
//! current actor and swap it in once its leaves are measurably more certain.

use std::f64::consts::{E, PI};
use std::io::Write;

use icct_autodiff::optim::Adam;
use icct_autodiff::{Graph, Tensor};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::error::{Error, Result};
use crate::icct::{Icct, NodeParams, STD_MAX, STD_MIN};
use crate::policy::{act, act_batch, scale_action, states_tensor, Policy};
use crate::sac::{eval_seeds, evaluate, mean_stderr, EvalMode, ReplayBuffer, Sac, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepenConfig {
    /// Required entropy improvement before a swap.
    pub epsilon: f64,
    pub epochs: usize,
    /// Environment steps (with SAC updates) per epoch.
    pub steps_per_epoch: usize,
    pub imitation_steps: usize,
    pub imitation_batch: usize,
    pub imitation_lr: f64,
    pub initial_depth: usize,
    pub max_depth: usize,
    /// Std of the noise added to copied leaf parameters.
    pub perturbation: f64,
    pub min_visits: usize,
    /// States used to check equivalence right after each deepening.
    pub held_out_states: usize,
    pub eval_episodes: usize,
    /// Keep new splits only under triggering leaves; the children of every
    /// other leaf are reset to copies of it, so those paths act as before.
    pub asymmetric: bool,
}

impl Default for DeepenConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            epochs: 20,
            steps_per_epoch: 1000,
            imitation_steps: 200,
            imitation_batch: 128,
            imitation_lr: 1e-2,
            initial_depth: 1,
            max_depth: 6,
            perturbation: 0.0,
            min_visits: 5,
            held_out_states: 1000,
            eval_episodes: 5,
            asymmetric: false,
        }
    }
}

impl DeepenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::config("deepen.epsilon", "must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("deepen.epochs", "must be at least 1"));
        }
        if self.initial_depth == 0 || self.max_depth < self.initial_depth {
            return Err(Error::config("deepen.max_depth", "must be at least initial_depth >= 1"));
        }
        if self.imitation_batch == 0 || self.imitation_lr <= 0.0 {
            return Err(Error::config(
                "deepen.imitation_lr",
                "batch and learning rate must be positive",
            ));
        }
        if self.perturbation < 0.0 {
            return Err(Error::config("deepen.perturbation", "must be non-negative"));
        }
        Ok(())
    }
}

/// Differential entropy of a Gaussian with variance `var`.
pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * E * var).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafEntropies {
    /// Nats summed over action dims; NaN for unvisited leaves.
    pub entropy: Vec<f64>,
    pub visits: Vec<usize>,
    pub visited: Vec<bool>,
}

impl LeafEntropies {
    /// Visit-weighted mean over visited leaves.
    pub fn weighted(&self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for d in 0..self.entropy.len() {
            if self.visited[d] {
                num += self.visits[d] as f64 * self.entropy[d];
                den += self.visits[d] as f64;
            }
        }
        num / den
    }
}

/// Routes `states` through `model` and scores each leaf by the entropy of
/// its predictive distribution: spread of emitted means plus leaf variance.
pub fn estimate_leaf_entropies(model: &Icct, states: &[Vec<f64>], min_visits: usize) -> Result<LeafEntropies> {
    if states.is_empty() {
        return Err(Error::NoVisitedLeaves);
    }
    let out = act_batch(model, states, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let l = model.config().num_leaves();
    let a = model.config().action_dim;
    let leaves = model.leaves();
    let mut sums = vec![vec![0.0; a]; l];
    let mut sq = vec![vec![0.0; a]; l];
    let mut visits = vec![0usize; l];
    for o in &out {
        let d = o.leaf.expect("trees report leaves");
        visits[d] += 1;
        for k in 0..a {
            sums[d][k] += o.mean[k];
            sq[d][k] += o.mean[k] * o.mean[k];
        }
    }
    let visited: Vec<bool> = visits.iter().map(|&n| n >= min_visits.max(1)).collect();
    if !visited.iter().any(|&v| v) {
        return Err(Error::NoVisitedLeaves);
    }
    let entropy = (0..l)
        .map(|d| {
            if !visited[d] {
                return f64::NAN;
            }
            let n = visits[d] as f64;
            (0..a)
                .map(|k| {
                    let mean = sums[d][k] / n;
                    let var = (sq[d][k] / n - mean * mean).max(0.0);
                    let lg = leaves[d].log_gamma[k.min(leaves[d].log_gamma.len() - 1)];
                    let gamma = lg.exp().clamp(STD_MIN, STD_MAX);
                    gaussian_entropy(var + gamma * gamma)
                })
                .sum()
        })
        .collect();
    Ok(LeafEntropies {
        entropy,
        visits,
        visited,
    })
}

/// One level deeper. Old nodes keep their heap slots; the slot of old leaf
/// `d` becomes a fresh node whose children (new leaves `2d`, `2d + 1`) copy
/// leaf `d`, so the deeper tree acts exactly like `p` when `perturbation` is 0.
pub fn init_deeper(p: &Icct, perturbation: f64, seed: u64) -> Result<Icct> {
    let mut cfg = p.config().clone();
    cfg.depth += 1;
    let m = cfg.m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 1.0 / (m as f64).sqrt();
    let mut nodes = p.nodes();
    for _ in 0..p.config().num_leaves() {
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-r..r)).collect();
        // threshold drawn inside the normalized observation range
        let k = icct_autodiff::argmax(&w.iter().map(|v| v.abs()).collect::<Vec<_>>()).unwrap_or(0);
        let t: f64 = rng.random_range(-1.0..1.0);
        nodes.push(NodeParams {
            b: w[k] * t,
            w,
            alpha: 1.0,
        });
    }
    let noise = |rng: &mut ChaCha8Rng, v: &mut Vec<f64>| {
        if perturbation > 0.0 {
            for x in v.iter_mut() {
                *x += perturbation * rng.random_range(-1.0..1.0);
            }
        }
    };
    let mut leaves = Vec::with_capacity(2 * p.config().num_leaves());
    for leaf in p.leaves() {
        for _ in 0..2 {
            let mut child = leaf.clone();
            for v in child.beta.iter_mut() {
                noise(&mut rng, v);
            }
            leaves.push(child);
        }
    }
    Icct::from_parts(cfg, p.seed(), nodes, leaves)
}

/// Gaussian negative log-likelihood of `raw_actions` (pre-squash) under the
/// student, minimized with Adam on random minibatches. Returns the last loss.
pub fn imitate(
    student: &mut Icct,
    states: &[Vec<f64>],
    raw_actions: &[Vec<f64>],
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if states.is_empty() || states.len() != raw_actions.len() {
        return Err(Error::Dimension("imitation needs one action per state".into()));
    }
    let mut opt = Adam::new(lr);
    let a = student.config().action_dim;
    let mut last = f64::NAN;
    for _ in 0..steps {
        let picks = index::sample(rng, states.len(), batch.min(states.len()));
        let xs: Vec<Vec<f64>> = picks.iter().map(|i| states[i].clone()).collect();
        let ys: Vec<f64> = picks.iter().flat_map(|i| raw_actions[i].iter().copied()).collect();
        let mut g = Graph::new();
        let p = student.params().bind(&mut g);
        let x = g.constant(states_tensor(&xs, student.obs_dim())?);
        let head = student.forward(&mut g, &p, x, rng)?;
        let y = g.constant(Tensor::matrix(xs.len(), a, ys)?);
        let lp = g.gaussian_log_pdf(head.mean, head.std, y)?;
        let nll = g.mean(lp)?;
        let loss = g.scale(nll, -1.0);
        last = g.value(loss).item()?;
        if !last.is_finite() {
            return Err(Error::NonFinite(format!("imitation loss {last}")));
        }
        let grads = g.backward(loss)?;
        let gs = student.params().collect(&grads, &p);
        opt.step(student.params_mut(), &gs);
    }
    Ok(last)
}

/// Parent leaves of `h` whose two children in `h_deep`, weighted by visits,
/// beat the parent's entropy by more than `epsilon`.
pub fn swap_candidates(h: &LeafEntropies, h_deep: &LeafEntropies, epsilon: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for d in 0..h.entropy.len() {
        if !h.visited[d] {
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for c in [2 * d, 2 * d + 1] {
            if h_deep.visited[c] {
                num += h_deep.visits[c] as f64 * h_deep.entropy[c];
                den += h_deep.visits[c] as f64;
            }
        }
        if den > 0.0 && num / den + epsilon < h.entropy[d] {
            out.push(d);
        }
    }
    out
}

/// `deep` with the children of every non-triggering leaf of `parent`
/// replaced by copies of that leaf.
pub fn keep_triggered(deep: &Icct, parent: &Icct, triggers: &[usize]) -> Result<Icct> {
    let mut leaves = deep.leaves();
    for (d, leaf) in parent.leaves().into_iter().enumerate() {
        if !triggers.contains(&d) {
            leaves[2 * d] = leaf.clone();
            leaves[2 * d + 1] = leaf;
        }
    }
    Icct::from_parts(deep.config().clone(), deep.seed(), deep.nodes(), leaves)
}

/// Largest action difference between two policies over `states`.
pub fn max_action_gap(a: &dyn Policy, b: &dyn Policy, states: &[Vec<f64>]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let oa = act_batch(a, states, false, &mut rng)?;
    let ob = act_batch(b, states, false, &mut rng)?;
    Ok(oa
        .iter()
        .zip(&ob)
        .flat_map(|(x, y)| x.action.iter().zip(&y.action).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthRow {
    pub epoch: usize,
    /// Depth of the acting tree after this epoch.
    pub depth: usize,
    #[serde(rename = "H")]
    pub entropy: f64,
    #[serde(rename = "H_deep")]
    pub entropy_deep: f64,
    pub swapped: bool,
    /// Parent leaves that satisfied the swap test, `;`-separated.
    pub triggers: String,
    /// Gap between the new tree and its freshly deepened candidate.
    pub swap_deviation: Option<f64>,
    pub eval_return: f64,
}

pub fn write_growth_csv(w: impl Write, rows: &[GrowthRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()
        .map_err(|e| Error::io(std::path::Path::new("growth.csv"), e))?;
    Ok(())
}

pub struct DeepenOutcome {
    pub model: Icct,
    pub log: Vec<GrowthRow>,
}

fn current_icct(sac: &Sac) -> Result<Icct> {
    sac.actor
        .as_any()
        .downcast_ref::<Icct>()
        .cloned()
        .ok_or_else(|| Error::config("model.kind", "deepening needs an icct actor"))
}

/// Alternates SAC training of the acting tree with imitation by its deeper
/// candidate, swapping when the candidate's leaves are lower-entropy.
pub fn deepen_loop(
    sac: &mut Sac,
    env: &mut dyn Env,
    eval_env: &mut dyn Env,
    cfg: &DeepenConfig,
) -> Result<DeepenOutcome> {
    cfg.validate()?;
    let spec = env.spec().clone();
    let seed = sac.config().seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdee9_e4);
    let mut deep = init_deeper(&current_icct(sac)?, cfg.perturbation, rng.next_u64())?;
    let mut buffer = ReplayBuffer::new(sac.config().buffer_capacity)?;
    let held_out: Vec<Vec<f64>> = (0..cfg.held_out_states)
        .map(|_| (0..spec.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let warmup = sac.config().warmup_steps;
    let mut total = 0usize;
    let mut obs = env.reset(rng.next_u64());
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut states = Vec::with_capacity(cfg.steps_per_epoch);
        let mut raws = Vec::with_capacity(cfg.steps_per_epoch);
        for _ in 0..cfg.steps_per_epoch {
            let o = act(sac.actor.as_ref(), &obs, true, &mut sac.rng)?;
            let raw: Vec<f64> = o
                .action_norm
                .iter()
                .map(|v| v.clamp(-0.999_999, 0.999_999).atanh())
                .collect();
            let physical: Vec<f64> = o
                .action_norm
                .iter()
                .zip(&spec.action_bounds)
                .map(|(&a, &b)| scale_action(a, b))
                .collect();
            let res = env.step(&physical)?;
            total += 1;
            states.push(obs.clone());
            raws.push(raw.clone());
            buffer.push(Transition {
                state: obs.clone(),
                action: o.action_norm,
                raw_action: raw,
                reward: res.reward,
                next_state: res.obs.clone(),
                done: res.terminated,
            })?;
            obs = if res.done() { env.reset(rng.next_u64()) } else { res.obs };
            if total >= warmup {
                sac.update(&buffer)?;
            }
        }
        imitate(
            &mut deep,
            &states,
            &raws,
            cfg.imitation_steps,
            cfg.imitation_batch,
            cfg.imitation_lr,
            &mut rng,
        )?;
        let p = current_icct(sac)?;
        let h = estimate_leaf_entropies(&p, &states, cfg.min_visits)?;
        let h_deep = estimate_leaf_entropies(&deep, &states, cfg.min_visits)?;
        let triggers = swap_candidates(&h, &h_deep, cfg.epsilon);
        let swap = !triggers.is_empty() && deep.config().depth <= cfg.max_depth;
        let mut swap_deviation = None;
        if swap {
            if cfg.asymmetric {
                deep = keep_triggered(&deep, &p, &triggers)?;
            }
            sac.replace_actor(Box::new(deep.clone()))?;
            let next = init_deeper(&deep, cfg.perturbation, rng.next_u64())?;
            swap_deviation = Some(max_action_gap(&deep, &next, &held_out)?);
            deep = next;
        }
        let actor = current_icct(sac)?;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
        let rets = evaluate(
            &actor,
            eval_env,
            eval_seeds(cfg.eval_episodes),
            EvalMode::Fuzzy,
            &mut eval_rng,
        )?;
        let row = GrowthRow {
            epoch,
            depth: actor.config().depth,
            entropy: h.weighted(),
            entropy_deep: h_deep.weighted(),
            swapped: swap,
            triggers: triggers.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";"),
            swap_deviation,
            eval_return: mean_stderr(&rets).0,
        };
        log::info!(
            "epoch {epoch} depth {} H {:.4} H_deep {:.4} swapped {swap}",
            row.depth,
            row.entropy,
            row.entropy_deep
        );
        log.push(row);
    }
    Ok(DeepenOutcome {
        model: current_icct(sac)?,
        log,
    })
}
