//! End-to-end commands over a [`RunConfig`]: training, evaluation, export,
//! verification, deepening and sweeps. Every file written is listed in a
//! manifest next to it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{checkpoint_path, save_checkpoint};
use crate::config::{RunConfig, SweepAxis};
use crate::deepen::{deepen_loop, write_growth_csv, GrowthRow};
use crate::envs::{Env, EnvRegistry, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::{act, Policy, PolicyRegistry};
use crate::sac::{mean_stderr, train, Sac};
use crate::verify::{verify_bounds, PropertySpec, Verdict};

pub struct Registries {
    pub envs: EnvRegistry,
    pub policies: PolicyRegistry,
}

impl Registries {
    pub fn builtin() -> Self {
        Self {
            envs: EnvRegistry::builtin(),
            policies: PolicyRegistry::builtin(),
        }
    }
}

/// Runs `f` over `items` on up to `available_parallelism` threads and
/// returns results in input order. Each unit must be self-contained.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                out.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every unit ran"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// Returns of the exported crisp tree on the same episodes.
    pub crisp_returns: Option<Vec<f64>>,
    pub crisp_mean: Option<f64>,
    pub crisp_stderr: Option<f64>,
    /// Largest action gap between the model and its crisp tree over every
    /// state visited during evaluation.
    pub max_crisp_deviation: Option<f64>,
}

/// Episode seeds for evaluation under `seed`.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| seed.wrapping_mul(1_000_003).wrapping_add(i))
        .collect()
}

/// Deterministic-policy returns, the crisp tree's returns, and their agreement.
pub fn evaluate_policy(policy: &dyn Policy, env: &mut dyn Env, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let spec = env.spec().clone();
    if spec.obs_dim != policy.obs_dim() || spec.action_dim != policy.action_dim() {
        return Err(Error::Dimension(format!(
            "checkpoint expects {} features and {} actions, env {} has {} and {}",
            policy.obs_dim(),
            policy.action_dim(),
            spec.name,
            spec.obs_dim,
            spec.action_dim
        )));
    }
    let crisp = policy.crisp()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    let mut visited = Vec::new();
    for s in episode_seeds(seed, episodes) {
        let (ret, _) = crate::envs::rollout(env, s, |obs| {
            visited.push(obs.to_vec());
            Ok(act(policy, obs, false, &mut rng)?.action)
        })?;
        returns.push(ret);
    }
    let (mean, stderr) = mean_stderr(&returns);
    let (mut crisp_returns, mut deviation) = (None, None);
    if let Some(tree) = &crisp {
        let mut rets = Vec::with_capacity(episodes);
        for s in episode_seeds(seed, episodes) {
            rets.push(crate::envs::rollout(env, s, |obs| tree.predict(obs))?.0);
        }
        crisp_returns = Some(rets);
        let mut worst: f64 = 0.0;
        for x in &visited {
            let a = act(policy, x, false, &mut rng)?.action;
            let b = tree.predict(x)?;
            for (p, q) in a.iter().zip(&b) {
                worst = worst.max((p - q).abs());
            }
        }
        deviation = Some(worst);
    }
    let crisp_stats = crisp_returns.as_deref().map(mean_stderr);
    Ok(EvalSummary {
        episodes,
        returns,
        mean,
        stderr,
        crisp_mean: crisp_stats.map(|s| s.0),
        crisp_stderr: crisp_stats.map(|s| s.1),
        crisp_returns,
        max_crisp_deviation: deviation,
    })
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `tree.txt`, `tree.dot` and `tree.json`.
pub fn export_policy(policy: &dyn Policy, spec: Option<&EnvSpec>, dir: &Path) -> Result<Vec<PathBuf>> {
    let tree = policy
        .crisp()?
        .ok_or_else(|| Error::config("model.kind", format!("'{}' has no crisp form to export", policy.kind())))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (dir.join("tree.txt"), tree.to_text(spec)),
        (dir.join("tree.dot"), tree.to_dot(spec)),
        (dir.join("tree.json"), serde_json::to_string_pretty(&tree)?),
    ];
    let mut out = Vec::new();
    for (path, text) in files {
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}

pub fn verify_policy(policy: &dyn Policy, spec: &EnvSpec, property: &PropertySpec) -> Result<Verdict> {
    let tree = policy
        .crisp()?
        .ok_or_else(|| Error::config("model.kind", format!("'{}' has no crisp form to verify", policy.kind())))?;
    let region = property.region(spec)?;
    verify_bounds(&tree, &region, &property.limits)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub steps: usize,
    pub eval: EvalSummary,
    pub active_params: usize,
    pub total_params: usize,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub runs: Vec<SeedRun>,
    pub artifacts: Vec<PathBuf>,
}

fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out.join(cfg.run_name()).join(format!("seed_{seed}"))
}

fn finish_seed(
    cfg: &RunConfig,
    reg: &Registries,
    policy: &dyn Policy,
    seed: u64,
    steps: usize,
    dir: &Path,
    mut artifacts: Vec<PathBuf>,
) -> Result<SeedRun> {
    let mut env = reg.envs.make(&cfg.env)?;
    if policy.crisp()?.is_some() {
        artifacts.extend(export_policy(policy, Some(env.spec()), dir)?);
    }
    let eval = evaluate_policy(policy, env.as_mut(), cfg.eval.episodes, seed)?;
    let path = dir.join("eval.json");
    write_json(&path, &eval)?;
    artifacts.push(path);
    let count = policy.count_params();
    Ok(SeedRun {
        seed,
        dir: dir.to_path_buf(),
        steps,
        eval,
        active_params: count.active,
        total_params: count.total,
        artifacts,
    })
}

/// Trains one seed; the run directory is `out/{name}/seed_{seed}`.
pub fn train_seed(cfg: &RunConfig, reg: &Registries, seed: u64) -> Result<SeedRun> {
    let dir = seed_dir(cfg, seed);
    let mut env = reg.envs.make(&cfg.env)?;
    let mut eval_env = reg.envs.make(&cfg.env)?;
    let actor = reg.policies.build(&cfg.model, env.spec(), seed)?;
    let trainer = crate::sac::TrainerConfig {
        seed,
        ..cfg.trainer.clone()
    };
    let mut sac = Sac::new(actor, trainer)?;
    let report = train(&mut sac, env.as_mut(), Some(eval_env.as_mut()), Some(&dir))?;
    let mut artifacts = report.checkpoints.clone();
    artifacts.push(dir.join("metrics.csv"));
    if !report.evals.is_empty() {
        artifacts.push(dir.join("eval.csv"));
    }
    let policy = match report.best {
        Some((_, best)) if cfg.trainer.target_return.is_some() => best,
        _ => sac.actor.clone_box(),
    };
    finish_seed(cfg, reg, policy.as_ref(), seed, report.steps, &dir, artifacts)
}

fn write_manifest(cfg: &RunConfig, command: &str, runs: Vec<SeedRun>, extra: Vec<PathBuf>) -> Result<Manifest> {
    let root = cfg.out.join(cfg.run_name());
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let manifest = Manifest {
        command: command.into(),
        config: cfg.clone(),
        runs,
        artifacts: extra,
    };
    write_json(&root.join(format!("{command}_manifest.json")), &manifest)?;
    Ok(manifest)
}

pub fn cmd_train(cfg: &RunConfig, reg: &Registries) -> Result<Manifest> {
    let runs = par_map(&cfg.seeds, |&s| train_seed(cfg, reg, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    write_manifest(cfg, "train", runs, Vec::new())
}

pub fn cmd_deepen(cfg: &RunConfig, reg: &Registries) -> Result<Manifest> {
    let runs = par_map(&cfg.seeds, |&seed| deepen_seed(cfg, reg, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    write_manifest(cfg, "deepen", runs, Vec::new())
}

fn deepen_seed(cfg: &RunConfig, reg: &Registries, seed: u64) -> Result<SeedRun> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut env = reg.envs.make(&cfg.env)?;
    let mut eval_env = reg.envs.make(&cfg.env)?;
    let model = crate::policy::ModelConfig {
        depth: cfg.deepen.initial_depth,
        ..cfg.model.clone()
    };
    let actor = reg.policies.build(&model, env.spec(), seed)?;
    let trainer = crate::sac::TrainerConfig {
        seed,
        ..cfg.trainer.clone()
    };
    let mut sac = Sac::new(actor, trainer)?;
    let outcome = deepen_loop(&mut sac, env.as_mut(), eval_env.as_mut(), &cfg.deepen)?;
    let log_path = dir.join("growth.csv");
    let f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write_growth_csv(f, &outcome.log)?;
    let steps = cfg.deepen.epochs * cfg.deepen.steps_per_epoch;
    let ckpt = checkpoint_path(&dir, steps);
    save_checkpoint(&ckpt, &outcome.model, steps)?;
    finish_seed(cfg, reg, &outcome.model, seed, steps, &dir, vec![log_path, ckpt])
}

/// Final leaf count per seed from a growth log.
pub fn final_leaves(log: &[GrowthRow]) -> Option<usize> {
    log.last().map(|r| 1 << r.depth)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub mean_return: f64,
    pub stderr: f64,
    pub active_params: usize,
    pub frontier: bool,
}

/// Marks points not dominated in (higher return, fewer active parameters).
pub fn mark_frontier(rows: &mut [SweepRow]) {
    let snapshot: Vec<(f64, usize)> = rows.iter().map(|r| (r.mean_return, r.active_params)).collect();
    for (i, r) in rows.iter_mut().enumerate() {
        r.frontier = !snapshot.iter().enumerate().any(|(j, &(ret, p))| {
            j != i && ret >= r.mean_return && p <= r.active_params && (ret > r.mean_return || p < r.active_params)
        });
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains every sweep point over every seed and writes `pareto.csv`.
pub fn cmd_sweep(cfg: &RunConfig, reg: &Registries) -> Result<(Manifest, Vec<SweepRow>)> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep", "missing sweep section"))?;
    let axis = match sweep.axis {
        SweepAxis::E => "e",
        SweepAxis::Leaves => "leaves",
    };
    let points: Vec<RunConfig> = sweep
        .values
        .iter()
        .map(|&v| {
            let mut point = cfg.clone();
            match sweep.axis {
                SweepAxis::E => point.model.e = Some(v),
                SweepAxis::Leaves => point.model.depth = v.trailing_zeros() as usize,
            }
            point.name = Some(format!("{}/{axis}_{v}", cfg.run_name()));
            point
        })
        .collect();
    let units: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let mut done = par_map(&units, |&(i, s)| train_seed(&points[i], reg, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &v in &sweep.values {
        let point_runs: Vec<SeedRun> = done.by_ref().take(cfg.seeds.len()).collect();
        let means: Vec<f64> = point_runs.iter().map(|r| r.eval.mean).collect();
        let (mean_return, stderr) = mean_stderr(&means);
        rows.push(SweepRow {
            axis: axis.into(),
            value: v,
            mean_return,
            stderr,
            active_params: point_runs[0].active_params,
            frontier: false,
        });
        runs.extend(point_runs);
    }
    mark_frontier(&mut rows);
    let root = cfg.out.join(cfg.run_name());
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let path = root.join("pareto.csv");
    write_sweep_csv(&path, &rows)?;
    let manifest = write_manifest(cfg, "sweep", runs, vec![path])?;
    Ok((manifest, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn row(ret: f64, p: usize) -> SweepRow {
        SweepRow {
            axis: "e".into(),
            value: p,
            mean_return: ret,
            stderr: 0.0,
            active_params: p,
            frontier: false,
        }
    }

    #[test]
    fn dominated_points_are_not_on_the_frontier() {
        let mut rows = vec![row(10.0, 5), row(9.0, 6), row(12.0, 8), row(12.0, 9), row(3.0, 1)];
        mark_frontier(&mut rows);
        let marks: Vec<bool> = rows.iter().map(|r| r.frontier).collect();
        assert_eq!(marks, vec![true, false, true, false, true]);
    }

    #[test]
    fn stderr_convention() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - (2.5f64 / 5.0).sqrt()).abs() < 1e-12);
    }

    fn tiny(dir: &Path, seeds: &[u64]) -> RunConfig {
        let reg = Registries::builtin();
        RunConfig::resolve(
            &json!({
                "env": "plateau",
                "model": {"kind": "icct", "depth": 1},
                "trainer": {"total_steps": 120, "warmup_steps": 60, "batch_size": 8, "critic_hidden": [8]},
                "seeds": seeds,
                "out": dir,
                "eval": {"episodes": 2}
            }),
            &reg.envs,
            &reg.policies,
        )
        .unwrap()
    }

    #[test]
    fn two_seeds_two_directories_and_a_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path(), &[0, 1]);
        let m = cmd_train(&cfg, &Registries::builtin()).unwrap();
        assert_eq!(m.runs.len(), 2);
        for r in &m.runs {
            assert!(r.dir.ends_with(format!("seed_{}", r.seed)));
            for a in &r.artifacts {
                assert!(a.exists(), "{}", a.display());
            }
            assert!(r.eval.max_crisp_deviation.unwrap() <= 1e-9);
        }
        assert!(tmp.path().join(cfg.run_name()).join("train_manifest.json").exists());
    }

    #[test]
    fn evaluation_is_reproducible() {
        let reg = Registries::builtin();
        let mut env = reg.envs.make("pendulum").unwrap();
        let p = reg
            .policies
            .build(&crate::policy::ModelConfig::default(), env.spec(), 1)
            .unwrap();
        let a = evaluate_policy(p.as_ref(), env.as_mut(), 1, 9).unwrap();
        let b = evaluate_policy(p.as_ref(), env.as_mut(), 1, 9).unwrap();
        assert_eq!(a, b);
        let mut ring = reg.envs.make("ring").unwrap();
        assert!(matches!(
            evaluate_policy(p.as_ref(), ring.as_mut(), 1, 9),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mlp_has_nothing_to_export() {
        let reg = Registries::builtin();
        let env = reg.envs.make("pendulum").unwrap();
        let cfg = crate::policy::ModelConfig {
            kind: "mlp".into(),
            hidden: vec![4],
            ..Default::default()
        };
        let p = reg.policies.build(&cfg, env.spec(), 0).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_policy(p.as_ref(), None, tmp.path()),
            Err(Error::Config { .. })
        ));
    }
}
