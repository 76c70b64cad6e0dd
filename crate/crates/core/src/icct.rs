//! Interpretable continuous control trees.
//!
//! Every decision node is crispified inside the forward pass: the node keeps
//! only its largest-magnitude weight and its outcome is a hard bit. Leaf
//! controllers keep the `e` features with the largest selector weights. All
//! hard choices are straight-through selections, so the value computed while
//! training is exactly what the exported [`CrispTree`] computes, while the
//! gradients flow through the soft surrogates.

use icct_autodiff::optim::ParamStore;
use icct_autodiff::{argmax, sample_gumbel, top_k, Graph, SoftPath, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crisp::{CrispNode, CrispTree, Direction, LeafController, Term};
use crate::error::{Error, Result};
use crate::policy::{Head, ParamCount, Policy};

pub const STD_MIN: f64 = 1e-6;
pub const STD_MAX: f64 = 10.0;

/// How hard selections form their soft surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Variant {
    #[default]
    StraightThrough,
    /// Gumbel-softmax selections: noisy while acting, noiseless on export.
    Gumbel { tau: f64 },
}

impl Variant {
    fn soft_path(self) -> SoftPath {
        match self {
            Variant::StraightThrough => SoftPath::Softmax,
            Variant::Gumbel { tau } => SoftPath::Gumbel { tau },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcctConfig {
    pub depth: usize,
    pub m: usize,
    pub action_dim: usize,
    pub e: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub shared_std: bool,
    #[serde(default)]
    pub l1: f64,
    pub bounds: Vec<[f64; 2]>,
}

impl IcctConfig {
    pub fn num_nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    fn std_cols(&self) -> usize {
        if self.shared_std {
            1
        } else {
            self.action_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        if self.depth > 16 {
            return Err(Error::config("depth", "too deep"));
        }
        if self.m == 0 {
            return Err(Error::config("m", "need at least one feature"));
        }
        if self.action_dim == 0 || self.bounds.len() != self.action_dim {
            return Err(Error::config("bounds", "one [lo, hi] pair per action dimension"));
        }
        if self.e > self.m {
            return Err(Error::config(
                "e",
                format!("{} exceeds feature count {}", self.e, self.m),
            ));
        }
        if let Variant::Gumbel { tau } = self.variant {
            if !(tau > 0.0) {
                return Err(Error::config("variant.tau", "must be positive"));
            }
        }
        if !(self.l1 >= 0.0) {
            return Err(Error::config("l1", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub w: Vec<f64>,
    pub b: f64,
    pub alpha: f64,
}

/// Per-leaf parameters; outer vectors run over action dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafParams {
    pub beta: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    /// One entry per action dimension, or a single entry with shared std.
    pub log_gamma: Vec<f64>,
    /// Constant means, used only when `e = 0`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub static_mean: Vec<f64>,
}

const W: usize = 0;
const B: usize = 1;
const ALPHA: usize = 2;

#[derive(Clone, Debug)]
pub struct Icct {
    cfg: IcctConfig,
    seed: u64,
    params: ParamStore,
}

impl Icct {
    pub const KIND: &'static str = "icct";

    /// Uniform `(-1/sqrt(m), 1/sqrt(m))` for `w`, `beta`, `theta`; zeros for
    /// `b`, `phi` and log-std; unit steepness.
    pub fn init(cfg: IcctConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (cfg.m as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-r..r)).collect() };
        let (n, l, m) = (cfg.num_nodes(), cfg.num_leaves(), cfg.m);
        let nodes = (0..n)
            .map(|_| NodeParams {
                w: uniform(m),
                b: 0.0,
                alpha: 1.0,
            })
            .collect();
        let leaves = (0..l)
            .map(|_| LeafParams {
                beta: (0..cfg.action_dim).map(|_| uniform(m)).collect(),
                theta: (0..cfg.action_dim).map(|_| uniform(m)).collect(),
                phi: vec![vec![0.0; m]; cfg.action_dim],
                log_gamma: vec![0.0; cfg.std_cols()],
                static_mean: if cfg.e == 0 {
                    vec![0.0; cfg.action_dim]
                } else {
                    Vec::new()
                },
            })
            .collect();
        Self::from_parts(cfg, seed, nodes, leaves)
    }

    pub fn from_parts(cfg: IcctConfig, seed: u64, nodes: Vec<NodeParams>, leaves: Vec<LeafParams>) -> Result<Self> {
        cfg.validate()?;
        let (n, l, m, a) = (cfg.num_nodes(), cfg.num_leaves(), cfg.m, cfg.action_dim);
        if nodes.len() != n || leaves.len() != l {
            return Err(Error::Checkpoint(format!(
                "depth {} needs {n} nodes and {l} leaves, got {} and {}",
                cfg.depth,
                nodes.len(),
                leaves.len()
            )));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.w.len() != m {
                return Err(Error::Checkpoint(format!(
                    "node {i}: weight length {} != {m}",
                    node.w.len()
                )));
            }
        }
        for (d, leaf) in leaves.iter().enumerate() {
            let ok = [&leaf.beta, &leaf.theta, &leaf.phi]
                .iter()
                .all(|v| v.len() == a && v.iter().all(|r| r.len() == m))
                && leaf.log_gamma.len() == cfg.std_cols()
                && (cfg.e > 0 || leaf.static_mean.len() == a);
            if !ok {
                return Err(Error::Checkpoint(format!("leaf {d}: parameter shapes do not match")));
            }
        }
        let mut params = ParamStore::new();
        let mat = |rows: usize, data: Vec<f64>| Tensor::matrix(rows, data.len() / rows.max(1), data);
        params.push(mat(n, nodes.iter().flat_map(|x| x.w.clone()).collect())?);
        params.push(Tensor::vector(nodes.iter().map(|x| x.b).collect()));
        params.push(Tensor::vector(nodes.iter().map(|x| x.alpha).collect()));
        for ai in 0..a {
            params.push(mat(l, leaves.iter().flat_map(|x| x.beta[ai].clone()).collect())?);
            params.push(mat(l, leaves.iter().flat_map(|x| x.theta[ai].clone()).collect())?);
            params.push(mat(l, leaves.iter().flat_map(|x| x.phi[ai].clone()).collect())?);
        }
        params.push(mat(l, leaves.iter().flat_map(|x| x.log_gamma.clone()).collect())?);
        if cfg.e == 0 {
            params.push(mat(l, leaves.iter().flat_map(|x| x.static_mean.clone()).collect())?);
        }
        Ok(Self { cfg, seed, params })
    }

    pub fn config(&self) -> &IcctConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn beta_slot(a: usize) -> usize {
        3 + 3 * a
    }

    fn theta_slot(a: usize) -> usize {
        4 + 3 * a
    }

    fn phi_slot(a: usize) -> usize {
        5 + 3 * a
    }

    fn gamma_slot(&self) -> usize {
        3 + 3 * self.cfg.action_dim
    }

    fn static_slot(&self) -> usize {
        4 + 3 * self.cfg.action_dim
    }

    pub fn nodes(&self) -> Vec<NodeParams> {
        let w = self.params.get(W);
        let m = self.cfg.m;
        (0..self.cfg.num_nodes())
            .map(|i| NodeParams {
                w: w.data()[i * m..(i + 1) * m].to_vec(),
                b: self.params.get(B).data()[i],
                alpha: self.params.get(ALPHA).data()[i],
            })
            .collect()
    }

    pub fn leaves(&self) -> Vec<LeafParams> {
        let m = self.cfg.m;
        let a = self.cfg.action_dim;
        let row = |slot: usize, d: usize| self.params.get(slot).row(d).to_vec();
        let _ = m;
        (0..self.cfg.num_leaves())
            .map(|d| LeafParams {
                beta: (0..a).map(|ai| row(Self::beta_slot(ai), d)).collect(),
                theta: (0..a).map(|ai| row(Self::theta_slot(ai), d)).collect(),
                phi: (0..a).map(|ai| row(Self::phi_slot(ai), d)).collect(),
                log_gamma: row(self.gamma_slot(), d),
                static_mean: if self.cfg.e == 0 {
                    row(self.static_slot(), d)
                } else {
                    Vec::new()
                },
            })
            .collect()
    }

    /// Node logits `alpha * (w_k x_k - b)` for a batch, `B x N`.
    pub fn node_logits(&self, g: &mut Graph, p: &[Var], x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let abs_w = g.abs(p[W]);
        let z = g.diff_argmax_with(abs_w, self.cfg.variant.soft_path(), rng)?;
        let wp = g.mul(z, p[W])?;
        let xw = g.matmul_t(x, wp)?;
        let neg_b = g.scale(p[B], -1.0);
        let shifted = g.add_row(xw, neg_b)?;
        Ok(g.mul_row(shifted, p[ALPHA])?)
    }

    /// Hard branch bits (1 = left) with sigmoid surrogates, `B x N`.
    pub fn outcome_bits(&self, g: &mut Graph, logits: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let key = match self.cfg.variant {
            Variant::StraightThrough => logits,
            Variant::Gumbel { tau } => {
                // softmax([l + g1, g2] / tau)[0] = sigmoid((l + g1 - g2) / tau)
                let shape = g.value(logits).shape().to_vec();
                let n = g.value(logits).len();
                let noise: Vec<f64> = (0..n).map(|_| sample_gumbel(rng) - sample_gumbel(rng)).collect();
                let noise = g.constant(Tensor::new(shape, noise)?);
                let pert = g.add(logits, noise)?;
                g.scale(pert, 1.0 / tau)
            }
        };
        let hard = g.value(key).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let soft = g.sigmoid(key);
        Ok(g.straight_through(hard, soft)?)
    }

    /// Leaf indicators `B x L`: products of `y` or `1 - y` along each path.
    pub fn leaf_indicators(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let n = self.cfg.num_nodes();
        let mut prefix: Vec<Option<Var>> = vec![None; 2 * n + 1];
        let mut leaves = vec![None; n + 1];
        for i in 0..n {
            let yi = g.column(y, i)?;
            let not_yi = g.rsub(1.0, yi);
            let (left, right) = match prefix[i] {
                Some(pv) => (g.mul(pv, yi)?, g.mul(pv, not_yi)?),
                None => (yi, not_yi),
            };
            for (slot, v) in [(2 * i + 1, left), (2 * i + 2, right)] {
                if slot >= n {
                    leaves[slot - n] = Some(v);
                } else {
                    prefix[slot] = Some(v);
                }
            }
        }
        let cols: Vec<Var> = leaves.into_iter().map(|v| v.expect("complete tree")).collect();
        Ok(g.concat_cols(&cols)?)
    }

    /// Per-leaf sparse controller outputs for action dimension `a`, `B x L`.
    pub fn leaf_means(&self, g: &mut Graph, p: &[Var], x: Var, a: usize, rng: &mut dyn RngCore) -> Result<Var> {
        let abs_t = g.abs(p[Self::theta_slot(a)]);
        let u = g.diff_khot_with(abs_t, self.cfg.e, self.cfg.variant.soft_path(), rng)?;
        let uu = g.mul(u, u)?;
        let c = g.mul(uu, p[Self::beta_slot(a)])?;
        let lin = g.matmul_t(x, c)?;
        let uphi = g.mul(u, p[Self::phi_slot(a)])?;
        let bias = g.row_sum(uphi);
        Ok(g.add_row(lin, bias)?)
    }

    pub fn to_crisp(&self) -> Result<CrispTree> {
        let nodes = self
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| node_predicate(i, n))
            .collect::<Result<Vec<_>>>()?;
        let leaves = self
            .leaves()
            .iter()
            .map(|leaf| {
                (0..self.cfg.action_dim)
                    .map(|a| {
                        let lg = leaf.log_gamma[if self.cfg.shared_std { 0 } else { a }];
                        let std = lg.exp().clamp(STD_MIN, STD_MAX);
                        if self.cfg.e == 0 {
                            return LeafController {
                                terms: Vec::new(),
                                bias: leaf.static_mean[a],
                                std,
                            };
                        }
                        let mags: Vec<f64> = leaf.theta[a].iter().map(|t| t.abs()).collect();
                        let idx = top_k(&mags, self.cfg.e);
                        let mut bias = 0.0;
                        for &j in &idx {
                            bias += leaf.phi[a][j];
                        }
                        LeafController {
                            terms: idx
                                .iter()
                                .map(|&j| Term {
                                    idx: j,
                                    coef: leaf.beta[a][j],
                                })
                                .collect(),
                            bias,
                            std,
                        }
                    })
                    .collect()
            })
            .collect();
        let tree = CrispTree {
            depth: self.cfg.depth,
            m: self.cfg.m,
            nodes,
            leaves,
            bounds: self.cfg.bounds.clone(),
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let doc: IcctDoc = serde_json::from_value(v.clone())?;
        if doc.kind != Self::KIND {
            return Err(Error::Checkpoint(format!(
                "expected kind '{}', found '{}'",
                Self::KIND,
                doc.kind
            )));
        }
        Self::from_parts(doc.meta.config, doc.meta.seed, doc.nodes, doc.leaves)
    }
}

/// `x_k > b / w_k` when `alpha * w_k > 0`, otherwise `x_k < b / w_k`.
pub fn node_predicate(i: usize, n: &NodeParams) -> Result<CrispNode> {
    let mags: Vec<f64> = n.w.iter().map(|w| w.abs()).collect();
    let k = argmax(&mags).ok_or(Error::DegeneratePredicate { node: i })?;
    let wk = n.w[k];
    if wk == 0.0 || n.alpha == 0.0 || !wk.is_finite() {
        return Err(Error::DegeneratePredicate { node: i });
    }
    Ok(CrispNode {
        k,
        threshold: n.b / wk,
        dir: if n.alpha * wk > 0.0 {
            Direction::Greater
        } else {
            Direction::Less
        },
    })
}

#[derive(Serialize, Deserialize)]
struct IcctMeta {
    #[serde(flatten)]
    config: IcctConfig,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct IcctDoc {
    kind: String,
    meta: IcctMeta,
    nodes: Vec<NodeParams>,
    leaves: Vec<LeafParams>,
    #[serde(default)]
    crisp: Option<CrispTree>,
}

impl Policy for Icct {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn obs_dim(&self) -> usize {
        self.cfg.m
    }

    fn action_dim(&self) -> usize {
        self.cfg.action_dim
    }

    fn bounds(&self) -> &[[f64; 2]] {
        &self.cfg.bounds
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, rng: &mut dyn RngCore) -> Result<Head> {
        let logits = self.node_logits(g, p, x, rng)?;
        let y = self.outcome_bits(g, logits, rng)?;
        let ind = self.leaf_indicators(g, y)?;
        let mean = if self.cfg.e == 0 {
            g.matmul(ind, p[self.static_slot()])?
        } else {
            let mut cols = Vec::with_capacity(self.cfg.action_dim);
            for a in 0..self.cfg.action_dim {
                let lm = self.leaf_means(g, p, x, a, rng)?;
                let picked = g.mul(ind, lm)?;
                cols.push(g.row_sum(picked));
            }
            g.concat_cols(&cols)?
        };
        let lg = g.exp(p[self.gamma_slot()]);
        let gamma = g.clamp(lg, STD_MIN, STD_MAX);
        let mut std = g.matmul(ind, gamma)?;
        if self.cfg.shared_std && self.cfg.action_dim > 1 {
            let cols = vec![std; self.cfg.action_dim];
            std = g.concat_cols(&cols)?;
        }
        let iv = g.value(ind);
        let leaves = (0..iv.rows()).map(|r| argmax(iv.row(r)).unwrap_or(0)).collect();
        Ok(Head {
            mean,
            std,
            leaves: Some(leaves),
        })
    }

    fn penalty(&self, g: &mut Graph, p: &[Var]) -> Result<Option<Var>> {
        if self.cfg.l1 == 0.0 {
            return Ok(None);
        }
        Ok(Some(l1_penalty(
            g,
            &(0..self.cfg.action_dim)
                .map(|a| p[Self::beta_slot(a)])
                .collect::<Vec<_>>(),
            self.cfg.l1,
        )?))
    }

    fn count_params(&self) -> ParamCount {
        let c = &self.cfg;
        let per_dim = 2 * c.e + 1;
        let std = c.std_cols();
        ParamCount {
            total: self.params.numel(),
            active: 2 * c.num_nodes() + c.num_leaves() * (c.action_dim * per_dim + std),
        }
    }

    fn crisp(&self) -> Result<Option<CrispTree>> {
        self.to_crisp().map(Some)
    }

    fn to_json(&self) -> serde_json::Value {
        let doc = IcctDoc {
            kind: Self::KIND.into(),
            meta: IcctMeta {
                config: self.cfg.clone(),
                seed: self.seed,
            },
            nodes: self.nodes(),
            leaves: self.leaves(),
            crisp: self.to_crisp().ok(),
        };
        serde_json::to_value(doc).expect("plain data serializes")
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// `coeff * sum |beta|` over the given coefficient tensors.
pub fn l1_penalty(g: &mut Graph, betas: &[Var], coeff: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &b in betas {
        let a = g.abs(b);
        let s = g.sum(a);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::config("l1", "no coefficients"))?;
    Ok(g.scale(total, coeff))
}

/// Single-node crispified logit `alpha * (w'x - b)` with `w' = diff_argmax(|w|) * w`.
pub fn node_crisp(g: &mut Graph, w: Var, b: Var, alpha: Var, x: Var) -> Result<Var> {
    let abs_w = g.abs(w);
    let z = g.diff_argmax(abs_w)?;
    let wp = g.mul(z, w)?;
    let d = g.dot(wp, x)?;
    let s = g.sub(d, b)?;
    Ok(g.mul(alpha, s)?)
}

/// Hard bit `1(logit > 0)` through the surrogate `softmax([logit, 0])[0]`.
pub fn outcome_crisp(g: &mut Graph, logit: Var) -> Result<Var> {
    let hard = g.value(logit).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let soft = g.sigmoid(logit);
    Ok(g.straight_through(hard, soft)?)
}

/// Sparse leaf mean `(u*beta)'(u*x) + u'phi` with `u = diff_khot(|theta|, e)`.
pub fn enforce_controller_sparsity(g: &mut Graph, beta: Var, theta: Var, phi: Var, x: Var, e: usize) -> Result<Var> {
    let abs_t = g.abs(theta);
    let u = g.diff_khot(abs_t, e)?;
    let ub = g.mul(u, beta)?;
    let ux = g.mul(u, x)?;
    let lin = g.dot(ub, ux)?;
    let bias = g.dot(u, phi)?;
    Ok(g.add(lin, bias)?)
}
