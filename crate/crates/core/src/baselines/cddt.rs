use icct_autodiff::optim::ParamStore;
use icct_autodiff::{Graph, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crisp::{CrispTree, LeafController, Term};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::icct::{node_predicate, NodeParams, STD_MAX, STD_MIN};
use crate::policy::{Head, ParamCount, Policy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    /// Constant mean per action dimension.
    Static,
    /// Full linear controller `beta'x + bias`.
    Controller,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CddtLeaf {
    /// Per action dimension; empty for static leaves.
    #[serde(default)]
    pub beta: Vec<Vec<f64>>,
    /// Static mean or controller bias, per action dimension.
    pub bias: Vec<f64>,
    pub log_gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CddtMeta {
    depth: usize,
    m: usize,
    action_dim: usize,
    leaf_kind: LeafKind,
    bounds: Vec<[f64; 2]>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CddtDoc {
    kind: String,
    meta: CddtMeta,
    nodes: Vec<NodeParams>,
    leaves: Vec<CddtLeaf>,
}

/// Soft decision tree: every node is a sigmoid over all features and every
/// leaf contributes to the output, weighted by its path probability.
#[derive(Clone, Debug)]
pub struct Cddt {
    meta: CddtMeta,
    params: ParamStore,
}

const W: usize = 0;
const B: usize = 1;
const ALPHA: usize = 2;
const GAMMA: usize = 3;
const LEAF: usize = 4;

impl Cddt {
    pub const KIND: &'static str = "cddt";

    pub fn init(depth: usize, spec: &EnvSpec, leaf_kind: LeafKind, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        let m = spec.obs_dim;
        let a = spec.action_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (m as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-r..r)).collect() };
        let n = (1 << depth) - 1;
        let nodes = (0..n)
            .map(|_| NodeParams {
                w: uniform(m),
                b: 0.0,
                alpha: 1.0,
            })
            .collect();
        let leaves = (0..n + 1)
            .map(|_| match leaf_kind {
                LeafKind::Static => CddtLeaf {
                    beta: Vec::new(),
                    bias: uniform(a),
                    log_gamma: vec![0.0; a],
                },
                LeafKind::Controller => CddtLeaf {
                    beta: (0..a).map(|_| uniform(m)).collect(),
                    bias: vec![0.0; a],
                    log_gamma: vec![0.0; a],
                },
            })
            .collect();
        let meta = CddtMeta {
            depth,
            m,
            action_dim: a,
            leaf_kind,
            bounds: spec.action_bounds.clone(),
            seed,
        };
        Self::from_parts(meta, nodes, leaves)
    }

    fn from_parts(meta: CddtMeta, nodes: Vec<NodeParams>, leaves: Vec<CddtLeaf>) -> Result<Self> {
        let (n, m, a) = ((1usize << meta.depth) - 1, meta.m, meta.action_dim);
        let l = n + 1;
        let shapes_ok = nodes.len() == n
            && leaves.len() == l
            && nodes.iter().all(|x| x.w.len() == m)
            && leaves.iter().all(|x| {
                x.bias.len() == a
                    && x.log_gamma.len() == a
                    && match meta.leaf_kind {
                        LeafKind::Static => x.beta.is_empty(),
                        LeafKind::Controller => x.beta.len() == a && x.beta.iter().all(|b| b.len() == m),
                    }
            });
        if !shapes_ok || meta.bounds.len() != a {
            return Err(Error::Checkpoint("cddt parameter shapes do not match".into()));
        }
        let mut params = ParamStore::new();
        params.push(Tensor::matrix(n, m, nodes.iter().flat_map(|x| x.w.clone()).collect())?);
        params.push(Tensor::vector(nodes.iter().map(|x| x.b).collect()));
        params.push(Tensor::vector(nodes.iter().map(|x| x.alpha).collect()));
        params.push(Tensor::matrix(
            l,
            a,
            leaves.iter().flat_map(|x| x.log_gamma.clone()).collect(),
        )?);
        params.push(Tensor::matrix(
            l,
            a,
            leaves.iter().flat_map(|x| x.bias.clone()).collect(),
        )?);
        if meta.leaf_kind == LeafKind::Controller {
            for ai in 0..a {
                params.push(Tensor::matrix(
                    l,
                    m,
                    leaves.iter().flat_map(|x| x.beta[ai].clone()).collect(),
                )?);
            }
        }
        Ok(Self { meta, params })
    }

    pub fn leaf_kind(&self) -> LeafKind {
        self.meta.leaf_kind
    }

    pub fn depth(&self) -> usize {
        self.meta.depth
    }

    pub fn nodes(&self) -> Vec<NodeParams> {
        let m = self.meta.m;
        let w = self.params.get(W).data();
        (0..(1usize << self.meta.depth) - 1)
            .map(|i| NodeParams {
                w: w[i * m..(i + 1) * m].to_vec(),
                b: self.params.get(B).data()[i],
                alpha: self.params.get(ALPHA).data()[i],
            })
            .collect()
    }

    pub fn leaves(&self) -> Vec<CddtLeaf> {
        let a = self.meta.action_dim;
        (0..1usize << self.meta.depth)
            .map(|d| CddtLeaf {
                beta: match self.meta.leaf_kind {
                    LeafKind::Static => Vec::new(),
                    LeafKind::Controller => (0..a)
                        .map(|ai| self.params.get(LEAF + 1 + ai).row(d).to_vec())
                        .collect(),
                },
                bias: self.params.get(LEAF).row(d).to_vec(),
                log_gamma: self.params.get(GAMMA).row(d).to_vec(),
            })
            .collect()
    }

    pub fn set_nodes(&mut self, nodes: &[NodeParams]) -> Result<()> {
        let rebuilt = Self::from_parts(self.meta.clone(), nodes.to_vec(), self.leaves())?;
        *self = rebuilt;
        Ok(())
    }

    pub fn set_leaves(&mut self, leaves: &[CddtLeaf]) -> Result<()> {
        let rebuilt = Self::from_parts(self.meta.clone(), self.nodes(), leaves.to_vec())?;
        *self = rebuilt;
        Ok(())
    }

    /// Path probabilities `B x L`; rows sum to one.
    pub fn path_weights(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let xw = g.matmul_t(x, p[W])?;
        let neg_b = g.scale(p[B], -1.0);
        let shifted = g.add_row(xw, neg_b)?;
        let logits = g.mul_row(shifted, p[ALPHA])?;
        let y = g.sigmoid(logits);
        let n = (1usize << self.meta.depth) - 1;
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

    /// Post-hoc crispification: single-feature predicates, leaves kept as they are.
    pub fn crispify(&self) -> Result<CrispTree> {
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
                (0..self.meta.action_dim)
                    .map(|a| LeafController {
                        terms: leaf
                            .beta
                            .get(a)
                            .map(|b| b.iter().enumerate().map(|(idx, &coef)| Term { idx, coef }).collect())
                            .unwrap_or_default(),
                        bias: leaf.bias[a],
                        std: leaf.log_gamma[a].exp().clamp(STD_MIN, STD_MAX),
                    })
                    .collect()
            })
            .collect();
        let tree = CrispTree {
            depth: self.meta.depth,
            m: self.meta.m,
            nodes,
            leaves,
            bounds: self.meta.bounds.clone(),
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let doc: CddtDoc = serde_json::from_value(v.clone())?;
        if doc.kind != Self::KIND {
            return Err(Error::Checkpoint(format!("expected kind 'cddt', found '{}'", doc.kind)));
        }
        Self::from_parts(doc.meta, doc.nodes, doc.leaves)
    }
}

impl Policy for Cddt {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn obs_dim(&self) -> usize {
        self.meta.m
    }

    fn action_dim(&self) -> usize {
        self.meta.action_dim
    }

    fn bounds(&self) -> &[[f64; 2]] {
        &self.meta.bounds
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, _rng: &mut dyn RngCore) -> Result<Head> {
        let pw = self.path_weights(g, p, x)?;
        let mean = match self.meta.leaf_kind {
            LeafKind::Static => g.matmul(pw, p[LEAF])?,
            LeafKind::Controller => {
                let mut cols = Vec::with_capacity(self.meta.action_dim);
                for a in 0..self.meta.action_dim {
                    let lin = g.matmul_t(x, p[LEAF + 1 + a])?;
                    let bias = g.column(p[LEAF], a)?;
                    let lm = g.add_row(lin, bias)?;
                    let weighted = g.mul(pw, lm)?;
                    cols.push(g.row_sum(weighted));
                }
                g.concat_cols(&cols)?
            }
        };
        let lg = g.exp(p[GAMMA]);
        let gamma = g.clamp(lg, STD_MIN, STD_MAX);
        let std = g.matmul(pw, gamma)?;
        Ok(Head {
            mean,
            std,
            leaves: None,
        })
    }

    fn count_params(&self) -> ParamCount {
        let l = 1usize << self.meta.depth;
        let per_dim = match self.meta.leaf_kind {
            LeafKind::Static => 2,
            LeafKind::Controller => 2 * self.meta.m + 2,
        };
        ParamCount {
            total: self.params.numel(),
            active: 2 * (l - 1) + l * self.meta.action_dim * per_dim,
        }
    }

    fn crisp(&self) -> Result<Option<CrispTree>> {
        self.crispify().map(Some)
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(CddtDoc {
            kind: Self::KIND.into(),
            meta: self.meta.clone(),
            nodes: self.nodes(),
            leaves: self.leaves(),
        })
        .expect("plain data serializes")
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
