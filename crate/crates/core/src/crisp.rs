//! The interpretable form of a tree policy: single-feature threshold tests and
//! sparse linear leaf controllers, evaluated with plain comparisons.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::squash_scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = "<")]
    Less,
}

impl Direction {
    pub fn symbol(self) -> &'static str {
        match self {
            Direction::Greater => ">",
            Direction::Less => "<",
        }
    }
}

/// `x[k] dir threshold`; true sends the state to the left child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrispNode {
    pub k: usize,
    pub threshold: f64,
    pub dir: Direction,
}

impl CrispNode {
    pub fn test(&self, x: &[f64]) -> bool {
        match self.dir {
            Direction::Greater => x[self.k] > self.threshold,
            Direction::Less => x[self.k] < self.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub idx: usize,
    pub coef: f64,
}

/// Pre-squash mean `sum(coef * x[idx]) + bias` and its standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafController {
    pub terms: Vec<Term>,
    pub bias: f64,
    pub std: f64,
}

impl LeafController {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for t in &self.terms {
            s += t.coef * x[t.idx];
        }
        s + self.bias
    }
}

/// Complete binary tree in heap order: node `i` has children `2i+1`, `2i+2`
/// and leaf `d` sits in slot `nodes.len() + d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrispTree {
    pub depth: usize,
    pub m: usize,
    pub nodes: Vec<CrispNode>,
    /// `leaves[d][a]` is leaf `d`'s controller for action dimension `a`.
    pub leaves: Vec<Vec<LeafController>>,
    pub bounds: Vec<[f64; 2]>,
}

impl CrispTree {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth", "a crisp tree needs at least one decision node"));
        }
        let l = 1usize << self.depth;
        if self.nodes.len() != l - 1 || self.leaves.len() != l {
            return Err(Error::Checkpoint(format!(
                "depth {} needs {} nodes and {} leaves, found {} and {}",
                self.depth,
                l - 1,
                l,
                self.nodes.len(),
                self.leaves.len()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.k >= self.m || !n.threshold.is_finite() {
                return Err(Error::Checkpoint(format!("node {i} is malformed")));
            }
        }
        for (d, leaf) in self.leaves.iter().enumerate() {
            if leaf.len() != self.bounds.len() {
                return Err(Error::Checkpoint(format!("leaf {d} has {} controllers", leaf.len())));
            }
            if leaf.iter().flat_map(|c| &c.terms).any(|t| t.idx >= self.m) {
                return Err(Error::Checkpoint(format!("leaf {d} references a missing feature")));
            }
        }
        Ok(())
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        while i < self.nodes.len() {
            i = if self.nodes[i].test(x) { 2 * i + 1 } else { 2 * i + 2 };
        }
        i - self.nodes.len()
    }

    /// Pre-squash means of the reached leaf.
    pub fn raw_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let leaf = &self.leaves[self.leaf_index(x)];
        Ok(leaf.iter().map(|c| c.eval(x)).collect())
    }

    /// Deterministic action in environment units.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_mean(x)?;
        Ok(raw
            .iter()
            .zip(&self.bounds)
            .map(|(&u, &b)| squash_scalar(u, b))
            .collect())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.m {
            return Err(Error::Dimension(format!(
                "state has {} features, tree expects {}",
                x.len(),
                self.m
            )));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("state".into()));
        }
        Ok(())
    }

    /// Number of nonzero-capable coefficients per leaf per action dimension.
    pub fn active_coefficients(&self) -> Vec<Vec<usize>> {
        self.leaves
            .iter()
            .map(|l| l.iter().map(|c| c.terms.len()).collect())
            .collect()
    }

    /// Indented if/else listing in physical units when `spec` is given.
    pub fn to_text(&self, spec: Option<&EnvSpec>) -> String {
        let names = Names::new(self, spec);
        let mut out = String::new();
        for (a, [lo, hi]) in self.bounds.iter().enumerate() {
            let _ = writeln!(
                out,
                "# {} = {lo} + {}*(1 + tanh(u_{}))/2",
                names.action(a),
                hi - lo,
                names.action(a)
            );
        }
        self.text_node(0, 0, &names, &mut out);
        out
    }

    fn text_node(&self, slot: usize, indent: usize, names: &Names, out: &mut String) {
        let pad = "  ".repeat(indent);
        if slot >= self.nodes.len() {
            let d = slot - self.nodes.len();
            for (a, c) in self.leaves[d].iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{pad}u_{} = {}  (std {:.4})",
                    names.action(a),
                    names.controller(c),
                    c.std
                );
            }
            return;
        }
        let _ = writeln!(out, "{pad}if {}:", names.predicate(&self.nodes[slot]));
        self.text_node(2 * slot + 1, indent + 1, names, out);
        let _ = writeln!(out, "{pad}else:");
        self.text_node(2 * slot + 2, indent + 1, names, out);
    }

    /// Graphviz digraph; the true branch is drawn solid, the false one dashed.
    pub fn to_dot(&self, spec: Option<&EnvSpec>) -> String {
        let names = Names::new(self, spec);
        let mut out = String::from("digraph tree {\n  node [fontname=\"Helvetica\"];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "  n{i} [shape=box, label=\"{}\"];",
                names.predicate(n).replace('"', "'")
            );
        }
        for (d, leaf) in self.leaves.iter().enumerate() {
            let label: Vec<String> = leaf
                .iter()
                .enumerate()
                .map(|(a, c)| format!("u_{} = {}", names.action(a), names.controller(c)))
                .collect();
            let _ = writeln!(out, "  l{d} [shape=ellipse, label=\"{}\"];", label.join("\\n"));
        }
        let slot_name = |s: usize| {
            if s < self.nodes.len() {
                format!("n{s}")
            } else {
                format!("l{}", s - self.nodes.len())
            }
        };
        for i in 0..self.nodes.len() {
            let _ = writeln!(out, "  n{i} -> {} [label=\"true\"];", slot_name(2 * i + 1));
            let _ = writeln!(
                out,
                "  n{i} -> {} [label=\"false\", style=dashed];",
                slot_name(2 * i + 2)
            );
        }
        out.push_str("}\n");
        out
    }
}

/// Feature naming and unit conversion for exports.
struct Names<'a> {
    features: Vec<String>,
    actions: Vec<String>,
    spec: Option<&'a EnvSpec>,
}

impl<'a> Names<'a> {
    fn new(tree: &CrispTree, spec: Option<&'a EnvSpec>) -> Self {
        let usable = spec.filter(|s| s.obs_dim == tree.m && s.action_dim == tree.action_dim());
        match usable {
            Some(s) => Self {
                features: s.feature_names.clone(),
                actions: s.action_names.clone(),
                spec: Some(s),
            },
            None => Self {
                features: (0..tree.m).map(|k| format!("x{k}")).collect(),
                actions: (0..tree.action_dim()).map(|a| format!("a{a}")).collect(),
                spec: None,
            },
        }
    }

    fn action(&self, a: usize) -> &str {
        &self.actions[a]
    }

    fn predicate(&self, n: &CrispNode) -> String {
        let (t, flip) = match self.spec {
            Some(s) => (s.denormalize_feature(n.k, n.threshold), s.obs_scale[n.k] < 0.0),
            None => (n.threshold, false),
        };
        let dir = match (n.dir, flip) {
            (Direction::Greater, false) | (Direction::Less, true) => ">",
            _ => "<",
        };
        format!("{} {dir} {}", self.features[n.k], fmt_num(t))
    }

    /// The controller rewritten over raw features.
    fn controller(&self, c: &LeafController) -> String {
        let mut bias = c.bias;
        let mut parts = Vec::new();
        for t in &c.terms {
            let (coef, shift) = match self.spec {
                Some(s) => (
                    t.coef / s.obs_scale[t.idx],
                    t.coef * s.obs_offset[t.idx] / s.obs_scale[t.idx],
                ),
                None => (t.coef, 0.0),
            };
            bias -= shift;
            parts.push(format!("{}*{}", fmt_num(coef), self.features[t.idx]));
        }
        parts.push(fmt_num(bias));
        parts.join(" + ").replace("+ -", "- ")
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.4e}")
    } else {
        format!("{v:.4}")
    }
}
