//! Exact analysis of crisp trees over box-shaped state sets: which leaves a
//! box can reach, and the range of each leaf's output there.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::crisp::{CrispTree, Direction, LeafController};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::squash_scalar;

/// One coordinate of a region. Ends may be open; infinite ends are allowed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_open: bool,
    pub hi_open: bool,
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            lo_open: false,
            hi_open: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi || (self.lo == self.hi && (self.lo_open || self.hi_open))
    }

    pub fn width(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.hi - self.lo
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lo_open { v > self.lo } else { v >= self.lo };
        let below = if self.hi_open { v < self.hi } else { v <= self.hi };
        above && below
    }

    /// Keeps `v > t` (open at `t`).
    fn above(&mut self, t: f64) {
        if t >= self.lo {
            self.lo = t;
            self.lo_open = true;
        }
    }

    /// Keeps `v >= t`.
    fn at_least(&mut self, t: f64) {
        if t > self.lo {
            self.lo = t;
            self.lo_open = false;
        }
    }

    fn below(&mut self, t: f64) {
        if t <= self.hi {
            self.hi = t;
            self.hi_open = true;
        }
    }

    fn at_most(&mut self, t: f64) {
        if t < self.hi {
            self.hi = t;
            self.hi_open = false;
        }
    }
}

/// Axis-aligned box in normalized observation space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub dims: Vec<Interval>,
}

impl Region {
    pub fn closed(bounds: &[[f64; 2]]) -> Result<Self> {
        if let Some(k) = bounds.iter().position(|[lo, hi]| !(lo <= hi)) {
            return Err(Error::config(
                "domain",
                format!("feature {k}: lower bound exceeds upper bound"),
            ));
        }
        Ok(Self {
            dims: bounds.iter().map(|&[lo, hi]| Interval::closed(lo, hi)).collect(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.dims.iter().any(Interval::is_empty)
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().map(Interval::width).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.dims.iter().zip(x).all(|(d, &v)| d.contains(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node: usize,
    pub k: usize,
    pub threshold: f64,
    pub dir: Direction,
    /// Whether the predicate holds on this path.
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub leaf: usize,
    pub path: Vec<PathStep>,
    pub feasible: bool,
    /// Absent for infeasible regions.
    pub region: Option<Region>,
    /// Pre-squash `[min, max]` per action dimension.
    pub raw_range: Option<Vec<[f64; 2]>>,
    /// `raw_range` mapped into environment units.
    pub action_range: Option<Vec<[f64; 2]>>,
}

fn step_text(s: &PathStep, names: Option<&[String]>) -> String {
    let feat = names
        .and_then(|n| n.get(s.k).cloned())
        .unwrap_or_else(|| format!("x{}", s.k));
    let op = match (s.dir, s.holds) {
        (Direction::Greater, true) => ">",
        (Direction::Greater, false) => "<=",
        (Direction::Less, true) => "<",
        (Direction::Less, false) => ">=",
    };
    format!("{feat} {op} {}", s.threshold)
}

impl RegionReport {
    /// Conjunction of the path's inequalities.
    pub fn predicate(&self, names: Option<&[String]>) -> String {
        self.path
            .iter()
            .map(|s| step_text(s, names))
            .collect::<Vec<_>>()
            .join(" and ")
    }
}

/// Exact `[min, max]` of a linear controller over a box, summed in the same
/// order as [`LeafController::eval`] so sampled outputs never escape it.
pub fn leaf_output_range(leaf: &LeafController, region: &Region) -> [f64; 2] {
    let (mut lo, mut hi) = (0.0, 0.0);
    for t in &leaf.terms {
        if t.coef == 0.0 {
            continue;
        }
        let d = &region.dims[t.idx];
        let (a, b) = if t.coef > 0.0 { (d.lo, d.hi) } else { (d.hi, d.lo) };
        lo += t.coef * a;
        hi += t.coef * b;
    }
    [lo + leaf.bias, hi + leaf.bias]
}

/// Counts of elementary steps, for cost accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub predicates: usize,
    pub terms: usize,
}

/// All `2^D` root-to-leaf paths intersected with `domain`.
pub fn enumerate_regions(tree: &CrispTree, domain: &Region) -> Result<Vec<RegionReport>> {
    enumerate_regions_counted(tree, domain).map(|(r, _)| r)
}

pub fn enumerate_regions_counted(tree: &CrispTree, domain: &Region) -> Result<(Vec<RegionReport>, OpCount)> {
    tree.validate()?;
    if domain.dims.len() != tree.m {
        return Err(Error::Dimension(format!(
            "domain has {} features, tree expects {}",
            domain.dims.len(),
            tree.m
        )));
    }
    let n = tree.nodes.len();
    let mut ops = OpCount::default();
    let mut out = Vec::with_capacity(tree.num_leaves());
    for leaf in 0..tree.num_leaves() {
        let mut slots = Vec::with_capacity(tree.depth);
        let mut s = n + leaf;
        while s > 0 {
            let parent = (s - 1) / 2;
            slots.push((parent, s == 2 * parent + 1));
            s = parent;
        }
        slots.reverse();
        let mut region = domain.clone();
        let mut path = Vec::with_capacity(slots.len());
        for (node, holds) in slots {
            let c = &tree.nodes[node];
            let dim = &mut region.dims[c.k];
            match (c.dir, holds) {
                (Direction::Greater, true) => dim.above(c.threshold),
                (Direction::Greater, false) => dim.at_most(c.threshold),
                (Direction::Less, true) => dim.below(c.threshold),
                (Direction::Less, false) => dim.at_least(c.threshold),
            }
            ops.predicates += 1;
            path.push(PathStep {
                node,
                k: c.k,
                threshold: c.threshold,
                dir: c.dir,
                holds,
            });
        }
        let feasible = !region.is_empty();
        let (raw, action) = if feasible {
            let raw: Vec<[f64; 2]> = tree.leaves[leaf]
                .iter()
                .map(|c| {
                    ops.terms += c.terms.len();
                    leaf_output_range(c, &region)
                })
                .collect();
            let action = raw
                .iter()
                .zip(&tree.bounds)
                .map(|(&[lo, hi], &b)| [squash_scalar(lo, b), squash_scalar(hi, b)])
                .collect();
            (Some(raw), Some(action))
        } else {
            (None, None)
        };
        out.push(RegionReport {
            leaf,
            path,
            feasible,
            region: feasible.then_some(region),
            raw_range: raw,
            action_range: action,
        });
    }
    Ok((out, ops))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub regions: Vec<RegionReport>,
    /// Leaves whose action range leaves the limits.
    pub violations: Vec<usize>,
}

impl Verdict {
    pub fn summary(&self, spec: Option<&EnvSpec>) -> String {
        let names = spec.map(|s| s.feature_names.as_slice());
        let feasible = self.regions.iter().filter(|r| r.feasible).count();
        let mut s = format!(
            "{}: {} of {} regions feasible, {} violating\n",
            if self.pass { "PASS" } else { "FAIL" },
            feasible,
            self.regions.len(),
            self.violations.len()
        );
        for &v in &self.violations {
            let r = &self.regions[v];
            let _ = writeln!(
                s,
                "  leaf {}: if {} then action in {:?}",
                r.leaf,
                r.predicate(names),
                r.action_range.as_ref().expect("violations are feasible")
            );
        }
        s
    }
}

/// PASS iff every reachable leaf keeps its actions inside `limits`
/// (environment units); failures list the offending regions.
pub fn verify_bounds(tree: &CrispTree, domain: &Region, limits: &[[f64; 2]]) -> Result<Verdict> {
    if limits.len() != tree.action_dim() {
        return Err(Error::Dimension(format!(
            "{} limits for {} action dimensions",
            limits.len(),
            tree.action_dim()
        )));
    }
    let regions = enumerate_regions(tree, domain)?;
    let violations: Vec<usize> = regions
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            r.action_range.as_ref().is_some_and(|ranges| {
                ranges
                    .iter()
                    .zip(limits)
                    .any(|(&[lo, hi], &[llo, lhi])| lo < llo || hi > lhi)
            })
        })
        .map(|(i, _)| i)
        .collect();
    Ok(Verdict {
        pass: violations.is_empty(),
        regions,
        violations,
    })
}

/// Property file: a physical-unit box per named feature (missing features
/// are unbounded) and action limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySpec {
    #[serde(default)]
    pub domain: std::collections::BTreeMap<String, [f64; 2]>,
    pub limits: Vec<[f64; 2]>,
}

impl PropertySpec {
    /// The domain in normalized observation space.
    pub fn region(&self, spec: &EnvSpec) -> Result<Region> {
        let mut dims = vec![Interval::closed(f64::NEG_INFINITY, f64::INFINITY); spec.obs_dim];
        for (name, &[lo, hi]) in &self.domain {
            let k = spec
                .feature_names
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| Error::config("domain", format!("unknown feature '{name}'")))?;
            if !(lo <= hi) {
                return Err(Error::config(
                    "domain",
                    format!("{name}: lower bound exceeds upper bound"),
                ));
            }
            let (a, b) = (
                (lo - spec.obs_offset[k]) / spec.obs_scale[k],
                (hi - spec.obs_offset[k]) / spec.obs_scale[k],
            );
            dims[k] = Interval::closed(a.min(b), a.max(b));
        }
        Ok(Region { dims })
    }
}
