//! Hard selections with soft gradients.
//!
//! Each selection emits an exact `{0,1}` pattern in the forward pass and routes
//! the backward pass through a softmax surrogate (straight-through estimation).

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        match best {
            Some(b) if !(v > row[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Indices of the `k` largest entries, in ascending index order. Ties prefer
/// lower indices.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// One i.i.d. Gumbel(0, 1) draw via `-ln(-ln u)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logs finite
    let mut u: f64 = rng.random();
    while u <= 0.0 || u >= 1.0 {
        u = rng.random();
    }
    -(-u.ln()).ln()
}

/// How the soft surrogate of a hard selection is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SoftPath {
    /// `softmax(q)` at temperature 1.
    Softmax,
    /// `softmax((q + g) / tau)` with fresh Gumbel noise `g`.
    Gumbel { tau: f64 },
}

impl Graph {
    /// Gumbel-softmax with caller-supplied noise (same shape as `w`).
    pub fn gumbel_softmax_with_noise(&mut self, w: Var, tau: f64, noise: Tensor) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(AutodiffError::Temperature(tau));
        }
        let g = self.constant(noise);
        let perturbed = self.add(w, g)?;
        self.softmax(perturbed, tau)
    }

    /// `softmax((w + g) / tau)` with `g` i.i.d. Gumbel(0, 1).
    pub fn gumbel_softmax<R: Rng + ?Sized>(&mut self, w: Var, tau: f64, rng: &mut R) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(AutodiffError::Temperature(tau));
        }
        let shape = self.value(w).shape().to_vec();
        let n = self.value(w).len();
        let noise: Vec<f64> = (0..n).map(|_| sample_gumbel(rng)).collect();
        self.gumbel_softmax_with_noise(w, tau, Tensor::new(shape, noise)?)
    }

    fn soft_path<R: Rng + ?Sized>(&mut self, q: Var, path: SoftPath, rng: &mut R) -> Result<Var> {
        match path {
            SoftPath::Softmax => self.softmax(q, 1.0),
            SoftPath::Gumbel { tau } => self.gumbel_softmax(q, tau, rng),
        }
    }

    /// Row-wise one-hot of the argmax, differentiable through `softmax(q)`.
    pub fn diff_argmax(&mut self, q: Var) -> Result<Var> {
        self.diff_argmax_with(q, SoftPath::Softmax, &mut NoRng)
    }

    /// [`Graph::diff_argmax`] with a configurable soft path. The hard pattern
    /// is the argmax of the soft values, which for the plain softmax is the
    /// argmax of `q` itself.
    pub fn diff_argmax_with<R: Rng + ?Sized>(&mut self, q: Var, path: SoftPath, rng: &mut R) -> Result<Var> {
        if self.value(q).is_empty() {
            return Err(AutodiffError::Empty("diff_argmax"));
        }
        let soft = self.soft_path(q, path, rng)?;
        let hard = {
            let key = match path {
                SoftPath::Softmax => self.value(q),
                SoftPath::Gumbel { .. } => self.value(soft),
            };
            row_pattern(key, |row| argmax(row).into_iter().collect())
        };
        self.straight_through(hard, soft)
    }

    /// Row-wise k-hot mask of the `k` largest entries, differentiable
    /// through `softmax(q)`.
    pub fn diff_khot(&mut self, q: Var, k: usize) -> Result<Var> {
        self.diff_khot_with(q, k, SoftPath::Softmax, &mut NoRng)
    }

    pub fn diff_khot_with<R: Rng + ?Sized>(&mut self, q: Var, k: usize, path: SoftPath, rng: &mut R) -> Result<Var> {
        let len = self.value(q).cols();
        if self.value(q).is_empty() {
            return Err(AutodiffError::Empty("diff_khot"));
        }
        if k > len {
            return Err(AutodiffError::TopK { k, len });
        }
        let soft = self.soft_path(q, path, rng)?;
        let hard = {
            let key = match path {
                SoftPath::Softmax => self.value(q),
                SoftPath::Gumbel { .. } => self.value(soft),
            };
            row_pattern(key, |row| top_k(row, k))
        };
        self.straight_through(hard, soft)
    }
}

fn row_pattern(t: &Tensor, pick: impl Fn(&[f64]) -> Vec<usize>) -> Tensor {
    let c = t.cols();
    let mut data = vec![0.0; t.len()];
    for r in 0..t.rows() {
        for j in pick(t.row(r)) {
            data[r * c + j] = 1.0;
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Placeholder generator for soft paths that never sample.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic soft path does not sample")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic soft path does not sample")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("deterministic soft path does not sample")
    }
}
