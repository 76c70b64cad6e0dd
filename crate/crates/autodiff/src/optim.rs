//! Parameter containers and first-order optimizers.

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, t: Tensor) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `g` as a trainable input.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Gradients aligned with this store's slots.
    pub fn collect(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise.
    pub fn soft_update(&mut self, online: &ParamStore, tau: f64) {
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = params.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, g) in grads.iter().enumerate() {
            let p = params.get_mut(slot).data_mut();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_update_endpoints() {
        let mut online = ParamStore::new();
        online.push(Tensor::vector(vec![1.0, 2.0]));
        let mut target = ParamStore::new();
        target.push(Tensor::vector(vec![0.0, 0.0]));

        let mut t0 = target.clone();
        t0.soft_update(&online, 0.0);
        assert_eq!(t0, target);

        let mut t1 = target.clone();
        t1.soft_update(&online, 1.0);
        assert_eq!(t1, online);

        target.soft_update(&online, 0.5);
        target.soft_update(&online, 0.5);
        assert_eq!(target.get(0).data()[0], 0.75);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.push(Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let sq = g.mul(vars[0], vars[0]).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            let gs = p.collect(&grads, &vars);
            opt.step(&mut p, &gs);
        }
        assert!(p.get(0).data().iter().all(|v| v.abs() < 1e-3));
    }
}
