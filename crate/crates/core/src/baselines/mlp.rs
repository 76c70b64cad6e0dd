use icct_autodiff::optim::ParamStore;
use icct_autodiff::{Graph, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::{Head, ParamCount, Policy};

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;

/// Appends weight `(out x in)` and bias `(out)` tensors for each layer of
/// `sizes`, drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
pub fn push_dense(store: &mut ParamStore, sizes: &[usize], rng: &mut impl Rng) {
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let r = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-r..r)).collect();
        store.push(Tensor::matrix(fan_out, fan_in, weights).expect("sized"));
        store.push(Tensor::vector((0..fan_out).map(|_| rng.random_range(-r..r)).collect()));
    }
}

/// ReLU network over the `(W, b)` pairs in `p`; the last layer is linear.
pub fn dense_forward(g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let layers = p.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = g.matmul_t(h, p[2 * l])?;
        h = g.add_row(z, p[2 * l + 1])?;
        if l + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpMeta,
    params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MlpMeta {
    m: usize,
    action_dim: usize,
    hidden: Vec<usize>,
    bounds: Vec<[f64; 2]>,
    seed: u64,
}

/// Serialized form of a tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorDoc {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl TensorDoc {
    pub fn into_tensor(self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape, self.data)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MlpDoc {
    kind: String,
    meta: MlpMeta,
    /// `(W, b)` pairs of the trunk, then the mean head, then the log-std head.
    tensors: Vec<TensorDoc>,
}

impl Mlp {
    pub const KIND: &'static str = "mlp";

    /// Trunk of `hidden` ReLU layers with separate linear mean and log-std heads.
    pub fn init(spec: &EnvSpec, hidden: &[usize], seed: u64) -> Result<Self> {
        if hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut trunk = vec![spec.obs_dim];
        trunk.extend_from_slice(hidden);
        push_dense(&mut params, &trunk, &mut rng);
        let last = *trunk.last().expect("non-empty");
        push_dense(&mut params, &[last, spec.action_dim], &mut rng);
        push_dense(&mut params, &[last, spec.action_dim], &mut rng);
        Ok(Self {
            spec: MlpMeta {
                m: spec.obs_dim,
                action_dim: spec.action_dim,
                hidden: hidden.to_vec(),
                bounds: spec.action_bounds.clone(),
                seed,
            },
            params,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let doc: MlpDoc = serde_json::from_value(v.clone())?;
        if doc.kind != Self::KIND {
            return Err(Error::Checkpoint(format!("expected kind 'mlp', found '{}'", doc.kind)));
        }
        let fresh = Mlp::init(
            &EnvSpec {
                name: String::new(),
                obs_dim: doc.meta.m,
                action_dim: doc.meta.action_dim,
                action_bounds: doc.meta.bounds.clone(),
                horizon: 1,
                feature_names: Vec::new(),
                action_names: Vec::new(),
                obs_offset: Vec::new(),
                obs_scale: Vec::new(),
            },
            &doc.meta.hidden,
            0,
        )?;
        if fresh.params.len() != doc.tensors.len()
            || fresh
                .params
                .iter()
                .zip(&doc.tensors)
                .any(|(a, b)| a.shape() != b.shape.as_slice())
        {
            return Err(Error::Checkpoint("mlp tensor shapes do not match layer sizes".into()));
        }
        let mut params = ParamStore::new();
        for t in doc.tensors {
            params.push(t.into_tensor()?);
        }
        Ok(Self { spec: doc.meta, params })
    }
}

impl Policy for Mlp {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn obs_dim(&self) -> usize {
        self.spec.m
    }

    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    fn bounds(&self) -> &[[f64; 2]] {
        &self.spec.bounds
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, _rng: &mut dyn RngCore) -> Result<Head> {
        let n = p.len();
        let trunk = dense_forward(g, &p[..n - 4], x)?;
        let h = if n > 4 { g.relu(trunk) } else { trunk };
        let mean = dense_forward(g, &p[n - 4..n - 2], h)?;
        let log_std = dense_forward(g, &p[n - 2..], h)?;
        let log_std = g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        let std = g.exp(log_std);
        Ok(Head {
            mean,
            std,
            leaves: None,
        })
    }

    fn count_params(&self) -> ParamCount {
        let n = self.params.numel();
        ParamCount { total: n, active: n }
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(MlpDoc {
            kind: Self::KIND.into(),
            meta: self.spec.clone(),
            tensors: self.params.iter().map(TensorDoc::from).collect(),
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

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: usize, a: usize) -> EnvSpec {
        EnvSpec {
            name: "t".into(),
            obs_dim: m,
            action_dim: a,
            action_bounds: vec![[-1.0, 1.0]; a],
            horizon: 1,
            feature_names: vec![String::new(); m],
            action_names: vec![String::new(); a],
            obs_offset: vec![0.0; m],
            obs_scale: vec![1.0; m],
        }
    }

    #[test]
    fn zero_weights_give_zero_mean() {
        let mut mlp = Mlp::init(&spec(3, 2), &[4], 0).unwrap();
        for i in 0..mlp.params.len() {
            mlp.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = mlp.params.bind(&mut g);
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let h = mlp.forward(&mut g, &p, x, &mut rand::rng()).unwrap();
        assert_eq!(g.value(h.mean).data(), &[0.0, 0.0]);
        assert_eq!(g.value(h.std).data(), &[1.0, 1.0]);
    }

    #[test]
    fn single_linear_layer_is_wx_plus_b() {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, -1.0, 1.0, 0.5]).unwrap());
        let b = g.param(Tensor::vector(vec![0.5, -1.0]));
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 4.0]).unwrap());
        let y = dense_forward(&mut g, &[w, b], x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0 + 8.0 + 0.5, -1.0 + 2.0 + 2.0 - 1.0]);
    }

    #[test]
    fn json_round_trip() {
        let mlp = Mlp::init(&spec(4, 1), &[6, 6], 2).unwrap();
        let back = Mlp::from_json(&mlp.to_json()).unwrap();
        assert_eq!(back.to_json(), mlp.to_json());
    }
}
