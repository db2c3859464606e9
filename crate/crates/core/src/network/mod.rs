//! Fully connected regression network with hurdle output heads.
//!
//! The trunk is a stack of ReLU layers. The output layer is linear; for the
//! `p` head its value is passed through a sigmoid, the `μ` head is returned
//! as is. The lognormal scale is not predicted, it comes from the training
//! configuration.

mod checkpoint;
mod train;

pub(crate) use checkpoint::fnv1a;
pub use checkpoint::{Checkpoint, FeatureNorm, LayerParams, Model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, two_model_train, Adam, EpochRecord, Objective, TrainData, TrainHistory};

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hurdle_dist::HurdleParams;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    /// `p` and `μ`.
    Joint,
    /// `p` only.
    POnly,
    /// A single unbounded output: `μ` for the intensity model, the rain rate
    /// itself for the MSE baselines.
    MuOnly,
}

impl Heads {
    pub fn width(self) -> usize {
        match self {
            Heads::Joint => 2,
            Heads::POnly | Heads::MuOnly => 1,
        }
    }

    pub fn has_p(self) -> bool {
        matches!(self, Heads::Joint | Heads::POnly)
    }

    pub fn has_mu(self) -> bool {
        matches!(self, Heads::Joint | Heads::MuOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub heads: Heads,
}

impl NetConfig {
    pub fn new(input_dim: usize, heads: Heads, seed: u64) -> Self {
        NetConfig { input_dim, hidden: vec![64, 64], seed, heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Fixed lognormal scale.
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, weight_decay: 1e-4, batch_size: 256, max_epochs: 30, patience: 4, sigma: 0.5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience <= self.max_epochs
            && self.sigma > 0.0
            && self.sigma.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid training configuration: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    #[inline]
    fn apply(&self, x: &[T], out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * self.inputs..(j + 1) * self.inputs];
            *o = row.iter().zip(x).fold(self.bias[j], |acc, (&w, &v)| acc + w * v);
        }
    }
}

/// Per-layer parameter gradients, same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }
}

/// Head values for a batch. Absent heads are empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub p: Vec<T>,
    pub mu: Vec<T>,
}

/// Gradient of the loss with respect to the head values (`p` after the
/// sigmoid, `μ` as emitted).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T> {
    pub d_p: Vec<T>,
    pub d_mu: Vec<T>,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    batch: usize,
    /// `activations[0]` is the input; `activations[k]` the output of layer `k`
    /// (post-ReLU for hidden layers, raw for the output layer).
    activations: Vec<Vec<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Mlp<T> {
    config: NetConfig,
    layers: Vec<Dense<T>>,
    /// Changes whenever parameters change; forward caches carry it.
    generation: u64,
}

impl<T: Real> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

/// Logistic function, kept inside the open unit interval.
fn sigmoid<T: Real>(z: T) -> T {
    let p = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    p.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

impl<T: Real> Mlp<T> {
    /// Kaiming-normal initialisation from `config.seed`: standard deviation
    /// `√(2/fan_in)` for ReLU layers and `√(1/fan_in)` for the output layer;
    /// biases start at zero.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.heads.width());
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|k| {
                let (fan_in, fan_out) = (widths[k], widths[k + 1]);
                let gain = if k + 1 < n_layers { 2.0 } else { 1.0 };
                let std = (gain / fan_in as f64).sqrt();
                let mut d = Dense::zeros(fan_in, fan_out);
                for w in &mut d.weights {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = T::lit(std * z);
                }
                d
            })
            .collect();
        Ok(Mlp { config, layers, generation: NEXT_ID.fetch_add(1, Ordering::Relaxed) })
    }

    /// All weights and biases zero.
    pub fn zeroed(config: NetConfig) -> Result<Self> {
        let mut net = Self::new(config)?;
        for l in &mut net.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = T::zero());
        }
        Ok(net)
    }

    pub fn from_layers(config: NetConfig, layers: Vec<Dense<T>>) -> Result<Self> {
        config.validate()?;
        let mut expect_in = config.input_dim;
        let mut widths = config.hidden.clone();
        widths.push(config.heads.width());
        if layers.len() != widths.len() {
            return Err(Error::Config(format!("expected {} layers, got {}", widths.len(), layers.len())));
        }
        for (l, &w) in layers.iter().zip(&widths) {
            if l.inputs != expect_in || l.outputs != w || l.weights.len() != w * expect_in || l.bias.len() != w {
                return Err(Error::Config("layer shapes do not match the network configuration".into()));
            }
            expect_in = w;
        }
        Ok(Mlp { config, layers, generation: NEXT_ID.fetch_add(1, Ordering::Relaxed) })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in the same order as [`Gradients::flat`].
    pub fn params_flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::LengthMismatch { what: "flat parameters", left: flat.len(), right: self.n_params() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        self.touch();
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense<T>] {
        self.touch();
        &mut self.layers
    }

    fn touch(&mut self) {
        self.generation = NEXT_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check_features(&self, features: &[T]) -> Result<usize> {
        let d = self.config.input_dim;
        if features.len() % d != 0 {
            return Err(Error::Dimension { expected: d, got: features.len() % d });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("features must be finite".into()));
        }
        Ok(features.len() / d)
    }

    fn split_heads(&self, raw: &[T], n: usize) -> HeadOutputs<T> {
        let w = self.config.heads.width();
        let col = |k: usize| (0..n).map(|i| raw[i * w + k]).collect::<Vec<T>>();
        match self.config.heads {
            Heads::Joint => HeadOutputs { p: col(0).into_iter().map(sigmoid).collect(), mu: col(1) },
            Heads::POnly => HeadOutputs { p: col(0).into_iter().map(sigmoid).collect(), mu: Vec::new() },
            Heads::MuOnly => HeadOutputs { p: Vec::new(), mu: col(0) },
        }
    }

    /// Forward pass over a row-major `n × input_dim` batch, keeping the
    /// activations needed by [`Mlp::backward`].
    pub fn forward_cached(&self, features: &[T]) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
        let n = self.check_features(features)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(features.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let input = &activations[k];
            let mut out = vec![T::zero(); n * layer.outputs];
            for i in 0..n {
                let o = &mut out[i * layer.outputs..(i + 1) * layer.outputs];
                layer.apply(&input[i * layer.inputs..(i + 1) * layer.inputs], o);
                if k < last {
                    o.iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
            }
            activations.push(out);
        }
        let heads = self.split_heads(activations.last().unwrap(), n);
        Ok((heads, ForwardCache { generation: self.generation, batch: n, activations }))
    }

    pub fn forward(&self, features: &[T]) -> Result<HeadOutputs<T>> {
        let n = self.check_features(features)?;
        let width = self.layers.iter().map(|l| l.outputs).max().unwrap_or(1);
        let out_w = self.config.heads.width();
        let mut raw = vec![T::zero(); n * out_w];
        let (mut a, mut b) = (vec![T::zero(); width], vec![T::zero(); width]);
        let last = self.layers.len() - 1;
        let d = self.config.input_dim;
        for i in 0..n {
            a[..d].copy_from_slice(&features[i * d..(i + 1) * d]);
            for (k, layer) in self.layers.iter().enumerate() {
                layer.apply(&a[..layer.inputs], &mut b[..layer.outputs]);
                if k < last {
                    b[..layer.outputs].iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
                std::mem::swap(&mut a, &mut b);
            }
            raw[i * out_w..(i + 1) * out_w].copy_from_slice(&a[..out_w]);
        }
        Ok(self.split_heads(&raw, n))
    }

    /// Hurdle parameters for a joint-head network with the fixed `sigma`.
    pub fn predict_params(&self, features: &[T], sigma: T) -> Result<Vec<HurdleParams<T>>> {
        if self.config.heads != Heads::Joint {
            return Err(Error::Config("hurdle parameters need a joint-head network".into()));
        }
        let h = self.forward(features)?;
        h.p.iter().zip(&h.mu).map(|(&p, &mu)| HurdleParams::from_parts(p, mu, sigma)).collect()
    }

    /// Backpropagates head gradients through the activations of a forward
    /// pass on the current parameters.
    pub fn backward(&self, cache: &ForwardCache<T>, grads: &HeadGrads<T>) -> Result<Gradients<T>> {
        if cache.generation != self.generation {
            return Err(Error::StaleActivations("parameters changed since the forward pass".into()));
        }
        let n = cache.batch;
        let heads = self.config.heads;
        let expect = |v: &Vec<T>, used: bool| if used { v.len() == n } else { v.is_empty() };
        if !expect(&grads.d_p, heads.has_p()) || !expect(&grads.d_mu, heads.has_mu()) {
            return Err(Error::StaleActivations(format!(
                "head gradients do not match the cached batch of {n} for {heads:?}"
            )));
        }
        let out_w = heads.width();
        let raw = cache.activations.last().unwrap();
        // Gradient at the pre-sigmoid output layer.
        let mut delta = vec![T::zero(); n * out_w];
        for i in 0..n {
            match heads {
                Heads::Joint => {
                    let p = sigmoid(raw[i * 2]);
                    delta[i * 2] = grads.d_p[i] * p * (T::one() - p);
                    delta[i * 2 + 1] = grads.d_mu[i];
                }
                Heads::POnly => {
                    let p = sigmoid(raw[i]);
                    delta[i] = grads.d_p[i] * p * (T::one() - p);
                }
                Heads::MuOnly => delta[i] = grads.d_mu[i],
            }
        }
        let mut out: Vec<Dense<T>> = self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.activations[k];
            let g = &mut out[k];
            let mut prev = if k > 0 { vec![T::zero(); n * layer.inputs] } else { Vec::new() };
            for i in 0..n {
                let x = &input[i * layer.inputs..(i + 1) * layer.inputs];
                let dl = &delta[i * layer.outputs..(i + 1) * layer.outputs];
                for (j, &dj) in dl.iter().enumerate() {
                    if dj == T::zero() {
                        continue;
                    }
                    g.bias[j] = g.bias[j] + dj;
                    let gw = &mut g.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    gw.iter_mut().zip(x).for_each(|(w, &xv)| *w = *w + dj * xv);
                    if k > 0 {
                        let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                        let p = &mut prev[i * layer.inputs..(i + 1) * layer.inputs];
                        p.iter_mut().zip(row).for_each(|(pv, &w)| *pv = *pv + w * dj);
                    }
                }
            }
            if k > 0 {
                // ReLU mask from the stored post-activation values.
                prev.iter_mut().zip(input).for_each(|(d, &a)| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = prev;
            }
        }
        Ok(Gradients { layers: out })
    }
}
