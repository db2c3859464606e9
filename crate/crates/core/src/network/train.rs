//! Minibatch training with Adam, L2 weight decay and early stopping on the
//! validation loss.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Dense, FeatureNorm, Gradients, HeadGrads, HeadOutputs, Heads, Mlp, TrainConfig};
use crate::error::{Error, Result};
use crate::hurdle_dist::MarginalPrior;
use crate::losses::{hurdle_sample, HurdlePart, WeightScheme, P_EPS};
use crate::scalar::Real;

/// Raw (unnormalised) row-major features with their labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T> {
    pub features: &'a [T],
    pub labels: &'a [T],
}

impl<'a, T: Real> TrainData<'a, T> {
    pub fn new(features: &'a [T], labels: &'a [T]) -> Self {
        TrainData { features, labels }
    }

    fn check(&self, dim: usize, what: &'static str) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Empty(what));
        }
        if self.features.len() != self.labels.len() * dim {
            return Err(Error::LengthMismatch { what, left: self.features.len(), right: self.labels.len() * dim });
        }
        Ok(())
    }
}

/// What the network is trained to minimise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum Objective<T> {
    /// Hurdle-lognormal likelihood with the scale fixed by [`TrainConfig::sigma`].
    /// `imdl` switches the correction term on.
    Hurdle { prior: MarginalPrior<T>, imdl: bool, part: HurdlePart },
    /// Weighted MSE on the raw label through a single unbounded head.
    Weighted { scheme: WeightScheme<T> },
}

impl<T: Real> Objective<T> {
    pub fn heads(&self) -> Heads {
        match self {
            Objective::Hurdle { part: HurdlePart::Full, .. } => Heads::Joint,
            Objective::Hurdle { part: HurdlePart::Occurrence, .. } => Heads::POnly,
            Objective::Hurdle { part: HurdlePart::Intensity, .. } => Heads::MuOnly,
            Objective::Weighted { .. } => Heads::MuOnly,
        }
    }

    /// Per-sample losses and head gradients (not yet averaged).
    pub fn evaluate(&self, labels: &[T], heads: &HeadOutputs<T>, sigma: T) -> Result<(Vec<T>, HeadGrads<T>)> {
        let n = labels.len();
        let mut losses = Vec::with_capacity(n);
        let mut d_p = Vec::with_capacity(if heads.p.is_empty() { 0 } else { n });
        let mut d_mu = Vec::with_capacity(if heads.mu.is_empty() { 0 } else { n });
        match self {
            Objective::Hurdle { prior, imdl, part } => {
                let half = T::lit(0.5);
                for (i, &y) in labels.iter().enumerate() {
                    let p = heads.p.get(i).copied().unwrap_or(half);
                    let mu = heads.mu.get(i).copied().unwrap_or(T::zero());
                    let (loss, g) = hurdle_sample(y, p, mu, sigma, prior, *imdl, *part)?;
                    losses.push(loss);
                    if !heads.p.is_empty() {
                        d_p.push(g.d_p);
                    }
                    if !heads.mu.is_empty() {
                        d_mu.push(g.d_mu);
                    }
                }
            }
            Objective::Weighted { scheme } => {
                for (&y, &pred) in labels.iter().zip(&heads.mu) {
                    let (loss, g) = crate::losses::weighted_mse(pred, y, scheme)?;
                    losses.push(loss);
                    d_mu.push(g);
                }
            }
        }
        Ok((losses, HeadGrads { d_p, d_mu }))
    }

    /// Output-layer bias that matches the training labels: the logit of the
    /// dry fraction for `p`, the mean wet log-label for `μ`, the mean
    /// weighted label for the MSE head.
    fn initial_bias(&self, labels: &[T]) -> Result<Vec<T>> {
        let n = T::from_usize_lossy(labels.len());
        let wet: Vec<T> = labels.iter().copied().filter(|&y| y > T::zero()).collect();
        let dry_frac = T::one() - T::from_usize_lossy(wet.len()) / n;
        let eps = T::lit(P_EPS);
        let pc = dry_frac.max(eps).min(T::one() - eps);
        let logit = (pc / (T::one() - pc)).ln();
        let mean_log = if wet.is_empty() {
            T::zero()
        } else {
            wet.iter().fold(T::zero(), |a, &y| a + y.ln()) / T::from_usize_lossy(wet.len())
        };
        Ok(match self {
            Objective::Hurdle { part: HurdlePart::Full, .. } => vec![logit, mean_log],
            Objective::Hurdle { part: HurdlePart::Occurrence, .. } => vec![logit],
            Objective::Hurdle { part: HurdlePart::Intensity, .. } => vec![mean_log],
            Objective::Weighted { scheme } => {
                let (mut sw, mut swy) = (T::zero(), T::zero());
                for &y in labels {
                    let w = scheme.weight(y)?;
                    sw = sw + w;
                    swy = swy + w * y;
                }
                vec![swy / sw]
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, weight_decay: T, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) {
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        let mut offset = 0;
        for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weights.iter().chain(&g.bias);
            for (k, (w, &gr)) in params.zip(gs).enumerate() {
                let gr = gr + wd * *w;
                let m = &mut self.m[offset + k];
                let v = &mut self.v[offset + k];
                *m = b1 * *m + (T::one() - b1) * gr;
                *v = b2 * *v + (T::one() - b2) * gr * gr;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
            offset += layer.weights.len() + layer.bias.len();
        }
    }
}

fn mean_loss<T: Real>(
    net: &Mlp<T>,
    features: &[T],
    labels: &[T],
    objective: &Objective<T>,
    sigma: T,
) -> Result<T> {
    let heads = net.forward(features)?;
    let (losses, _) = objective.evaluate(labels, &heads, sigma)?;
    Ok(losses.iter().fold(T::zero(), |a, &l| a + l) / T::from_usize_lossy(losses.len()))
}

/// Trains `net` and returns the checkpoint with the best validation loss.
///
/// Features are standardised with statistics from the training split. The
/// output-layer bias is set from the training labels before the first step.
/// Minibatch order is drawn from a ChaCha8 stream seeded by the network seed,
/// so a run is bit-reproducible.
pub fn train<T: Real>(
    mut net: Mlp<T>,
    train_set: TrainData<'_, T>,
    val_set: TrainData<'_, T>,
    cfg: &TrainConfig,
    objective: &Objective<T>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let dim = net.config().input_dim;
    train_set.check(dim, "training set")?;
    val_set.check(dim, "validation set")?;
    if net.config().heads != objective.heads() {
        return Err(Error::Config(format!(
            "objective needs {:?} heads, network has {:?}",
            objective.heads(),
            net.config().heads
        )));
    }
    let norm = FeatureNorm::fit(train_set.features, dim)?;
    let x_train = norm.apply(train_set.features)?;
    let x_val = norm.apply(val_set.features)?;
    let sigma = T::lit(cfg.sigma);

    let bias = objective.initial_bias(train_set.labels)?;
    {
        let layers = net.layers_mut();
        let last = layers.len() - 1;
        layers[last].bias.copy_from_slice(&bias);
    }

    let mut adam = Adam::new(T::lit(cfg.learning_rate), T::lit(cfg.weight_decay), net.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(net.config().seed ^ 0x5eed_0f_ba7c4e5);
    let n = train_set.labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory { best_val_loss: f64::INFINITY, ..TrainHistory::default() };
    let mut best: Vec<Dense<T>> = net.layers().to_vec();
    let mut since_best = 0usize;
    let mut xb = Vec::with_capacity(cfg.batch_size * dim);
    let mut yb = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(&x_train[i * dim..(i + 1) * dim]);
                yb.push(train_set.labels[i]);
            }
            let (heads, cache) = net.forward_cached(&xb)?;
            let (losses, mut grads) = objective.evaluate(&yb, &heads, sigma)?;
            let batch_loss = losses.iter().fold(T::zero(), |a, &l| a + l);
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_idx, loss: batch_loss.as_f64() });
            }
            epoch_loss += batch_loss.as_f64();
            let inv = T::one() / T::from_usize_lossy(chunk.len());
            grads.d_p.iter_mut().chain(grads.d_mu.iter_mut()).for_each(|g| *g = *g * inv);
            let g = net.backward(&cache, &grads)?;
            adam.step(&mut net, &g);
        }
        let val_loss = mean_loss(&net, &x_val, val_set.labels, objective, sigma)?.as_f64();
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: usize::MAX, loss: val_loss });
        }
        let improved = val_loss < history.best_val_loss;
        history.epochs.push(EpochRecord { epoch, train_loss: epoch_loss / n as f64, val_loss, improved });
        if improved {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = net.layers().to_vec();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let best_net = Mlp::from_layers(net.config().clone(), best)?;
    let objective_echo = serde_json::to_value(objective).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Checkpoint::from_model(&best_net, norm, cfg.clone(), objective_echo, history))
}

/// Sequential estimation with two networks: an occurrence model trained on
/// `dry + wet` over all samples, and an intensity model trained on
/// `lognorm (+ corr)` over the wet samples only.
pub fn two_model_train<T: Real>(
    p_net: Mlp<T>,
    mu_net: Mlp<T>,
    train_set: TrainData<'_, T>,
    val_set: TrainData<'_, T>,
    cfg: &TrainConfig,
    prior: MarginalPrior<T>,
    imdl: bool,
) -> Result<(Checkpoint, Checkpoint)> {
    if p_net.config().heads != Heads::POnly || mu_net.config().heads != Heads::MuOnly {
        return Err(Error::Config("two-model training needs a p_only and a mu_only network".into()));
    }
    let occurrence = Objective::Hurdle { prior, imdl, part: HurdlePart::Occurrence };
    let p_ckpt = train(p_net, train_set, val_set, cfg, &occurrence)?;

    let dim = mu_net.config().input_dim;
    let (wx, wy) = wet_subset(train_set, dim);
    let (vx, vy) = wet_subset(val_set, dim);
    let intensity = Objective::Hurdle { prior, imdl, part: HurdlePart::Intensity };
    let mu_ckpt = train(mu_net, TrainData::new(&wx, &wy), TrainData::new(&vx, &vy), cfg, &intensity)?;
    Ok((p_ckpt, mu_ckpt))
}

/// Rows with a strictly positive label.
pub(crate) fn wet_subset<T: Real>(data: TrainData<'_, T>, dim: usize) -> (Vec<T>, Vec<T>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &y) in data.labels.iter().enumerate() {
        if y > T::zero() {
            xs.extend_from_slice(&data.features[i * dim..(i + 1) * dim]);
            ys.push(y);
        }
    }
    (xs, ys)
}
