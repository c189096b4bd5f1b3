//! Mini-batch Adam training with global-norm clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use super::tensor::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A model whose parameters can be fitted to samples by gradient descent.
pub trait Trainable {
    type Sample;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Scalar mean loss over `samples`.
    fn batch_loss(&self, g: &mut Graph, p: &Bound, samples: &[&Self::Sample]) -> Result<Var>;

    fn mark_trained(&mut self);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a better validation loss.
    pub patience: Option<usize>,
    /// Stop once an epoch's training loss falls below this.
    pub target_loss: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
            patience: None,
            target_loss: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max`. Returns whether it did.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> bool {
    let norm = global_norm(grads);
    if norm <= max {
        return false;
    }
    let k = max / norm;
    for t in grads.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= k);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Sample-weighted mean loss with frozen parameters.
pub fn evaluate_loss<M: Trainable>(
    model: &M,
    samples: &[M::Sample],
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let refs: Vec<&M::Sample> = samples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let loss = model.batch_loss(&mut g, &p, chunk)?;
        total += scalar(&g, loss, "validation loss")? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn scalar(g: &Graph, v: Var, op: &'static str) -> Result<f64> {
    let x = g.value(v).data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(x)
}

/// Fits `model` and leaves it holding the weights of the best epoch, judged
/// on `val` when given and on the training loss otherwise.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[M::Sample],
    val_set: &[M::Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg, model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut clipped_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&M::Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let p = model.params().bind(&mut g);
            let loss = model.batch_loss(&mut g, &p, &batch)?;
            total += scalar(&g, loss, "training loss")? * batch.len() as f64;
            let grads = g.backward(loss);
            let mut grads = p.grads(&grads, model.params());
            if !grads.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite { op: "gradient" });
            }
            if let Some(max) = cfg.clip_norm {
                if clip_global_norm(&mut grads, max) {
                    clipped_steps += 1;
                }
            }
            adam.step(model.params_mut(), &grads);
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val_set, cfg.batch_size)?)
        };
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            clipped_steps,
        });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().map_or(true, |(_, b, _)| score < *b) {
            best = Some((epoch, score, model.params().clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
        if cfg.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }

    let (best_epoch, best_loss) = match best {
        Some((e, l, params)) => {
            model.params_mut().load_from(&params)?;
            (e, l)
        }
        None => (0, f64::NAN),
    };
    model.mark_trained();
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_loss,
    })
}
