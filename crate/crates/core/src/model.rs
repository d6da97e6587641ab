//! The local binary classifier and the per-client training loop.
//!
//! Two model families share one flat parameter layout:
//!
//! * `logistic`: `[w_0 .. w_{d-1}, b]`, so `dim = d + 1`.
//! * `mlp` (one tanh hidden layer of width `h`):
//!   `[W1 (h x d, row-major), b1 (h), w2 (h), b2]`, so `dim = d*h + h + h + 1`.
//!
//! Both emit a single logit `z`; the loss is the mean binary cross-entropy
//! `softplus(z) - y*z`, and predictions threshold `sigmoid(z)` at 0.5.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::params::WeightVector;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Width of the hidden layer. Ignored for `logistic`.
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
}

fn default_hidden() -> usize {
    16
}

impl ModelSpec {
    pub fn logistic(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: default_hidden(),
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be positive"));
        }
        Ok(())
    }

    /// Number of parameters, i.e. the run's weight-vector dimension.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden_dim);
        match self.kind {
            ModelKind::Logistic => d + 1,
            ModelKind::Mlp => d * h + h + h + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Whether a client's Adam moments survive from one round to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdamState {
    Persist,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_adam_state")]
    pub adam_state: AdamState,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_adam_state() -> AdamState {
    AdamState::Persist
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            adam_state: default_adam_state(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    /// A zero learning rate is accepted: it freezes training, which the
    /// null-training checks rely on.
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config("optimizer.lr", "must be finite and >= 0"));
        }
        if self.kind == OptimizerKind::Adam {
            for (name, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(name, "must lie in [0, 1)"));
                }
            }
            if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
                return Err(Error::config("optimizer.epsilon", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-client optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    },
}

impl OptimizerState {
    pub fn new(opt: &OptimizerSpec, dim: usize) -> Self {
        match opt.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                step: 0,
            },
        }
    }

    /// Called at the start of each round's local training.
    pub fn begin_round(&mut self, opt: &OptimizerSpec) {
        if opt.adam_state == AdamState::Reset {
            if let OptimizerState::Adam { m, .. } = self {
                *self = OptimizerState::new(opt, m.len());
            }
        }
    }

    fn apply(&mut self, opt: &OptimizerSpec, w: &mut [f64], grad: &[f64]) {
        match self {
            OptimizerState::Sgd => {
                for (wi, gi) in w.iter_mut().zip(grad) {
                    *wi -= opt.lr * gi;
                }
            }
            OptimizerState::Adam { m, v, step } => {
                *step += 1;
                let t = *step as i32;
                let bc1 = 1.0 - opt.beta1.powi(t);
                let bc2 = 1.0 - opt.beta2.powi(t);
                for i in 0..w.len() {
                    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
                    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.epsilon);
                }
            }
        }
    }
}

/// Initial global weights.
///
/// Weight entries are drawn from `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// where `fan_in` is the input width of the layer they feed; biases are zero.
pub fn init_weights(spec: &ModelSpec, rng: &mut Stream) -> Result<WeightVector> {
    spec.validate()?;
    let (d, h) = (spec.input_dim, spec.hidden_dim);
    let uniform = |fan_in: usize| {
        let a = 1.0 / (fan_in as f64).sqrt();
        Uniform::new_inclusive(-a, a).expect("bounds are finite and ordered")
    };
    let mut w = Vec::with_capacity(spec.param_count());
    match spec.kind {
        ModelKind::Logistic => {
            let u = uniform(d);
            w.extend((0..d).map(|_| u.sample(rng)));
            w.push(0.0);
        }
        ModelKind::Mlp => {
            let u1 = uniform(d);
            w.extend((0..d * h).map(|_| u1.sample(rng)));
            w.extend(std::iter::repeat_n(0.0, h));
            let u2 = uniform(h);
            w.extend((0..h).map(|_| u2.sample(rng)));
            w.push(0.0);
        }
    }
    WeightVector::new(w)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_input(spec: &ModelSpec, w: &WeightVector, x: &[f64]) -> Result<()> {
    w.ensure_dim(spec.param_count())?;
    if x.len() != spec.input_dim {
        return Err(Error::Shape {
            expected: spec.input_dim,
            found: x.len(),
        });
    }
    Ok(())
}

/// Forward pass to the logit. `hidden` receives the tanh activations for mlp.
fn logit(spec: &ModelSpec, w: &[f64], x: &[f64], hidden: &mut Vec<f64>) -> f64 {
    let d = spec.input_dim;
    match spec.kind {
        ModelKind::Logistic => dot(&w[..d], x) + w[d],
        ModelKind::Mlp => {
            let h = spec.hidden_dim;
            let (w1, rest) = w.split_at(d * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h);
            hidden.clear();
            hidden.extend((0..h).map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh()));
            dot(w2, hidden) + b2[0]
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean binary cross-entropy over `batch` and its gradient with respect to `w`.
pub fn loss_and_grad(
    spec: &ModelSpec,
    w: &WeightVector,
    batch: &[&Example],
) -> Result<(f64, WeightVector)> {
    if batch.is_empty() {
        return Err(Error::usage("loss_and_grad needs a nonempty batch"));
    }
    let (d, h) = (spec.input_dim, spec.hidden_dim);
    let params = w.as_slice();
    let mut grad = vec![0.0; spec.param_count()];
    let mut hidden = Vec::new();
    let mut loss = 0.0;
    let inv_n = 1.0 / batch.len() as f64;
    for ex in batch {
        check_input(spec, w, &ex.features)?;
        let z = logit(spec, params, &ex.features, &mut hidden);
        if !z.is_finite() {
            return Err(Error::Arithmetic("model produced a non-finite logit".into()));
        }
        let y = f64::from(ex.label);
        loss += softplus(z) - y * z;
        let dz = (sigmoid(z) - y) * inv_n;
        match spec.kind {
            ModelKind::Logistic => {
                for (g, x) in grad[..d].iter_mut().zip(&ex.features) {
                    *g += dz * x;
                }
                grad[d] += dz;
            }
            ModelKind::Mlp => {
                let w2 = &params[d * h + h..d * h + 2 * h];
                let (gw1, rest) = grad.split_at_mut(d * h);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h);
                for j in 0..h {
                    gw2[j] += dz * hidden[j];
                    let dpre = dz * w2[j] * (1.0 - hidden[j] * hidden[j]);
                    gb1[j] += dpre;
                    for (g, x) in gw1[j * d..(j + 1) * d].iter_mut().zip(&ex.features) {
                        *g += dpre * x;
                    }
                }
                gb2[0] += dz;
            }
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Arithmetic("loss is not finite".into()));
    }
    Ok((loss, WeightVector::from_computed(grad, "gradient")?))
}

/// `sigmoid(logit)` for one example.
pub fn predict_proba(spec: &ModelSpec, w: &WeightVector, features: &[f64]) -> Result<f64> {
    check_input(spec, w, features)?;
    let z = logit(spec, w.as_slice(), features, &mut Vec::new());
    if !z.is_finite() {
        return Err(Error::Arithmetic("model produced a non-finite logit".into()));
    }
    Ok(sigmoid(z))
}

/// Hard labels at threshold 0.5.
pub fn predict_labels(spec: &ModelSpec, w: &WeightVector, data: &[Example]) -> Result<Vec<u8>> {
    data.iter()
        .map(|ex| predict_proba(spec, w, &ex.features).map(|p| u8::from(p >= 0.5)))
        .collect()
}

/// Mean loss over a whole dataset.
pub fn dataset_loss(spec: &ModelSpec, w: &WeightVector, data: &[Example]) -> Result<f64> {
    let refs: Vec<&Example> = data.iter().collect();
    // The gradient is discarded; at these sizes the extra work is negligible.
    loss_and_grad(spec, w, &refs).map(|(l, _)| l)
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub weights: WeightVector,
    /// Mean of the per-batch losses seen during training.
    pub mean_batch_loss: f64,
}

/// Local-training settings shared by every client in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingPlan {
    pub spec: ModelSpec,
    pub opt: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Runs `plan.epochs` passes over `data` starting from `w_t`.
///
/// Each pass shuffles the example order with `rng`, cuts it into batches of
/// `plan.batch_size` (the last one may be short) and takes one optimizer
/// step per batch.
pub fn local_training(
    plan: &TrainingPlan,
    data: &[Example],
    w_t: &WeightVector,
    state: &mut OptimizerState,
    rng: &mut Stream,
) -> Result<LocalOutcome> {
    if data.is_empty() {
        return Err(Error::usage("local training needs a nonempty dataset"));
    }
    if plan.epochs == 0 || plan.batch_size == 0 {
        return Err(Error::usage("local epochs and batch size must be at least 1"));
    }
    w_t.ensure_dim(plan.spec.param_count())?;
    state.begin_round(&plan.opt);

    let mut w = w_t.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..plan.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = loss_and_grad(&plan.spec, &w, &batch)?;
            let mut next = w.into_vec();
            state.apply(&plan.opt, &mut next, grad.as_slice());
            w = WeightVector::from_computed(next, "optimizer step")?;
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(LocalOutcome {
        weights: w,
        mean_batch_loss: loss_sum / steps as f64,
    })
}
