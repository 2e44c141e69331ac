//! Classifiers with analytic input gradients, the attack losses, and plain
//! minibatch SGD.
//!
//! Attacks only see a model through [`LogitsOracle`]: logits, and the
//! transpose-Jacobian product with respect to the input. Training
//! additionally needs [`Trainable`], which exposes the parameters as one flat
//! vector.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{check_len, Error, Result};

/// Denominator floor for the targeted DLR loss.
pub const DLR_DENOM_FLOOR: f64 = 1e-12;

pub trait LogitsOracle {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn logits(&self, x: &[f64]) -> Vec<f64>;
    /// `J(x)^T upstream`, where `J` is the Jacobian of the logits.
    fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Vec<f64>;
}

pub trait Trainable: LogitsOracle + Clone {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    /// Gradient of `<upstream, logits(x)>` with respect to the parameters,
    /// in the order of [`Trainable::params`].
    fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Vec<f64>;
}

fn check_label(logits: &[f64], y: usize) -> Result<()> {
    if y >= logits.len() {
        Err(Error::Parameter(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )))
    } else {
        Ok(())
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// `-log softmax(logits)_y`.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    check_label(logits, y)?;
    // ln sum_j exp(z_j - z_y), with the j = y term split off so a confident
    // correct prediction keeps its relative precision.
    let zy = logits[y];
    let rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v - zy)
        .collect();
    let m = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m <= 0.0 {
        Ok(rest.iter().map(|v| v.exp()).sum::<f64>().ln_1p())
    } else {
        Ok(m + ((-m).exp() + rest.iter().map(|v| (v - m).exp()).sum::<f64>()).ln())
    }
}

/// Index of the largest logit other than `y` (lowest index on ties).
fn runner_up(logits: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in logits.iter().enumerate() {
        if j != y && (best == usize::MAX || v > logits[best]) {
            best = j;
        }
    }
    best
}

/// `z_y - max_{j != y} z_j`. Negative iff some other class strictly wins.
pub fn margin_loss(logits: &[f64], y: usize) -> f64 {
    logits[y] - logits[runner_up(logits, y)]
}

/// Correct means the true class strictly beats every other class; a shared
/// maximum counts as misclassified.
pub fn is_correct(logits: &[f64], y: usize) -> bool {
    margin_loss(logits, y) > 0.0
}

/// Class indices sorted by logit, largest first (ties by index).
pub fn ranked_classes(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

/// Targeted difference-of-logits-ratio loss
/// `-(z_y - z_t) / (z_π1 - (z_π3 + z_π4) / 2)` with `π` sorting the logits
/// in decreasing order. The denominator is floored at [`DLR_DENOM_FLOOR`].
pub fn dlr_targeted(logits: &[f64], y: usize, t: usize) -> Result<f64> {
    Ok(dlr_targeted_with_grad(logits, y, t)?.0)
}

fn dlr_targeted_with_grad(z: &[f64], y: usize, t: usize) -> Result<(f64, Vec<f64>)> {
    if z.len() < 4 {
        return Err(Error::Unsupported(format!(
            "targeted DLR needs >= 4 classes, got {}",
            z.len()
        )));
    }
    check_label(z, y)?;
    check_label(z, t)?;
    if y == t {
        return Err(Error::Parameter(format!(
            "target class equals true class {y}"
        )));
    }
    let pi = ranked_classes(z);
    let raw = z[pi[0]] - 0.5 * (z[pi[2]] + z[pi[3]]);
    let denom = raw.max(DLR_DENOM_FLOOR);
    let num = z[y] - z[t];
    let value = -num / denom;

    let mut g = vec![0.0; z.len()];
    g[y] -= 1.0 / denom;
    g[t] += 1.0 / denom;
    if raw > DLR_DENOM_FLOOR {
        let c = num / (denom * denom);
        g[pi[0]] += c;
        g[pi[2]] -= 0.5 * c;
        g[pi[3]] -= 0.5 * c;
    }
    Ok((value, g))
}

/// Objective an attack maximizes (or, for the margin, the score Square
/// Attack minimizes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Loss {
    CrossEntropy,
    TargetedDlr { target: usize },
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    DlrTargeted,
    Margin,
}

impl Loss {
    pub fn from_kind(kind: LossKind, target: Option<usize>) -> Result<Self> {
        match (kind, target) {
            (LossKind::CrossEntropy, _) => Ok(Loss::CrossEntropy),
            (LossKind::Margin, _) => Ok(Loss::Margin),
            (LossKind::DlrTargeted, Some(target)) => Ok(Loss::TargetedDlr { target }),
            (LossKind::DlrTargeted, None) => Err(Error::Parameter(
                "targeted DLR requires a target class".into(),
            )),
        }
    }

    /// Loss value and its gradient with respect to the logits.
    pub fn eval_logits(&self, logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        match *self {
            Loss::CrossEntropy => {
                check_label(logits, y)?;
                let mut g = softmax(logits);
                g[y] -= 1.0;
                Ok((cross_entropy(logits, y)?, g))
            }
            Loss::TargetedDlr { target } => dlr_targeted_with_grad(logits, y, target),
            Loss::Margin => {
                check_label(logits, y)?;
                let j = runner_up(logits, y);
                let mut g = vec![0.0; logits.len()];
                g[y] = 1.0;
                g[j] = -1.0;
                Ok((logits[y] - logits[j], g))
            }
        }
    }

    pub fn value(&self, logits: &[f64], y: usize) -> Result<f64> {
        match *self {
            Loss::CrossEntropy => cross_entropy(logits, y),
            Loss::TargetedDlr { target } => dlr_targeted(logits, y, target),
            Loss::Margin => {
                check_label(logits, y)?;
                Ok(margin_loss(logits, y))
            }
        }
    }
}

/// Loss at `x` and its exact gradient with respect to the input.
pub fn loss_and_grad<M: LogitsOracle + ?Sized>(
    model: &M,
    x: &[f64],
    y: usize,
    loss: Loss,
) -> Result<(f64, Vec<f64>)> {
    check_len(model.input_dim(), x.len())?;
    let logits = model.logits(x);
    let (value, upstream) = loss.eval_logits(&logits, y)?;
    Ok((value, model.grad_input(x, &upstream)))
}

/// Central finite differences of the loss with step `h`; `2d` forward passes.
pub fn finite_diff_grad<M: LogitsOracle + ?Sized>(
    model: &M,
    x: &[f64],
    y: usize,
    loss: Loss,
    h: f64,
) -> Result<Vec<f64>> {
    check_len(model.input_dim(), x.len())?;
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = loss.value(&model.logits(&probe), y)?;
        probe[i] = x[i] - h;
        let down = loss.value(&model.logits(&probe), y)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Multinomial logistic regression: `logits = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    num_classes: usize,
    input_dim: usize,
    /// Row-major `num_classes x input_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearSoftmaxModel {
    pub fn new(
        num_classes: usize,
        input_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if num_classes < 2 || input_dim == 0 {
            return Err(Error::Parameter(
                "need >= 2 classes and a nonempty input".into(),
            ));
        }
        check_len(num_classes * input_dim, weights.len())?;
        check_len(num_classes, bias.len())?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite parameter".into()));
        }
        Ok(Self {
            num_classes,
            input_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(num_classes: usize, input_dim: usize) -> Result<Self> {
        Self::new(
            num_classes,
            input_dim,
            vec![0.0; num_classes * input_dim],
            vec![0.0; num_classes],
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl LogitsOracle for LinearSoftmaxModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn grad_input(&self, _x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.input_dim];
        for (row, &u) in self.weights.chunks_exact(self.input_dim).zip(upstream) {
            if u != 0.0 {
                g.iter_mut().zip(row).for_each(|(gi, w)| *gi += u * w);
            }
        }
        g
    }
}

impl Trainable for LinearSoftmaxModel {
    fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len(self.weights.len() + self.bias.len(), params.len())?;
        let (w, b) = params.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
        Ok(())
    }

    fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.weights.len() + self.bias.len());
        for &u in upstream {
            g.extend(x.iter().map(|v| u * v));
        }
        g.extend_from_slice(upstream);
        g
    }
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, h: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn backward_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, &gi) in self.weights.chunks_exact(self.inputs).zip(g) {
            out.iter_mut().zip(row).for_each(|(o, w)| *o += gi * w);
        }
        out
    }
}

/// Fully connected network with softplus hidden activations and linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

impl MlpModel {
    /// Glorot-uniform initialization. `sizes` is `[input, hidden..., classes]`
    /// with at least one hidden layer.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 3 || sizes.contains(&0) || *sizes.last().unwrap() < 2 {
            return Err(Error::Parameter(format!(
                "MLP needs [input, hidden.., classes>=2] with one hidden layer, got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let a = (6.0 / (inputs + outputs) as f64).sqrt();
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs)
                        .map(|_| rng.random_range(-a..a))
                        .collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Layer widths `[input, hidden..., classes]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    /// Hidden pre-activations and post-activations along with the logits.
    fn forward_cached(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut post = Vec::with_capacity(self.layers.len());
        post.push(x.to_vec());
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let a = layer.forward(post.last().unwrap());
            post.push(a.iter().map(|&v| softplus(v)).collect());
            pre.push(a);
        }
        let logits = self.layers[last].forward(post.last().unwrap());
        (pre, post, logits)
    }

    /// Gradients w.r.t. each hidden pre-activation and the input, back from `upstream`.
    fn backward(&self, pre: &[Vec<f64>], upstream: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let last = self.layers.len() - 1;
        let mut deltas = vec![Vec::new(); last];
        let mut g = self.layers[last].backward_input(upstream);
        for l in (0..last).rev() {
            let delta: Vec<f64> = g
                .iter()
                .zip(&pre[l])
                .map(|(gi, &a)| gi * sigmoid(a))
                .collect();
            g = self.layers[l].backward_input(&delta);
            deltas[l] = delta;
        }
        (deltas, g)
    }
}

impl LogitsOracle for MlpModel {
    fn num_classes(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for layer in &self.layers[..last] {
            h = layer.forward(&h).into_iter().map(softplus).collect();
        }
        self.layers[last].forward(&h)
    }

    fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let (pre, _, _) = self.forward_cached(x);
        self.backward(&pre, upstream).1
    }
}

impl Trainable for MlpModel {
    fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .copied()
            .collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        check_len(total, params.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let (pre, post, _) = self.forward_cached(x);
        let (deltas, _) = self.backward(&pre, upstream);
        let mut g = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let delta: &[f64] = if l < deltas.len() {
                &deltas[l]
            } else {
                upstream
            };
            for &dv in delta {
                g.extend(post[l].iter().map(|h| dv * h));
            }
            g.extend_from_slice(delta);
            debug_assert_eq!(layer.outputs, delta.len());
        }
        g
    }
}

/// Header describing a model's architecture, as stored in model files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Architecture {
    Linear {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp {
        sizes: Vec<usize>,
    },
}

/// Either of the built-in model types.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearSoftmaxModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Linear(m) => Architecture::Linear {
                input_dim: m.input_dim,
                num_classes: m.num_classes,
            },
            Model::Mlp(m) => Architecture::Mlp { sizes: m.sizes() },
        }
    }

    /// A model of the given architecture with parameters taken from `params`.
    pub fn from_parts(arch: &Architecture, params: &[f64]) -> Result<Self> {
        let mut model = match arch {
            Architecture::Linear {
                input_dim,
                num_classes,
            } => Model::Linear(LinearSoftmaxModel::zeros(*num_classes, *input_dim)?),
            Architecture::Mlp { sizes } => {
                Model::Mlp(MlpModel::new(sizes, &mut crate::rng::seeded(0))?)
            }
        };
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite parameter".into()));
        }
        model.set_params(params)?;
        Ok(model)
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Model::Linear($m) => $e,
            Model::Mlp($m) => $e,
        }
    };
}

impl LogitsOracle for Model {
    fn num_classes(&self) -> usize {
        delegate!(self, m => m.num_classes())
    }
    fn input_dim(&self) -> usize {
        delegate!(self, m => m.input_dim())
    }
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        delegate!(self, m => m.logits(x))
    }
    fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        delegate!(self, m => m.grad_input(x, upstream))
    }
}

impl Trainable for Model {
    fn params(&self) -> Vec<f64> {
        delegate!(self, m => m.params())
    }
    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        delegate!(self, m => m.set_params(params))
    }
    fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        delegate!(self, m => m.grad_params(x, upstream))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

/// One pass of minibatch SGD on cross-entropy, where each example may first
/// be replaced by `perturb(model, example_index, x, y)`.
///
/// The perturbation runs in parallel within a batch; it must be a pure
/// function of its arguments for results to be reproducible.
pub(crate) fn sgd_epoch<M, R, F>(
    model: &mut M,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut R,
    perturb: F,
) -> Result<()>
where
    M: Trainable + Sync,
    R: Rng + ?Sized,
    F: Fn(&M, usize, &[f64], usize) -> Result<Vec<f64>> + Sync,
{
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    for batch in order.chunks(cfg.batch_size) {
        let snapshot = &*model;
        let grads: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|&i| {
                let y = data.labels[i];
                let x = perturb(snapshot, i, &data.inputs[i], y)?;
                let (_, upstream) = Loss::CrossEntropy.eval_logits(&snapshot.logits(&x), y)?;
                Ok(snapshot.grad_params(&x, &upstream))
            })
            .collect::<Result<_>>()?;
        let mut params = model.params();
        let scale = cfg.lr / batch.len() as f64;
        for g in &grads {
            params
                .iter_mut()
                .zip(g)
                .for_each(|(p, gi)| *p -= scale * gi);
        }
        model.set_params(&params)?;
    }
    Ok(())
}

/// Minibatch SGD on clean cross-entropy.
pub fn train_plain<M, R>(
    model: &mut M,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<()>
where
    M: Trainable + Sync,
    R: Rng + ?Sized,
{
    check_len(model.input_dim(), data.dim())?;
    for _ in 0..cfg.epochs {
        sgd_epoch(model, data, cfg, rng, |_, _, x, _| Ok(x.to_vec()))?;
    }
    Ok(())
}

/// Fraction of examples classified correctly (shared maxima count as wrong).
pub fn accuracy<M: LogitsOracle + Sync + ?Sized>(model: &M, data: &LabeledDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .inputs
        .par_iter()
        .zip(&data.labels)
        .filter(|(x, &y)| is_correct(&model.logits(x), y))
        .count();
    correct as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    fn random_linear(k: usize, d: usize, seed: u64) -> LinearSoftmaxModel {
        let mut r = rng::seeded(seed);
        let w = (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        LinearSoftmaxModel::new(k, d, w, b).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.3; 5], 2).unwrap() - 5f64.ln()).abs() < 1e-14);
        let v = cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((v / (-20f64).exp().ln_1p() - 1.0).abs() < 1e-14, "{v}");
        assert!(
            (cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap() - 0.407_605_964_444_380_3).abs() < 1e-12
        );
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn dlr_cases() {
        assert!((dlr_targeted(&[4.0, 3.0, 2.0, 1.0], 0, 1).unwrap() + 0.4).abs() < 1e-15);
        assert_eq!(dlr_targeted(&[4.0, 2.0, 2.0, 1.0, 0.5], 1, 2).unwrap(), 0.0);
        let a = dlr_targeted(&[1.0, 5.0, 2.0, -3.0, 0.5], 0, 2).unwrap();
        let b = dlr_targeted(&[1.0, -3.0, 2.0, 0.5, 5.0], 0, 2).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(matches!(
            dlr_targeted(&[1.0, 2.0, 3.0], 0, 1),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            dlr_targeted(&[1.0, 2.0, 3.0, 4.0], 1, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn margin_cases() {
        assert_eq!(margin_loss(&[2.0, 1.0, 0.0], 0), 1.0);
        assert_eq!(margin_loss(&[0.0, 2.0, 1.0], 0), -2.0);
        assert_eq!(margin_loss(&[5.0, 5.0], 0), 0.0);
        assert!(!is_correct(&[5.0, 5.0], 0));
        assert!(is_correct(&[5.0, 4.0], 0));
    }

    #[test]
    fn loss_from_kind() {
        assert!(Loss::from_kind(LossKind::DlrTargeted, None).is_err());
        assert_eq!(
            Loss::from_kind(LossKind::DlrTargeted, Some(3)).unwrap(),
            Loss::TargetedDlr { target: 3 }
        );
    }

    #[test]
    fn linear_ce_gradient_closed_form() {
        let m = random_linear(3, 5, 1);
        let x = [0.1, 0.5, 0.9, 0.3, 0.7];
        let (_, g) = loss_and_grad(&m, &x, 1, Loss::CrossEntropy).unwrap();
        let mut up = softmax(&m.logits(&x));
        up[1] -= 1.0;
        let expect: Vec<f64> = (0..5)
            .map(|j| (0..3).map(|c| m.weights()[c * 5 + j] * up[c]).sum())
            .collect();
        assert!(rel_err(&g, &expect) < 1e-14);
    }

    #[test]
    fn constant_model_has_zero_gradient() {
        let m = LinearSoftmaxModel::new(4, 3, vec![0.0; 12], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for loss in [
            Loss::CrossEntropy,
            Loss::TargetedDlr { target: 2 },
            Loss::Margin,
        ] {
            let (_, g) = loss_and_grad(&m, &[0.2, 0.4, 0.6], 0, loss).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng::seeded(4);
        let m = MlpModel::new(&[6, 5, 4, 5], &mut r).unwrap();
        let x: Vec<f64> = (0..6).map(|_| r.random::<f64>()).collect();
        for loss in [
            Loss::CrossEntropy,
            Loss::TargetedDlr { target: 3 },
            Loss::Margin,
        ] {
            let (_, g) = loss_and_grad(&m, &x, 1, loss).unwrap();
            let fd = finite_diff_grad(&m, &x, 1, loss, 1e-5).unwrap();
            assert!(rel_err(&g, &fd) < 1e-6, "{loss:?}");
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut r = rng::seeded(8);
        let models = [
            Model::Mlp(MlpModel::new(&[4, 3, 3], &mut r).unwrap()),
            Model::Linear(random_linear(3, 4, 2)),
        ];
        let x = [0.2, 0.9, 0.4, 0.6];
        let up = [0.3, -1.0, 0.5];
        for m in models {
            let g = m.grad_params(&x, &up);
            let p0 = m.params();
            let mut fd = Vec::new();
            let mut probe = m.clone();
            for i in 0..p0.len() {
                let mut p = p0.clone();
                p[i] += 1e-6;
                probe.set_params(&p).unwrap();
                let hi: f64 = probe.logits(&x).iter().zip(&up).map(|(a, b)| a * b).sum();
                p[i] -= 2e-6;
                probe.set_params(&p).unwrap();
                let lo: f64 = probe.logits(&x).iter().zip(&up).map(|(a, b)| a * b).sum();
                fd.push((hi - lo) / 2e-6);
            }
            assert!(rel_err(&g, &fd) < 1e-7);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = crate::data::make_blobs(
            &crate::data::BlobSpec::new(8, 40, 2, 2.0),
            &mut rng::seeded(1),
        )
        .unwrap();
        let mut m = random_linear(2, 8, 3);
        let before = m.clone();
        train_plain(
            &mut m,
            &data,
            &TrainConfig {
                epochs: 2,
                lr: 0.0,
                batch_size: 8,
            },
            &mut rng::seeded(2),
        )
        .unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn mlp_rejects_bad_shapes() {
        assert!(MlpModel::new(&[4, 2], &mut rng::seeded(0)).is_err());
        assert!(MlpModel::new(&[4, 3, 1], &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn model_round_trips_through_parts() {
        let m = Model::Mlp(MlpModel::new(&[3, 4, 2], &mut rng::seeded(6)).unwrap());
        let back = Model::from_parts(&m.architecture(), &m.params()).unwrap();
        assert_eq!(m, back);
    }
}
