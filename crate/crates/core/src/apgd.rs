//! Adaptive l1 projected gradient ascent (l1-APGD).
//!
//! Each step moves `eta` along the unit-l1 sign direction of the `⌈k d⌉`
//! largest gradient entries and projects back onto `S`. Every
//! `m = ⌈0.04 N⌉` iterations the sparsity `k` is reset from the support of the
//! best point found so far (`||x_best - x||_0 / (1.5 d)`), and the step size is
//! either decayed by 1.5 (down to `eps / 10`) when `k` is stable, or reset to
//! `eps` with a restart from the best point when `k` dropped by more than 5%.
//!
//! The multi-radius variant spends 30% / 30% / 40% of the budget on radii
//! `3 eps`, `2 eps`, `eps`, warm-starting each phase from the projection of the
//! previous phase's best point.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{
    l0_distance, l1_distance, project_box_l1, sparse_sign_step, Projection, ThreatModel,
};
use crate::models::{is_correct, LogitsOracle, Loss};
use crate::oracles::sample_feasible;

/// Result of evaluating an attack objective at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
    /// Whether the point already achieves the attack's goal.
    pub success: bool,
}

/// Something an attack maximizes. One `evaluate` call is one forward pass
/// (plus one backward pass when `with_grad` is set).
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64], with_grad: bool) -> Result<Evaluation>;
}

/// A classifier loss at a fixed label; success means misclassification.
pub struct ClassifierObjective<'a, M: ?Sized> {
    pub model: &'a M,
    pub label: usize,
    pub loss: Loss,
}

impl<'a, M: LogitsOracle + ?Sized> ClassifierObjective<'a, M> {
    pub fn new(model: &'a M, label: usize, loss: Loss) -> Self {
        Self { model, label, loss }
    }
}

impl<M: LogitsOracle + ?Sized> Objective for ClassifierObjective<'_, M> {
    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn evaluate(&self, x: &[f64], with_grad: bool) -> Result<Evaluation> {
        check_len(self.dim(), x.len())?;
        let logits = self.model.logits(x);
        let success = !is_correct(&logits, self.label);
        if with_grad {
            let (value, upstream) = self.loss.eval_logits(&logits, self.label)?;
            let grad = self.model.grad_input(x, &upstream);
            Ok(Evaluation {
                value,
                grad: Some(grad),
                success,
            })
        } else {
            Ok(Evaluation {
                value: self.loss.value(&logits, self.label)?,
                grad: None,
                success,
            })
        }
    }
}

/// One radius phase of the multi-radius schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub fraction: f64,
    pub radius_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApgdConfig {
    pub n_iter: usize,
    /// Initial fraction of coordinates per update.
    pub k0: f64,
    pub checkpoint_fraction: f64,
    pub sparsity_divisor: f64,
    pub step_decay: f64,
    /// Minimum ratio `k_new / k_old` that counts as stable sparsity.
    pub rho: f64,
    pub eta_min_divisor: f64,
    /// Empty for single-radius runs.
    pub phases: Vec<Phase>,
    pub projection: Projection,
    /// Stop as soon as an iterate (in the final radius) succeeds.
    pub early_stop: bool,
}

impl ApgdConfig {
    pub fn single(n_iter: usize) -> Self {
        Self {
            n_iter,
            k0: 0.2,
            checkpoint_fraction: 0.04,
            sparsity_divisor: 1.5,
            step_decay: 1.5,
            rho: 0.95,
            eta_min_divisor: 10.0,
            phases: Vec::new(),
            projection: Projection::Exact,
            early_stop: false,
        }
    }

    pub fn multi(n_iter: usize) -> Self {
        Self {
            phases: vec![
                Phase {
                    fraction: 0.3,
                    radius_multiplier: 3.0,
                },
                Phase {
                    fraction: 0.3,
                    radius_multiplier: 2.0,
                },
                Phase {
                    fraction: 0.4,
                    radius_multiplier: 1.0,
                },
            ],
            ..Self::single(n_iter)
        }
    }

    /// Ten-step single-radius inner maximizer with sparse initial updates.
    pub fn adversarial_training() -> Self {
        Self {
            k0: 0.05,
            ..Self::single(10)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Parameter(msg.to_string()));
        if self.n_iter < 1 {
            return bad("n_iter must be at least 1");
        }
        if !(self.k0 > 0.0 && self.k0 <= 1.0) {
            return bad("k0 must lie in (0, 1]");
        }
        if !(self.checkpoint_fraction > 0.0 && self.checkpoint_fraction <= 1.0) {
            return bad("checkpoint fraction must lie in (0, 1]");
        }
        if !(self.sparsity_divisor > 0.0 && self.step_decay >= 1.0 && self.eta_min_divisor >= 1.0) {
            return bad("sparsity divisor > 0, step decay >= 1 and eta_min divisor >= 1 required");
        }
        if !self.phases.is_empty() {
            let total: f64 = self.phases.iter().map(|p| p.fraction).sum();
            if (total - 1.0).abs() > 1e-9
                || self
                    .phases
                    .iter()
                    .any(|p| !(p.fraction > 0.0 && p.radius_multiplier > 0.0))
            {
                return bad("phase fractions must be positive and sum to 1");
            }
        }
        Ok(())
    }

    /// Iteration counts per phase: `⌊f N⌋` for all but the last, which takes the remainder.
    pub fn phase_lengths(&self) -> Vec<usize> {
        let n = self.phases.len();
        let mut out: Vec<usize> = self.phases[..n.saturating_sub(1)]
            .iter()
            .map(|p| (p.fraction * self.n_iter as f64).floor() as usize)
            .collect();
        let used: usize = out.iter().sum();
        if n > 0 {
            out.push(self.n_iter - used);
        }
        out
    }
}

/// `m = ⌈fraction · n_iter⌉` and the multiples of `m` in `1..=n_iter`.
pub fn checkpoints(n_iter: usize, fraction: f64) -> Vec<usize> {
    let m = checkpoint_interval(n_iter, fraction);
    (1..=n_iter / m).map(|j| j * m).collect()
}

fn checkpoint_interval(n_iter: usize, fraction: f64) -> usize {
    ((fraction * n_iter as f64).ceil() as usize).max(1)
}

/// `||x_best - x||_0 / (divisor · d)`, floored at `1 / d`.
pub fn sparsity_update(x_best: &[f64], x: &[f64], divisor: f64) -> f64 {
    let d = x.len() as f64;
    let k = l0_distance(x_best, x) as f64 / (divisor * d);
    if k * d < 1.0 {
        1.0 / d
    } else {
        k
    }
}

/// New step size, and whether to restart from the best point.
pub fn step_size_update(
    eta_prev: f64,
    k_new: f64,
    k_old: f64,
    eps: f64,
    cfg: &ApgdConfig,
) -> (f64, bool) {
    if k_new / k_old >= cfg.rho {
        (
            (eta_prev / cfg.step_decay).max(eps / cfg.eta_min_divisor),
            false,
        )
    } else {
        (eps, true)
    }
}

/// Number of coordinates for a fractional sparsity `k`.
pub fn support_size(k: f64, d: usize) -> usize {
    ((k * d as f64 - 1e-9).ceil() as usize).clamp(1, d)
}

/// Mutable state of a single-radius run.
#[derive(Debug, Clone, PartialEq)]
pub struct ApgdState {
    pub x_cur: Vec<f64>,
    pub x_best: Vec<f64>,
    pub loss_best: f64,
    pub eta: f64,
    /// Current sparsity as a fraction of `d`.
    pub k: f64,
    pub iter: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// Highest-loss feasible point found (lowest margin for Square Attack).
    pub x_adv: Vec<f64>,
    pub loss_best: f64,
    /// Some visited feasible point achieved the goal (misclassification).
    pub success: bool,
    /// Highest-loss successful point, if any.
    pub adversarial: Option<Vec<f64>>,
    /// Update steps (or queries, for Square Attack) performed.
    pub iterations_used: usize,
    /// `||x_adv - x||_1`.
    pub l1_norm: f64,
    /// Running best loss after each iteration; NaN while iterates lie outside
    /// the final threat set.
    pub loss_trace: Vec<f64>,
    /// Whether success had been reached by each iteration.
    pub success_trace: Vec<bool>,
    pub gradient_evals: usize,
    pub forward_evals: usize,
    /// Steps where the gradient vanished on the selected support and a random
    /// direction was taken instead.
    pub zero_grad_steps: usize,
}

impl AttackResult {
    /// Result of not attacking at all: the clean point itself.
    pub fn identity(x: &[f64], eval: &Evaluation) -> Self {
        Self {
            x_adv: x.to_vec(),
            loss_best: eval.value,
            success: eval.success,
            adversarial: eval.success.then(|| x.to_vec()),
            iterations_used: 0,
            l1_norm: 0.0,
            loss_trace: Vec::new(),
            success_trace: Vec::new(),
            gradient_evals: 0,
            forward_evals: 1,
            zero_grad_steps: 0,
        }
    }

    /// The point to report as the attack's output: a successful one if found.
    pub fn output_point(&self) -> &[f64] {
        self.adversarial.as_deref().unwrap_or(&self.x_adv)
    }
}

fn random_sign_direction<R: Rng + ?Sized>(d: usize, t: usize, rng: &mut R) -> Vec<f64> {
    let mut dir = vec![0.0; d];
    for i in sample_indices(rng, d, t).iter() {
        dir[i] = if rng.random::<bool>() { 1.0 } else { -1.0 } / t as f64;
    }
    dir
}

/// Single-radius l1-APGD from a feasible starting point.
pub fn apgd_single<O, R>(
    obj: &O,
    tm: &ThreatModel,
    cfg: &ApgdConfig,
    x_init: &[f64],
    rng: &mut R,
) -> Result<AttackResult>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let d = tm.dim();
    check_len(d, obj.dim())?;
    check_len(d, x_init.len())?;
    if !tm.contains(x_init) {
        return Err(Error::Parameter(
            "starting point lies outside the threat set".into(),
        ));
    }
    let x = tm.anchor();
    let eps = tm.eps();
    let m = checkpoint_interval(cfg.n_iter, cfg.checkpoint_fraction);

    let first = obj.evaluate(x_init, true)?;
    let mut grad = first.grad.expect("gradient requested");
    let mut grad_best = grad.clone();
    let mut state = ApgdState {
        x_cur: x_init.to_vec(),
        x_best: x_init.to_vec(),
        loss_best: first.value,
        eta: eps,
        k: cfg.k0,
        iter: 0,
        loss_trace: Vec::with_capacity(cfg.n_iter),
    };
    let mut success = first.success;
    let mut adversarial = success.then(|| (first.value, x_init.to_vec()));
    let mut success_trace = Vec::with_capacity(cfg.n_iter);
    let mut gradient_evals = 1;
    let mut forward_evals = 1;
    let mut zero_grad_steps = 0;

    if !(success && cfg.early_stop) {
        for i in 0..cfg.n_iter {
            let t = support_size(state.k, d);
            let step = sparse_sign_step(&grad, t)?;
            let direction = if step.support == 0 {
                zero_grad_steps += 1;
                random_sign_direction(d, t, rng)
            } else {
                step.direction
            };
            let u: Vec<f64> = state
                .x_cur
                .iter()
                .zip(&direction)
                .map(|(a, s)| a + state.eta * s)
                .collect();
            let next = cfg.projection.apply(&u, tm)?;
            if !tm.contains(&next) {
                return Err(Error::Invariant(format!(
                    "iterate {} left the threat set (l1 = {})",
                    i + 1,
                    l1_distance(&next, x)
                )));
            }

            let last = i + 1 == cfg.n_iter;
            let eval = obj.evaluate(&next, !last)?;
            forward_evals += 1;
            if !last {
                gradient_evals += 1;
            }
            state.x_cur = next;
            state.iter = i + 1;
            if let Some(g) = eval.grad {
                grad = g;
            }
            if eval.value > state.loss_best {
                state.loss_best = eval.value;
                state.x_best.clone_from(&state.x_cur);
                grad_best.clone_from(&grad);
            }
            if eval.success {
                success = true;
                if adversarial.as_ref().is_none_or(|(v, _)| eval.value > *v) {
                    adversarial = Some((eval.value, state.x_cur.clone()));
                }
            }
            state.loss_trace.push(state.loss_best);
            success_trace.push(success);
            if success && cfg.early_stop {
                break;
            }

            // Checkpoint reached by this step: adapt sparsity and step size for the next one.
            if state.iter % m == 0 && !last {
                let k_new = sparsity_update(&state.x_best, x, cfg.sparsity_divisor);
                let (eta, restart) = step_size_update(state.eta, k_new, state.k, eps, cfg);
                state.k = k_new;
                state.eta = eta;
                if restart {
                    state.x_cur.clone_from(&state.x_best);
                    grad.clone_from(&grad_best);
                }
            }
        }
    }

    Ok(AttackResult {
        l1_norm: l1_distance(&state.x_best, x),
        x_adv: state.x_best,
        loss_best: state.loss_best,
        success,
        adversarial: adversarial.map(|(_, p)| p),
        iterations_used: state.iter,
        loss_trace: state.loss_trace,
        success_trace,
        gradient_evals,
        forward_evals,
        zero_grad_steps,
    })
}

/// Multi-radius l1-APGD. Only final-phase (radius `eps`) iterates count
/// towards the returned point, loss and success.
pub fn apgd_multi<O, R>(
    obj: &O,
    x: &[f64],
    eps: f64,
    cfg: &ApgdConfig,
    x_init: &[f64],
    rng: &mut R,
) -> Result<AttackResult>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if cfg.phases.is_empty() {
        return Err(Error::Parameter(
            "multi-radius APGD needs at least one phase".into(),
        ));
    }
    let lengths = cfg.phase_lengths();
    let last = lengths.len() - 1;
    let mut start = x_init.to_vec();
    let mut loss_trace = Vec::with_capacity(cfg.n_iter);
    let mut success_trace = Vec::with_capacity(cfg.n_iter);
    let (mut gradient_evals, mut forward_evals, mut zero_grad_steps, mut iterations) = (0, 0, 0, 0);

    for (p, (phase, &len)) in cfg.phases.iter().zip(&lengths).enumerate() {
        if len == 0 {
            continue;
        }
        let tm = ThreatModel::new(x.to_vec(), phase.radius_multiplier * eps)?;
        let init = project_box_l1(&start, &tm)?;
        let sub = ApgdConfig {
            n_iter: len,
            phases: Vec::new(),
            early_stop: cfg.early_stop && p == last,
            ..cfg.clone()
        };
        let r = apgd_single(obj, &tm, &sub, &init, rng)?;
        gradient_evals += r.gradient_evals;
        forward_evals += r.forward_evals;
        zero_grad_steps += r.zero_grad_steps;
        iterations += r.iterations_used;
        if p == last {
            loss_trace.extend_from_slice(&r.loss_trace);
            success_trace.extend_from_slice(&r.success_trace);
            return Ok(AttackResult {
                loss_trace,
                success_trace,
                gradient_evals,
                forward_evals,
                zero_grad_steps,
                iterations_used: iterations,
                ..r
            });
        }
        loss_trace.extend(std::iter::repeat_n(f64::NAN, r.iterations_used));
        success_trace.extend(std::iter::repeat_n(false, r.iterations_used));
        start = r.x_adv;
    }
    Err(Error::Parameter(
        "final phase received no iterations".into(),
    ))
}

/// Single- or multi-radius run depending on `cfg.phases`.
pub fn apgd_run<O, R>(
    obj: &O,
    x: &[f64],
    eps: f64,
    cfg: &ApgdConfig,
    x_init: &[f64],
    rng: &mut R,
) -> Result<AttackResult>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    if cfg.phases.is_empty() {
        let tm = ThreatModel::new(x.to_vec(), eps)?;
        apgd_single(obj, &tm, cfg, x_init, rng)
    } else {
        apgd_multi(obj, x, eps, cfg, x_init, rng)
    }
}

/// Best of `n_restarts` runs; the first starts at `x`, later ones at random
/// feasible points. With `cfg.early_stop`, a success ends the sequence.
pub fn apgd_restarts<O, R>(
    obj: &O,
    x: &[f64],
    eps: f64,
    cfg: &ApgdConfig,
    n_restarts: usize,
    rng: &mut R,
) -> Result<AttackResult>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    if n_restarts == 0 {
        return Err(Error::Parameter("need at least one restart".into()));
    }
    let tm = ThreatModel::new(x.to_vec(), eps)?;
    let mut best: Option<AttackResult> = None;
    let (mut gradient_evals, mut forward_evals, mut zero_grad_steps, mut iterations) = (0, 0, 0, 0);
    let mut adversarial: Option<(f64, Vec<f64>)> = None;

    for r in 0..n_restarts {
        let init = if r == 0 {
            x.to_vec()
        } else {
            sample_feasible(&tm, rng)
        };
        let run = apgd_run(obj, x, eps, cfg, &init, rng)?;
        gradient_evals += run.gradient_evals;
        forward_evals += run.forward_evals;
        zero_grad_steps += run.zero_grad_steps;
        iterations += run.iterations_used;
        if let Some(p) = &run.adversarial {
            if adversarial.is_none() {
                adversarial = Some((run.loss_best, p.clone()));
            }
        }
        let stop = run.success && cfg.early_stop;
        if best.as_ref().is_none_or(|b| run.loss_best > b.loss_best) {
            best = Some(run);
        }
        if stop {
            break;
        }
    }

    let best = best.expect("at least one restart ran");
    Ok(AttackResult {
        success: adversarial.is_some(),
        adversarial: adversarial.map(|(_, p)| p),
        gradient_evals,
        forward_evals,
        zero_grad_steps,
        iterations_used: iterations,
        ..best
    })
}
