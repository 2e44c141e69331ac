//! SLIDE, the three-stage l1 ensemble (APGD-CE, APGD-T-DLR, Square Attack),
//! robust-accuracy reports and pointwise worst-case merging.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apgd::{
    apgd_restarts, apgd_run, ApgdConfig, AttackResult, ClassifierObjective, Objective,
};
use crate::data::{ImageShape, LabeledDataset};
use crate::error::{check_len, Error, Result};
use crate::geometry::{l1_distance, sparse_sign_step, Projection, ThreatModel};
use crate::models::{is_correct, margin_loss, ranked_classes, LogitsOracle, Loss};
use crate::oracles::sample_feasible;
use crate::rng;
use crate::square::{square_attack, SquareConfig};

/// SLIDE's step size: linear in `eps`, equal to 2 at `eps = 2000/255`.
pub fn slide_step_size(eps: f64) -> f64 {
    2.0 * eps / (2000.0 / 255.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideConfig {
    /// Fraction of coordinates updated per step.
    pub k: f64,
    pub eta: f64,
    pub n_iter: usize,
    pub projection: Projection,
}

impl SlideConfig {
    /// Historical settings for radius `eps`: `k = 0.01`, approximate projection.
    pub fn for_eps(eps: f64, n_iter: usize) -> Self {
        Self {
            k: 0.01,
            eta: slide_step_size(eps),
            n_iter,
            projection: Projection::Approximate,
        }
    }
}

/// Fixed-sparsity sign-step ascent started at the anchor.
pub fn slide_run<O: Objective + ?Sized>(
    obj: &O,
    tm: &ThreatModel,
    cfg: &SlideConfig,
) -> Result<AttackResult> {
    if !(cfg.k > 0.0 && cfg.k <= 1.0) {
        return Err(Error::Parameter(format!(
            "SLIDE sparsity must lie in (0, 1], got {}",
            cfg.k
        )));
    }
    if !(cfg.eta > 0.0) || cfg.n_iter == 0 {
        return Err(Error::Parameter(
            "SLIDE needs a positive step and at least one iteration".into(),
        ));
    }
    let d = tm.dim();
    check_len(d, obj.dim())?;
    let x = tm.anchor();
    let t = crate::apgd::support_size(cfg.k, d);

    let first = obj.evaluate(x, true)?;
    let mut grad = first.grad.expect("gradient requested");
    let mut cur = x.to_vec();
    let mut best = (first.value, cur.clone());
    let mut success = first.success;
    let mut adversarial = success.then(|| (first.value, cur.clone()));
    let mut loss_trace = Vec::with_capacity(cfg.n_iter);
    let mut success_trace = Vec::with_capacity(cfg.n_iter);
    let mut gradient_evals = 1;
    let mut zero_grad_steps = 0;

    for i in 0..cfg.n_iter {
        let step = sparse_sign_step(&grad, t)?;
        if step.support == 0 {
            zero_grad_steps += 1;
        }
        let u: Vec<f64> = cur
            .iter()
            .zip(&step.direction)
            .map(|(a, s)| a + cfg.eta * s)
            .collect();
        cur = cfg.projection.apply(&u, tm)?;
        if !tm.contains(&cur) {
            return Err(Error::Invariant(format!(
                "SLIDE iterate {} left the threat set",
                i + 1
            )));
        }
        let last = i + 1 == cfg.n_iter;
        let eval = obj.evaluate(&cur, !last)?;
        if let Some(g) = eval.grad {
            grad = g;
            gradient_evals += 1;
        }
        if eval.value > best.0 {
            best = (eval.value, cur.clone());
        }
        if eval.success {
            success = true;
            if adversarial.as_ref().is_none_or(|(v, _)| eval.value > *v) {
                adversarial = Some((eval.value, cur.clone()));
            }
        }
        loss_trace.push(best.0);
        success_trace.push(success);
    }

    Ok(AttackResult {
        l1_norm: l1_distance(&best.1, x),
        x_adv: best.1,
        loss_best: best.0,
        success,
        adversarial: adversarial.map(|(_, p)| p),
        iterations_used: cfg.n_iter,
        loss_trace,
        success_trace,
        gradient_evals,
        forward_evals: cfg.n_iter + 1,
        zero_grad_steps,
    })
}

/// SLIDE on the cross-entropy loss of a classifier.
pub fn slide_attack<M: LogitsOracle + ?Sized>(
    model: &M,
    x: &[f64],
    y: usize,
    eps: f64,
    cfg: &SlideConfig,
) -> Result<AttackResult> {
    let tm = ThreatModel::new(x.to_vec(), eps)?;
    slide_run(
        &ClassifierObjective::new(model, y, Loss::CrossEntropy),
        &tm,
        cfg,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// The clean input is already misclassified.
    Clean,
    ApgdCe,
    ApgdTDlr,
    Square,
}

impl Stage {
    pub const ATTACKS: [Stage; 3] = [Stage::ApgdCe, Stage::ApgdTDlr, Stage::Square];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Clean => "clean",
            Stage::ApgdCe => "apgd-ce",
            Stage::ApgdTDlr => "apgd-t-dlr",
            Stage::Square => "square",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Stage::Clean => 0,
            Stage::ApgdCe => 1,
            Stage::ApgdTDlr => 2,
            Stage::Square => 3,
        }
    }

    fn slot(self) -> Option<usize> {
        Stage::ATTACKS.iter().position(|&s| s == self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub ce_restarts: usize,
    pub ce_iters: usize,
    pub tdlr_restarts: usize,
    pub tdlr_iters: usize,
    pub square_queries: usize,
    pub include_square: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            ce_restarts: 5,
            ce_iters: 100,
            tdlr_restarts: 5,
            tdlr_iters: 100,
            square_queries: 5000,
            include_square: true,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.ce_restarts,
            self.ce_iters,
            self.tdlr_restarts,
            self.tdlr_iters,
            self.square_queries,
        ]
        .contains(&0)
        {
            return Err(Error::Parameter("ensemble budgets must be positive".into()));
        }
        Ok(())
    }

    fn apgd(n_iter: usize) -> ApgdConfig {
        ApgdConfig {
            early_stop: true,
            ..ApgdConfig::multi(n_iter)
        }
    }

    /// Most gradient evaluations a stage may spend on one example.
    pub fn gradient_budget(&self, stage: Stage) -> usize {
        match stage {
            Stage::ApgdCe => self.ce_restarts * self.ce_iters,
            Stage::ApgdTDlr => self.tdlr_restarts * self.tdlr_iters,
            Stage::Clean | Stage::Square => 0,
        }
    }

    /// Most forward passes a stage may spend on one example. Each APGD phase
    /// evaluates its starting point once more than it takes steps.
    pub fn forward_budget(&self, stage: Stage) -> usize {
        let phases = ApgdConfig::multi(1).phases.len();
        match stage {
            Stage::ApgdCe => self.ce_restarts * (self.ce_iters + phases),
            Stage::ApgdTDlr => self.tdlr_restarts * (self.tdlr_iters + phases),
            Stage::Square => self.square_queries,
            Stage::Clean => 1,
        }
    }
}

/// Model evaluations spent by one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBudget {
    pub forward: usize,
    pub gradient: usize,
}

impl std::ops::AddAssign for StageBudget {
    fn add_assign(&mut self, o: Self) {
        self.forward += o.forward;
        self.gradient += o.gradient;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub example_id: usize,
    pub clean_correct: bool,
    pub robust: bool,
    pub stage_broken: Option<Stage>,
    /// Margin at the reported point (negative or zero means misclassified).
    pub best_loss: f64,
    pub l1_norm: f64,
    /// Spend per attack stage, indexed like [`Stage::ATTACKS`].
    pub spent: [StageBudget; 3],
    #[serde(skip)]
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_example: Vec<ExampleOutcome>,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

impl EvalReport {
    pub fn from_outcomes(per_example: Vec<ExampleOutcome>) -> Result<Self> {
        if per_example.is_empty() {
            return Err(Error::Parameter("report has no examples".into()));
        }
        let n = per_example.len() as f64;
        let clean_accuracy = per_example.iter().filter(|e| e.clean_correct).count() as f64 / n;
        let robust_accuracy = per_example.iter().filter(|e| e.robust).count() as f64 / n;
        Ok(Self {
            per_example,
            clean_accuracy,
            robust_accuracy,
        })
    }

    /// Total spend per attack stage over all examples.
    pub fn ledger(&self) -> [StageBudget; 3] {
        let mut total = [StageBudget::default(); 3];
        for e in &self.per_example {
            for (t, s) in total.iter_mut().zip(e.spent) {
                *t += s;
            }
        }
        total
    }
}

pub fn robust_accuracy(report: &EvalReport) -> Result<f64> {
    if report.per_example.is_empty() {
        return Err(Error::Parameter(
            "robust accuracy of an empty report".into(),
        ));
    }
    Ok(
        report.per_example.iter().filter(|e| e.robust).count() as f64
            / report.per_example.len() as f64,
    )
}

/// An example is robust only if it is robust in every report.
pub fn worst_case_merge(reports: &[EvalReport]) -> Result<EvalReport> {
    let (first, rest) = reports
        .split_first()
        .ok_or_else(|| Error::Parameter("nothing to merge".into()))?;
    let mut merged = first.per_example.clone();
    for r in rest {
        if r.per_example.len() != merged.len() {
            return Err(Error::Dimension {
                expected: merged.len(),
                actual: r.per_example.len(),
            });
        }
        for (m, e) in merged.iter_mut().zip(&r.per_example) {
            if m.example_id != e.example_id {
                return Err(Error::Parameter(format!(
                    "example ids differ: {} vs {}",
                    m.example_id, e.example_id
                )));
            }
            for (a, b) in m.spent.iter_mut().zip(e.spent) {
                *a += b;
            }
            m.clean_correct &= e.clean_correct;
            if m.robust && !e.robust {
                m.robust = false;
                m.stage_broken = e.stage_broken;
            }
            if e.best_loss < m.best_loss {
                m.best_loss = e.best_loss;
                m.l1_norm = e.l1_norm;
                m.point.clone_from(&e.point);
            }
        }
    }
    EvalReport::from_outcomes(merged)
}

fn image_shape(data: &LabeledDataset) -> Result<ImageShape> {
    data.shape.ok_or_else(|| {
        Error::Parameter("Square Attack needs an image shape for the dataset".into())
    })
}

/// Runs one attack stage on one example. `None` when the stage does not
/// apply (targeted DLR with fewer than four classes).
pub fn run_stage<M: LogitsOracle + ?Sized>(
    stage: Stage,
    model: &M,
    x: &[f64],
    y: usize,
    clean_logits: &[f64],
    eps: f64,
    shape: Option<&ImageShape>,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<Option<AttackResult>> {
    let mut r = rng::derived(seed, stage.stream_id());
    match stage {
        Stage::Clean => Ok(None),
        Stage::ApgdCe => {
            let obj = ClassifierObjective::new(model, y, Loss::CrossEntropy);
            apgd_restarts(
                &obj,
                x,
                eps,
                &EnsembleConfig::apgd(cfg.ce_iters),
                cfg.ce_restarts,
                &mut r,
            )
            .map(Some)
        }
        Stage::ApgdTDlr => {
            let k = clean_logits.len();
            if k < 4 {
                return Ok(None);
            }
            let ranked = ranked_classes(clean_logits);
            let others: Vec<usize> = ranked.into_iter().filter(|&c| c != y).collect();
            let tm = ThreatModel::new(x.to_vec(), eps)?;
            let apgd = EnsembleConfig::apgd(cfg.tdlr_iters);
            let mut best: Option<AttackResult> = None;
            let (mut forward, mut gradient) = (0, 0);
            for restart in 0..cfg.tdlr_restarts {
                let target = others[restart % others.len()];
                let obj = ClassifierObjective::new(model, y, Loss::TargetedDlr { target });
                let init = if restart == 0 {
                    x.to_vec()
                } else {
                    sample_feasible(&tm, &mut r)
                };
                let run = apgd_run(&obj, x, eps, &apgd, &init, &mut r)?;
                forward += run.forward_evals;
                gradient += run.gradient_evals;
                let done = run.success;
                // Losses under different targets are not comparable; prefer a success.
                if best
                    .as_ref()
                    .is_none_or(|b| !b.success && (run.success || run.loss_best > b.loss_best))
                {
                    best = Some(run);
                }
                if done {
                    break;
                }
            }
            Ok(best.map(|b| AttackResult {
                forward_evals: forward,
                gradient_evals: gradient,
                ..b
            }))
        }
        Stage::Square => {
            let shape = shape
                .ok_or_else(|| Error::Parameter("Square Attack needs an image shape".into()))?;
            let sq = SquareConfig {
                n_queries: cfg.square_queries,
                ..SquareConfig::default()
            };
            square_attack(model, x, y, eps, shape, &sq, &mut r).map(Some)
        }
    }
}

fn evaluate_example<M: LogitsOracle + ?Sized>(
    model: &M,
    data: &LabeledDataset,
    id: usize,
    eps: f64,
    cfg: &EnsembleConfig,
    stages: &[Stage],
    seed: u64,
) -> Result<ExampleOutcome> {
    let (x, y) = (&data.inputs[id], data.labels[id]);
    let clean_logits = model.logits(x);
    let mut outcome = ExampleOutcome {
        example_id: id,
        clean_correct: is_correct(&clean_logits, y),
        robust: false,
        stage_broken: None,
        best_loss: margin_loss(&clean_logits, y),
        l1_norm: 0.0,
        spent: [StageBudget::default(); 3],
        point: x.clone(),
    };
    if !outcome.clean_correct {
        outcome.stage_broken = Some(Stage::Clean);
        return Ok(outcome);
    }
    outcome.robust = true;
    if eps == 0.0 {
        // S = {x}: nothing to attack
        return Ok(outcome);
    }
    let example_seed = rng::derive_seed(seed, id as u64);
    let shape = data.shape;
    for &stage in stages {
        if stage == Stage::Square && !cfg.include_square {
            continue;
        }
        let Some(res) = run_stage(
            stage,
            model,
            x,
            y,
            &clean_logits,
            eps,
            shape.as_ref(),
            cfg,
            example_seed,
        )?
        else {
            continue;
        };
        let slot = stage.slot().expect("attack stage");
        outcome.spent[slot] = StageBudget {
            forward: res.forward_evals,
            gradient: res.gradient_evals,
        };
        let point = res.output_point();
        let margin = margin_loss(&model.logits(point), y);
        if margin < outcome.best_loss {
            outcome.best_loss = margin;
            outcome.l1_norm = l1_distance(point, x);
            outcome.point = point.to_vec();
        }
        if res.success {
            outcome.robust = false;
            outcome.stage_broken = Some(stage);
            break;
        }
    }
    Ok(outcome)
}

/// Evaluates every example under the given attack stages in order, stopping
/// per example at the first success. Each (example, stage) pair draws from its
/// own random stream, so a stage behaves identically whether run alone or
/// inside the ensemble.
pub fn evaluate_stages<M: LogitsOracle + Sync + ?Sized>(
    model: &M,
    data: &LabeledDataset,
    eps: f64,
    cfg: &EnsembleConfig,
    stages: &[Stage],
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!(
            "radius must be finite and >= 0, got {eps}"
        )));
    }
    if data.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    if cfg.include_square && stages.contains(&Stage::Square) {
        image_shape(data)?;
    }
    check_len(model.input_dim(), data.dim())?;
    let outcomes: Result<Vec<ExampleOutcome>> = (0..data.len())
        .into_par_iter()
        .map(|id| evaluate_example(model, data, id, eps, cfg, stages, seed))
        .collect();
    EvalReport::from_outcomes(outcomes?)
}

/// APGD-CE, then APGD-T-DLR, then Square Attack.
pub fn autoattack<M: LogitsOracle + Sync + ?Sized>(
    model: &M,
    data: &LabeledDataset,
    eps: f64,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_stages(model, data, eps, cfg, &Stage::ATTACKS, seed)
}
