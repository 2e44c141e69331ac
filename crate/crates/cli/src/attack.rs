//! `bxl1 attack`: one named attack over a dataset.
//!
//! Writes `per_example.csv` (example_id, clean_correct, robust, best_loss,
//! l1_norm, iterations, forward_evals, gradient_evals) and `curves.csv`
//! (iter, mean_best_loss, robust_accuracy). APGD and SLIDE report
//! cross-entropy or targeted DLR (higher is stronger); Square Attack reports
//! the margin (lower is stronger). Multi-radius APGD leaves `mean_best_loss`
//! at NaN until its final phase, where losses become comparable.

use bxl1_core::apgd::{apgd_restarts, ApgdConfig, AttackResult, ClassifierObjective};
use bxl1_core::ensemble::{slide_attack, SlideConfig};
use bxl1_core::models::{is_correct, margin_loss, ranked_classes, Model};
use bxl1_core::square::{square_attack, SquareConfig};
use bxl1_core::{rng, LabeledDataset, LogitsOracle, Loss, Projection, ThreatModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AttackConfig, AttackKind, ConfigFile, LossChoice};
use crate::error::{CliError, CliResult};
use crate::output::write_csv;
use crate::source;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub example_id: usize,
    pub clean_correct: bool,
    pub robust: bool,
    pub best_loss: f64,
    pub l1_norm: f64,
    pub iterations: usize,
    pub forward_evals: usize,
    pub gradient_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iter: usize,
    pub mean_best_loss: f64,
    pub robust_accuracy: f64,
}

struct Traced {
    row: ExampleRow,
    loss: Vec<f64>,
    success: Vec<bool>,
}

fn loss_for(cfg: &AttackConfig, logits: &[f64], y: usize) -> Loss {
    match cfg.loss {
        LossChoice::Ce => Loss::CrossEntropy,
        LossChoice::DlrTargeted => Loss::TargetedDlr {
            target: ranked_classes(logits)
                .into_iter()
                .find(|&c| c != y)
                .unwrap_or(y),
        },
    }
}

fn run_one(
    model: &Model,
    data: &LabeledDataset,
    id: usize,
    cfg: &AttackConfig,
) -> CliResult<Traced> {
    let (x, y) = (&data.inputs[id], data.labels[id]);
    let logits = model.logits(x);
    let clean_correct = is_correct(&logits, y);
    let loss = loss_for(cfg, &logits, y);
    let start = match cfg.kind {
        AttackKind::Square => margin_loss(&logits, y),
        _ => loss.value(&logits, y)?,
    };

    let res = if cfg.eps == 0.0 {
        AttackResult {
            x_adv: x.clone(),
            loss_best: start,
            success: !clean_correct,
            adversarial: None,
            iterations_used: 0,
            l1_norm: 0.0,
            loss_trace: vec![start],
            success_trace: vec![!clean_correct],
            gradient_evals: 0,
            forward_evals: 1,
            zero_grad_steps: 0,
        }
    } else {
        let mut r = rng::derived(cfg.seed, id as u64);
        let res = match cfg.kind {
            AttackKind::ApgdSingle | AttackKind::ApgdMulti => {
                let apgd = if cfg.kind == AttackKind::ApgdSingle {
                    ApgdConfig::single(cfg.iters)
                } else {
                    ApgdConfig::multi(cfg.iters)
                };
                let obj = ClassifierObjective::new(model, y, loss);
                apgd_restarts(&obj, x, cfg.eps, &apgd, cfg.restarts, &mut r)?
            }
            AttackKind::Slide | AttackKind::SlideExact => {
                let projection = if cfg.kind == AttackKind::Slide {
                    Projection::Approximate
                } else {
                    Projection::Exact
                };
                let slide = SlideConfig {
                    projection,
                    ..SlideConfig::for_eps(cfg.eps, cfg.iters)
                };
                slide_attack(model, x, y, cfg.eps, &slide)?
            }
            AttackKind::Square => {
                let shape = data
                    .shape
                    .as_ref()
                    .ok_or_else(|| CliError::Config("square needs image-shaped data".into()))?;
                let sq = SquareConfig {
                    n_queries: cfg.queries,
                    ..SquareConfig::default()
                };
                square_attack(model, x, y, cfg.eps, shape, &sq, &mut r)?
            }
        };
        if !ThreatModel::new(x.clone(), cfg.eps)?.contains(&res.x_adv) {
            return Err(CliError::Invariant(format!(
                "example {id}: attack returned an infeasible point"
            )));
        }
        res
    };

    Ok(Traced {
        row: ExampleRow {
            example_id: id,
            clean_correct,
            robust: clean_correct && !res.success,
            best_loss: res.loss_best,
            l1_norm: res.l1_norm,
            iterations: res.iterations_used,
            forward_evals: res.forward_evals,
            gradient_evals: res.gradient_evals,
        },
        loss: res.loss_trace,
        success: res.success_trace,
    })
}

/// Value of a trace at row `i`, holding the last entry once the run stopped.
fn at<T: Copy>(trace: &[T], i: usize, fallback: T) -> T {
    trace.get(i).or(trace.last()).copied().unwrap_or(fallback)
}

fn curves(runs: &[Traced], rows: usize) -> Vec<CurveRow> {
    let n = runs.len() as f64;
    (0..rows)
        .map(|i| {
            let losses: Vec<f64> = runs
                .iter()
                .map(|t| at(&t.loss, i, t.row.best_loss))
                .filter(|v| v.is_finite())
                .collect();
            let mean_best_loss = if losses.is_empty() {
                f64::NAN
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            };
            let robust = runs
                .iter()
                .filter(|t| t.row.clean_correct && !at(&t.success, i, !t.row.robust))
                .count();
            CurveRow {
                iter: i + 1,
                mean_best_loss,
                robust_accuracy: robust as f64 / n,
            }
        })
        .collect()
}

pub struct Summary {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

pub fn run(cfg: &AttackConfig) -> CliResult<Summary> {
    if cfg.loss != LossChoice::Ce
        && !matches!(cfg.kind, AttackKind::ApgdSingle | AttackKind::ApgdMulti)
    {
        return Err(CliError::Config(
            "only apgd attacks take a loss other than ce".into(),
        ));
    }
    let model = match &cfg.model {
        Some(p) => bxl1_core::io::load_model(p)?,
        None => source::toy_model(cfg.data_seed)?,
    };
    let files = cfg.data.as_deref().zip(cfg.labels.as_deref());
    let data = source::examples(files, cfg.points, cfg.data_seed, &model)?;

    let runs: Vec<Traced> = (0..data.len())
        .into_par_iter()
        .map(|id| run_one(&model, &data, id, cfg))
        .collect::<CliResult<_>>()?;

    let budget = if cfg.kind == AttackKind::Square {
        cfg.queries
    } else {
        cfg.iters
    };
    ConfigFile {
        attack: Some(cfg.clone()),
        ..Default::default()
    }
    .write_to(&cfg.out)?;
    let rows: Vec<ExampleRow> = runs.iter().map(|t| t.row.clone()).collect();
    write_csv(&cfg.out.join("per_example.csv"), &rows)?;
    write_csv(&cfg.out.join("curves.csv"), &curves(&runs, budget))?;

    let n = rows.len() as f64;
    Ok(Summary {
        clean_accuracy: rows.iter().filter(|r| r.clean_correct).count() as f64 / n,
        robust_accuracy: rows.iter().filter(|r| r.robust).count() as f64 / n,
    })
}
