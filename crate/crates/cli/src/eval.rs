//! `bxl1 eval`: clean and robust accuracy per (model, attack).
//!
//! Writes `eval.csv` (model, attack, clean_accuracy, robust_accuracy) and, for
//! each model evaluated with the ensemble, `per_example_<k>.csv`
//! (example_id, clean_correct, robust, stage_broken, best_loss, l1_norm) with
//! `k` the model's position in the config.

use bxl1_core::ensemble::{
    autoattack, evaluate_stages, slide_attack, EnsembleConfig, EvalReport, SlideConfig, Stage,
};
use bxl1_core::models::{accuracy, is_correct, Model};
use bxl1_core::{LabeledDataset, LogitsOracle, Projection, ThreatModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigFile, EvalAttack, EvalConfig};
use crate::error::{CliError, CliResult};
use crate::output::write_csv;
use crate::source;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub attack: String,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub example_id: usize,
    pub clean_correct: bool,
    pub robust: bool,
    /// Stage that broke the example (`clean` if already misclassified);
    /// empty when robust.
    pub stage_broken: String,
    /// Margin at the reported point.
    pub best_loss: f64,
    pub l1_norm: f64,
}

fn outcome_rows(report: &EvalReport) -> Vec<OutcomeRow> {
    report
        .per_example
        .iter()
        .map(|e| OutcomeRow {
            example_id: e.example_id,
            clean_correct: e.clean_correct,
            robust: e.robust,
            stage_broken: e
                .stage_broken
                .map(|s| s.name().to_string())
                .unwrap_or_default(),
            best_loss: e.best_loss,
            l1_norm: e.l1_norm,
        })
        .collect()
}

/// Fraction of examples SLIDE fails to flip.
fn slide_accuracy(
    model: &Model,
    data: &LabeledDataset,
    cfg: &EvalConfig,
    projection: Projection,
) -> CliResult<f64> {
    let slide = SlideConfig {
        projection,
        ..SlideConfig::for_eps(cfg.eps, cfg.iters)
    };
    let robust: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&data.inputs[i], data.labels[i]);
            if !is_correct(&model.logits(x), y) {
                return Ok(false);
            }
            if cfg.eps == 0.0 {
                return Ok(true);
            }
            let res = slide_attack(model, x, y, cfg.eps, &slide)?;
            if !ThreatModel::new(x.clone(), cfg.eps)?.contains(&res.x_adv) {
                return Err(CliError::Invariant(format!(
                    "example {i}: SLIDE returned an infeasible point"
                )));
            }
            Ok(!res.success)
        })
        .collect::<CliResult<_>>()?;
    Ok(robust.iter().filter(|&&r| r).count() as f64 / robust.len() as f64)
}

pub fn run(cfg: &EvalConfig) -> CliResult<Vec<EvalRow>> {
    let ens = EnsembleConfig {
        ce_restarts: cfg.restarts,
        ce_iters: cfg.iters,
        tdlr_restarts: cfg.restarts,
        tdlr_iters: cfg.iters,
        square_queries: cfg.queries,
        include_square: cfg.include_square,
    };
    let files = cfg.data.as_deref().zip(cfg.labels.as_deref());
    ConfigFile {
        eval: Some(cfg.clone()),
        ..Default::default()
    }
    .write_to(&cfg.out)?;

    let mut rows = Vec::new();
    for (k, name) in cfg.models.iter().enumerate() {
        let model = source::model_by_name(name, cfg.data_seed)?;
        let data = source::examples(files, cfg.points, cfg.data_seed, &model)?;
        for &attack in &cfg.attacks {
            let (clean_accuracy, robust_accuracy) = match attack {
                EvalAttack::Autoattack => {
                    let report = autoattack(&model, &data, cfg.eps, &ens, cfg.seed)?;
                    write_csv(
                        &cfg.out.join(format!("per_example_{k}.csv")),
                        &outcome_rows(&report),
                    )?;
                    (report.clean_accuracy, report.robust_accuracy)
                }
                EvalAttack::ApgdCe | EvalAttack::ApgdTDlr | EvalAttack::Square => {
                    let stage = match attack {
                        EvalAttack::ApgdCe => Stage::ApgdCe,
                        EvalAttack::ApgdTDlr => Stage::ApgdTDlr,
                        _ => Stage::Square,
                    };
                    let single = EnsembleConfig {
                        include_square: true,
                        ..ens.clone()
                    };
                    let report =
                        evaluate_stages(&model, &data, cfg.eps, &single, &[stage], cfg.seed)?;
                    (report.clean_accuracy, report.robust_accuracy)
                }
                EvalAttack::Slide | EvalAttack::SlideExact => {
                    let projection = if attack == EvalAttack::Slide {
                        Projection::Approximate
                    } else {
                        Projection::Exact
                    };
                    (
                        accuracy(&model, &data),
                        slide_accuracy(&model, &data, cfg, projection)?,
                    )
                }
            };
            rows.push(EvalRow {
                model: name.clone(),
                attack: attack.name().into(),
                clean_accuracy,
                robust_accuracy,
            });
        }
    }
    write_csv(&cfg.out.join("eval.csv"), &rows)?;
    Ok(rows)
}
