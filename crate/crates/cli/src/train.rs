//! `bxl1 train`: adversarial training plus the robustness probe.
//!
//! Writes `model.bxl1`, `probe.csv` (epoch, split, attack, robust_accuracy),
//! `accuracy.csv` (epoch, split, clean_accuracy) for every snapshot, and the
//! held-out split as `test_data.bxl1` + `test_labels.csv` for `attack` and
//! `eval`.

use bxl1_core::advtrain::{adv_train, overfitting_probe, AtConfig, ProbeRow};
use bxl1_core::io::save_model;
use bxl1_core::models::{accuracy, LinearSoftmaxModel, MlpModel, Model};
use bxl1_core::{rng, LabeledDataset};
use serde::{Deserialize, Serialize};

use crate::config::{ArchChoice, ConfigFile, TrainConfig};
use crate::error::{CliError, CliResult};
use crate::output::write_csv;
use crate::source;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub epoch: usize,
    pub split: String,
    pub clean_accuracy: f64,
}

fn splits(cfg: &TrainConfig) -> CliResult<(LabeledDataset, LabeledDataset)> {
    match (&cfg.data, &cfg.labels) {
        (Some(data), Some(labels)) => {
            let num_classes = source::read_labels(labels)?
                .into_iter()
                .max()
                .map_or(2, |m| (m + 1).max(2));
            let all = source::load_dataset(data, labels, num_classes)?;
            if all.len() < cfg.train_points {
                return Err(CliError::Config(format!(
                    "train_points = {} but the data file has {} examples",
                    cfg.train_points,
                    all.len()
                )));
            }
            Ok(all.split_at(cfg.train_points))
        }
        _ => source::toy_split(cfg.train_points, cfg.test_points, cfg.data_seed),
    }
}

fn initial_model(cfg: &TrainConfig, data: &LabeledDataset) -> CliResult<Model> {
    Ok(match cfg.arch {
        ArchChoice::Linear => {
            Model::Linear(LinearSoftmaxModel::zeros(data.num_classes, data.dim())?)
        }
        ArchChoice::Mlp => {
            let mut sizes = vec![data.dim()];
            sizes.extend(&cfg.hidden);
            sizes.push(data.num_classes);
            Model::Mlp(MlpModel::new(&sizes, &mut rng::seeded(cfg.seed))?)
        }
    })
}

pub struct Summary {
    pub clean_accuracy: f64,
    pub probe: Vec<ProbeRow>,
}

pub fn run(cfg: &TrainConfig) -> CliResult<Summary> {
    let (train, test) = splits(cfg)?;
    let at = AtConfig {
        eps_train: cfg.eps_train,
        inner_steps: cfg.inner_steps,
        k0: cfg.k0,
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let outcome = adv_train(initial_model(cfg, &train)?, &train, &at)?;

    let mut named: Vec<(&str, &LabeledDataset)> = vec![("train", &train)];
    if !test.is_empty() {
        named.push(("test", &test));
    }
    let probe = overfitting_probe(
        &outcome.snapshots,
        &named,
        cfg.probe_eps(),
        cfg.probe_every,
        &at,
    )?;
    let acc: Vec<AccuracyRow> = outcome
        .snapshots
        .iter()
        .enumerate()
        .flat_map(|(epoch, m)| {
            named.iter().map(move |(split, d)| AccuracyRow {
                epoch,
                split: split.to_string(),
                clean_accuracy: accuracy(m, d),
            })
        })
        .collect();

    ConfigFile {
        train: Some(cfg.clone()),
        ..Default::default()
    }
    .write_to(&cfg.out)?;
    save_model(&cfg.out.join("model.bxl1"), &outcome.model)?;
    write_csv(&cfg.out.join("probe.csv"), &probe)?;
    write_csv(&cfg.out.join("accuracy.csv"), &acc)?;
    if !test.is_empty() {
        source::save_dataset(
            &cfg.out.join("test_data.bxl1"),
            &cfg.out.join("test_labels.csv"),
            &test,
        )?;
    }
    let eval_split = named.last().expect("train split").1;
    Ok(Summary {
        clean_accuracy: accuracy(&outcome.model, eval_split),
        probe,
    })
}
