//! Datasets and models for the commands: files on disk or the bundled toy set.

use std::path::Path;

use bxl1_core::data::{toy_cifar, ImageShape, TOY_CLASSES};
use bxl1_core::io::{load_model, load_tensor, save_tensor, Tensor};
use bxl1_core::models::{train_plain, LinearSoftmaxModel, Model, TrainConfig};
use bxl1_core::{rng, LabeledDataset, LogitsOracle};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Toy examples reserved for fitting the bundled model. Evaluation examples
/// are drawn after them from the same generator.
pub const TOY_TRAIN: usize = 1000;

/// Name of the bundled model in configs and reports.
pub const TOY_MODEL: &str = "toy";

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    label: usize,
}

pub fn read_labels(path: &Path) -> CliResult<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["label"] {
        return Err(CliError::Io(format!(
            "{}: expected the header `label`",
            path.display()
        )));
    }
    r.deserialize::<LabelRow>()
        .map(|row| Ok(row?.label))
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for &label in labels {
        w.serialize(LabelRow { label })?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs as an `[n, d]` tensor, or `[n, side, side, channels]` when the
/// dataset carries an image shape.
pub fn save_dataset(data: &Path, labels: &Path, ds: &LabeledDataset) -> CliResult<()> {
    let dims = match ds.shape {
        Some(s) => vec![ds.len(), s.side, s.side, s.channels],
        None => vec![ds.len(), ds.dim()],
    };
    let flat = ds.inputs.concat();
    save_tensor(data, &Tensor::new(dims, flat)?)?;
    write_labels(labels, &ds.labels)
}

pub fn load_dataset(data: &Path, labels: &Path, num_classes: usize) -> CliResult<LabeledDataset> {
    let t = load_tensor(data)?;
    let shape = match t.dims.as_slice() {
        [_, _] => None,
        [_, h, w, c] if h == w => Some(ImageShape::new(*h, *c)?),
        dims => {
            return Err(CliError::Io(format!(
                "{}: expected a [n, d] or [n, side, side, channels] tensor, got {dims:?}",
                data.display()
            )))
        }
    };
    let inputs = t.rows()?;
    if inputs.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CliError::Config(format!(
            "{}: inputs must lie in [0, 1]",
            data.display()
        )));
    }
    let ds = LabeledDataset::new(inputs, read_labels(labels)?, num_classes)?;
    Ok(match shape {
        Some(s) => ds.with_shape(s)?,
        None => ds,
    })
}

/// The first `train` toy examples and the `eval` examples that follow them.
pub fn toy_split(
    train: usize,
    eval: usize,
    data_seed: u64,
) -> CliResult<(LabeledDataset, LabeledDataset)> {
    let all = toy_cifar(train + eval, &mut rng::seeded(data_seed))?;
    Ok(all.split_at(train))
}

/// Linear model fitted with plain SGD on the reserved toy examples.
pub fn toy_model(data_seed: u64) -> CliResult<Model> {
    let (train, _) = toy_split(TOY_TRAIN, 0, data_seed)?;
    let mut model = LinearSoftmaxModel::zeros(TOY_CLASSES, train.dim())?;
    train_plain(
        &mut model,
        &train,
        &TrainConfig::default(),
        &mut rng::seeded(data_seed),
    )?;
    Ok(Model::Linear(model))
}

/// `toy` or a model file path.
pub fn model_by_name(name: &str, data_seed: u64) -> CliResult<Model> {
    if name == TOY_MODEL {
        toy_model(data_seed)
    } else {
        Ok(load_model(Path::new(name))?)
    }
}

/// Evaluation examples for `model`: the data file when given, otherwise the
/// toy examples after the reserved training block.
pub fn examples(
    files: Option<(&Path, &Path)>,
    points: usize,
    data_seed: u64,
    model: &Model,
) -> CliResult<LabeledDataset> {
    let ds = match files {
        Some((data, labels)) => load_dataset(data, labels, model.num_classes())?,
        None => {
            if model.num_classes() != TOY_CLASSES {
                return Err(CliError::Config(format!(
                    "toy examples have {TOY_CLASSES} classes, the model has {}",
                    model.num_classes()
                )));
            }
            toy_split(TOY_TRAIN, points, data_seed)?.1
        }
    };
    if ds.dim() != model.input_dim() {
        return Err(CliError::Config(format!(
            "examples have dimension {}, the model expects {}",
            ds.dim(),
            model.input_dim()
        )));
    }
    Ok(ds)
}
