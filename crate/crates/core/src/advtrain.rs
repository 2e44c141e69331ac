//! Adversarial training with a 10-step l1-APGD inner maximizer, and a probe
//! that tracks robustness of the training snapshots under a weak and a strong
//! attack.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apgd::{apgd_restarts, apgd_single, ApgdConfig, ClassifierObjective};
use crate::data::LabeledDataset;
use crate::ensemble::{slide_attack, SlideConfig};
use crate::error::{check_len, Error, Result};
use crate::geometry::ThreatModel;
use crate::models::{accuracy, sgd_epoch, LogitsOracle, Loss, TrainConfig, Trainable};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtConfig {
    /// Training radius; zero disables the inner attack.
    pub eps_train: f64,
    pub inner_steps: usize,
    pub k0: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AtConfig {
    fn default() -> Self {
        Self {
            eps_train: 12.0,
            inner_steps: 10,
            k0: 0.05,
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl AtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_train >= 0.0 && self.eps_train.is_finite()) {
            return Err(Error::Parameter(format!(
                "eps_train must be finite and >= 0, got {}",
                self.eps_train
            )));
        }
        if self.inner_steps == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "inner_steps and batch_size must be positive".into(),
            ));
        }
        self.inner_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }

    pub fn inner_config(&self) -> ApgdConfig {
        ApgdConfig {
            k0: self.k0,
            ..ApgdConfig::single(self.inner_steps)
        }
    }
}

/// Trained model and its parameters after every epoch (index 0 is the
/// initial model).
#[derive(Debug, Clone)]
pub struct AtOutcome<M> {
    pub model: M,
    pub snapshots: Vec<M>,
}

/// Training-time attack: single-radius APGD on cross-entropy from the clean point.
pub fn inner_maximize<M: LogitsOracle + ?Sized>(
    model: &M,
    x: &[f64],
    y: usize,
    cfg: &AtConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.eps_train == 0.0 {
        return Ok(x.to_vec());
    }
    let tm = ThreatModel::new(x.to_vec(), cfg.eps_train)?;
    let obj = ClassifierObjective::new(model, y, Loss::CrossEntropy);
    let r = apgd_single(&obj, &tm, &cfg.inner_config(), x, &mut rng::seeded(seed))?;
    debug_assert!(tm.contains(&r.x_adv));
    Ok(r.x_adv)
}

fn inner_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, epoch as u64), index as u64)
}

/// Minibatch SGD on cross-entropy at inner-attack points. Shuffling uses
/// `cfg.seed` exactly as [`crate::models::train_plain`] would, and each inner
/// attack has its own stream keyed by (seed, epoch, example).
pub fn adv_train<M: Trainable + Sync>(
    model: M,
    data: &LabeledDataset,
    cfg: &AtConfig,
) -> Result<AtOutcome<M>> {
    cfg.validate()?;
    check_len(model.input_dim(), data.dim())?;
    let mut model = model;
    let mut shuffle = rng::seeded(cfg.seed);
    let tc = cfg.train_config();
    let mut snapshots = vec![model.clone()];
    for epoch in 0..cfg.epochs {
        sgd_epoch(&mut model, data, &tc, &mut shuffle, |m, i, x, y| {
            inner_maximize(m, x, y, cfg, inner_seed(cfg.seed, epoch, i))
        })?;
        snapshots.push(model.clone());
    }
    Ok(AtOutcome { model, snapshots })
}

/// Mean cross-entropy reached by the training attack and by 10-step SLIDE.
pub fn inner_attack_losses<M: LogitsOracle + Sync + ?Sized>(
    model: &M,
    data: &LabeledDataset,
    cfg: &AtConfig,
) -> Result<(f64, f64)> {
    if data.is_empty() || !(cfg.eps_train > 0.0) {
        return Err(Error::Parameter(
            "need examples and a positive training radius".into(),
        ));
    }
    let slide = SlideConfig::for_eps(cfg.eps_train, cfg.inner_steps);
    let pairs: Vec<(f64, f64)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&data.inputs[i], data.labels[i]);
            let tm = ThreatModel::new(x.clone(), cfg.eps_train)?;
            let obj = ClassifierObjective::new(model, y, Loss::CrossEntropy);
            let a = apgd_single(
                &obj,
                &tm,
                &cfg.inner_config(),
                x,
                &mut rng::derived(cfg.seed, i as u64),
            )?;
            let s = slide_attack(model, x, y, cfg.eps_train, &slide)?;
            Ok((a.loss_best, s.loss_best))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeAttack {
    /// The training attack.
    Apgd10,
    /// Multi-radius APGD with 100 iterations.
    Apgd100,
}

impl ProbeAttack {
    pub fn name(self) -> &'static str {
        match self {
            ProbeAttack::Apgd10 => "apgd-10",
            ProbeAttack::Apgd100 => "apgd-100",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub epoch: usize,
    pub split: String,
    pub attack: ProbeAttack,
    pub robust_accuracy: f64,
}

/// Fraction of examples that stay correctly classified under `attack`
/// (clean accuracy at `eps = 0`).
pub fn probe_robust_accuracy<M: LogitsOracle + Sync + ?Sized>(
    model: &M,
    data: &LabeledDataset,
    eps: f64,
    attack: ProbeAttack,
    cfg: &AtConfig,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("probe split is empty".into()));
    }
    if eps == 0.0 {
        return Ok(accuracy(model, data));
    }
    let robust = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&data.inputs[i], data.labels[i]);
            let obj = ClassifierObjective::new(model, y, Loss::CrossEntropy);
            let mut r = rng::derived(seed, i as u64);
            let res = match attack {
                ProbeAttack::Apgd10 => {
                    let tm = ThreatModel::new(x.clone(), eps)?;
                    apgd_single(&obj, &tm, &cfg.inner_config(), x, &mut r)?
                }
                ProbeAttack::Apgd100 => {
                    apgd_restarts(&obj, x, eps, &ApgdConfig::multi(100), 1, &mut r)?
                }
            };
            Ok(!res.success)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(robust.iter().filter(|&&b| b).count() as f64 / robust.len() as f64)
}

/// Robust accuracy of every `probe_every`-th snapshot (and the last) on each
/// split under both probe attacks.
pub fn overfitting_probe<M: LogitsOracle + Sync>(
    snapshots: &[M],
    splits: &[(&str, &LabeledDataset)],
    eps: f64,
    probe_every: usize,
    cfg: &AtConfig,
) -> Result<Vec<ProbeRow>> {
    if probe_every == 0 || snapshots.is_empty() {
        return Err(Error::Parameter(
            "need snapshots and probe_every >= 1".into(),
        ));
    }
    let epochs: Vec<usize> = (0..snapshots.len())
        .filter(|e| e % probe_every == 0 || *e + 1 == snapshots.len())
        .collect();
    let mut rows = Vec::new();
    for &epoch in &epochs {
        for &(split, data) in splits {
            for attack in [ProbeAttack::Apgd10, ProbeAttack::Apgd100] {
                let seed = rng::derive_seed(cfg.seed, epoch as u64);
                let robust_accuracy =
                    probe_robust_accuracy(&snapshots[epoch], data, eps, attack, cfg, seed)?;
                rows.push(ProbeRow {
                    epoch,
                    split: split.to_string(),
                    attack,
                    robust_accuracy,
                });
            }
        }
    }
    Ok(rows)
}
