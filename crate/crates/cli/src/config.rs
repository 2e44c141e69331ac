//! Run configuration: one TOML section per command, overridden by flags.
//!
//! Unknown sections and keys are rejected. Every command writes the fully
//! resolved configuration to `config.toml` in its output directory, so
//! `bxl1 <command> --config <out>/config.toml` repeats the run.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Flags shared by every command; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Config file with a section per command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub queries: Option<usize>,
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (falls back to BXL1_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl Overrides {
    /// Fails if a flag the command has no use for was given.
    fn reject(&self, command: &str, unused: &[&str]) -> CliResult<()> {
        for &name in unused {
            let given = match name {
                "eps" => self.eps.is_some(),
                "iters" => self.iters.is_some(),
                "queries" => self.queries.is_some(),
                "restarts" => self.restarts.is_some(),
                _ => false,
            };
            if given {
                return Err(CliError::Config(format!(
                    "--{name} does not apply to `{command}`"
                )));
            }
        }
        Ok(())
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    ApgdSingle,
    ApgdMulti,
    Slide,
    SlideExact,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossChoice {
    Ce,
    /// Targeted DLR against the most likely wrong class.
    DlrTargeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalAttack {
    Autoattack,
    ApgdCe,
    ApgdTDlr,
    Square,
    Slide,
    SlideExact,
}

impl EvalAttack {
    pub fn name(self) -> &'static str {
        match self {
            EvalAttack::Autoattack => "autoattack",
            EvalAttack::ApgdCe => "apgd-ce",
            EvalAttack::ApgdTDlr => "apgd-t-dlr",
            EvalAttack::Square => "square",
            EvalAttack::Slide => "slide",
            EvalAttack::SlideExact => "slide-exact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchChoice {
    Linear,
    Mlp,
}

/// Settings for `attack`. Examples come from `data` + `labels` when given,
/// otherwise from the bundled toy image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub loss: LossChoice,
    pub eps: f64,
    pub iters: usize,
    pub restarts: usize,
    pub queries: usize,
    pub seed: u64,
    /// Input tensor (`[n, d]` or `[n, side, side, channels]`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// One-column CSV with header `label`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Number of toy examples when no data file is given.
    pub points: usize,
    pub data_seed: u64,
    /// Model file; the bundled toy model when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::ApgdMulti,
            loss: LossChoice::Ce,
            eps: 12.0,
            iters: 100,
            restarts: 1,
            queries: 5000,
            seed: 0,
            data: None,
            labels: None,
            points: 1000,
            data_seed: 0,
            model: None,
            out: PathBuf::from("bxl1-out/attack"),
        }
    }
}

impl AttackConfig {
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        set(&mut self.seed, o.seed);
        set(&mut self.eps, o.eps);
        set(&mut self.iters, o.iters);
        set(&mut self.queries, o.queries);
        set(&mut self.restarts, o.restarts);
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        check_eps(self.eps)?;
        positive(&[
            ("iters", self.iters),
            ("restarts", self.restarts),
            ("queries", self.queries),
        ])?;
        check_data(&self.data, &self.labels, self.points)?;
        if self.restarts > 1 && !matches!(self.kind, AttackKind::ApgdSingle | AttackKind::ApgdMulti)
        {
            return Err(CliError::Config("restarts > 1 needs an apgd attack".into()));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Model files; `toy` names the bundled toy model.
    pub models: Vec<String>,
    pub attacks: Vec<EvalAttack>,
    pub eps: f64,
    /// Iterations per APGD restart and for SLIDE.
    pub iters: usize,
    /// Restarts per APGD stage.
    pub restarts: usize,
    pub queries: usize,
    pub include_square: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub points: usize,
    pub data_seed: u64,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            models: vec!["toy".into()],
            attacks: vec![EvalAttack::Autoattack],
            eps: 12.0,
            iters: 100,
            restarts: 5,
            queries: 5000,
            include_square: true,
            seed: 0,
            data: None,
            labels: None,
            points: 1000,
            data_seed: 0,
            out: PathBuf::from("bxl1-out/eval"),
        }
    }
}

impl EvalConfig {
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        set(&mut self.seed, o.seed);
        set(&mut self.eps, o.eps);
        set(&mut self.iters, o.iters);
        set(&mut self.queries, o.queries);
        set(&mut self.restarts, o.restarts);
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        check_eps(self.eps)?;
        positive(&[
            ("iters", self.iters),
            ("restarts", self.restarts),
            ("queries", self.queries),
        ])?;
        check_data(&self.data, &self.labels, self.points)?;
        if self.models.is_empty() || self.attacks.is_empty() {
            return Err(CliError::Config(
                "need at least one model and one attack".into(),
            ));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchChoice,
    /// Hidden layer widths for `mlp`.
    pub hidden: Vec<usize>,
    pub eps_train: f64,
    pub inner_steps: usize,
    pub k0: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// With a data file, the first `train_points` rows train and the rest
    /// are held out; otherwise toy sizes.
    pub train_points: usize,
    pub test_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub data_seed: u64,
    pub probe_every: usize,
    /// Probe radius; defaults to `eps_train`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_eps: Option<f64>,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchChoice::Linear,
            hidden: vec![64],
            eps_train: 4.0,
            inner_steps: 10,
            k0: 0.05,
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            train_points: 1000,
            test_points: 256,
            data: None,
            labels: None,
            data_seed: 0,
            probe_every: 5,
            probe_eps: None,
            out: PathBuf::from("bxl1-out/train"),
        }
    }
}

impl TrainConfig {
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        o.reject("train", &["queries", "restarts"])?;
        set(&mut self.seed, o.seed);
        set(&mut self.eps_train, o.eps);
        set(&mut self.inner_steps, o.iters);
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        check_eps(self.eps_train)?;
        if let Some(p) = self.probe_eps {
            check_eps(p)?;
        }
        positive(&[
            ("inner_steps", self.inner_steps),
            ("batch_size", self.batch_size),
            ("train_points", self.train_points),
            ("probe_every", self.probe_every),
        ])?;
        if self.data.is_none() {
            positive(&[("test_points", self.test_points)])?;
        }
        check_data(&self.data, &self.labels, 1)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(self)
    }

    pub fn probe_eps(&self) -> f64 {
        self.probe_eps.unwrap_or(self.eps_train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random projection instances compared against Dykstra.
    pub instances: usize,
    /// Allowed l∞ gap between the exact projection and Dykstra.
    pub tol: f64,
    pub steepest_instances: usize,
    pub steepest_samples: usize,
    pub mc_samples: usize,
    pub grad_points: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 2000,
            tol: 1e-6,
            steepest_instances: 200,
            steepest_samples: 2000,
            mc_samples: 100_000,
            grad_points: 20,
            seed: 0,
            out: None,
        }
    }
}

impl VerifyConfig {
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        o.reject("verify", &["eps", "iters", "queries", "restarts"])?;
        set(&mut self.seed, o.seed);
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        positive(&[
            ("instances", self.instances),
            ("steepest_instances", self.steepest_instances),
            ("steepest_samples", self.steepest_samples),
            ("mc_samples", self.mc_samples),
            ("grad_points", self.grad_points),
        ])?;
        if !(self.tol > 0.0) {
            return Err(CliError::Config("tol must be positive".into()));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityConfig {
    pub eps: Vec<f64>,
    pub dims: Vec<usize>,
    /// Monte Carlo samples per row; zero leaves those columns empty.
    pub mc_samples: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            eps: vec![1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0],
            dims: vec![192, 3024],
            mc_samples: 0,
            seed: 0,
            out: None,
        }
    }
}

impl SparsityConfig {
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        o.reject("sparsity", &["iters", "queries", "restarts"])?;
        set(&mut self.seed, o.seed);
        if let Some(e) = o.eps {
            self.eps = vec![e];
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if self.eps.is_empty() || self.dims.is_empty() {
            return Err(CliError::Config(
                "need at least one eps and one dimension".into(),
            ));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    /// Timed repetitions per dimension; the median is reported.
    pub reps: usize,
    pub eps: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: vec![1 << 10, 1 << 14, 1 << 17, 1 << 20],
            reps: 5,
            eps: 12.0,
            seed: 0,
            out: None,
        }
    }
}

impl BenchConfig {
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        o.reject("bench", &["queries", "restarts"])?;
        set(&mut self.seed, o.seed);
        set(&mut self.eps, o.eps);
        set(&mut self.reps, o.iters);
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(CliError::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        positive(&[("reps", self.reps)])?;
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(CliError::Config(
                "dims must be nonempty and positive".into(),
            ));
        }
        Ok(self)
    }
}

/// Whole config file. Absent sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Writes the file to `dir/config.toml`, creating `dir`.
    pub fn write_to(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}

fn check_eps(eps: f64) -> CliResult<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "eps must be finite and >= 0, got {eps}"
        )))
    }
}

fn positive(values: &[(&str, usize)]) -> CliResult<()> {
    match values.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(CliError::Config(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

fn check_data(data: &Option<PathBuf>, labels: &Option<PathBuf>, points: usize) -> CliResult<()> {
    match (data, labels) {
        (Some(_), None) | (None, Some(_)) => {
            Err(CliError::Config("`data` and `labels` go together".into()))
        }
        (None, None) if points == 0 => Err(CliError::Config("points must be positive".into())),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(matches!(
            ConfigFile::parse("[attack]\nepsilon = 3\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            ConfigFile::parse("[plot]\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            ConfigFile::parse("[attack]\nkind = \"fgsm\"\n"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn flags_override_file_values() {
        let file =
            ConfigFile::parse("[attack]\neps = 3.0\niters = 7\nkind = \"square\"\n").unwrap();
        let o = Overrides {
            eps: Some(5.0),
            ..Default::default()
        };
        let cfg = file.attack.unwrap().resolve(&o).unwrap();
        assert_eq!(cfg.eps, 5.0);
        assert_eq!(cfg.iters, 7);
        assert_eq!(cfg.kind, AttackKind::Square);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ConfigFile {
            train: Some(TrainConfig {
                probe_eps: Some(2.0),
                ..Default::default()
            }),
            eval: Some(EvalConfig {
                attacks: vec![EvalAttack::Autoattack, EvalAttack::Slide],
                ..Default::default()
            }),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ConfigFile::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn inapplicable_flags_are_config_errors() {
        let o = Overrides {
            queries: Some(10),
            ..Default::default()
        };
        assert!(matches!(
            TrainConfig::default().resolve(&o),
            Err(CliError::Config(_))
        ));
        let o = Overrides {
            eps: Some(-1.0),
            ..Default::default()
        };
        assert!(matches!(
            AttackConfig::default().resolve(&o),
            Err(CliError::Config(_))
        ));
    }
}
