//! `bxl1 sparsity` and `bxl1 bench`: small tables, printed or written as CSV.

use std::path::Path;
use std::time::Instant;

use bxl1_core::geometry::{
    approx_project, expected_sparsity_closed_form, expected_sparsity_lower_bound, project_box_l1,
};
use bxl1_core::oracles::monte_carlo_sparsity;
use bxl1_core::{rng, ThreatModel};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, ConfigFile, SparsityConfig};
use crate::error::CliResult;
use crate::output::{print_csv, write_csv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub eps: f64,
    pub d: usize,
    pub expected_sparsity: f64,
    pub lower_bound: f64,
    pub monte_carlo: Option<f64>,
    pub monte_carlo_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub projection: String,
    pub d: usize,
    pub median_seconds: f64,
}

fn emit<T: Serialize>(
    out: Option<&Path>,
    file: &str,
    rows: &[T],
    echo: ConfigFile,
) -> CliResult<()> {
    match out {
        Some(dir) => {
            echo.write_to(dir)?;
            write_csv(&dir.join(file), rows)
        }
        None => print_csv(rows),
    }
}

pub fn sparsity(cfg: &SparsityConfig) -> CliResult<Vec<SparsityRow>> {
    let mut rows = Vec::new();
    for (i, &eps) in cfg.eps.iter().enumerate() {
        for (j, &d) in cfg.dims.iter().enumerate() {
            let (monte_carlo, monte_carlo_stderr) = if cfg.mc_samples > 0 {
                let mut r = rng::derived(cfg.seed, (i * cfg.dims.len() + j) as u64);
                let (m, s) = monte_carlo_sparsity(eps, d, cfg.mc_samples, &mut r)?;
                (Some(m), Some(s))
            } else {
                (None, None)
            };
            rows.push(SparsityRow {
                eps,
                d,
                expected_sparsity: expected_sparsity_closed_form(eps, d)?,
                lower_bound: expected_sparsity_lower_bound(eps),
                monte_carlo,
                monte_carlo_stderr,
            });
        }
    }
    let echo = ConfigFile {
        sparsity: Some(cfg.clone()),
        ..Default::default()
    };
    emit(cfg.out.as_deref(), "sparsity.csv", &rows, echo)?;
    Ok(rows)
}

fn median_seconds(mut f: impl FnMut(), reps: usize) -> f64 {
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[reps / 2]
}

/// Median runtime of the exact and the approximate projection of a Gaussian
/// perturbation of a uniform anchor, per dimension.
pub fn bench(cfg: &BenchConfig) -> CliResult<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (i, &d) in cfg.dims.iter().enumerate() {
        let mut r = rng::derived(cfg.seed, i as u64);
        let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
        let u: Vec<f64> = x
            .iter()
            .map(|v| v + r.sample::<f64, _>(StandardNormal))
            .collect();
        let tm = ThreatModel::new(x, cfg.eps)?;
        let exact = median_seconds(
            || drop(std::hint::black_box(project_box_l1(&u, &tm))),
            cfg.reps,
        );
        let approx = median_seconds(
            || drop(std::hint::black_box(approx_project(&u, &tm))),
            cfg.reps,
        );
        rows.push(BenchRow {
            projection: "exact".into(),
            d,
            median_seconds: exact,
        });
        rows.push(BenchRow {
            projection: "approximate".into(),
            d,
            median_seconds: approx,
        });
    }
    let echo = ConfigFile {
        bench: Some(cfg.clone()),
        ..Default::default()
    };
    emit(cfg.out.as_deref(), "bench.csv", &rows, echo)?;
    Ok(rows)
}
