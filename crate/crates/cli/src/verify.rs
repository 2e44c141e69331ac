//! `bxl1 verify`: the oracle suites at configured sizes and tolerances.
//!
//! Each check prints one line with its counts and worst residual. With
//! `out` set, the same lines go to `verify.csv` (check, pass, count, worst).

use std::time::Instant;

use bxl1_core::geometry::{
    approx_project, dot, expected_sparsity_closed_form, expected_sparsity_lower_bound, l1_distance,
    project_box_l1_shifted, steepest_descent_direction,
};
use bxl1_core::models::{
    finite_diff_grad, loss_and_grad, LinearSoftmaxModel, LogitsOracle, Loss, MlpModel,
};
use bxl1_core::oracles::{
    dykstra_project, expected_sparsity_by_recurrence, monte_carlo_sparsity, sample_feasible,
};
use bxl1_core::{rng, ThreatModel};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigFile, VerifyConfig};
use crate::error::{CliError, CliResult};
use crate::output::write_csv;

/// Value reported for `eps = 12`, `d = 3024`.
const REPORTED_SPARSITY: f64 = 24.6667;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub pass: bool,
    /// Instances or samples examined.
    pub count: usize,
    /// Largest residual relevant to the check.
    pub worst: f64,
}

fn row(check: &str, pass: bool, count: usize, worst: f64) -> CheckRow {
    CheckRow {
        check: check.into(),
        pass,
        count,
        worst,
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt();
    num / b.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12)
}

fn instance(seed: u64, i: usize) -> (ThreatModel, Vec<f64>) {
    let mut r = rng::derived(seed, i as u64);
    let d = r.random_range(1..=128);
    let eps = [0.1, 1.0, 12.0][i % 3];
    let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
    let u = if (i / 3) % 2 == 0 {
        x.iter()
            .map(|v| v + r.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        (0..d).map(|_| r.random_range(-1.0..2.0)).collect()
    };
    (ThreatModel::new(x, eps).expect("anchor in box"), u)
}

/// Projection against Dykstra, and the l1 ordering of exact vs approximate.
fn projection_checks(cfg: &VerifyConfig, shift: f64) -> CliResult<[CheckRow; 2]> {
    let per: Vec<(Option<f64>, f64)> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let (tm, u) = instance(cfg.seed, i);
            let fast = project_box_l1_shifted(&u, &tm, shift)?;
            let slow = dykstra_project(&u, &tm, 1e-12, 50_000)?;
            let gap = (slow.residual < 1e-8).then(|| linf(&fast, &slow.value));
            let x = tm.anchor();
            let excess = l1_distance(&approx_project(&u, &tm)?, x) - l1_distance(&fast, x);
            Ok((gap, excess))
        })
        .collect::<CliResult<_>>()?;
    let gaps: Vec<f64> = per.iter().filter_map(|p| p.0).collect();
    let worst_gap = gaps.iter().copied().fold(0.0, f64::max);
    let mismatches = gaps.iter().filter(|&&g| g > cfg.tol).count();
    let worst_excess = per.iter().map(|p| p.1).fold(0.0, f64::max);
    let violations = per.iter().filter(|p| p.1 > 1e-9).count();
    println!(
        "  projection: {}/{} compared with Dykstra, {mismatches} mismatches, worst l∞ {worst_gap:.2e} (tol {:.0e})",
        gaps.len(),
        cfg.instances,
        cfg.tol
    );
    println!("  lemma: {violations} instances with ||A(u) - x||_1 > ||P(u) - x||_1, worst excess {worst_excess:.2e}");
    Ok([
        row(
            "projection",
            mismatches == 0 && !gaps.is_empty(),
            gaps.len(),
            worst_gap,
        ),
        row("lemma", violations == 0, cfg.instances, worst_excess),
    ])
}

/// Steepest step against sampled feasible directions.
fn lp_dominance(cfg: &VerifyConfig) -> CliResult<CheckRow> {
    let per: Vec<(usize, f64)> = (0..cfg.steepest_instances)
        .into_par_iter()
        .map(|i| {
            let (tm, _) = instance(cfg.seed ^ 0x5eed, i);
            let mut r = rng::derived(cfg.seed, (cfg.instances + i) as u64);
            let w: Vec<f64> = (0..tm.dim()).map(|_| r.sample(StandardNormal)).collect();
            let best = dot(&w, &steepest_descent_direction(&w, &tm)?.delta);
            let mut violations = 0;
            let mut worst = 0.0f64;
            for _ in 0..cfg.steepest_samples {
                let z = sample_feasible(&tm, &mut r);
                let delta: Vec<f64> = z.iter().zip(tm.anchor()).map(|(a, b)| a - b).collect();
                let excess = dot(&w, &delta) - best;
                worst = worst.max(excess);
                if excess > 1e-12 * (1.0 + best.abs()) {
                    violations += 1;
                }
            }
            Ok((violations, worst))
        })
        .collect::<CliResult<_>>()?;
    let violations: usize = per.iter().map(|p| p.0).sum();
    let worst = per.iter().map(|p| p.1).fold(0.0, f64::max);
    let samples = cfg.steepest_instances * cfg.steepest_samples;
    println!("  lp-dominance: {violations} of {samples} sampled directions beat the steepest step, worst excess {worst:.2e}");
    Ok(row("lp-dominance", violations == 0, samples, worst))
}

fn sparsity(cfg: &VerifyConfig) -> CliResult<CheckRow> {
    let closed = expected_sparsity_closed_form(12.0, 3024)?;
    let (mc, se) = monte_carlo_sparsity(12.0, 3024, cfg.mc_samples, &mut rng::seeded(cfg.seed))?;
    let bound = expected_sparsity_lower_bound(12.0);
    let z = (mc - closed).abs() / se;
    println!(
        "  sparsity: Monte Carlo mean {mc:.4} ± {se:.4} vs {REPORTED_SPARSITY} (closed form {closed:.6}, {z:.2} stderr, bound {bound})"
    );
    let pass = (closed - REPORTED_SPARSITY).abs() <= 0.01 && z <= 3.0 && closed >= bound;
    Ok(row("sparsity", pass, cfg.mc_samples, z))
}

fn irwin_hall() -> CliResult<CheckRow> {
    let mut worst = 0.0f64;
    let mut count = 0;
    for &eps in &[0.5, 1.0, 2.5, 5.0, 7.25, 12.0, 15.5, 20.0] {
        for &d in &[41usize, 100, 500, 1000, 3024, 4000] {
            if eps > (d as f64 - 1.0) / 2.0 {
                continue;
            }
            let a = expected_sparsity_closed_form(eps, d)?;
            worst = worst.max((a - expected_sparsity_by_recurrence(eps, d)).abs());
            count += 1;
        }
    }
    println!(
        "  irwin-hall: closed form vs recurrence on {count} (eps, d) pairs, worst {worst:.2e}"
    );
    Ok(row("irwin-hall", worst <= 1e-9, count, worst))
}

fn gradients(cfg: &VerifyConfig) -> CliResult<CheckRow> {
    let mut r = rng::seeded(cfg.seed);
    let (d, k) = (48, 10);
    let w = (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let b = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
    let linear = LinearSoftmaxModel::new(k, d, w, b)?;
    let mlp = MlpModel::new(&[d, 24, 16, k], &mut r)?;
    let models: [&dyn LogitsOracle; 2] = [&linear, &mlp];
    let mut worst = 0.0f64;
    let mut count = 0;
    for model in models {
        for point in 0..cfg.grad_points {
            let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let y = point % k;
            let t = (y + 1 + r.random_range(0..k - 1)) % k;
            for loss in [
                Loss::CrossEntropy,
                Loss::TargetedDlr { target: t },
                Loss::Margin,
            ] {
                let (_, g) = loss_and_grad(model, &x, y, loss)?;
                worst = worst.max(rel_l2(&g, &finite_diff_grad(model, &x, y, loss, 1e-6)?));
                count += 1;
            }
        }
    }
    println!(
        "  gradients: {count} (model, loss, point) checks, worst relative l2 error {worst:.2e}"
    );
    Ok(row("gradients", worst <= 1e-5, count, worst))
}

/// Runs every check; `Invariant` if any fails.
pub fn run(cfg: &VerifyConfig, inject_bug: bool) -> CliResult<Vec<CheckRow>> {
    // the negative control moves the multiplier off its optimum
    let shift = if inject_bug { 1e-3 } else { 0.0 };
    let start = Instant::now();
    let mut rows = Vec::new();
    rows.extend(projection_checks(cfg, shift)?);
    rows.push(lp_dominance(cfg)?);
    rows.push(sparsity(cfg)?);
    rows.push(irwin_hall()?);
    rows.push(gradients(cfg)?);
    for r in &rows {
        println!(
            "check {:<13} {}",
            r.check,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "verify: {}/{} checks passed in {:.1}s",
        rows.iter().filter(|r| r.pass).count(),
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(out) = &cfg.out {
        ConfigFile {
            verify: Some(cfg.clone()),
            ..Default::default()
        }
        .write_to(out)?;
        write_csv(&out.join("verify.csv"), &rows)?;
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.check.as_str())
        .collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::Invariant(format!(
            "oracle checks failed: {}",
            failed.join(", ")
        )))
    }
}
