//! Independent reference computations used to validate the fast paths in
//! [`crate::geometry`]: Dykstra's algorithm for the projection, exhaustive
//! grid search for the steepest step, Monte Carlo for the expected sparsity
//! and a positive-weight recurrence for the Irwin-Hall CDF.
//!
//! None of these share code with the routine they check, apart from the plain
//! l1-ball projection that Dykstra alternates with the box clamp.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::geometry::{
    clip_box, dot, project_box_l1, project_l1_ball, steepest_descent_direction, ThreatModel,
};
use crate::rng;

pub const DYKSTRA_TOL: f64 = 1e-10;
pub const DYKSTRA_MAX_ITER: usize = 50_000;

/// Result of an iterative or sampled oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport<T> {
    pub value: T,
    pub iterations: usize,
    /// Convergence gap: final l∞ change for Dykstra, grid-spacing bound for the grid search.
    pub residual: f64,
}

impl<T> OracleReport<T> {
    pub fn converged(&self, tol: f64) -> bool {
        self.residual < tol
    }
}

/// Projection onto `B1(x, eps) ∩ [0,1]^d` by Dykstra's alternating projections.
///
/// Stops when, in l∞, both the ball iterate and the box iterate moved by less
/// than `tol` and they are within `tol` of each other. The box iterate alone
/// can repeat while the correction terms are still changing, so its
/// movement is not a sufficient test. A report with `residual >= tol` means
/// `max_iter` was exhausted.
pub fn dykstra_project(
    u: &[f64],
    tm: &ThreatModel,
    tol: f64,
    max_iter: usize,
) -> Result<OracleReport<Vec<f64>>> {
    check_len(tm.dim(), u.len())?;
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let d = u.len();
    let mut cur = u.to_vec();
    let mut ball_prev = vec![f64::INFINITY; d];
    let mut p = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter.max(1) {
        for i in 0..d {
            buf[i] = cur[i] + p[i];
        }
        let y = project_l1_ball(&buf, tm.anchor(), tm.eps())?;
        for i in 0..d {
            p[i] = buf[i] - y[i];
            buf[i] = y[i] + q[i];
        }
        let next = clip_box(&buf);
        residual = 0.0;
        for i in 0..d {
            q[i] = buf[i] - next[i];
            let moved = (next[i] - cur[i]).abs().max((y[i] - ball_prev[i]).abs());
            residual = residual.max(moved).max((next[i] - y[i]).abs());
        }
        cur = next;
        ball_prev = y;
        if residual < tol {
            return Ok(OracleReport {
                value: cur,
                iterations: it,
                residual,
            });
        }
    }
    Ok(OracleReport {
        value: cur,
        iterations: max_iter,
        residual,
    })
}

/// A random point of `S` with random sparsity, signs and l1 mass.
///
/// Draws a support size uniformly in `1..=d`, a uniformly random support, a
/// random sign per coordinate and flat-Dirichlet magnitudes scaled to a
/// uniform fraction of `eps`, then projects onto `S` to absorb box violations.
pub fn sample_feasible<R: Rng + ?Sized>(tm: &ThreatModel, rng: &mut R) -> Vec<f64> {
    let d = tm.dim();
    let support = rng.random_range(1..=d);
    let chosen = sample_indices(rng, d, support);
    let weights: Vec<f64> = (0..support).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = weights.iter().sum();
    let mass = rng.random::<f64>() * tm.eps();
    let mut u = tm.anchor().to_vec();
    for (i, w) in chosen.iter().zip(&weights) {
        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        u[i] += s * mass * w / total;
    }
    project_box_l1(&u, tm).expect("lengths agree by construction")
}

/// Sample mean and standard error of `||δ*||_0` for `x ~ U([0,1]^d)`,
/// `w ~ N(0, I)`.
pub fn monte_carlo_sparsity<R: Rng + ?Sized>(
    eps: f64,
    d: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_samples < 100 {
        return Err(Error::Parameter(format!(
            "need at least 100 samples, got {n_samples}"
        )));
    }
    if d == 0 || !(eps > 0.0) {
        return Err(Error::Parameter(format!("invalid eps={eps}, d={d}")));
    }
    const CHUNK: usize = 1000;
    let base: u64 = rng.random();
    let n_chunks = n_samples.div_ceil(CHUNK);
    let partial: Vec<Result<(f64, f64)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::derived(base, c as u64);
            let count = CHUNK.min(n_samples - c * CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            let mut x = vec![0.0; d];
            let mut w = vec![0.0; d];
            for _ in 0..count {
                x.iter_mut().for_each(|v| *v = r.random::<f64>());
                w.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
                let tm = ThreatModel::new(x.clone(), eps)?;
                let step = steepest_descent_direction(&w, &tm)?;
                let nnz = step.delta.iter().filter(|v| **v != 0.0).count() as f64;
                s1 += nnz;
                s2 += nnz * nnz;
            }
            Ok((s1, s2))
        })
        .collect();
    let (mut s1, mut s2) = (0.0, 0.0);
    for p in partial {
        let (a, b) = p?;
        s1 += a;
        s2 += b;
    }
    let n = n_samples as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Best point of `<w, δ>` over a lattice of spacing `1/resolution` inside
/// `S - x`.
///
/// Rounding the true maximizer towards zero lands on a feasible lattice
/// point, so `value <= <w, δ*> <= value + residual` with
/// `residual = ||w||_1 / resolution`.
pub fn grid_steepest_oracle(
    w: &[f64],
    tm: &ThreatModel,
    resolution: usize,
) -> Result<OracleReport<Vec<f64>>> {
    const MAX_POINTS: f64 = 5e7;
    let x = tm.anchor();
    check_len(x.len(), w.len())?;
    let d = w.len();
    if d > 4 {
        return Err(Error::Unsupported(format!(
            "grid search limited to d <= 4, got {d}"
        )));
    }
    if resolution == 0 {
        return Err(Error::Parameter("resolution must be positive".into()));
    }
    let h = 1.0 / resolution as f64;
    // integer lattice bounds per coordinate
    let ranges: Vec<(i64, i64)> = x
        .iter()
        .map(|&xi| ((-xi / h).ceil() as i64, ((1.0 - xi) / h).floor() as i64))
        .collect();
    let points: f64 = ranges.iter().map(|(lo, hi)| (hi - lo + 1) as f64).product();
    if points > MAX_POINTS {
        return Err(Error::Unsupported(format!(
            "grid of {points:.0} points exceeds the cost guard"
        )));
    }

    let mut counter: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    let mut delta = vec![0.0; d];
    let mut best = vec![0.0; d];
    let mut best_val = 0.0;
    let mut visited = 0usize;
    loop {
        visited += 1;
        for i in 0..d {
            delta[i] = counter[i] as f64 * h;
        }
        if delta.iter().map(|v| v.abs()).sum::<f64>() <= tm.eps() {
            let v = dot(w, &delta);
            if v > best_val {
                best_val = v;
                best.copy_from_slice(&delta);
            }
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == d {
                let residual = w.iter().map(|v| v.abs()).sum::<f64>() * h;
                return Ok(OracleReport {
                    value: best,
                    iterations: visited,
                    residual,
                });
            }
            if counter[i] < ranges[i].1 {
                counter[i] += 1;
                break;
            }
            counter[i] = ranges[i].0;
            i += 1;
        }
    }
}

/// `P(U_1 + ... + U_n <= eps)` for `n = 0..=n_max` via the recurrence
/// `F_n(t) = (t F_{n-1}(t) + (n - t) F_{n-1}(t - 1)) / n`.
///
/// All weights are nonnegative on `0 <= t <= n`, so there is no cancellation.
pub fn irwin_hall_cdf_table(eps: f64, n_max: usize) -> Vec<f64> {
    // F_{n}(eps - j) for j = 0..=shifts; arguments below zero give 0
    let shifts = eps.max(0.0).floor() as usize + 1;
    let mut cur: Vec<f64> = (0..=shifts)
        .map(|j| if eps - j as f64 >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(cur[0]);
    for n in 1..=n_max {
        let nf = n as f64;
        let next: Vec<f64> = (0..=shifts)
            .map(|j| {
                let t = eps - j as f64;
                if t <= 0.0 {
                    0.0
                } else if t >= nf {
                    1.0
                } else {
                    let lower = if j + 1 <= shifts { cur[j + 1] } else { 0.0 };
                    (t * cur[j] + (nf - t) * lower) / nf
                }
            })
            .collect();
        cur = next;
        out.push(cur[0]);
    }
    out
}

/// `E||δ*||_0 = Σ_{m=1}^{d} P(U_1 + ... + U_{m-1} <= eps)` from the recurrence table.
pub fn expected_sparsity_by_recurrence(eps: f64, d: usize) -> f64 {
    irwin_hall_cdf_table(eps, d.saturating_sub(1)).iter().sum()
}
