//! l1 Square Attack: greedy random search over square-window updates.
//!
//! Each proposal moves the perturbation mass of one random `w × w` window
//! (per channel) into another, adds a signed pyramid bump, hands any unused
//! budget to the new window, upscales the whole perturbation by 3 and projects
//! back onto `S`. A proposal is kept only if it strictly lowers the margin.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apgd::AttackResult;
use crate::data::ImageShape;
use crate::error::{check_len, Error, Result};
use crate::geometry::{l1_distance, project_box_l1, ThreatModel};
use crate::models::{margin_loss, LogitsOracle};
use crate::oracles::sample_feasible;

/// Query fractions at which the window area fraction `p` halves.
pub const HALVING_POINTS: [f64; 4] = [0.05, 0.2, 0.5, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareConfig {
    pub n_queries: usize,
    /// Initial fraction of the image area covered by a window.
    pub p_init: f64,
    pub upscale: f64,
}

impl Default for SquareConfig {
    fn default() -> Self {
        Self {
            n_queries: 5000,
            p_init: 0.8,
            upscale: 3.0,
        }
    }
}

impl SquareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries < 1 {
            return Err(Error::Parameter("n_queries must be at least 1".into()));
        }
        if !(self.p_init > 0.0 && self.p_init <= 1.0) {
            return Err(Error::Parameter(format!(
                "p_init must lie in (0, 1], got {}",
                self.p_init
            )));
        }
        if !(self.upscale > 0.0 && self.upscale.is_finite()) {
            return Err(Error::Parameter("upscale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SquareState {
    /// Current perturbation `x_cur - x`.
    pub nu: Vec<f64>,
    /// Margin at `x + nu`.
    pub loss_cur: f64,
    pub queries_used: usize,
    pub window: usize,
}

/// Window side for query `query_index` out of `n_queries`.
pub fn window_schedule(p_init: f64, query_index: usize, n_queries: usize, h: usize) -> usize {
    let frac = query_index as f64 / n_queries.max(1) as f64;
    let halvings = HALVING_POINTS.iter().filter(|&&t| frac >= t).count();
    let p = p_init / f64::from(1u32 << halvings);
    let side = (p * (h * h) as f64).sqrt().round() as usize;
    side.clamp(1, h.max(1))
}

/// Centrally peaked `w × w` bump (row-major) with unit l1 mass.
pub fn pyramid_eta(w: usize) -> Vec<f64> {
    let mut eta = Vec::with_capacity(w * w);
    for i in 0..w {
        for j in 0..w {
            let m = i.min(j).min(w - 1 - i).min(w - 1 - j);
            eta.push(
                (0..=m)
                    .map(|k| 1.0 / ((k + 1) * (k + 1)) as f64)
                    .sum::<f64>(),
            );
        }
    }
    let total: f64 = eta.iter().sum();
    eta.iter_mut().for_each(|v| *v /= total);
    eta
}

fn window_indices(shape: &ImageShape, r: usize, s: usize, w: usize, ch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(w * w);
    for i in 0..w {
        for j in 0..w {
            out.push(shape.index(r + i, s + j, ch));
        }
    }
    out
}

/// Candidate point `z ∈ S`, or `None` when the proposal degenerates.
pub fn square_proposal<R: Rng + ?Sized>(
    nu: &[f64],
    tm: &ThreatModel,
    shape: &ImageShape,
    w: usize,
    upscale: f64,
    rng: &mut R,
) -> Result<Option<Vec<f64>>> {
    check_len(shape.len(), nu.len())?;
    check_len(shape.len(), tm.dim())?;
    let (h, c) = (shape.side, shape.channels);
    if w == 0 || w > h {
        return Err(Error::Parameter(format!("window side {w} outside 1..={h}")));
    }
    let (r1, s1) = (rng.random_range(0..=h - w), rng.random_range(0..=h - w));
    let (r2, s2) = (rng.random_range(0..=h - w), rng.random_range(0..=h - w));
    let unused = (tm.eps() - nu.iter().map(|v| v.abs()).sum::<f64>()).max(0.0);
    let eta = pyramid_eta(w);

    let mut nu = nu.to_vec();
    for ch in 0..c {
        let w1 = window_indices(shape, r1, s1, w, ch);
        let w2 = window_indices(shape, r2, s2, w, ch);
        let n1: f64 = w1.iter().map(|&i| nu[i].abs()).sum();
        let mut rho = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let temp = |rho: f64| -> Vec<f64> {
            eta.iter()
                .zip(&w1)
                .map(|(e, &i)| rho * e + if n1 > 0.0 { nu[i] / n1 } else { 0.0 })
                .collect()
        };
        let mut nu_temp = temp(rho);
        let mut norm: f64 = nu_temp.iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            rho = -rho;
            nu_temp = temp(rho);
            norm = nu_temp.iter().map(|v| v.abs()).sum();
            if norm == 0.0 {
                return Ok(None);
            }
        }

        let mut in_union = w2.clone();
        in_union.extend(w1.iter().filter(|i| !w2.contains(i)));
        let avail = in_union.iter().map(|&i| nu[i].abs()).sum::<f64>() + unused / c as f64;

        for &i in &w2 {
            nu[i] = 0.0;
        }
        for (v, &i) in nu_temp.iter().zip(&w1) {
            nu[i] = v / norm * avail;
        }
    }

    let x = tm.anchor();
    let u: Vec<f64> = x.iter().zip(&nu).map(|(a, n)| a + upscale * n).collect();
    Ok(Some(project_box_l1(&u, tm)?))
}

fn check_shape(shape: &ImageShape, x: &[f64]) -> Result<()> {
    check_len(shape.len(), x.len())
}

/// Score-based l1 Square Attack on the margin loss.
///
/// `loss_best` and `loss_trace` hold margins here (lower is better); every
/// model evaluation, including the initial one, counts as a query.
pub fn square_attack<M, R>(
    model: &M,
    x: &[f64],
    y: usize,
    eps: f64,
    shape: &ImageShape,
    cfg: &SquareConfig,
    rng: &mut R,
) -> Result<AttackResult>
where
    M: LogitsOracle + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    check_shape(shape, x)?;
    check_len(model.input_dim(), x.len())?;
    let tm = ThreatModel::new(x.to_vec(), eps)?;
    let mut state = SquareState {
        nu: vec![0.0; x.len()],
        loss_cur: margin_loss(&model.logits(x), y),
        queries_used: 1,
        window: window_schedule(cfg.p_init, 0, cfg.n_queries, shape.side),
    };
    let mut x_cur = x.to_vec();
    let mut loss_trace = vec![state.loss_cur];
    let mut success_trace = vec![state.loss_cur <= 0.0];
    let mut skips = 0;

    while state.loss_cur > 0.0 && state.queries_used < cfg.n_queries {
        state.window = window_schedule(cfg.p_init, state.queries_used, cfg.n_queries, shape.side);
        let Some(z) = square_proposal(&state.nu, &tm, shape, state.window, cfg.upscale, rng)?
        else {
            skips += 1;
            if skips > cfg.n_queries {
                break;
            }
            continue;
        };
        if !tm.contains(&z) {
            return Err(Error::Invariant(format!(
                "square proposal left the threat set (l1 = {})",
                l1_distance(&z, x)
            )));
        }
        let margin = margin_loss(&model.logits(&z), y);
        state.queries_used += 1;
        if margin < state.loss_cur {
            state.loss_cur = margin;
            state.nu = z.iter().zip(x).map(|(a, b)| a - b).collect();
            x_cur = z;
        }
        loss_trace.push(state.loss_cur);
        success_trace.push(state.loss_cur <= 0.0);
    }

    let success = state.loss_cur <= 0.0;
    Ok(AttackResult {
        l1_norm: l1_distance(&x_cur, x),
        adversarial: success.then(|| x_cur.clone()),
        x_adv: x_cur,
        loss_best: state.loss_cur,
        success,
        iterations_used: state.queries_used,
        loss_trace,
        success_trace,
        gradient_evals: 0,
        forward_evals: state.queries_used,
        zero_grad_steps: 0,
    })
}

/// Same-budget baseline: evaluate the clean point, then independent random
/// feasible points, keeping the lowest margin.
pub fn random_search_baseline<M, R>(
    model: &M,
    x: &[f64],
    y: usize,
    eps: f64,
    n_queries: usize,
    rng: &mut R,
) -> Result<AttackResult>
where
    M: LogitsOracle + ?Sized,
    R: Rng + ?Sized,
{
    if n_queries < 1 {
        return Err(Error::Parameter("n_queries must be at least 1".into()));
    }
    check_len(model.input_dim(), x.len())?;
    let tm = ThreatModel::new(x.to_vec(), eps)?;
    let mut best = x.to_vec();
    let mut best_margin = margin_loss(&model.logits(x), y);
    let mut loss_trace = vec![best_margin];
    let mut queries = 1;
    while best_margin > 0.0 && queries < n_queries {
        let z = sample_feasible(&tm, rng);
        let m = margin_loss(&model.logits(&z), y);
        queries += 1;
        if m < best_margin {
            best_margin = m;
            best = z;
        }
        loss_trace.push(best_margin);
    }
    let success = best_margin <= 0.0;
    Ok(AttackResult {
        l1_norm: l1_distance(&best, x),
        adversarial: success.then(|| best.clone()),
        x_adv: best,
        loss_best: best_margin,
        success,
        iterations_used: queries,
        success_trace: loss_trace.iter().map(|&m| m <= 0.0).collect(),
        loss_trace,
        gradient_evals: 0,
        forward_evals: queries,
        zero_grad_steps: 0,
    })
}
