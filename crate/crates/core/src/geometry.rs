//! Projections onto `S = B1(x, eps) ∩ [0,1]^d` and the box-constrained
//! steepest ascent step.
//!
//! Everything here is a pure function of its arguments. Vectors are plain
//! `f64` slices; the only validated carrier is [`ThreatModel`], which pins the
//! anchor point and the l1 radius.
//!
//! Sorting is always done with ties broken by ascending coordinate index so
//! that results are reproducible bit for bit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::error::{check_len, Error, Result};

/// Slack allowed on the l1 budget after a projection.
pub const BUDGET_TOL: f64 = 1e-9;

/// `sign(t)` with `sign(0) = 0`.
#[inline]
pub fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum()
}

/// Number of coordinates in which `a` and `b` differ.
pub fn l0_distance(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(p, q)| p != q).count()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub fn in_box(z: &[f64]) -> bool {
    z.iter().all(|&v| (0.0..=1.0).contains(&v))
}

/// The feasible set `B1(anchor, eps) ∩ [0,1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    anchor: Vec<f64>,
    eps: f64,
}

impl ThreatModel {
    pub fn new(anchor: Vec<f64>, eps: f64) -> Result<Self> {
        if anchor.is_empty() {
            return Err(Error::Parameter(
                "anchor must have at least one coordinate".into(),
            ));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Parameter(format!(
                "radius must be positive and finite, got {eps}"
            )));
        }
        if let Some((i, v)) = anchor
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::Invariant(format!(
                "anchor[{i}] = {v} lies outside [0, 1]"
            )));
        }
        Ok(Self { anchor, eps })
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    /// Same anchor, different radius.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.anchor.clone(), eps)
    }

    /// Membership test with `BUDGET_TOL` slack on the l1 budget; the box is exact.
    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim() && in_box(z) && l1_distance(z, &self.anchor) <= self.eps + BUDGET_TOL
    }
}

/// Componentwise clamp to `[0, 1]`.
pub fn clip_box(u: &[f64]) -> Vec<f64> {
    u.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Shrinks `z - x` towards zero if rounding pushed it past the l1 budget.
fn enforce_budget(z: &mut [f64], x: &[f64], eps: f64) {
    let l1 = l1_distance(z, x);
    if l1 > eps {
        let scale = eps / l1;
        for (zi, xi) in z.iter_mut().zip(x) {
            *zi = xi + (*zi - xi) * scale;
        }
    }
}

/// Euclidean projection onto the l1 ball `B1(x, eps)` (no box).
pub fn project_l1_ball(u: &[f64], x: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_len(x.len(), u.len())?;
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!(
            "radius must be positive, got {eps}"
        )));
    }
    let mut mags: Vec<f64> = u.iter().zip(x).map(|(a, b)| (a - b).abs()).collect();
    if mags.iter().sum::<f64>() <= eps {
        return Ok(u.to_vec());
    }
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumsum += m;
        let candidate = (cumsum - eps) / (j + 1) as f64;
        if m > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    let mut z: Vec<f64> = u
        .iter()
        .zip(x)
        .map(|(&ui, &xi)| xi + sign(ui - xi) * ((ui - xi).abs() - theta).max(0.0))
        .collect();
    enforce_budget(&mut z, x, eps);
    Ok(z)
}

/// Exact Euclidean projection onto `S = B1(x, eps) ∩ [0,1]^d` in expected `O(d)`.
///
/// With `a_i = |u_i - x_i|` and the per-coordinate room
/// `γ_i = max{-x_i sign(u_i - x_i), (1 - x_i) sign(u_i - x_i)}`, the solution is
/// `z_i = x_i + sign(u_i - x_i) · max{0, min{a_i - λ, γ_i}}` where `λ = 0` if the
/// box-clipped step already fits the budget and otherwise solves
/// `Σ max{0, min{a_i - λ, γ_i}} = eps`. The left-hand side is piecewise linear
/// in `λ` with kinks at `a_i - γ_i` (coordinate leaves the box face) and `a_i`
/// (coordinate returns to the anchor), and a randomized bracket search over
/// those breakpoints locates `λ` exactly.
pub fn project_box_l1(u: &[f64], tm: &ThreatModel) -> Result<Vec<f64>> {
    project_box_l1_shifted(u, tm, 0.0)
}

/// [`project_box_l1`] with the optimal multiplier shifted by `lambda_shift`.
///
/// Only exists so the verification suite can check that it detects a wrong
/// projection.
#[doc(hidden)]
pub fn project_box_l1_shifted(u: &[f64], tm: &ThreatModel, lambda_shift: f64) -> Result<Vec<f64>> {
    let x = tm.anchor();
    let eps = tm.eps();
    check_len(x.len(), u.len())?;

    let parts = |ui: f64, xi: f64| {
        let s = sign(ui - xi);
        (s, (ui - xi).abs(), (-xi * s).max((1.0 - xi) * s))
    };
    let clipped_sum: f64 = u
        .iter()
        .zip(x)
        .map(|(&ui, &xi)| {
            let (_, a, g) = parts(ui, xi);
            a.min(g)
        })
        .sum();

    let lambda = if clipped_sum <= eps {
        0.0
    } else {
        solve_multiplier(
            u.len(),
            |i| {
                let (_, a, g) = parts(u[i], x[i]);
                (a, g)
            },
            eps,
        )
    };
    let lambda = (lambda + lambda_shift).max(0.0);

    let mut l1 = 0.0;
    let mut z: Vec<f64> = u
        .iter()
        .zip(x)
        .map(|(&ui, &xi)| {
            let (s, a, g) = parts(ui, xi);
            let step = (a - lambda).min(g).max(0.0);
            l1 += step;
            xi + s * step
        })
        .collect();
    if l1 > eps {
        enforce_budget(&mut z, x, eps);
    }
    Ok(z)
}

/// Bracket `[lo, hi]` around the multiplier, with the contribution of every
/// coordinate that has no kink strictly inside it folded into
/// `saturated + Σ (a_i - λ)`.
struct Bracket {
    lo: f64,
    hi: f64,
    saturated: f64,
    linear_sum: f64,
    linear_count: usize,
}

impl Bracket {
    fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            saturated: 0.0,
            linear_sum: 0.0,
            linear_count: 0,
        }
    }

    /// Folds `(a, γ)` into the aggregate unless it has a kink inside the bracket.
    fn keep(&mut self, (a, g): (f64, f64)) -> bool {
        let enter = a - g;
        if a <= self.lo {
            false
        } else if enter >= self.hi {
            self.saturated += g;
            false
        } else if enter <= self.lo && a >= self.hi {
            self.linear_sum += a;
            self.linear_count += 1;
            false
        } else {
            true
        }
    }

    fn value(&self, open: &[(f64, f64)], lambda: f64) -> f64 {
        self.saturated + self.linear_sum - self.linear_count as f64 * lambda
            + open.iter().map(|&k| kink_value(k, lambda)).sum::<f64>()
    }
}

fn kink_value((a, g): (f64, f64), lambda: f64) -> f64 {
    (a - lambda).min(g).max(0.0)
}

const SAMPLE_SIZE: usize = 1024;
const SAMPLE_SLACK: usize = 64;

/// Initial bracket from the root of a strided subsample's rescaled problem,
/// widened by `SAMPLE_SLACK` kinks on each side and checked on the full data.
fn sampled_bracket(d: usize, kink: &impl Fn(usize) -> (f64, f64), eps: f64) -> (f64, f64) {
    let sample: Vec<(f64, f64)> = (0..SAMPLE_SIZE)
        .map(|j| kink(j * d / SAMPLE_SIZE))
        .collect();
    let scaled_eps = eps * SAMPLE_SIZE as f64 / d as f64;
    if sample.iter().map(|&k| kink_value(k, 0.0)).sum::<f64>() <= scaled_eps {
        return (0.0, f64::INFINITY);
    }
    let guess = narrow(sample.clone(), Bracket::new(0.0, f64::INFINITY), scaled_eps);
    let mut kinks: Vec<f64> = sample
        .iter()
        .flat_map(|&(a, g)| [a - g, a])
        .filter(|&k| k > 0.0)
        .collect();
    kinks.sort_unstable_by(f64::total_cmp);
    let at = kinks.partition_point(|&k| k < guess);
    let lo = if at > SAMPLE_SLACK {
        kinks[at - SAMPLE_SLACK]
    } else {
        0.0
    };
    let hi = kinks
        .get(at + SAMPLE_SLACK)
        .copied()
        .unwrap_or(f64::INFINITY);
    let (mut f_lo, mut f_hi) = (0.0, 0.0);
    for i in 0..d {
        let k = kink(i);
        f_lo += kink_value(k, lo);
        f_hi += kink_value(k, hi);
    }
    if !(f_lo > eps) {
        (0.0, lo)
    } else if f_hi > eps {
        (hi, f64::INFINITY)
    } else {
        (lo, hi)
    }
}

/// Root of `f(λ) = Σ max{0, min{a_i - λ, γ_i}} = eps`, given `f(0) > eps`,
/// where `kink(i) = (a_i, γ_i)`.
///
/// `f` is continuous, nonincreasing and piecewise linear with kinks at
/// `a_i - γ_i` (coordinate leaves the box face) and `a_i` (back at the
/// anchor). A bracket with `f(lo) > eps >= f(hi)` is narrowed by evaluating
/// `f` at random kinks inside it, quickselect style. Expected `O(d)`; the
/// pivot sequence is fixed, so results are deterministic.
fn solve_multiplier(d: usize, kink: impl Fn(usize) -> (f64, f64), eps: f64) -> f64 {
    let (lo, hi) = if d > 4 * SAMPLE_SIZE {
        sampled_bracket(d, &kink, eps)
    } else {
        (0.0, f64::INFINITY)
    };
    let mut bracket = Bracket::new(lo, hi);
    let open = (0..d).map(kink).filter(|&k| bracket.keep(k)).collect();
    narrow(open, bracket, eps)
}

fn narrow(mut open: Vec<(f64, f64)>, mut bracket: Bracket, eps: f64) -> f64 {
    open.retain(|&k| bracket.keep(k));
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    while !open.is_empty() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let (a, g) = open[(state % open.len() as u64) as usize];
        let (lo, hi) = (bracket.lo, bracket.hi);
        let enter_inside = a - g > lo && a - g < hi;
        let leave_inside = a > lo && a < hi;
        let pivot = if enter_inside && (!leave_inside || state & (1 << 40) == 0) {
            a - g
        } else {
            a
        };
        if bracket.value(&open, pivot) > eps {
            bracket.lo = pivot;
        } else {
            bracket.hi = pivot;
        }
        open.retain(|&k| bracket.keep(k));
    }
    let Bracket {
        lo,
        hi,
        saturated,
        linear_sum,
        linear_count,
    } = bracket;
    if linear_count == 0 {
        // only reachable through rounding; hi keeps the sum within budget
        return if hi.is_finite() { hi } else { lo };
    }
    ((saturated + linear_sum - eps) / linear_count as f64).clamp(lo, hi)
}

/// `clip_box ∘ project_l1_ball`: the cheap approximation of the exact
/// projection. Always lands in `S`, but generally strictly inside the l1 ball.
pub fn approx_project(u: &[f64], tm: &ThreatModel) -> Result<Vec<f64>> {
    Ok(clip_box(&project_l1_ball(u, tm.anchor(), tm.eps())?))
}

/// Which projection an iterative attack uses after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    #[default]
    Exact,
    Approximate,
}

impl Projection {
    pub fn apply(self, u: &[f64], tm: &ThreatModel) -> Result<Vec<f64>> {
        match self {
            Projection::Exact => project_box_l1(u, tm),
            Projection::Approximate => approx_project(u, tm),
        }
    }
}

/// Maximizer of `<w, δ>` over `δ ∈ S - x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteepestStep {
    pub delta: Vec<f64>,
    /// Position in the `|w|`-descending order at which the budget is used up,
    /// or the number of movable coordinates when the budget saturates the box.
    /// Zero means there is no ascent direction (`w = 0` or every coordinate
    /// with `w_i != 0` sits on the box face it points to).
    pub k: usize,
    pub inner_product: f64,
}

/// Orders indices by `|w|` descending, ties by ascending index.
fn by_magnitude_desc(w: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b))
}

/// Sorts `idx[start..end]` so that it holds, in order, the next largest
/// entries after those already in `idx[..start]`.
fn extend_sorted_prefix<F>(idx: &mut [usize], start: usize, end: usize, cmp: &F)
where
    F: Fn(&usize, &usize) -> Ordering,
{
    let tail = &mut idx[start..];
    let take = end - start;
    if take < tail.len() {
        tail.select_nth_unstable_by(take - 1, cmp);
    }
    tail[..take].sort_unstable_by(cmp);
}

/// Box-aware l1 steepest ascent step: greedily saturates coordinates in
/// order of decreasing `|w_i|`, each up to the box face it moves towards,
/// until the l1 budget is spent.
pub fn steepest_descent_direction(w: &[f64], tm: &ThreatModel) -> Result<SteepestStep> {
    let x = tm.anchor();
    let eps = tm.eps();
    check_len(x.len(), w.len())?;
    let d = w.len();

    let room: Vec<f64> = w
        .iter()
        .zip(x)
        .map(|(&wi, &xi)| {
            let s = sign(wi);
            ((1.0 - xi) * s).max(-xi * s)
        })
        .collect();

    let cmp = by_magnitude_desc(w);
    let mut idx: Vec<usize> = (0..d).collect();
    let mut delta = vec![0.0; d];
    let mut cum = 0.0;
    let mut sorted = 0;
    // Typically only O(eps) coordinates are needed; grow the sorted prefix on demand.
    let mut chunk = (4 * eps.ceil() as usize + 32).min(d);
    while sorted < d {
        let end = (sorted + chunk).min(d);
        extend_sorted_prefix(&mut idx, sorted, end, &cmp);
        for pos in sorted..end {
            let i = idx[pos];
            if w[i] == 0.0 {
                // everything after this has w == 0 as well
                sorted = d;
                break;
            }
            let s = sign(w[i]);
            if cum + room[i] >= eps {
                delta[i] = (eps - cum) * s;
                let inner_product = dot(w, &delta);
                return Ok(SteepestStep {
                    delta,
                    k: pos + 1,
                    inner_product,
                });
            }
            delta[i] = room[i] * s;
            cum += room[i];
        }
        if sorted < d {
            sorted = end;
        }
        chunk *= 2;
    }

    // Budget exceeds the total room: every movable coordinate is saturated.
    let k = room
        .iter()
        .zip(w)
        .filter(|(r, wi)| **r > 0.0 && **wi != 0.0)
        .count();
    let inner_product = dot(w, &delta);
    Ok(SteepestStep {
        delta,
        k,
        inner_product,
    })
}

/// Unit-l1 sign step on the `t` largest-magnitude coordinates of a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SignStep {
    pub direction: Vec<f64>,
    /// Number of nonzero entries; zero flags a gradient that vanishes on the
    /// selected coordinates.
    pub support: usize,
}

/// `h(t) / ||h(t)||_1` where `h(t)_i = sign(g_i)` on the `t` largest `|g_i|`.
pub fn sparse_sign_step(g: &[f64], t: usize) -> Result<SignStep> {
    let d = g.len();
    if t == 0 || t > d {
        return Err(Error::Parameter(format!("sparsity {t} outside 1..={d}")));
    }
    let cmp = by_magnitude_desc(g);
    let mut idx: Vec<usize> = (0..d).collect();
    if t < d {
        idx.select_nth_unstable_by(t - 1, &cmp);
    }
    let chosen = &idx[..t];
    let support = chosen.iter().filter(|&&i| g[i] != 0.0).count();
    let mut direction = vec![0.0; d];
    if support > 0 {
        let w = 1.0 / support as f64;
        for &i in chosen {
            direction[i] = sign(g[i]) * w;
        }
    }
    Ok(SignStep { direction, support })
}

/// Terms `(eps-k)^n / (k! (n-k)!)`, `k = 0..=min(⌊eps⌋, n)`, of the
/// alternating Irwin-Hall series, kept in double-double precision and
/// advanced one `n` at a time. The terms grow to about `e^{2 eps}` while the
/// series stays in `[0, 1]`, so plain doubles lose all digits near `eps = 20`.
struct IrwinHallTerms {
    eps: f64,
    n: usize,
    terms: Vec<TwoFloat>,
}

impl IrwinHallTerms {
    fn at(eps: f64, n: usize) -> Self {
        let top = (eps.floor() as usize).min(n);
        let terms = (0..=top).map(|k| Self::direct(eps, n, k)).collect();
        Self { eps, n, terms }
    }

    /// `(eps-k)^n / (k! (n-k)!)` with the factors interleaved to stay in range.
    fn direct(eps: f64, n: usize, k: usize) -> TwoFloat {
        let base = TwoFloat::from(eps) - k as f64;
        let mut t = TwoFloat::from(1.0);
        for j in 1..=n {
            t *= base;
            if j <= k {
                t /= j as f64;
            }
            if j <= n - k {
                t /= j as f64;
            }
        }
        t
    }

    fn advance(&mut self) {
        self.n += 1;
        let n = self.n;
        for (k, t) in self.terms.iter_mut().enumerate() {
            *t = *t * (TwoFloat::from(self.eps) - k as f64) / (n - k) as f64;
        }
        let k = self.terms.len();
        if k <= n && (k as f64) <= self.eps {
            self.terms.push(Self::direct(self.eps, n, k));
        }
    }

    fn value(&self) -> TwoFloat {
        self.terms
            .iter()
            .enumerate()
            .fold(TwoFloat::from(0.0), |acc, (k, &t)| {
                if k % 2 == 0 {
                    acc + t
                } else {
                    acc - t
                }
            })
    }
}

/// `P(U_1 + ... + U_n <= eps)` for i.i.d. `U_i ~ U[0, 1]`.
pub fn irwin_hall_cdf(eps: f64, n: usize) -> f64 {
    if n == 0 || eps >= n as f64 {
        return 1.0;
    }
    if eps <= 0.0 {
        return 0.0;
    }
    f64::from(IrwinHallTerms::at(eps, n).value()).clamp(0.0, 1.0)
}

/// Expected `||δ*||_0` of the steepest ascent step when `x ~ U([0,1]^d)` and
/// every gradient entry is nonzero:
///
/// `⌊eps+1⌋ + Σ_{m=⌊eps⌋+2}^{d} Σ_{k=0}^{⌊eps⌋} (-1)^k (eps-k)^{m-1} / (k! (m-1-k)!)`.
///
/// Valid for `0 < eps <= (d-1)/2`.
pub fn expected_sparsity_closed_form(eps: f64, d: usize) -> Result<f64> {
    if d < 2 || !(eps > 0.0) || eps > (d as f64 - 1.0) / 2.0 {
        return Err(Error::Parameter(format!(
            "expected sparsity needs 0 < eps <= (d-1)/2, got eps={eps}, d={d}"
        )));
    }
    let floor = eps.floor() as usize;
    let mut total = TwoFloat::from((eps + 1.0).floor());
    let mut series = IrwinHallTerms::at(eps, floor + 1);
    for m in (floor + 2)..=d {
        let p = series.value();
        if f64::from(p).abs() < 1e-300 {
            // the tail is monotonically decreasing and has underflowed
            break;
        }
        total += p;
        if m < d {
            series.advance();
        }
    }
    Ok(f64::from(total))
}

/// Lower bound `(⌊3 eps⌋ + 1) / 2` on the expected sparsity.
pub fn expected_sparsity_lower_bound(eps: f64) -> f64 {
    ((3.0 * eps).floor() + 1.0) / 2.0
}
