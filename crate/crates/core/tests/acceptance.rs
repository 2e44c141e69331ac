//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. With `BXL1_ACCEPTANCE_STRICT` set, exits nonzero
//! if any criterion fails.
//!
//! Run alone with `cargo test -p bxl1-core --test acceptance`.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use bxl1_core::advtrain::{adv_train, AtConfig};
use bxl1_core::apgd::{
    apgd_restarts, apgd_single, ApgdConfig, ClassifierObjective, Evaluation, Objective,
};
use bxl1_core::data::{toy_cifar, LabeledDataset};
use bxl1_core::ensemble::{
    autoattack, evaluate_stages, slide_attack, EnsembleConfig, SlideConfig, Stage,
};
use bxl1_core::geometry::{
    approx_project, dot, expected_sparsity_closed_form, expected_sparsity_lower_bound, in_box,
    l1_distance, project_box_l1, project_l1_ball, steepest_descent_direction,
};
use bxl1_core::models::{
    accuracy, finite_diff_grad, loss_and_grad, margin_loss, train_plain, LinearSoftmaxModel,
    LogitsOracle, Loss, MlpModel, TrainConfig,
};
use bxl1_core::oracles::{
    dykstra_project, expected_sparsity_by_recurrence, grid_steepest_oracle, monte_carlo_sparsity,
    sample_feasible,
};
use bxl1_core::rng;
use bxl1_core::square::{random_search_baseline, square_attack, SquareConfig};
use bxl1_core::{Projection, Result, ThreatModel};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
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
    let den = b.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
    num / den
}

/// One random projection instance: anchor, point to project, radius.
struct Instance {
    tm: ThreatModel,
    u: Vec<f64>,
}

fn projection_instances(n: usize, seed: u64) -> Vec<Instance> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|i| {
            let d = r.random_range(1..=128);
            let eps = [0.1, 1.0, 12.0][i % 3];
            let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let u: Vec<f64> = if (i / 3) % 2 == 0 {
                x.iter()
                    .map(|v| v + r.sample::<f64, _>(StandardNormal))
                    .collect()
            } else {
                (0..d).map(|_| r.random_range(-1.0..2.0)).collect()
            };
            Instance {
                tm: ThreatModel::new(x, eps).unwrap(),
                u,
            }
        })
        .collect()
}

fn criterion_1(instances: &[Instance]) -> Outcome {
    let start = Instant::now();
    let (mut compared, mut worst, mut mismatches) = (0usize, 0.0f64, 0usize);
    for inst in instances {
        let fast = project_box_l1(&inst.u, &inst.tm).unwrap();
        let slow = dykstra_project(&inst.u, &inst.tm, 1e-12, 50_000).unwrap();
        if slow.residual < 1e-8 {
            compared += 1;
            let gap = linf(&fast, &slow.value);
            worst = worst.max(gap);
            if gap > 1e-6 {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && compared * 10 >= instances.len() * 9 && elapsed < Duration::from_secs(60),
        format!(
            "{compared}/{} instances compared, {mismatches} mismatches, worst l∞ {worst:.2e}, {:.1}s single-threaded",
            instances.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(instances: &[Instance]) -> Outcome {
    let (mut violations, mut worst) = (0usize, 0.0f64);
    let (mut eligible, mut strict) = (0usize, 0usize);
    for inst in instances {
        let x = inst.tm.anchor();
        let eps = inst.tm.eps();
        let exact = l1_distance(&project_box_l1(&inst.u, &inst.tm).unwrap(), x);
        let approx = l1_distance(&approx_project(&inst.u, &inst.tm).unwrap(), x);
        if approx > exact + 1e-9 {
            violations += 1;
            worst = worst.max(approx - exact);
        }
        let ball = project_l1_ball(&inst.u, x, eps).unwrap();
        let outside_ball = l1_distance(&inst.u, x) > eps;
        let boundary = (exact - eps).abs() <= 1e-9;
        let free_coordinate = inst
            .u
            .iter()
            .zip(x)
            .any(|(&ui, &xi)| (0.0..=1.0).contains(&ui) && ui != xi);
        if !in_box(&ball) && outside_ball && (boundary || (exact < eps && free_coordinate)) {
            eligible += 1;
            if exact > approx + 1e-9 {
                strict += 1;
            }
        }
    }
    let share = strict as f64 / eligible.max(1) as f64;
    outcome(
        violations == 0 && eligible > 0 && share >= 0.01,
        format!(
            "{violations} violations (worst {worst:.1e}); strict on {strict}/{eligible} eligible instances ({:.1}%)",
            100.0 * share
        ),
    )
}

fn criterion_3() -> Outcome {
    const INSTANCES: usize = 1000;
    const SAMPLES: usize = 10_000;
    let results: Vec<(usize, usize, bool)> = (0..INSTANCES)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::derived(30, i as u64);
            // every fourth instance is small enough for the grid oracle
            let d = if i % 4 == 0 {
                r.random_range(1..=4)
            } else {
                r.random_range(5..=128)
            };
            let eps = [0.1, 1.0, 12.0][i % 3];
            let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let w: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let tm = ThreatModel::new(x.clone(), eps).unwrap();
            let best = steepest_descent_direction(&w, &tm).unwrap().delta;
            let v_best = dot(&w, &best);
            let mut violations = 0;
            for _ in 0..SAMPLES {
                let z = sample_feasible(&tm, &mut r);
                let delta: Vec<f64> = z.iter().zip(&x).map(|(a, b)| a - b).collect();
                if dot(&w, &delta) > v_best + 1e-12 * (1.0 + v_best.abs()) {
                    violations += 1;
                }
            }
            let grid_ok = if d <= 4 {
                let resolution = [0, 2000, 400, 120, 60][d];
                let grid = grid_steepest_oracle(&w, &tm, resolution).unwrap();
                let v_grid = dot(&w, &grid.value);
                v_grid <= v_best + 1e-12 && v_best <= v_grid + grid.residual + 1e-12
            } else {
                true
            };
            (violations, usize::from(d <= 4), grid_ok)
        })
        .collect();
    let violations: usize = results.iter().map(|r| r.0).sum();
    let gridded: usize = results.iter().map(|r| r.1).sum();
    let grid_fail = results.iter().filter(|r| !r.2).count();
    outcome(
        violations == 0 && grid_fail == 0,
        format!(
            "{violations} dominance violations over {INSTANCES}×{SAMPLES} samples; {grid_fail}/{gridded} grid-oracle failures (d ≤ 4)"
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let closed = expected_sparsity_closed_form(12.0, 3024).unwrap();
    let (mc, se) = monte_carlo_sparsity(12.0, 3024, 100_000, &mut rng::seeded(40)).unwrap();
    let bound = expected_sparsity_lower_bound(12.0);
    let mut worst = 0.0f64;
    for &eps in &[0.5, 1.0, 2.5, 5.0, 7.25, 12.0, 15.5, 20.0] {
        for &d in &[41usize, 100, 500, 1000, 3024, 4000] {
            if eps > (d as f64 - 1.0) / 2.0 {
                continue;
            }
            let a = expected_sparsity_closed_form(eps, d).unwrap();
            worst = worst.max((a - expected_sparsity_by_recurrence(eps, d)).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = (closed - 24.6667).abs() <= 0.01
        && (mc - closed).abs() <= 3.0 * se
        && closed >= bound
        && bound >= 18.5
        && worst <= 1e-9
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "closed form {closed:.6}, Monte Carlo {mc:.4} ± {se:.4} ({:.2} stderr), bound {bound}, Irwin-Hall max diff {worst:.1e}, {:.1}s",
            (mc - closed).abs() / se,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut r = rng::seeded(50);
    let d = 48;
    let k = 10;
    let w = (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let b = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
    let linear = LinearSoftmaxModel::new(k, d, w, b).unwrap();
    let mlp = MlpModel::new(&[d, 24, 16, k], &mut r).unwrap();
    let models: [(&str, &dyn LogitsOracle); 2] = [("linear", &linear), ("mlp", &mlp)];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (_, model) in models {
        for point in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let y = point % k;
            let t = (y + 1 + r.random_range(0..k - 1)) % k;
            for loss in [
                Loss::CrossEntropy,
                Loss::TargetedDlr { target: t },
                Loss::Margin,
            ] {
                let (_, g) = loss_and_grad(model, &x, y, loss).unwrap();
                let fd = finite_diff_grad(model, &x, y, loss, 1e-6).unwrap();
                worst = worst.max(rel_l2(&g, &fd));
                checked += 1;
            }
        }
    }
    outcome(
        worst <= 1e-5,
        format!("{checked} (model, loss, point) checks, worst relative l2 error {worst:.2e}"),
    )
}

/// `-||z - target||^2`.
struct Concave {
    target: Vec<f64>,
}

impl Objective for Concave {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn evaluate(&self, z: &[f64], with_grad: bool) -> Result<Evaluation> {
        let value = -z
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        let grad = with_grad.then(|| {
            z.iter()
                .zip(&self.target)
                .map(|(a, b)| 2.0 * (b - a))
                .collect()
        });
        Ok(Evaluation {
            value,
            grad,
            success: false,
        })
    }
}

fn criterion_6() -> Outcome {
    let (d, eps) = (192, 12.0);
    let mut r = rng::seeded(60);
    let (mut reached, mut infeasible, mut non_monotone) = (0, 0, 0);
    let mut losses = Vec::new();
    for _ in 0..100 {
        let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
        let tm = ThreatModel::new(x.clone(), eps).unwrap();
        let obj = Concave {
            target: sample_feasible(&tm, &mut r),
        };
        match apgd_single(&obj, &tm, &ApgdConfig::single(100), &x, &mut r) {
            Ok(res) => {
                if res.loss_best >= -1e-3 {
                    reached += 1;
                }
                if !tm.contains(&res.x_adv) {
                    infeasible += 1;
                }
                if res.loss_trace.windows(2).any(|w| w[1] < w[0]) {
                    non_monotone += 1;
                }
                losses.push(res.loss_best);
            }
            Err(_) => infeasible += 1,
        }
    }
    losses.sort_by(f64::total_cmp);
    outcome(
        reached >= 99 && infeasible == 0 && non_monotone == 0,
        format!(
            "{reached}/100 within 1e-3 of the optimum (median final loss {:.2e}); {infeasible} infeasible runs, {non_monotone} non-monotone traces",
            losses.get(losses.len() / 2).copied().unwrap_or(f64::NAN)
        ),
    )
}

/// Train/test split of the toy images used by criteria 7-9.
fn toy_split() -> (LabeledDataset, LabeledDataset) {
    toy_cifar(1256, &mut rng::seeded(1)).unwrap().split_at(1000)
}

fn robust_model(train: &LabeledDataset, eps: f64) -> LinearSoftmaxModel {
    let cfg = AtConfig {
        eps_train: eps,
        epochs: 10,
        lr: 0.1,
        batch_size: 32,
        seed: 3,
        ..Default::default()
    };
    adv_train(
        LinearSoftmaxModel::zeros(train.num_classes, train.dim()).unwrap(),
        train,
        &cfg,
    )
    .unwrap()
    .model
}

fn criterion_7(model: &LinearSoftmaxModel, test: &LabeledDataset, eps: f64) -> Outcome {
    let n = 256.min(test.len());
    let runs: Vec<[(f64, bool); 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&test.inputs[i], test.labels[i]);
            let obj = ClassifierObjective::new(model, y, Loss::CrossEntropy);
            let a = apgd_restarts(
                &obj,
                x,
                eps,
                &ApgdConfig::multi(100),
                1,
                &mut rng::derived(70, i as u64),
            )
            .unwrap();
            let approx = slide_attack(model, x, y, eps, &SlideConfig::for_eps(eps, 100)).unwrap();
            let exact_cfg = SlideConfig {
                projection: Projection::Exact,
                ..SlideConfig::for_eps(eps, 100)
            };
            let exact = slide_attack(model, x, y, eps, &exact_cfg).unwrap();
            [
                (a.loss_best, !a.success),
                (approx.loss_best, !approx.success),
                (exact.loss_best, !exact.success),
            ]
        })
        .collect();
    let mean = |j: usize| runs.iter().map(|r| r[j].0).sum::<f64>() / n as f64;
    let robust = |j: usize| runs.iter().filter(|r| r[j].1).count() as f64 / n as f64;
    let (l_apgd, l_slide, l_exact) = (mean(0), mean(1), mean(2));
    let (ra_apgd, ra_slide) = (robust(0), robust(1));
    outcome(
        l_apgd >= l_slide && ra_apgd <= ra_slide + 0.01 && l_exact >= l_slide,
        format!(
            "ε = {eps}, {n} points: mean CE apgd-multi {l_apgd:.4} vs SLIDE {l_slide:.4} (exact proj. {l_exact:.4}); robust acc. {:.1}% vs {:.1}% (clean {:.1}%)",
            100.0 * ra_apgd,
            100.0 * ra_slide,
            100.0 * accuracy(model, &test.take(n))
        ),
    )
}

/// Records every input the attack queries.
struct Recording<'a> {
    inner: &'a LinearSoftmaxModel,
    queries: Mutex<Vec<Vec<f64>>>,
}

impl LogitsOracle for Recording<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.queries.lock().unwrap().push(x.to_vec());
        self.inner.logits(x)
    }
    fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        self.inner.grad_input(x, upstream)
    }
}

fn criterion_8(train: &LabeledDataset, test: &LabeledDataset) -> Outcome {
    let eps = 12.0;
    let mut model = LinearSoftmaxModel::zeros(train.num_classes, train.dim()).unwrap();
    train_plain(
        &mut model,
        train,
        &TrainConfig::default(),
        &mut rng::seeded(2),
    )
    .unwrap();
    let shape = test.shape.unwrap();
    let cfg = SquareConfig::default();
    let n = 100;
    let per_point: Vec<(bool, bool, bool, bool, bool, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&test.inputs[i], test.labels[i]);
            let rec = Recording {
                inner: &model,
                queries: Mutex::new(Vec::new()),
            };
            let res = square_attack(
                &rec,
                x,
                y,
                eps,
                &shape,
                &cfg,
                &mut rng::derived(80, i as u64),
            )
            .unwrap();
            let again = square_attack(
                &model,
                x,
                y,
                eps,
                &shape,
                &cfg,
                &mut rng::derived(80, i as u64),
            )
            .unwrap();
            let queries = rec.queries.into_inner().unwrap();
            let tm = ThreatModel::new(x.clone(), eps).unwrap();
            let feasible = queries.iter().all(|q| tm.contains(q));
            let budget = queries.len() == res.forward_evals
                && queries.len() <= cfg.n_queries
                && (res.success || queries.len() == cfg.n_queries);
            // replay the acceptance rule from the recorded queries
            let mut accepted = vec![margin_loss(&model.logits(&queries[0]), y)];
            for q in &queries[1..] {
                let m = margin_loss(&model.logits(q), y);
                if m < *accepted.last().unwrap() {
                    accepted.push(m);
                }
            }
            let mut trace = res.loss_trace.clone();
            trace.dedup();
            let monotone = accepted.windows(2).all(|w| w[1] < w[0]) && trace == accepted;
            let baseline = random_search_baseline(
                &model,
                x,
                y,
                eps,
                cfg.n_queries,
                &mut rng::derived(81, i as u64),
            )
            .unwrap();
            (
                feasible,
                monotone,
                budget,
                res == again,
                res.success,
                baseline.success,
            )
        })
        .collect();
    let count = |f: &dyn Fn(&(bool, bool, bool, bool, bool, bool)) -> bool| {
        per_point.iter().filter(|p| f(p)).count()
    };
    let feasible = count(&|p| p.0);
    let monotone = count(&|p| p.1);
    let budget = count(&|p| p.2);
    let determinism = count(&|p| p.3);
    let square = count(&|p| p.4);
    let random = count(&|p| p.5);
    outcome(
        feasible == n && monotone == n && budget == n && determinism == n && square > random,
        format!(
            "feasible {feasible}/{n}, strictly monotone {monotone}/{n}, exact budget {budget}/{n}, deterministic {determinism}/{n}; success Square {square}/{n} vs random sampling {random}/{n} (undefended, clean acc. {:.0}%)",
            100.0 * accuracy(&model, &test.take(n))
        ),
    )
}

fn criterion_9(model: &LinearSoftmaxModel, test: &LabeledDataset, eps: f64) -> Outcome {
    let suite = test.take(64);
    let cfg = EnsembleConfig::default();
    let aa = autoattack(model, &suite, eps, &cfg, 90).unwrap();
    let components: Vec<_> = Stage::ATTACKS
        .iter()
        .map(|&s| evaluate_stages(model, &suite, eps, &cfg, &[s], 90).unwrap())
        .collect();
    let min_component = components
        .iter()
        .map(|r| r.robust_accuracy)
        .fold(f64::INFINITY, f64::min);
    let pointwise = aa
        .per_example
        .iter()
        .enumerate()
        .all(|(i, e)| !e.robust || components.iter().all(|c| c.per_example[i].robust));

    let mut ledger_errors = 0;
    for e in &aa.per_example {
        let broken_at = e
            .stage_broken
            .and_then(|s| Stage::ATTACKS.iter().position(|&a| a == s));
        for (slot, &stage) in Stage::ATTACKS.iter().enumerate() {
            let spent = e.spent[slot];
            let over = spent.gradient > cfg.gradient_budget(stage)
                || spent.forward > cfg.forward_budget(stage);
            let after_break = match (e.clean_correct, broken_at) {
                (false, _) => spent.forward + spent.gradient > 0,
                (true, Some(b)) if slot > b => spent.forward + spent.gradient > 0,
                _ => false,
            };
            // a stage that ran to completion without success spends its whole budget
            let exhausted = e.robust
                && (spent.gradient != cfg.gradient_budget(stage)
                    || spent.forward != cfg.forward_budget(stage));
            if over || after_break || exhausted {
                ledger_errors += 1;
            }
        }
    }
    let totals = aa.ledger();
    outcome(
        aa.robust_accuracy <= min_component && pointwise && ledger_errors == 0,
        format!(
            "ensemble robust acc. {:.1}% vs components {:?}%; pointwise dominance {pointwise}; ledger errors {ledger_errors}; spend (fwd/grad) {}",
            100.0 * aa.robust_accuracy,
            components.iter().map(|c| (100.0 * c.robust_accuracy * 10.0).round() / 10.0).collect::<Vec<_>>(),
            Stage::ATTACKS
                .iter()
                .zip(totals)
                .map(|(s, t)| format!("{s} {}/{}", t.forward, t.gradient))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn time_projection(d: usize, reps: usize, seed: u64) -> Duration {
    let mut r = rng::seeded(seed);
    let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
    let u: Vec<f64> = x
        .iter()
        .map(|v| v + r.sample::<f64, _>(StandardNormal))
        .collect();
    let tm = ThreatModel::new(x, 12.0).unwrap();
    let mut times: Vec<Duration> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(project_box_l1(&u, &tm).unwrap());
            t.elapsed()
        })
        .collect();
    times.sort();
    times[reps / 2]
}

fn criterion_10() -> Outcome {
    let million = time_projection(1_000_000, 3, 100);
    let small = time_projection(1 << 10, 201, 101);
    let large = time_projection(1 << 20, 5, 102);
    let ratio = large.as_secs_f64() / small.as_secs_f64();
    outcome(
        million < Duration::from_secs(1) && ratio < 2048.0,
        format!(
            "d = 10^6 in {:.1} ms; runtime ratio 2^20 / 2^10 = {ratio:.0} (limit 2048)",
            million.as_secs_f64() * 1e3
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |id: usize, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "criterion {id:>2}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        results.push((id, o));
    };

    let instances = projection_instances(10_000, 10);
    run(1, &mut || criterion_1(&instances));
    run(2, &mut || criterion_2(&instances));
    run(3, &mut criterion_3);
    run(4, &mut criterion_4);
    run(5, &mut criterion_5);
    run(6, &mut criterion_6);
    let (train, test) = toy_split();
    let eps_robust = 4.0;
    let model = robust_model(&train, eps_robust);
    run(7, &mut || criterion_7(&model, &test, eps_robust));
    run(8, &mut || criterion_8(&train, &test));
    run(9, &mut || criterion_9(&model, &test, eps_robust));
    run(10, &mut criterion_10);

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(id, _)| *id)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        // the report above is the result; a nonzero exit is opt-in so the
        // workspace test run stays usable
        if std::env::var_os("BXL1_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
