use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bxl1_core::data::toy_cifar;
use bxl1_core::io::{load_model, save_tensor, write_model, Tensor};
use bxl1_core::rng;

fn bxl1(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bxl1"))
        .current_dir(dir)
        .args(args)
        .env_remove("BXL1_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bxl1(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    bxl1(dir, args).status.code().expect("exit code")
}

fn read(dir: &Path, file: &str) -> String {
    fs::read_to_string(dir.join(file)).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines
        .next()
        .unwrap()
        .split(',')
        .position(|h| h == name)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

const SMALL_VERIFY: &str = "[verify]\ninstances = 60\nsteepest_instances = 10\nsteepest_samples = 100\nmc_samples = 20000\ngrad_points = 3\n";

#[test]
fn apgd_multi_curves_have_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["attack", "--out", "a"]);
    let curves = read(dir.path(), "a/curves.csv");
    assert_eq!(
        curves.lines().next().unwrap(),
        "iter,mean_best_loss,robust_accuracy"
    );
    assert_eq!(curves.lines().count(), 101);
    let per = read(dir.path(), "a/per_example.csv");
    assert_eq!(
        per.lines().next().unwrap(),
        "example_id,clean_correct,robust,best_loss,l1_norm,iterations,forward_evals,gradient_evals"
    );
    assert_eq!(per.lines().count(), 1001);
    assert!(column(&per, "l1_norm")
        .iter()
        .all(|v| v.parse::<f64>().unwrap() <= 12.0 + 1e-9));
}

#[test]
fn fixed_seed_gives_identical_files_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "[attack]\nkind = \"square\"\npoints = 40\nqueries = 300\n",
    )
    .unwrap();
    for (out, threads) in [("a", "1"), ("b", "3")] {
        ok(
            dir.path(),
            &[
                "attack",
                "--config",
                "c.toml",
                "--seed",
                "9",
                "--threads",
                threads,
                "--out",
                out,
            ],
        );
    }
    for f in ["per_example.csv", "curves.csv", "config.toml"] {
        let (a, b) = (
            read(dir.path(), &format!("a/{f}")),
            read(dir.path(), &format!("b/{f}")),
        );
        assert_eq!(a.replace("\"a\"", "\"b\""), b, "{f}");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "[attack]\nkind = \"apgd-single\"\npoints = 30\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "attack", "--config", "c.toml", "--eps", "3", "--iters", "20", "--seed", "4", "--out",
            "first",
        ],
    );
    ok(
        dir.path(),
        &["attack", "--config", "first/config.toml", "--out", "second"],
    );
    assert_eq!(
        read(dir.path(), "first/per_example.csv"),
        read(dir.path(), "second/per_example.csv")
    );
    assert_eq!(
        read(dir.path(), "first/curves.csv"),
        read(dir.path(), "second/curves.csv")
    );
}

#[test]
fn zero_radius_keeps_clean_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "[attack]\npoints = 50\n[eval]\npoints = 50\nattacks = [\"autoattack\", \"slide\"]\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &["attack", "--config", "c.toml", "--eps", "0", "--out", "a"],
    );
    let per = read(dir.path(), "a/per_example.csv");
    assert_eq!(column(&per, "clean_correct"), column(&per, "robust"));
    ok(
        dir.path(),
        &["eval", "--config", "c.toml", "--eps", "0", "--out", "e"],
    );
    let eval = read(dir.path(), "e/eval.csv");
    assert_eq!(
        column(&eval, "clean_accuracy"),
        column(&eval, "robust_accuracy")
    );
}

#[test]
fn eval_reports_every_model_attack_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[eval]\npoints = 30\neps = 6.0\niters = 20\nrestarts = 2\nqueries = 200\nattacks = [\"autoattack\", \"apgd-ce\", \"apgd-t-dlr\", \"square\", \"slide\"]\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    ok(dir.path(), &["eval", "--config", "c.toml", "--out", "e"]);
    let eval = read(dir.path(), "e/eval.csv");
    assert_eq!(
        eval.lines().next().unwrap(),
        "model,attack,clean_accuracy,robust_accuracy"
    );
    let robust: Vec<f64> = column(&eval, "robust_accuracy")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(robust.len(), 5);
    assert!(robust[1..4].iter().all(|&r| robust[0] <= r));
    let per = read(dir.path(), "e/per_example_0.csv");
    assert_eq!(
        per.lines().next().unwrap(),
        "example_id,clean_correct,robust,stage_broken,best_loss,l1_norm"
    );
    assert_eq!(per.lines().count(), 31);
}

#[test]
fn training_is_deterministic_and_its_outputs_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[train]\nepochs = 2\ntrain_points = 120\ntest_points = 40\nprobe_every = 1\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    for out in ["a", "b"] {
        ok(dir.path(), &["train", "--config", "c.toml", "--out", out]);
    }
    let (a, b) = (
        dir.path().join("a/model.bxl1"),
        dir.path().join("b/model.bxl1"),
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        read(dir.path(), "a/probe.csv"),
        read(dir.path(), "b/probe.csv")
    );
    let probe = read(dir.path(), "a/probe.csv");
    assert_eq!(
        probe.lines().next().unwrap(),
        "epoch,split,attack,robust_accuracy"
    );
    assert_eq!(probe.lines().count(), 1 + 3 * 2 * 2);

    let model = load_model(&a).unwrap();
    let mut again = Vec::new();
    write_model(&mut again, &model).unwrap();
    assert_eq!(again, fs::read(&a).unwrap());

    // the trained model and its held-out split feed straight into `attack`
    let attack = "[attack]\nmodel = \"a/model.bxl1\"\ndata = \"a/test_data.bxl1\"\nlabels = \"a/test_labels.csv\"\nkind = \"slide\"\niters = 10\n";
    fs::write(dir.path().join("d.toml"), attack).unwrap();
    ok(
        dir.path(),
        &["attack", "--config", "d.toml", "--out", "att"],
    );
    assert_eq!(read(dir.path(), "att/per_example.csv").lines().count(), 41);
}

#[test]
fn zero_training_radius_matches_clean_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[train]\nepochs = 1\ntrain_points = 60\ntest_points = 20\nprobe_every = 1\nprobe_eps = 0.0\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    ok(
        dir.path(),
        &["train", "--config", "c.toml", "--eps", "0", "--out", "t"],
    );
    let probe = read(dir.path(), "t/probe.csv");
    let acc = read(dir.path(), "t/accuracy.csv");
    let clean: Vec<String> = column(&acc, "clean_accuracy");
    let robust: Vec<String> = column(&probe, "robust_accuracy");
    // probe rows: (epoch, split) × two attacks, in the accuracy file's order
    for (i, c) in clean.iter().enumerate() {
        assert_eq!(&robust[2 * i], c);
        assert_eq!(&robust[2 * i + 1], c);
    }
}

#[test]
fn data_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_cifar(1020, &mut rng::seeded(0))
        .unwrap()
        .split_at(1000)
        .1;
    let flat: Vec<f64> = ds.inputs.concat();
    save_tensor(
        &dir.path().join("x.bxl1"),
        &Tensor::new(vec![20, 8, 8, 3], flat).unwrap(),
    )
    .unwrap();
    let labels: String = std::iter::once("label".to_string())
        .chain(ds.labels.iter().map(|l| l.to_string()))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(dir.path().join("y.csv"), labels + "\n").unwrap();
    let cfg = "[attack]\ndata = \"x.bxl1\"\nlabels = \"y.csv\"\nkind = \"square\"\nqueries = 100\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    ok(dir.path(), &["attack", "--config", "c.toml", "--out", "f"]);
    fs::write(
        dir.path().join("c.toml"),
        "[attack]\npoints = 20\nkind = \"square\"\nqueries = 100\n",
    )
    .unwrap();
    ok(dir.path(), &["attack", "--config", "c.toml", "--out", "g"]);
    assert_eq!(
        read(dir.path(), "f/per_example.csv"),
        read(dir.path(), "g/per_example.csv")
    );
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("bad.toml"), "[attack]\nepsilon = 2\n").unwrap();
    assert_eq!(code(p, &["attack", "--config", "bad.toml"]), 1);
    assert_eq!(code(p, &["attack", "--no-such-flag"]), 1);
    assert_eq!(code(p, &["train", "--queries", "5"]), 1);
    assert_eq!(code(p, &["attack", "--config", "missing.toml"]), 2);
    fs::write(p.join("m.toml"), "[attack]\nmodel = \"corrupt.bxl1\"\n").unwrap();
    fs::write(
        p.join("corrupt.bxl1"),
        "{\"kind\":\"linear\",\"input_dim\":2,\"num_classes\":2}\nBXL1",
    )
    .unwrap();
    assert_eq!(code(p, &["attack", "--config", "m.toml"]), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_bxl1"))
        .current_dir(p)
        .args(["sparsity", "--eps", "2"])
        .env("BXL1_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_passes_and_catches_an_injected_bug() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("v.toml"), SMALL_VERIFY).unwrap();
    let stdout = ok(dir.path(), &["verify", "--config", "v.toml", "--out", "v"]);
    assert!(stdout.contains("vs 24.6667"));
    assert!(read(dir.path(), "v/verify.csv").starts_with("check,pass,count,worst\n"));
    assert_eq!(
        code(
            dir.path(),
            &["verify", "--config", "v.toml", "--inject-bug"]
        ),
        3
    );
}

#[test]
fn sparsity_table_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["sparsity", "--eps", "12", "--threads", "1"]);
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next(),
        Some("eps,d,expected_sparsity,lower_bound,monte_carlo,monte_carlo_stderr")
    );
    let value: f64 = lines
        .next()
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!((value - 24.6667).abs() < 0.01);
}

#[test]
fn bench_writes_timings() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("b.toml"),
        "[bench]\ndims = [64, 4096]\nreps = 3\n",
    )
    .unwrap();
    ok(dir.path(), &["bench", "--config", "b.toml", "--out", "b"]);
    let bench = read(dir.path(), "b/bench.csv");
    assert_eq!(bench.lines().next().unwrap(), "projection,d,median_seconds");
    assert_eq!(bench.lines().count(), 5);
}
