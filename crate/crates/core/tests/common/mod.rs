#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::Rng;
use sha2::{Digest, Sha256};
use umeta::linalg::Mat;
use umeta::nn::ModelParams;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` over every parameter.
pub fn finite_difference(params: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let theta = params.flatten();
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            let hi = f(&params.with_values(&plus).unwrap());
            let lo = f(&params.with_values(&minus).unwrap());
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

// Zero biases can put a whole layer exactly on the ReLU kink, where the loss
// has no derivative; random values keep the check at differentiable points.
pub fn generic(p: ModelParams, rng: &mut impl Rng) -> ModelParams {
    let theta: Vec<f64> = p.flatten().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    p.with_values(&theta).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, rows: usize, d: usize, way: usize) -> (Mat, Mat) {
    let x = Mat::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let mut y = Mat::zeros(rows, way);
    for r in 0..rows {
        y[(r, r % way)] = 1.0;
    }
    (x, y)
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn umeta(dir: &Path, args: &[&str], workers: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umeta"))
        .args(args)
        .current_dir(dir)
        .env("UMETA_WORKERS", workers)
        .output()
        .unwrap()
}

pub fn run_ok(dir: &Path, args: &[&str], workers: &str) {
    let out = umeta(dir, args, workers);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Hash of every file under `dir`, keyed by relative path.
pub fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut hashes = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                hashes.insert(rel, hex_sha256(&fs::read(&path).unwrap()));
            }
        }
    }
    hashes
}

pub const SMALL_CONFIG: &str = "\
seed = 5
num_classes = 12
per_class = 12
d_in = 8
d_z = 3
noise = 0.3
split = class
split_classes = 7,0,5
partitions = 3
k = 6
way = 3
shots = 1
queries = 2
num_tasks = 20
iterations = 4
task_batch_size = 2
adapt_steps = 3
hidden = 8
";

/// Runs every subcommand in `dir` and returns the artifact hashes.
pub fn full_pipeline(dir: &Path, workers: &str) -> BTreeMap<String, String> {
    fs::write(dir.join("run.cfg"), SMALL_CONFIG).unwrap();
    let c = ["--config", "run.cfg"];
    for sub in ["synth", "partition", "gen-tasks", "meta-train"] {
        run_ok(dir, &[&[sub][..], &c].concat(), workers);
    }
    run_ok(
        dir,
        &["meta-train", "--config", "run.cfg", "--learner=protonet", "--checkpoint=proto.cmp", "--train_log=proto_log.csv"],
        workers,
    );
    for method in ["hyperplane", "random"] {
        let d = format!("--partitions_dir=parts_{method}");
        run_ok(dir, &["partition", "--config", "run.cfg", &format!("--method={method}"), &d, "--margin=0.05"], workers);
    }
    for learner in ["maml", "scratch", "knn", "linear", "mlp", "cluster-match"] {
        let report = format!("--report=report_{learner}.csv");
        let l = format!("--eval_learner={learner}");
        run_ok(dir, &["evaluate", "--config", "run.cfg", &l, &report], workers);
    }
    run_ok(
        dir,
        &["evaluate", "--config", "run.cfg", "--eval_learner=protonet", "--checkpoint=proto.cmp", "--report=report_protonet.csv"],
        workers,
    );
    run_ok(dir, &["compare", "--out", "table.csv", "report_maml.csv", "report_knn.csv", "report_protonet.csv"], workers);
    tree_hashes(dir)
}
