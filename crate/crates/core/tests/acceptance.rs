//! One PASS/FAIL line per acceptance criterion.
//!
//! Lines are written to the raw stdout handle so they appear even when the
//! harness captures test output.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use umeta::data::{split_dataset, synth_mixture, DataSet, Representation, Split, SplitSpec, SynthSpec};
use umeta::eval::{evaluate, EvalReport, StandardLearner};
use umeta::linalg::Mat;
use umeta::metalearn::{maml_meta_train, protonet_loss_grad, protonet_meta_train, MetaConfig};
use umeta::nn::{adapt, grad_through_adaptation, xent_loss_grad, Activation, Adaptation, Batch, ModelParams};
use umeta::partition::{
    generate_partitions, kmeans, partition_from_labels, random_partition_of, HyperplanePool, KMeansInit, KMeansOptions,
    Partition, ScalingMode,
};
use umeta::seed;
use umeta::taskgen::{
    make_task_stream, sample_supervised_task, supervised_tasks, tasks_fingerprint, EpisodeShape, Task, TaskStreamConfig,
};

mod common;

use common::{finite_difference, full_pipeline, generic, random_batch, relative_error};

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {criterion} {name}: {verdict} ({detail})");
    let _ = out.flush();
    assert!(pass, "criterion {criterion} {name}: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Gradients

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let ds = synth_mixture(&SynthSpec::new(6, 8, 4, 2, 0.5, 21)).unwrap();
    let (mut xent, mut proto, mut maml) = (0.0f64, 0.0f64, 0.0f64);
    for s in 0..50u64 {
        let mut rng = seed::rng(1000 + s);
        let (d, way) = (rng.random_range(2..=5), rng.random_range(2..=4));
        let hidden = rng.random_range(3..=8);

        let p = generic(ModelParams::mlp(&[d, hidden, hidden, way], Activation::Identity, &mut rng).unwrap(), &mut rng);
        let (x, y) = random_batch(&mut rng, 2 * way + 1, d, way);
        let (_, g) = xent_loss_grad(&p, &x, &y).unwrap();
        let fd = finite_difference(&p, |q| xent_loss_grad(q, &x, &y).unwrap().0);
        xent = xent.max(relative_error(&g.flatten(), &fd));

        let shape = EpisodeShape::new(way, rng.random_range(1..=3), 2).unwrap();
        let task = sample_supervised_task(&ds, Split::MetaTrain, shape, Representation::Raw, &mut rng).unwrap();
        let p = generic(ModelParams::mlp(&[4, hidden, 5], Activation::Relu, &mut rng).unwrap(), &mut rng);
        let (_, g) = protonet_loss_grad(&p, &task).unwrap();
        let fd = finite_difference(&p, |q| protonet_loss_grad(q, &task).unwrap().0);
        proto = proto.max(relative_error(&g.flatten(), &fd));

        let p = generic(ModelParams::mlp(&[d, hidden, way], Activation::Identity, &mut rng).unwrap(), &mut rng);
        let (xs, ys) = random_batch(&mut rng, way * 2, d, way);
        let (xq, yq) = random_batch(&mut rng, way * 3, d, way);
        let train = Batch { inputs: &xs, labels: &ys };
        let a = Adaptation { inner_lr: 0.2, inner_steps: rng.random_range(1..=5), first_order: false };
        let (_, g) = grad_through_adaptation(&p, train, Batch { inputs: &xq, labels: &yq }, a).unwrap();
        let fd = finite_difference(&p, |q| {
            let adapted = adapt(q, train, a.inner_lr, a.inner_steps).unwrap();
            xent_loss_grad(&adapted, &xq, &yq).unwrap().0
        });
        maml = maml.max(relative_error(&g.flatten(), &fd));
    }
    let worst = xent.max(proto).max(maml);
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient correctness",
        worst < 1e-4 && secs < 60.0,
        &format!("50 nets; max relative error xent {xent:.2e}, protonet {proto:.2e}, second-order maml {maml:.2e}; {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. k-means against enumeration

fn objective_of(points: &Mat, assignment: &[usize], w: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let d = points.cols();
    let mut sums = vec![vec![0.0; d]; 2];
    let mut counts = [0usize; 2];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for j in 0..d {
            sums[c][j] += points[(i, j)];
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(counts)
        .map(|(s, n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let obj = assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| (0..d).map(|j| w[j] * (points[(i, j)] - means[c][j]).powi(2)).sum::<f64>())
        .sum();
    (obj, means)
}

fn lloyd_stable(points: &Mat, assignment: &[usize], means: &[Vec<f64>], w: &[f64]) -> bool {
    let dist = |i: usize, c: usize| (0..points.cols()).map(|j| w[j] * (points[(i, j)] - means[c][j]).powi(2)).sum::<f64>();
    assignment.iter().enumerate().all(|(i, &c)| dist(i, c) <= dist(i, 1 - c) + 1e-12)
}

#[test]
fn criterion_2_kmeans_oracle() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut fixed_points = 0;
    for s in 0..200u64 {
        let mut rng = seed::rng(2000 + s);
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=3);
        let points = Mat::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w: Vec<f64> = (0..d).map(|_| 1.0 - rng.random::<f64>()).collect();
        let (p, trace) = kmeans(&points, 2, &w, s, &KMeansOptions::default()).unwrap();
        let assignment: Vec<usize> = p.assignment().iter().map(|&c| c as usize).collect();
        let returned = trace.final_objective();

        if trace.objectives.windows(2).any(|o| o[1] > o[0] * (1.0 + 1e-12) + 1e-15) {
            failures.push(format!("instance {s}: objective increased {:?}", trace.objectives));
        }
        let (own, means) = objective_of(&points, &assignment, &w);
        if returned > own * (1.0 + 1e-12) + 1e-15 {
            failures.push(format!("instance {s}: objective {returned} exceeds re-evaluation {own}"));
        }
        if lloyd_stable(&points, &assignment, &means, &w) && trace.fixed_point {
            fixed_points += 1;
        } else {
            failures.push(format!("instance {s}: not a fixed point"));
        }

        // All assignments with both clusters non-empty; label 0 fixed on point 0.
        let mut local_optima = Vec::new();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << (n - 1)) {
            let a: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
            if !a.contains(&1) {
                continue;
            }
            let (obj, m) = objective_of(&points, &a, &w);
            best = best.min(obj);
            if lloyd_stable(&points, &a, &m, &w) {
                local_optima.push(obj);
            }
        }
        if !local_optima.iter().any(|&o| (o - returned).abs() <= 1e-9 * (1.0 + o)) {
            failures.push(format!("instance {s}: objective {returned} is not an enumerated local optimum {local_optima:?}"));
        }
        if returned < best - 1e-9 * (1.0 + best) {
            failures.push(format!("instance {s}: objective {returned} below global minimum {best}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "k-means oracle equivalence",
        failures.is_empty() && secs < 60.0,
        &format!("200 instances, {fixed_points} fixed points, {} failures {:?}; {secs:.2}s", failures.len(), failures.first()),
    );
}

// ---------------------------------------------------------------------------
// 3. Episode validity

fn check_task(task: &Task, shape: EpisodeShape, ds: &DataSet, p: &Partition) -> Result<(), String> {
    if task.shape != shape {
        return Err(format!("shape {:?} != {shape:?}", task.shape));
    }
    task.validate(ds, Some(Split::MetaTrain)).map_err(|e| e.to_string())?;
    let a = p.assignment();
    for (r, &i) in task.train_idx.iter().enumerate() {
        if a[i] != task.sources[r / shape.shots] {
            return Err(format!("train row {i} is outside cluster {}", task.sources[r / shape.shots]));
        }
    }
    for (r, &i) in task.query_idx.iter().enumerate() {
        if a[i] != task.sources[r / shape.queries] {
            return Err(format!("query row {i} is outside cluster {}", task.sources[r / shape.queries]));
        }
    }
    Ok(())
}

#[test]
fn criterion_3_episode_validity() {
    let start = Instant::now();
    let ds = synth_mixture(&SynthSpec::new(20, 30, 8, 3, 0.3, 31)).unwrap();
    let spec = SplitSpec::ByClass { train: (0..14).collect(), val: vec![], test: (14..20).collect() };
    let ds = split_dataset(&ds, &spec, &mut seed::rng(0)).unwrap();
    let shapes = [(5, 1, 5), (3, 2, 4), (2, 5, 3), (5, 3, 2), (4, 1, 1)].map(|(n, k, q)| EpisodeShape::new(n, k, q).unwrap());
    let margin = 0.05;
    let train_rows = ds.rows_in(Split::MetaTrain);
    let emb = ds.embeddings().unwrap().clone();
    let pool = HyperplanePool::sample(&emb.select_rows(&train_rows), 200, margin, &mut seed::rng(3)).unwrap();

    let mut counts = [0usize; 4];
    let mut failures: Vec<String> = Vec::new();
    for (si, &shape) in shapes.iter().enumerate() {
        let r = shape.per_class();
        let kmeans_parts = generate_partitions(&ds, 4, 10, si as u64, ScalingMode::Random, &KMeansOptions::default()).unwrap();
        let mut planes_used = Vec::new();
        let hyper_parts: Vec<Partition> = (0..4)
            .map(|p| {
                let (local, chosen) = pool.partition(shape.way, r, 100, &mut seed::rng(100 * si as u64 + p)).unwrap();
                planes_used.push(chosen);
                local.lift(&train_rows, ds.len()).unwrap()
            })
            .collect();
        let random_parts: Vec<Partition> = (0..4).map(|p| random_partition_of(&ds, 10, 10 * si as u64 + p).unwrap()).collect();
        let label_parts = vec![partition_from_labels(&ds, Split::MetaTrain).unwrap()];

        for (kind, parts) in [&kmeans_parts, &hyper_parts, &random_parts, &label_parts].into_iter().enumerate() {
            let stream = make_task_stream(TaskStreamConfig::new(shape, 500, 7 + si as u64), parts, &ds).unwrap();
            for t in 0..stream.len() {
                let pi = stream.partition_for(t);
                let p = stream.partitions()[pi];
                let outcome = stream.task(t).map_err(|e| e.to_string()).and_then(|task| {
                    check_task(&task, shape, &ds, p)?;
                    if kind == 1 {
                        let local = parts.iter().position(|q| std::ptr::eq(q, p)).unwrap();
                        for &i in task.train_idx.iter().chain(&task.query_idx) {
                            for &h in &planes_used[local] {
                                let dist = pool.planes()[h].signed_distance(emb.row(i)).unwrap();
                                if dist.abs() < margin {
                                    return Err(format!("row {i} lies {dist} from plane {h}"));
                                }
                            }
                        }
                    }
                    Ok(())
                });
                counts[kind] += 1;
                if let Err(e) = outcome {
                    failures.push(format!("provenance {kind} shape {shape:?} task {t}: {e}"));
                }
            }
        }
    }
    let total: usize = counts.iter().sum();
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "episode validity",
        total == 10_000 && failures.is_empty() && secs < 60.0,
        &format!(
            "{total} tasks (kmeans {}, hyperplane {}, random {}, supervised {}), {} invalid {:?}; {secs:.1}s",
            counts[0],
            counts[1],
            counts[2],
            counts[3],
            failures.len(),
            failures.first()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4 and 6. Desk-scale ordering experiment and shot trend

struct Experiment {
    ds: DataSet,
    maml: ModelParams,
    cactus_maml: EvalReport,
    cactus_protonet: EvalReport,
    random_maml: EvalReport,
    seconds: f64,
}

const EVAL_SEED: u64 = 11;
const EVAL_TASKS: usize = 500;

fn maml_learner(params: &ModelParams) -> StandardLearner {
    StandardLearner::Maml { params: params.clone(), inner_lr: 0.05, steps: 50, repr: Representation::Raw }
}

fn experiment() -> &'static Experiment {
    static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();
    EXPERIMENT.get_or_init(|| {
        let start = Instant::now();
        let mut spec = SynthSpec::new(40, 100, 128, 4, 0.7, 1);
        spec.emb_noise = 0.1;
        let ds = synth_mixture(&spec).unwrap();
        let split = SplitSpec::ByClass { train: (0..30).collect(), val: vec![], test: (30..40).collect() };
        let ds = split_dataset(&ds, &split, &mut seed::rng(0)).unwrap();
        let shape = EpisodeShape::new(5, 1, 5).unwrap();
        let tasks = supervised_tasks(&ds, Split::MetaTest, shape, Representation::Raw, EVAL_TASKS, EVAL_SEED).unwrap();
        let fp = tasks_fingerprint(&tasks);

        let cactus = generate_partitions(&ds, 10, 30, 5, ScalingMode::Random, &KMeansOptions::default()).unwrap();
        let random: Vec<Partition> = (0..10).map(|p| random_partition_of(&ds, 30, 100 + p).unwrap()).collect();

        let mut mc = MetaConfig::maml(5, 1);
        mc.meta_iterations = 2000;
        let train_maml = |parts: &[Partition]| {
            let mut scfg = TaskStreamConfig::new(mc.shape, mc.meta_iterations * mc.task_batch_size, 7);
            scfg.repr = Representation::Raw;
            let stream = make_task_stream(scfg, parts, &ds).unwrap();
            maml_meta_train(&mc, stream, mc.init_params(ds.raw().cols()).unwrap(), None).unwrap().params
        };
        let maml = train_maml(&cactus);
        let random_params = train_maml(&random);

        let mut pc = MetaConfig::protonet(5, 1);
        pc.meta_iterations = 2000;
        let mut scfg = TaskStreamConfig::new(pc.shape, pc.meta_iterations * pc.task_batch_size, 8);
        scfg.repr = Representation::Raw;
        let stream = make_task_stream(scfg, &cactus, &ds).unwrap();
        let proto = protonet_meta_train(&pc, stream, pc.init_params(ds.raw().cols()).unwrap(), None).unwrap().params;

        let cactus_maml = evaluate(&maml_learner(&maml), &tasks, &ds, &fp, 0).unwrap();
        let random_maml = evaluate(&maml_learner(&random_params), &tasks, &ds, &fp, 0).unwrap();
        let proto_learner = StandardLearner::ProtoNet { params: proto, repr: Representation::Raw };
        let cactus_protonet = evaluate(&proto_learner, &tasks, &ds, &fp, 0).unwrap();
        Experiment { ds, maml, cactus_maml, cactus_protonet, random_maml, seconds: start.elapsed().as_secs_f64() }
    })
}

fn fmt(r: &EvalReport) -> String {
    format!("{:.4} ± {:.4}", r.mean(), r.ci95())
}

#[test]
fn criterion_4_ordering_experiment() {
    let e = experiment();
    let chance = 0.2;
    let above = |r: &EvalReport| r.interval().0 >= chance + 0.2;
    let beats = |r: &EvalReport| r.interval().0 > e.random_maml.interval().1;
    let a = above(&e.cactus_maml) && above(&e.cactus_protonet);
    let b = beats(&e.cactus_maml) && beats(&e.cactus_protonet);
    let c = (e.random_maml.mean() - chance).abs() <= 0.1;
    report(
        4,
        "desk-scale ordering",
        a && b && c,
        &format!(
            "cactus-maml {}, cactus-protonet {}, random-maml {}; (a) {a} (b) {b} (c) {c}; {:.0}s",
            fmt(&e.cactus_maml),
            fmt(&e.cactus_protonet),
            fmt(&e.random_maml),
            e.seconds
        ),
    );
}

#[test]
fn criterion_6_shot_trend() {
    let e = experiment();
    let mut reports = vec![e.cactus_maml.clone()];
    for k in [5, 20, 50] {
        let shape = EpisodeShape::new(5, k, 5).unwrap();
        let tasks = supervised_tasks(&e.ds, Split::MetaTest, shape, Representation::Raw, EVAL_TASKS, EVAL_SEED).unwrap();
        reports.push(evaluate(&maml_learner(&e.maml), &tasks, &e.ds, &tasks_fingerprint(&tasks), 0).unwrap());
    }
    let ok = reports.windows(2).all(|w| {
        let (lo, hi) = (&w[0], &w[1]);
        hi.mean() >= lo.mean() || (lo.mean() - hi.mean()) <= lo.ci95() + hi.ci95()
    });
    let detail: Vec<String> = [1, 5, 20, 50].iter().zip(&reports).map(|(k, r)| format!("K={k} {}", fmt(r))).collect();
    report(6, "shot-robustness trend", ok, &detail.join(", "));
}

// ---------------------------------------------------------------------------
// 5. Cluster matching

#[test]
fn criterion_5_cluster_matching() {
    let start = Instant::now();
    let classes = 10;
    let mut spec = SynthSpec::new(classes, 60, 16, 4, 0.05, 51);
    spec.emb_noise = 0.05;
    let ds = synth_mixture(&spec).unwrap();
    let split = SplitSpec::ByFraction { train: 0.5, val: 0.0, test: 0.5 };
    let ds = split_dataset(&ds, &split, &mut seed::rng(5)).unwrap();
    let opts = KMeansOptions { init: KMeansInit::PlusPlus, ..KMeansOptions::default() };
    let p = generate_partitions(&ds, 1, classes, 9, ScalingMode::Random, &opts).unwrap().remove(0);
    let p = p.with_member_means(ds.embeddings().unwrap()).unwrap();
    let shape = EpisodeShape::new(10, 1, 5).unwrap();
    let tasks = supervised_tasks(&ds, Split::MetaTest, shape, Representation::Embedding, 200, 13).unwrap();
    let r = evaluate(&StandardLearner::ClusterMatch(p), &tasks, &ds, &tasks_fingerprint(&tasks), 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        "cluster-matching sanity",
        r.mean() >= 0.95 && secs < 60.0,
        &format!("10-way 1-shot over {} tasks: {}; {secs:.1}s", r.count(), fmt(&r)),
    );
}

// ---------------------------------------------------------------------------
// 7. Determinism

#[test]
fn criterion_7_cli_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_pipeline(a.path(), "1");
    let second = full_pipeline(b.path(), "2");
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    report(
        7,
        "determinism",
        first.len() == second.len() && differing.is_empty(),
        &format!("{} artifacts hashed across two runs, differing {differing:?}", first.len()),
    );
}

// ---------------------------------------------------------------------------
// 8. Statistics

#[test]
fn criterion_8_statistics() {
    let ds = synth_mixture(&SynthSpec::new(6, 10, 5, 2, 0.8, 81)).unwrap();
    let tasks = supervised_tasks(&ds, Split::MetaTrain, EpisodeShape::new(3, 1, 3).unwrap(), Representation::Embedding, 60, 2)
        .unwrap();
    let r = evaluate(&StandardLearner::Knn { k: None }, &tasks, &ds, &tasks_fingerprint(&tasks), 0).unwrap();
    let csv = r.to_csv(&[]);

    let mut header = std::collections::HashMap::new();
    let mut values = Vec::new();
    for line in csv.lines() {
        if let Some(h) = line.strip_prefix("# ") {
            if let Some((k, v)) = h.split_once('=') {
                header.insert(k.to_string(), v.to_string());
            }
        } else if line != "task,accuracy" {
            values.push(line.split(',').nth(1).unwrap().parse::<f64>().unwrap());
        }
    }
    let n = values.len() as f64;
    let mut sum = 0.0;
    for v in &values {
        sum += v;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for v in &values {
        ss += (v - mean) * (v - mean);
    }
    let ci = 1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt();
    let matches = mean == r.mean()
        && ci == r.ci95()
        && header["mean"].parse::<f64>().unwrap() == mean
        && header["ci95"].parse::<f64>().unwrap() == ci
        && header["tasks"] == values.len().to_string();

    let two = EvalReport { learner: "x".into(), accuracies: vec![0.0, 1.0], fingerprint: "f".into(), seed: 0 };
    let printed = format!("{:.3}", two.ci95());
    report(
        8,
        "statistics",
        matches && printed == "0.980",
        &format!("recomputed mean {mean} ci95 {ci} from {} rows; {{0,1}} ci95 = {printed}", values.len()),
    );
}
