//! Evaluation over fixed task sets, accuracy reports and comparisons.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::baselines::{
    cluster_matching_classify, default_knn_k, knn_classify, linear_fit, linear_predict, mlp_dropout_fit,
    mlp_dropout_predict, train_from_scratch, LinearOptions, MlpOptions,
};
use crate::data::{DataSet, Representation};
use crate::error::{Error, Result};
use crate::metalearn::{maml_adapt, predict_labels, protonet_predict};
use crate::nn::ModelParams;
use crate::partition::Partition;
use crate::seed::{self, streams};
use crate::taskgen::Task;

/// 95% normal-approximation half-width.
pub const Z95: f64 = 1.96;

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// `1.96 * s / sqrt(n)` with the `n - 1` sample standard deviation; zero for one value.
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Z95 * var.sqrt() / (n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub learner: String,
    pub accuracies: Vec<f64>,
    pub fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn count(&self) -> usize {
        self.accuracies.len()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.accuracies)
    }

    pub fn ci95(&self) -> f64 {
        ci95(&self.accuracies)
    }

    pub fn interval(&self) -> (f64, f64) {
        let (m, c) = (self.mean(), self.ci95());
        (m - c, m + c)
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {:.4} ± {:.4} over {} tasks",
            self.learner,
            self.mean(),
            self.ci95(),
            self.count()
        )
    }

    /// `# key=value` header (learner, fingerprint, seed, summary, `extra`)
    /// followed by `task,accuracy` rows.
    pub fn to_csv(&self, extra_header: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# learner={}", self.learner);
        let _ = writeln!(out, "# fingerprint={}", self.fingerprint);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# tasks={}", self.count());
        let _ = writeln!(out, "# mean={:?}", self.mean());
        let _ = writeln!(out, "# ci95={:?}", self.ci95());
        for line in extra_header {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("task,accuracy\n");
        for (t, a) in self.accuracies.iter().enumerate() {
            let _ = writeln!(out, "{t},{a:?}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut learner = None;
        let mut fingerprint = None;
        let mut seed = 0;
        let mut accuracies = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::Data(format!("report line {}: {m}", lineno + 1));
            if let Some(h) = line.strip_prefix("# ") {
                if let Some((k, v)) = h.split_once('=') {
                    match k {
                        "learner" => learner = Some(v.to_string()),
                        "fingerprint" => fingerprint = Some(v.to_string()),
                        "seed" => seed = v.parse().map_err(|_| bad("bad seed"))?,
                        _ => {}
                    }
                }
                continue;
            }
            if line == "task,accuracy" {
                saw_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                return Err(bad("missing `task,accuracy` header"));
            }
            let (t, a) = line.split_once(',').ok_or_else(|| bad("expected task,accuracy"))?;
            if t.parse::<usize>().ok() != Some(accuracies.len()) {
                return Err(bad("task indices must be consecutive from 0"));
            }
            let a: f64 = a.parse().map_err(|_| bad("bad accuracy"))?;
            if !(0.0..=1.0).contains(&a) {
                return Err(bad("accuracy outside [0, 1]"));
            }
            accuracies.push(a);
        }
        Ok(Self {
            learner: learner.ok_or_else(|| Error::Data("report has no learner header".into()))?,
            fingerprint: fingerprint.ok_or_else(|| Error::Data("report has no fingerprint header".into()))?,
            accuracies,
            seed,
        })
    }
}

/// Anything that labels a task's queries after seeing its train set.
pub trait Learner: Sync {
    fn id(&self) -> String;

    /// Task labels for `task`'s queries. `index` is the task's position in the
    /// evaluated set, for learners that draw random numbers.
    fn predict(&self, ds: &DataSet, task: &Task, index: usize) -> Result<Vec<usize>>;
}

fn view(ds: &DataSet, task: &Task, repr: Representation) -> Result<Task> {
    task.in_repr(ds, repr)
}

#[derive(Clone, Debug)]
pub enum StandardLearner {
    Maml {
        params: ModelParams,
        inner_lr: f64,
        steps: usize,
        repr: Representation,
    },
    ProtoNet {
        params: ModelParams,
        repr: Representation,
    },
    Scratch {
        hidden: Vec<usize>,
        inner_lr: f64,
        steps: usize,
        repr: Representation,
        seed: u64,
    },
    /// `k = None` uses the default for the task's shot count.
    Knn { k: Option<usize> },
    Linear(LinearOptions),
    Mlp(MlpOptions),
    ClusterMatch(Partition),
}

impl Learner for StandardLearner {
    fn id(&self) -> String {
        match self {
            StandardLearner::Maml { .. } => "maml",
            StandardLearner::ProtoNet { .. } => "protonet",
            StandardLearner::Scratch { .. } => "scratch",
            StandardLearner::Knn { .. } => "knn",
            StandardLearner::Linear(_) => "linear",
            StandardLearner::Mlp(_) => "mlp",
            StandardLearner::ClusterMatch(_) => "cluster-match",
        }
        .to_string()
    }

    fn predict(&self, ds: &DataSet, task: &Task, index: usize) -> Result<Vec<usize>> {
        let emb = || view(ds, task, Representation::Embedding);
        match self {
            StandardLearner::Maml {
                params,
                inner_lr,
                steps,
                repr,
            } => {
                let t = view(ds, task, *repr)?;
                let adapted = maml_adapt(params, &t, *inner_lr, *steps)?;
                predict_labels(&adapted, &t.query_x)
            }
            StandardLearner::ProtoNet { params, repr } => protonet_predict(params, &view(ds, task, *repr)?),
            StandardLearner::Scratch {
                hidden,
                inner_lr,
                steps,
                repr,
                seed: s,
            } => {
                let t = view(ds, task, *repr)?;
                train_from_scratch(&t, hidden, *steps, *inner_lr, seed::mix(*s, streams::EVAL, index as u64))
            }
            StandardLearner::Knn { k } => {
                let t = emb()?;
                let k = k.unwrap_or_else(|| default_knn_k(t.shape.shots));
                knn_classify(&t.train_x, &t.train_labels(), &t.query_x, k)
            }
            StandardLearner::Linear(opts) => {
                let t = emb()?;
                let model = linear_fit(&t.train_x, &t.train_labels(), t.shape.way, opts)?;
                linear_predict(&model, &t.query_x)
            }
            StandardLearner::Mlp(opts) => {
                let t = emb()?;
                let opts = MlpOptions {
                    seed: seed::mix(opts.seed, streams::EVAL, index as u64),
                    ..opts.clone()
                };
                let model = mlp_dropout_fit(&t.train_x, &t.train_labels(), t.shape.way, &opts)?;
                mlp_dropout_predict(&model, &t.query_x)
            }
            StandardLearner::ClusterMatch(p) => {
                let t = view(ds, task, p.space())?;
                cluster_matching_classify(p, &t.train_x, &t.train_labels(), &t.query_x)
            }
        }
    }
}

/// Predicts labels uniformly at random; a chance-level reference.
#[derive(Clone, Copy, Debug)]
pub struct RandomGuess {
    pub seed: u64,
}

impl Learner for RandomGuess {
    fn id(&self) -> String {
        "random".into()
    }

    fn predict(&self, _ds: &DataSet, task: &Task, index: usize) -> Result<Vec<usize>> {
        let mut rng = seed::rng(seed::mix(self.seed, streams::EVAL, index as u64));
        Ok((0..task.query_idx.len()).map(|_| rng.random_range(0..task.shape.way)).collect())
    }
}

pub fn task_accuracy(pred: &[usize], task: &Task) -> Result<f64> {
    let truth = task.query_labels();
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "learner returned {} predictions for {} queries",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

/// Per-task accuracy of `learner`, computed in parallel and stored in task order.
pub fn evaluate(learner: &dyn Learner, tasks: &[Task], ds: &DataSet, fingerprint: &str, seed: u64) -> Result<EvalReport> {
    let accuracies = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| task_accuracy(&learner.predict(ds, t, i)?, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        learner: learner.id(),
        accuracies,
        fingerprint: fingerprint.to_string(),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub learner: String,
    pub mean: f64,
    pub ci95: f64,
    pub tasks: usize,
    /// Learners whose intervals overlap this one's.
    pub overlaps: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub fingerprint: String,
    /// Sorted by decreasing mean.
    pub rows: Vec<ComparisonRow>,
}

pub fn intervals_overlap(a: &EvalReport, b: &EvalReport) -> bool {
    (a.mean() - b.mean()).abs() <= a.ci95() + b.ci95()
}

pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one report".into()))?;
    if let Some(r) = reports.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(Error::Incomparable(format!(
            "task fingerprints differ: {} ({}) vs {} ({})",
            first.learner, first.fingerprint, r.learner, r.fingerprint
        )));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .mean()
            .total_cmp(&reports[a].mean())
            .then_with(|| reports[a].learner.cmp(&reports[b].learner))
    });
    let rows = order
        .iter()
        .map(|&i| {
            let r = &reports[i];
            ComparisonRow {
                learner: r.learner.clone(),
                mean: r.mean(),
                ci95: r.ci95(),
                tasks: r.count(),
                overlaps: order
                    .iter()
                    .filter(|&&j| j != i && intervals_overlap(r, &reports[j]))
                    .map(|&j| reports[j].learner.clone())
                    .collect(),
            }
        })
        .collect();
    Ok(Comparison {
        fingerprint: first.fingerprint.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# fingerprint={}\nrank,learner,mean,ci95,lower,upper,tasks,overlaps\n", self.fingerprint);
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                i + 1,
                r.learner,
                r.mean,
                r.ci95,
                r.mean - r.ci95,
                r.mean + r.ci95,
                r.tasks,
                r.overlaps.join(";")
            );
        }
        out
    }
}
