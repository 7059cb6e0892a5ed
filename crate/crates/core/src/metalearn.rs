//! Episodic meta-training: MAML and prototypical networks.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{shape, Error, Result};
use crate::linalg::{argmax, Mat};
use crate::nn::{adapt, backward, forward, forward_cached, grad_through_adaptation, softmax_xent, Activation, Adaptation, ModelParams};
use crate::optim::OptimizerState;
use crate::seed;
use crate::taskgen::{EpisodeShape, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LearnerKind {
    Maml,
    ProtoNet,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Maml => "maml",
            LearnerKind::ProtoNet => "protonet",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(LearnerKind::Maml),
            "protonet" | "protonets" => Ok(LearnerKind::ProtoNet),
            other => Err(Error::Config(format!("unknown learner `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub learner: LearnerKind,
    pub outer_lr: f64,
    pub inner_lr: f64,
    pub task_batch_size: usize,
    pub inner_steps_train: usize,
    pub adapt_steps_eval: usize,
    pub meta_iterations: usize,
    /// Episode shape used during meta-training.
    pub shape: EpisodeShape,
    pub first_order: bool,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl MetaConfig {
    /// Outer lr 0.001, inner lr 0.05, 8 tasks per batch, 5 inner steps,
    /// 50 evaluation steps.
    pub fn maml(way: usize, shots: usize) -> Self {
        Self {
            learner: LearnerKind::Maml,
            outer_lr: 0.001,
            inner_lr: 0.05,
            task_batch_size: 8,
            inner_steps_train: 5,
            adapt_steps_eval: 50,
            meta_iterations: 2000,
            shape: EpisodeShape { way, shots, queries: 5 },
            first_order: false,
            hidden: vec![64, 64],
            seed: 0,
        }
    }

    /// Learning rate 0.001, one task per batch, 15 queries per class.
    pub fn protonet(way: usize, shots: usize) -> Self {
        Self {
            learner: LearnerKind::ProtoNet,
            outer_lr: 0.001,
            inner_lr: 0.0,
            task_batch_size: 1,
            inner_steps_train: 0,
            adapt_steps_eval: 0,
            meta_iterations: 2000,
            shape: EpisodeShape { way, shots, queries: 15 },
            first_order: false,
            hidden: vec![64, 64],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.outer_lr > 0.0) || !self.outer_lr.is_finite() {
            return bad(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if !(self.inner_lr >= 0.0) || !self.inner_lr.is_finite() {
            return bad(format!("inner_lr must be >= 0, got {}", self.inner_lr));
        }
        if self.task_batch_size == 0 {
            return bad("task_batch_size must be positive".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        EpisodeShape::new(self.shape.way, self.shape.shots, self.shape.queries)?;
        Ok(())
    }

    pub fn adaptation(&self) -> Adaptation {
        Adaptation {
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps_train,
            first_order: self.first_order,
        }
    }

    /// Fresh network for this learner: a `way`-output classifier for MAML, a
    /// ReLU embedding (last hidden layer) for ProtoNets.
    pub fn init_params(&self, in_dim: usize) -> Result<ModelParams> {
        let mut rng = seed::rng(seed::mix(self.seed, seed::streams::META_BATCH, u64::MAX));
        init_model(self.learner, in_dim, self.shape.way, &self.hidden, &mut rng)
    }
}

pub fn init_model(
    learner: LearnerKind,
    in_dim: usize,
    way: usize,
    hidden: &[usize],
    rng: &mut impl rand::Rng,
) -> Result<ModelParams> {
    let mut dims = vec![in_dim];
    dims.extend_from_slice(hidden);
    match learner {
        LearnerKind::Maml => {
            dims.push(way);
            ModelParams::mlp(&dims, Activation::Identity, rng)
        }
        LearnerKind::ProtoNet => {
            if hidden.is_empty() {
                return Err(Error::Config("a ProtoNet embedding needs at least one hidden layer".into()));
            }
            ModelParams::mlp(&dims, Activation::Relu, rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub meta_loss: f64,
    pub meta_val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,meta_loss,meta_val_accuracy\n");
        for r in &self.rows {
            let val = r.meta_val_accuracy.map(|v| format!("{v:?}")).unwrap_or_default();
            out.push_str(&format!("{},{:?},{}\n", r.iteration, r.meta_loss, val));
        }
        out
    }
}

/// Optional meta-validation monitor, called every `every` iterations. Its value
/// is logged only; it never alters training.
pub struct Monitor<'a> {
    pub every: usize,
    pub evaluate: &'a (dyn Fn(&ModelParams) -> Result<f64> + Sync),
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams,
    pub log: TrainLog,
}

fn next_batch<I: Iterator<Item = Result<Task>>>(tasks: &mut I, size: usize, iteration: usize) -> Result<Vec<Task>> {
    let mut batch = Vec::with_capacity(size);
    for _ in 0..size {
        match tasks.next() {
            Some(t) => batch.push(t?),
            None => {
                return Err(Error::Config(format!("task stream exhausted at meta-iteration {iteration}")));
            }
        }
    }
    Ok(batch)
}

fn average(grads: Vec<(f64, ModelParams)>) -> Result<(f64, ModelParams)> {
    let n = grads.len() as f64;
    let mut iter = grads.into_iter();
    let (mut loss, mut acc) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        acc.add_scaled(&g, 1.0)?;
    }
    acc.scale(1.0 / n);
    Ok((loss / n, acc))
}

fn meta_loop<I, F>(
    cfg: &MetaConfig,
    mut tasks: I,
    init: ModelParams,
    monitor: Option<Monitor<'_>>,
    task_grad: F,
) -> Result<Trained>
where
    I: Iterator<Item = Result<Task>>,
    F: Fn(&ModelParams, &Task) -> Result<(f64, ModelParams)> + Sync,
{
    cfg.validate()?;
    let mut params = init;
    let mut opt = OptimizerState::adam(cfg.outer_lr, &params)?;
    let mut log = TrainLog::default();
    for it in 0..cfg.meta_iterations {
        let batch = next_batch(&mut tasks, cfg.task_batch_size, it)?;
        // Collected in task order so the reduction is independent of scheduling.
        let grads = batch
            .par_iter()
            .map(|t| task_grad(&params, t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("meta-iteration {it}: {m}")),
                other => other,
            })?;
        let (loss, g) = average(grads)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite meta-loss at meta-iteration {it}")));
        }
        params = opt.apply(&params, &g)?;
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged at meta-iteration {it}")));
        }
        let meta_val_accuracy = match &monitor {
            Some(m) if m.every > 0 && (it + 1) % m.every == 0 => Some((m.evaluate)(&params)?),
            _ => None,
        };
        log.rows.push(LogRow {
            iteration: it,
            meta_loss: loss,
            meta_val_accuracy,
        });
        if it % 100 == 0 {
            log::debug!("meta-iteration {it}: loss {loss:.4}");
        }
    }
    Ok(Trained { params, log })
}

fn check_task_fits(params: &ModelParams, task: &Task) -> Result<()> {
    if task.train_x.cols() != params.in_dim() {
        return Err(shape(format!(
            "task inputs have width {} but the model expects {}",
            task.train_x.cols(),
            params.in_dim()
        )));
    }
    Ok(())
}

/// Second-order MAML (first-order when `cfg.first_order`): one Adam step per
/// meta-iteration on the meta-gradient averaged over `task_batch_size` tasks.
pub fn maml_meta_train<I: Iterator<Item = Result<Task>>>(
    cfg: &MetaConfig,
    tasks: I,
    init: ModelParams,
    monitor: Option<Monitor<'_>>,
) -> Result<Trained> {
    let adaptation = cfg.adaptation();
    meta_loop(cfg, tasks, init, monitor, |params, task| {
        check_task_fits(params, task)?;
        if task.shape.way != params.out_dim() {
            return Err(shape(format!(
                "meta-training task has {} ways but the head has {}",
                task.shape.way,
                params.out_dim()
            )));
        }
        grad_through_adaptation(params, task.train_batch(), task.query_batch(), adaptation)
    })
}

/// Adapts a copy of `params` to the task's train set: the head is pruned to
/// the task's way, then `steps` SGD steps are taken at `inner_lr`.
pub fn maml_adapt(params: &ModelParams, task: &Task, inner_lr: f64, steps: usize) -> Result<ModelParams> {
    check_task_fits(params, task)?;
    let pruned = if task.shape.way < params.out_dim() {
        params.prune_outputs(task.shape.way)?
    } else if task.shape.way == params.out_dim() {
        params.clone()
    } else {
        return Err(shape(format!(
            "task has {} ways but the model has {} outputs",
            task.shape.way,
            params.out_dim()
        )));
    };
    adapt(&pruned, task.train_batch(), inner_lr, steps)
}

/// Predicted task labels for the rows of `inputs`.
pub fn predict_labels(params: &ModelParams, inputs: &Mat) -> Result<Vec<usize>> {
    let out = forward(params, inputs)?;
    Ok((0..out.rows()).map(|r| argmax(out.row(r))).collect())
}

pub fn protonet_embed(params: &ModelParams, inputs: &Mat) -> Result<Mat> {
    forward(params, inputs)
}

/// Class means of `embedded` rows; row `n` is the prototype of label `n`.
pub fn protonet_prototypes(embedded: &Mat, labels: &[usize], way: usize) -> Result<Mat> {
    if labels.len() != embedded.rows() {
        return Err(shape(format!("{} labels for {} embeddings", labels.len(), embedded.rows())));
    }
    let d = embedded.cols();
    let mut protos: Mat = Mat::zeros(way, d);
    let mut counts = vec![0usize; way];
    for (r, &l) in labels.iter().enumerate() {
        if l >= way {
            return Err(Error::Contract(format!("label {l} outside a {way}-way task")));
        }
        counts[l] += 1;
        for (p, &v) in protos.row_mut(l).iter_mut().zip(embedded.row(r)) {
            *p += v;
        }
    }
    for (n, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Contract(format!("class {n} has no training shots")));
        }
        for p in protos.row_mut(n) {
            *p /= c as f64;
        }
    }
    Ok(protos)
}

/// Logits `-||q - p_n||^2` for every query row and prototype.
pub fn protonet_classify(prototypes: &Mat, queries: &Mat) -> Result<Mat> {
    if prototypes.cols() != queries.cols() {
        return Err(shape(format!(
            "prototypes have width {} but queries {}",
            prototypes.cols(),
            queries.cols()
        )));
    }
    let mut logits: Mat = Mat::zeros(queries.rows(), prototypes.rows());
    for q in 0..queries.rows() {
        for n in 0..prototypes.rows() {
            logits[(q, n)] = -crate::linalg::sq_dist(queries.row(q), prototypes.row(n));
        }
    }
    Ok(logits)
}

/// Query cross-entropy of a prototype classifier and its gradient with respect
/// to the embedding parameters, including the path through the prototype means.
pub fn protonet_loss_grad(params: &ModelParams, task: &Task) -> Result<(f64, ModelParams)> {
    check_task_fits(params, task)?;
    let way = task.shape.way;
    let train_labels = task.train_labels();
    let cs = forward_cached(params, task.train_x.clone())?;
    let cq = forward_cached(params, task.query_x.clone())?;
    let s = cs.output();
    let q = cq.output();
    let protos = protonet_prototypes(s, &train_labels, way)?;
    let logits = protonet_classify(&protos, q)?;
    let (loss, g) = softmax_xent(&logits, &task.query_y);

    // logits[i][n] = -|q_i - p_n|^2
    let d = q.cols();
    let mut dq: Mat = Mat::zeros(q.rows(), d);
    let mut dp: Mat = Mat::zeros(way, d);
    for i in 0..q.rows() {
        for n in 0..way {
            let gin = g[(i, n)];
            if gin == 0.0 {
                continue;
            }
            for j in 0..d {
                let diff = q[(i, j)] - protos[(n, j)];
                dq[(i, j)] -= 2.0 * gin * diff;
                dp[(n, j)] += 2.0 * gin * diff;
            }
        }
    }
    let mut counts = vec![0usize; way];
    for &l in &train_labels {
        counts[l] += 1;
    }
    let mut ds: Mat = Mat::zeros(s.rows(), d);
    for (r, &l) in train_labels.iter().enumerate() {
        let inv = 1.0 / counts[l] as f64;
        for j in 0..d {
            ds[(r, j)] = dp[(l, j)] * inv;
        }
    }
    let (mut grads, _) = backward(params, &cq, dq)?;
    let (gs, _) = backward(params, &cs, ds)?;
    grads.add_scaled(&gs, 1.0)?;
    Ok((loss, grads))
}

/// Prototype predictions for the task's queries.
pub fn protonet_predict(params: &ModelParams, task: &Task) -> Result<Vec<usize>> {
    check_task_fits(params, task)?;
    let s = protonet_embed(params, &task.train_x)?;
    let q = protonet_embed(params, &task.query_x)?;
    let protos = protonet_prototypes(&s, &task.train_labels(), task.shape.way)?;
    let logits = protonet_classify(&protos, &q)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

pub fn protonet_meta_train<I: Iterator<Item = Result<Task>>>(
    cfg: &MetaConfig,
    tasks: I,
    init: ModelParams,
    monitor: Option<Monitor<'_>>,
) -> Result<Trained> {
    meta_loop(cfg, tasks, init, monitor, protonet_loss_grad)
}

/// Dispatches on `cfg.learner`.
pub fn meta_train<I: Iterator<Item = Result<Task>>>(
    cfg: &MetaConfig,
    tasks: I,
    init: ModelParams,
    monitor: Option<Monitor<'_>>,
) -> Result<Trained> {
    match cfg.learner {
        LearnerKind::Maml => maml_meta_train(cfg, tasks, init, monitor),
        LearnerKind::ProtoNet => protonet_meta_train(cfg, tasks, init, monitor),
    }
}
