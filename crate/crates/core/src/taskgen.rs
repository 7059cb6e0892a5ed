//! N-way K-shot episodes built from partitions, labels or attributes.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::data::{DataSet, Representation, Split};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::Batch;
use crate::partition::{partition_from_labels, Partition, Provenance};
use crate::seed::{self, streams};

/// Ways, shots and queries per class of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EpisodeShape {
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
}

impl EpisodeShape {
    pub fn new(way: usize, shots: usize, queries: usize) -> Result<Self> {
        if way < 2 || shots < 1 || queries < 1 {
            return Err(Error::Config(format!(
                "episode needs way >= 2, shots >= 1, queries >= 1 (got {way}/{shots}/{queries})"
            )));
        }
        Ok(Self { way, shots, queries })
    }

    /// Examples drawn per class.
    pub fn per_class(&self) -> usize {
        self.shots + self.queries
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub shape: EpisodeShape,
    pub repr: Representation,
    /// Cluster id (or class label / attribute pattern) behind each sampled class.
    pub sources: Vec<i64>,
    /// Task label given to the `n`-th sampled class.
    pub permutation: Vec<usize>,
    /// Dataset rows, class-major: `shots` rows per sampled class.
    pub train_idx: Vec<usize>,
    /// Dataset rows, class-major: `queries` rows per sampled class.
    pub query_idx: Vec<usize>,
    pub train_x: Mat,
    pub train_y: Mat,
    pub query_x: Mat,
    pub query_y: Mat,
}

fn one_hot(labels: &[usize], way: usize) -> Mat {
    let mut m = Mat::zeros(labels.len(), way);
    for (r, &l) in labels.iter().enumerate() {
        m[(r, l)] = 1.0;
    }
    m
}

impl Task {
    /// Materializes a task. `members[n]` holds `shots + queries` rows of class `n`:
    /// the leading `shots` become train examples, the rest queries.
    pub fn assemble(
        ds: &DataSet,
        repr: Representation,
        shape: EpisodeShape,
        sources: Vec<i64>,
        permutation: Vec<usize>,
        members: &[Vec<usize>],
    ) -> Result<Self> {
        if members.len() != shape.way || sources.len() != shape.way || permutation.len() != shape.way {
            return Err(Error::Contract("task assembly needs one entry per way".into()));
        }
        let mut train_idx = Vec::with_capacity(shape.way * shape.shots);
        let mut query_idx = Vec::with_capacity(shape.way * shape.queries);
        for m in members {
            if m.len() != shape.per_class() {
                return Err(Error::Contract(format!(
                    "class has {} rows, expected {}",
                    m.len(),
                    shape.per_class()
                )));
            }
            train_idx.extend_from_slice(&m[..shape.shots]);
            query_idx.extend_from_slice(&m[shape.shots..]);
        }
        Self::from_indices(ds, repr, shape, sources, permutation, train_idx, query_idx)
    }

    pub fn from_indices(
        ds: &DataSet,
        repr: Representation,
        shape: EpisodeShape,
        sources: Vec<i64>,
        permutation: Vec<usize>,
        train_idx: Vec<usize>,
        query_idx: Vec<usize>,
    ) -> Result<Self> {
        let features = ds.features(repr)?;
        if train_idx.iter().chain(&query_idx).any(|&i| i >= ds.len()) {
            return Err(Error::Data("task references rows outside the dataset".into()));
        }
        if permutation.len() != shape.way || permutation.iter().any(|&l| l >= shape.way) {
            return Err(Error::Data("task permutation does not match its way".into()));
        }
        if train_idx.len() != shape.way * shape.shots || query_idx.len() != shape.way * shape.queries {
            return Err(Error::Data("task row counts do not match its shape".into()));
        }
        let train_labels: Vec<usize> = (0..train_idx.len()).map(|r| permutation[r / shape.shots]).collect();
        let query_labels: Vec<usize> = (0..query_idx.len()).map(|r| permutation[r / shape.queries]).collect();
        Ok(Self {
            shape,
            repr,
            train_x: features.select_rows(&train_idx),
            train_y: one_hot(&train_labels, shape.way),
            query_x: features.select_rows(&query_idx),
            query_y: one_hot(&query_labels, shape.way),
            sources,
            permutation,
            train_idx,
            query_idx,
        })
    }

    pub fn train_labels(&self) -> Vec<usize> {
        (0..self.train_idx.len())
            .map(|r| self.permutation[r / self.shape.shots])
            .collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.query_idx.len())
            .map(|r| self.permutation[r / self.shape.queries])
            .collect()
    }

    pub fn train_batch(&self) -> Batch<'_> {
        Batch {
            inputs: &self.train_x,
            labels: &self.train_y,
        }
    }

    pub fn query_batch(&self) -> Batch<'_> {
        Batch {
            inputs: &self.query_x,
            labels: &self.query_y,
        }
    }

    /// The same episode read in another representation.
    pub fn in_repr(&self, ds: &DataSet, repr: Representation) -> Result<Task> {
        if repr == self.repr {
            return Ok(self.clone());
        }
        Task::from_indices(
            ds,
            repr,
            self.shape,
            self.sources.clone(),
            self.permutation.clone(),
            self.train_idx.clone(),
            self.query_idx.clone(),
        )
    }

    /// Checks every structural invariant of an episode against its dataset.
    pub fn validate(&self, ds: &DataSet, split: Option<Split>) -> Result<()> {
        let EpisodeShape { way, shots, queries } = self.shape;
        let fail = |m: String| Err(Error::Contract(m));
        if self.train_idx.len() != way * shots || self.query_idx.len() != way * queries {
            return fail("wrong number of train or query examples".into());
        }
        let mut perm = self.permutation.clone();
        perm.sort_unstable();
        if perm != (0..way).collect::<Vec<_>>() {
            return fail(format!("labels {:?} are not a permutation of 0..{way}", self.permutation));
        }
        if self.sources.len() != way || self.sources.iter().collect::<HashSet<_>>().len() != way {
            return fail("sampled classes are not distinct".into());
        }
        let mut seen = HashSet::new();
        for &i in self.train_idx.iter().chain(&self.query_idx) {
            if !seen.insert(i) {
                return fail(format!("row {i} appears twice in one task"));
            }
            if let Some(s) = split {
                if ds.splits().get(i) != Some(&s) {
                    return fail(format!("row {i} is not in {s}"));
                }
            }
        }
        for (y, labels, x, idx) in [
            (&self.train_y, self.train_labels(), &self.train_x, &self.train_idx),
            (&self.query_y, self.query_labels(), &self.query_x, &self.query_idx),
        ] {
            if y.cols() != way || y.rows() != labels.len() {
                return fail("label matrix has the wrong shape".into());
            }
            for (r, &l) in labels.iter().enumerate() {
                if y.row(r).iter().enumerate().any(|(j, &v)| v != if j == l { 1.0 } else { 0.0 }) {
                    return fail(format!("label row {r} is not the one-hot vector for class {l}"));
                }
            }
            if *x != ds.features(self.repr)?.select_rows(idx) {
                return fail("task inputs differ from the dataset rows they reference".into());
            }
        }
        Ok(())
    }
}

/// Samples one episode: `way` distinct eligible clusters uniformly without
/// replacement, then `shots + queries` members of each without replacement.
pub fn sample_task_from_partition(
    p: &Partition,
    ds: &DataSet,
    shape: EpisodeShape,
    repr: Representation,
    rng: &mut impl Rng,
) -> Result<Task> {
    let eligible = p.eligible_clusters(shape.per_class());
    if eligible.len() < shape.way {
        return Err(Error::Infeasible(format!(
            "partition has {} clusters with >= {} members but {} are needed",
            eligible.len(),
            shape.per_class(),
            shape.way
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, eligible.len(), shape.way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut permutation: Vec<usize> = (0..shape.way).collect();
    permutation.shuffle(rng);
    let members: Vec<Vec<usize>> = chosen
        .iter()
        .map(|&c| {
            let cluster = &p.clusters()[c];
            index::sample(rng, cluster.len(), shape.per_class())
                .into_iter()
                .map(|i| cluster[i])
                .collect()
        })
        .collect();
    let sources = chosen.iter().map(|&c| c as i64).collect();
    Task::assemble(ds, repr, shape, sources, permutation, &members)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStreamConfig {
    pub shape: EpisodeShape,
    pub num_tasks: usize,
    pub repr: Representation,
    pub seed: u64,
    /// Tasks drawn from one hyperplane partition before another is sampled.
    pub tasks_per_hyperplane_partition: usize,
}

impl TaskStreamConfig {
    pub fn new(shape: EpisodeShape, num_tasks: usize, seed: u64) -> Self {
        Self {
            shape,
            num_tasks,
            repr: Representation::Raw,
            seed,
            tasks_per_hyperplane_partition: 100,
        }
    }
}

/// Lazily evaluated task sequence over a set of partitions. Task `t` depends
/// only on `(partitions, dataset, seed, t)`.
#[derive(Clone, Debug)]
pub struct TaskStream<'a> {
    ds: &'a DataSet,
    partitions: Vec<&'a Partition>,
    excluded: usize,
    cfg: TaskStreamConfig,
    next: usize,
}

impl<'a> TaskStream<'a> {
    pub fn config(&self) -> &TaskStreamConfig {
        &self.cfg
    }

    /// Partitions dropped for having too few eligible clusters.
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn partitions(&self) -> &[&'a Partition] {
        &self.partitions
    }

    pub fn len(&self) -> usize {
        self.cfg.num_tasks
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.num_tasks == 0
    }

    /// Index of the partition used by task `t`.
    pub fn partition_for(&self, t: usize) -> usize {
        let count = self.partitions.len();
        if self.partitions[0].provenance() == Provenance::Hyperplane {
            let block = (t / self.cfg.tasks_per_hyperplane_partition.max(1)) as u64;
            seed::rng(seed::mix(self.cfg.seed, streams::TASK_BLOCK, block)).random_range(0..count)
        } else {
            seed::rng(seed::mix(self.cfg.seed, streams::TASK, t as u64)).random_range(0..count)
        }
    }

    pub fn task(&self, t: usize) -> Result<Task> {
        let p = self.partition_for(t);
        // Separate stream from the partition choice so the two draws are independent.
        let mut rng = seed::rng(seed::mix(self.cfg.seed ^ 0x7461_736b, streams::TASK, t as u64));
        sample_task_from_partition(self.partitions[p], self.ds, self.cfg.shape, self.cfg.repr, &mut rng)
    }
}

impl Iterator for TaskStream<'_> {
    type Item = Result<Task>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.cfg.num_tasks {
            return None;
        }
        let t = self.next;
        self.next += 1;
        Some(self.task(t))
    }
}

pub fn make_task_stream<'a>(cfg: TaskStreamConfig, partitions: &'a [Partition], ds: &'a DataSet) -> Result<TaskStream<'a>> {
    let r = cfg.shape.per_class();
    let eligible: Vec<&Partition> = partitions
        .iter()
        .filter(|p| p.eligible_clusters(r).len() >= cfg.shape.way)
        .collect();
    let excluded = partitions.len() - eligible.len();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "none of the {} partitions has {} clusters with >= {r} members",
            partitions.len(),
            cfg.shape.way
        )));
    }
    if excluded > 0 {
        log::warn!("excluded {excluded} of {} partitions with too few eligible clusters", partitions.len());
    }
    let kinds: HashSet<Provenance> = eligible.iter().map(|p| p.provenance()).collect();
    if kinds.len() > 1 {
        return Err(Error::Config("a task stream cannot mix partition provenances".into()));
    }
    Ok(TaskStream {
        ds,
        partitions: eligible,
        excluded,
        cfg,
        next: 0,
    })
}

/// An episode over ground-truth classes of `split`.
pub fn sample_supervised_task(
    ds: &DataSet,
    split: Split,
    shape: EpisodeShape,
    repr: Representation,
    rng: &mut impl Rng,
) -> Result<Task> {
    let p = partition_from_labels(ds, split)?;
    sample_task_from_partition(&p, ds, shape, repr, rng).map_err(|e| match e {
        Error::Infeasible(m) => Error::Infeasible(format!("insufficient classes in {split}: {m}")),
        other => other,
    })
}

/// `count` supervised episodes from `split`; task `t` is seeded from `(seed, t)`.
pub fn supervised_tasks(
    ds: &DataSet,
    split: Split,
    shape: EpisodeShape,
    repr: Representation,
    count: usize,
    seed: u64,
) -> Result<Vec<Task>> {
    let p = partition_from_labels(ds, split)?;
    (0..count)
        .map(|t| {
            let mut rng = seed::rng(seed::mix(seed, streams::EVAL, t as u64));
            sample_task_from_partition(&p, ds, shape, repr, &mut rng)
        })
        .collect()
}

/// Two-way episode from three attributes: class 0 matches `bits` on `attrs`,
/// class 1 matches the full negation. `Ok(None)` when either class has fewer
/// than `shots + queries` rows in `split`.
pub fn sample_attribute_task(
    ds: &DataSet,
    split: Split,
    attrs: [usize; 3],
    bits: [bool; 3],
    shots: usize,
    queries: usize,
    repr: Representation,
    rng: &mut impl Rng,
) -> Result<Option<Task>> {
    let a = ds
        .attributes()
        .ok_or_else(|| Error::Data("dataset has no attributes".into()))?;
    if attrs.iter().any(|&i| i >= a.cols()) || attrs[0] == attrs[1] || attrs[1] == attrs[2] || attrs[0] == attrs[2] {
        return Err(Error::Contract(format!("attribute triple {attrs:?} is invalid")));
    }
    let shape = EpisodeShape::new(2, shots, queries)?;
    let matches = |r: usize, want: [bool; 3]| (0..3).all(|j| a.get(r, attrs[j]) == want[j]);
    let negated = bits.map(|b| !b);
    let rows = ds.rows_in(split);
    let pos: Vec<usize> = rows.iter().copied().filter(|&r| matches(r, bits)).collect();
    let neg: Vec<usize> = rows.iter().copied().filter(|&r| matches(r, negated)).collect();
    if pos.len() < shape.per_class() || neg.len() < shape.per_class() {
        return Ok(None);
    }
    let code = |b: [bool; 3]| b.iter().enumerate().map(|(j, &x)| (x as i64) << j).sum::<i64>();
    let mut permutation = vec![0, 1];
    permutation.shuffle(rng);
    let members: Vec<Vec<usize>> = [&pos, &neg]
        .iter()
        .map(|class| {
            index::sample(rng, class.len(), shape.per_class())
                .into_iter()
                .map(|i| class[i])
                .collect()
        })
        .collect();
    Task::assemble(ds, repr, shape, vec![code(bits), code(negated)], permutation, &members).map(Some)
}

/// Draws attribute triples and Boolean patterns uniformly from `allowed`
/// until an eligible task appears or `max_attempts` is reached.
pub fn random_attribute_task(
    ds: &DataSet,
    split: Split,
    allowed: &[usize],
    shots: usize,
    queries: usize,
    repr: Representation,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    if allowed.len() < 3 {
        return Err(Error::Config("attribute tasks need at least three attributes".into()));
    }
    for _ in 0..max_attempts {
        let pick = index::sample(rng, allowed.len(), 3).into_vec();
        let attrs = [allowed[pick[0]], allowed[pick[1]], allowed[pick[2]]];
        let bits = [rng.random(), rng.random(), rng.random()];
        if let Some(t) = sample_attribute_task(ds, split, attrs, bits, shots, queries, repr, rng)? {
            return Ok(t);
        }
    }
    Err(Error::Infeasible(format!("no eligible attribute task in {max_attempts} attempts")))
}

/// Which stream a mixed task came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixSource {
    A,
    B,
}

/// Interleaves two task streams: each task comes from `a` with probability
/// `ratio`, otherwise from `b`. Ends when the chosen stream is exhausted.
#[derive(Debug)]
pub struct MixedStream<A, B> {
    a: A,
    b: B,
    ratio: f64,
    rng: seed::SeededRng,
}

impl<A, B> Iterator for MixedStream<A, B>
where
    A: Iterator<Item = Result<Task>>,
    B: Iterator<Item = Result<Task>>,
{
    type Item = (MixSource, Result<Task>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.rng.random::<f64>() < self.ratio {
            self.a.next().map(|t| (MixSource::A, t))
        } else {
            self.b.next().map(|t| (MixSource::B, t))
        }
    }
}

pub fn mix_task_streams<A, B>(a: A, b: B, ratio: f64, seed: u64) -> Result<MixedStream<A, B>>
where
    A: Iterator<Item = Result<Task>>,
    B: Iterator<Item = Result<Task>>,
{
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mixing ratio {ratio} must lie in [0, 1]")));
    }
    Ok(MixedStream {
        a,
        b,
        ratio,
        rng: seed::rng(seed::mix(seed, streams::MIX, 0)),
    })
}

// ---------------------------------------------------------------------------
// Manifests

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn task_line(t: usize, task: &Task) -> String {
    format!(
        "task={t} way={} shots={} queries={} repr={} sources={} perm={} train={} query={}",
        task.shape.way,
        task.shape.shots,
        task.shape.queries,
        task.repr,
        join(&task.sources),
        join(&task.permutation),
        join(&task.train_idx),
        join(&task.query_idx),
    )
}

/// Hex SHA-256 over the task lines; identifies a task set independently of headers.
pub fn tasks_fingerprint(tasks: &[Task]) -> String {
    let mut h = Sha256::new();
    for (t, task) in tasks.iter().enumerate() {
        h.update(task_line(t, task).as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Text manifest: `# ` header lines then one line per task. Tasks reference
/// dataset rows; inputs are never copied.
pub fn tasks_to_manifest(tasks: &[Task], extra_header: &[String]) -> String {
    let mut out = String::from("# umeta tasks\n");
    let _ = writeln!(out, "# fingerprint={}", tasks_fingerprint(tasks));
    for line in extra_header {
        let _ = writeln!(out, "# {line}");
    }
    for (t, task) in tasks.iter().enumerate() {
        out.push_str(&task_line(t, task));
        out.push('\n');
    }
    out
}

pub fn tasks_from_manifest(text: &str, ds: &DataSet) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("manifest line {}: {what}", lineno + 1));
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing `{k}`")));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(&format!("bad `{k}`")));
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(';')
                .map(|x| x.parse().map_err(|_| bad(&format!("bad `{k}` entry"))))
                .collect()
        };
        if num("task")? != tasks.len() {
            return Err(bad("tasks out of order"));
        }
        let shape = EpisodeShape::new(num("way")?, num("shots")?, num("queries")?)?;
        let repr = get("repr")?.parse()?;
        let sources = get("sources")?
            .split(';')
            .map(|x| x.parse::<i64>().map_err(|_| bad("bad `sources` entry")))
            .collect::<Result<Vec<_>>>()?;
        let task = Task::from_indices(ds, repr, shape, sources, list("perm")?, list("train")?, list("query")?)?;
        tasks.push(task);
    }
    Ok(tasks)
}
