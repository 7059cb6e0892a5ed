//! Partitions of dataset rows into pseudo-classes.
//!
//! Partitions built from a dataset index dataset rows; rows outside the
//! clustered split (or discarded by a margin) carry [`DISCARDED`].

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{DataSet, Representation, Split};
use crate::error::{Error, Result};
use crate::linalg::{scaled_sq_dist, Mat};
use crate::seed::{self, streams};

pub const DISCARDED: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    KMeans,
    Hyperplane,
    Random,
    Supervised,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::KMeans => "kmeans",
            Provenance::Hyperplane => "hyperplane",
            Provenance::Random => "random",
            Provenance::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Provenance::KMeans),
            "hyperplane" => Ok(Provenance::Hyperplane),
            "random" => Ok(Provenance::Random),
            "supervised" => Ok(Provenance::Supervised),
            _ => Err(Error::Data(format!("unknown provenance `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    assignment: Vec<i64>,
    clusters: Vec<Vec<usize>>,
    centroids: Option<Mat>,
    scaling: Option<Vec<f64>>,
    provenance: Provenance,
    space: Representation,
    requested_k: usize,
    seed: u64,
}

impl Partition {
    /// Builds a partition from per-point cluster ids (negative = discarded).
    /// Ids are compacted to `0..k_eff` in increasing order; empty ids vanish.
    pub fn from_assignment(assignment: &[i64], provenance: Provenance) -> Self {
        let max = assignment.iter().copied().max().unwrap_or(-1);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); (max + 1).max(0) as usize];
        for (i, &c) in assignment.iter().enumerate() {
            if c >= 0 {
                members[c as usize].push(i);
            }
        }
        let clusters: Vec<Vec<usize>> = members.into_iter().filter(|m| !m.is_empty()).collect();
        let mut compact = vec![DISCARDED; assignment.len()];
        for (c, m) in clusters.iter().enumerate() {
            for &i in m {
                compact[i] = c as i64;
            }
        }
        let k = clusters.len();
        Self {
            assignment: compact,
            clusters,
            centroids: None,
            scaling: None,
            provenance,
            space: Representation::Embedding,
            requested_k: k,
            seed: 0,
        }
    }

    pub fn assignment(&self) -> &[i64] {
        &self.assignment
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn centroids(&self) -> Option<&Mat> {
        self.centroids.as_ref()
    }

    pub fn scaling(&self) -> Option<&[f64]> {
        self.scaling.as_deref()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn space(&self) -> Representation {
        self.space
    }

    pub fn requested_k(&self) -> usize {
        self.requested_k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_requested_k(mut self, k: usize) -> Self {
        self.requested_k = k;
        self
    }

    pub fn with_space(mut self, space: Representation) -> Self {
        self.space = space;
        self
    }

    pub fn with_scaling(mut self, scaling: Vec<f64>) -> Self {
        self.scaling = Some(scaling);
        self
    }

    /// Sets centroids to the member means of `points` (rows indexed like the assignment).
    pub fn with_member_means(mut self, points: &Mat) -> Result<Self> {
        if points.rows() != self.assignment.len() {
            return Err(Error::Shape(format!(
                "{} points for a partition over {} rows",
                points.rows(),
                self.assignment.len()
            )));
        }
        self.centroids = Some(member_means(points, &self.clusters));
        Ok(self)
    }

    /// Number of clusters with at least `min_size` members.
    pub fn eligible_clusters(&self, min_size: usize) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&c| self.clusters[c].len() >= min_size)
            .collect()
    }

    /// Re-indexes a partition over `rows.len()` local points onto `total` dataset rows.
    pub fn lift(&self, rows: &[usize], total: usize) -> Result<Self> {
        if rows.len() != self.assignment.len() || rows.iter().any(|&r| r >= total) {
            return Err(Error::Shape("row map does not match partition".into()));
        }
        let mut assignment = vec![DISCARDED; total];
        for (local, &row) in rows.iter().enumerate() {
            assignment[row] = self.assignment[local];
        }
        let clusters = self
            .clusters
            .iter()
            .map(|m| {
                let mut v: Vec<usize> = m.iter().map(|&i| rows[i]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        Ok(Self {
            assignment,
            clusters,
            ..self.clone()
        })
    }

    /// Checks the assignment/cluster-list bijection and nonempty clusters.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.assignment.len()];
        for (c, members) in self.clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Contract(format!("cluster {c} is empty")));
            }
            for &i in members {
                if i >= self.assignment.len() || self.assignment[i] != c as i64 || seen[i] {
                    return Err(Error::Contract(format!("point {i} is inconsistent with cluster {c}")));
                }
                seen[i] = true;
            }
        }
        for (i, &a) in self.assignment.iter().enumerate() {
            if a >= 0 && !seen[i] {
                return Err(Error::Contract(format!("point {i} assigned to {a} but not listed")));
            }
            if a < DISCARDED || a >= self.clusters.len() as i64 {
                return Err(Error::Contract(format!("point {i} has invalid cluster id {a}")));
            }
        }
        if let Some(c) = &self.centroids {
            if c.rows() != self.clusters.len() {
                return Err(Error::Contract("centroid count differs from cluster count".into()));
            }
        }
        Ok(())
    }
}

fn member_means(points: &Mat, clusters: &[Vec<usize>]) -> Mat {
    let mut out = Mat::zeros(clusters.len(), points.cols());
    for (c, members) in clusters.iter().enumerate() {
        let row = out.row_mut(c);
        for &i in members {
            for (o, v) in row.iter_mut().zip(points.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KMeansInit {
    /// `k` distinct data points, uniformly.
    #[default]
    RandomPoints,
    PlusPlus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Relative objective improvement below which iteration stops.
    pub tol: f64,
    pub init: KMeansInit,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-8,
            init: KMeansInit::RandomPoints,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansTrace {
    /// Objective after every Lloyd iteration.
    pub objectives: Vec<f64>,
    /// True when the last iteration left the assignment unchanged.
    pub fixed_point: bool,
}

impl KMeansTrace {
    pub fn final_objective(&self) -> f64 {
        self.objectives.last().copied().unwrap_or(0.0)
    }
}

/// Nearest centroid under the scaled metric; ties go to the lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &Mat, scaling: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = scaled_sq_dist(point, centroids.row(c), scaling);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// `sum_c sum_{z in C_c} ||z - mu_c||_A^2` for an assignment and centroids.
pub fn kmeans_objective(points: &Mat, assignment: &[usize], centroids: &Mat, scaling: &[f64]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| scaled_sq_dist(points.row(i), centroids.row(c), scaling))
        .sum()
}

fn init_centroids(points: &Mat, k: usize, scaling: &[f64], init: KMeansInit, rng: &mut impl Rng) -> Mat {
    let n = points.rows();
    match init {
        KMeansInit::RandomPoints => points.select_rows(&index::sample(rng, n, k).into_vec()),
        KMeansInit::PlusPlus => {
            let mut chosen = vec![rng.random_range(0..n)];
            let mut d2: Vec<f64> = (0..n)
                .map(|i| scaled_sq_dist(points.row(i), points.row(chosen[0]), scaling))
                .collect();
            while chosen.len() < k {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = n - 1;
                    for (i, &w) in d2.iter().enumerate() {
                        if u < w {
                            pick = i;
                            break;
                        }
                        u -= w;
                    }
                    pick
                } else {
                    // All remaining mass is zero: take any unchosen point.
                    (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
                };
                chosen.push(next);
                for (i, d) in d2.iter_mut().enumerate() {
                    *d = d.min(scaled_sq_dist(points.row(i), points.row(next), scaling));
                }
            }
            points.select_rows(&chosen)
        }
    }
}

/// Lloyd's algorithm under the diagonal metric `scaling`.
pub fn kmeans(
    points: &Mat,
    k: usize,
    scaling: &[f64],
    init_seed: u64,
    opts: &KMeansOptions,
) -> Result<(Partition, KMeansTrace)> {
    let (n, d) = (points.rows(), points.cols());
    if k == 0 || k > n {
        return Err(Error::Infeasible(format!("cannot form {k} clusters from {n} points")));
    }
    if scaling.len() != d {
        return Err(Error::Shape(format!("scaling has {} entries for {d} dimensions", scaling.len())));
    }
    if scaling.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Contract("scaling entries must be positive and finite".into()));
    }
    if !points.is_finite() {
        return Err(Error::Data("k-means input contains NaN or infinite values".into()));
    }
    let mut rng = seed::rng(init_seed);
    let mut centroids = init_centroids(points, k, scaling, opts.init, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut objectives: Vec<f64> = Vec::new();
    let mut fixed_point = false;

    for _ in 0..opts.max_iter.max(1) {
        let nearest: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(points.row(i), &centroids, scaling))
            .collect();
        let mut next: Vec<usize> = nearest.iter().map(|&(c, _)| c).collect();

        // Reseed empty clusters at the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        next.iter().for_each(|&c| counts[c] += 1);
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let mut far: Option<(usize, f64)> = None;
            for i in 0..n {
                if counts[next[i]] < 2 {
                    continue;
                }
                let dist = scaled_sq_dist(points.row(i), centroids.row(next[i]), scaling);
                if far.is_none_or(|(_, best)| dist > best) {
                    far = Some((i, dist));
                }
            }
            let (i, _) = far.expect("k <= n leaves a cluster with two members");
            counts[next[i]] -= 1;
            counts[empty] += 1;
            next[i] = empty;
            centroids.row_mut(empty).copy_from_slice(points.row(i));
        }

        let unchanged = next == assignment;
        assignment = next;
        let members: Vec<Vec<usize>> = {
            let mut m = vec![Vec::new(); k];
            for (i, &c) in assignment.iter().enumerate() {
                m[c].push(i);
            }
            m
        };
        centroids = member_means(points, &members);
        let objective = kmeans_objective(points, &assignment, &centroids, scaling);
        if let Some(&prev) = objectives.last() {
            debug_assert!(
                objective <= prev * (1.0 + 1e-12) + 1e-12,
                "k-means objective increased from {prev} to {objective}"
            );
        }
        let prev = objectives.last().copied();
        objectives.push(objective);
        if unchanged {
            fixed_point = true;
            break;
        }
        if let Some(prev) = prev {
            if objective == 0.0 || prev - objective <= opts.tol * prev {
                // Converged within tolerance; confirm whether it is also a fixed point.
                fixed_point = (0..n).all(|i| nearest_centroid(points.row(i), &centroids, scaling).0 == assignment[i]);
                break;
            }
        }
    }

    let assignment_i64: Vec<i64> = assignment.iter().map(|&c| c as i64).collect();
    let mut partition = Partition::from_assignment(&assignment_i64, Provenance::KMeans)
        .with_requested_k(k)
        .with_seed(init_seed)
        .with_scaling(scaling.to_vec());
    partition.centroids = Some(centroids);
    Ok((
        partition,
        KMeansTrace {
            objectives,
            fixed_point,
        },
    ))
}

/// How per-partition diagonal metrics are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScalingMode {
    /// Each entry uniform on (0, 1].
    #[default]
    Random,
    Ones,
}

fn meta_train_features(ds: &DataSet, repr: Representation) -> Result<(Vec<usize>, Mat)> {
    let rows = ds.rows_in(Split::MetaTrain);
    if rows.is_empty() {
        return Err(Error::Data("dataset has no meta-train rows".into()));
    }
    let features = ds.features(repr)?.select_rows(&rows);
    Ok((rows, features))
}

/// `count` k-means partitions of the meta-train embeddings, each under its
/// own random diagonal metric and initialization.
pub fn generate_partitions(
    ds: &DataSet,
    count: usize,
    k: usize,
    seed: u64,
    scaling_mode: ScalingMode,
    opts: &KMeansOptions,
) -> Result<Vec<Partition>> {
    let (rows, points) = meta_train_features(ds, Representation::Embedding)?;
    let d = points.cols();
    (0..count)
        .into_par_iter()
        .map(|p| {
            let part_seed = seed::mix(seed, streams::PARTITION, p as u64);
            let mut rng = seed::rng(part_seed);
            let scaling: Vec<f64> = match scaling_mode {
                ScalingMode::Random => (0..d).map(|_| 1.0 - rng.random::<f64>()).collect(),
                ScalingMode::Ones => vec![1.0; d],
            };
            let (local, _) = kmeans(&points, k, &scaling, rng.random(), opts)?;
            Ok(local.lift(&rows, ds.len())?.with_seed(part_seed))
        })
        .collect()
}

/// k-means on the meta-train raw vectors with an identity metric.
pub fn pixel_partition(ds: &DataSet, k: usize, seed: u64, opts: &KMeansOptions) -> Result<Partition> {
    let (rows, points) = meta_train_features(ds, Representation::Raw)?;
    let (local, _) = kmeans(&points, k, &vec![1.0; points.cols()], seed, opts)?;
    Ok(local.lift(&rows, ds.len())?.with_space(Representation::Raw).with_seed(seed))
}

// ---------------------------------------------------------------------------
// Hyperplanes

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperplane {
    normal: Vec<f64>,
    point: Vec<f64>,
    unit: Vec<f64>,
}

impl Hyperplane {
    pub fn new(normal: Vec<f64>, point: Vec<f64>) -> Result<Self> {
        if normal.len() != point.len() {
            return Err(Error::Shape("hyperplane normal and point differ in dimension".into()));
        }
        let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Contract("hyperplane normal must have nonzero finite norm".into()));
        }
        let unit = normal.iter().map(|v| v / norm).collect();
        Ok(Self { normal, point, unit })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn point(&self) -> &[f64] {
        &self.point
    }

    /// `(n / ||n||) . (z - z0)`.
    pub fn signed_distance(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.unit.len() {
            return Err(Error::Shape(format!(
                "point has {} dimensions, hyperplane has {}",
                z.len(),
                self.unit.len()
            )));
        }
        Ok(self.unit.iter().zip(z.iter().zip(&self.point)).map(|(u, (a, b))| u * (a - b)).sum())
    }
}

pub fn signed_distance(h: &Hyperplane, z: &[f64]) -> Result<f64> {
    h.signed_distance(z)
}

/// Number of hyperplanes needed to carve out `way` regions.
pub fn hyperplanes_for_way(way: usize) -> usize {
    if way <= 1 {
        0
    } else {
        (usize::BITS - (way - 1).leading_zeros()) as usize
    }
}

/// Buckets points by the sign pattern against `planes`, dropping points
/// within `margin` of any plane and subsets smaller than `min_size`.
/// Cluster ids follow increasing sign codes (bit `h` set = non-negative side of plane `h`).
pub fn partition_by_hyperplanes(points: &Mat, planes: &[Hyperplane], margin: f64, min_size: usize) -> Result<Partition> {
    if !(margin >= 0.0) {
        return Err(Error::Contract(format!("margin {margin} must be >= 0")));
    }
    let mut codes = vec![DISCARDED; points.rows()];
    for (i, code) in codes.iter_mut().enumerate() {
        let mut c = 0i64;
        let mut keep = true;
        for (h, plane) in planes.iter().enumerate() {
            let dist = plane.signed_distance(points.row(i))?;
            if dist.abs() < margin {
                keep = false;
                break;
            }
            if dist >= 0.0 {
                c |= 1 << h;
            }
        }
        if keep {
            *code = c;
        }
    }
    Ok(prune_small(codes, min_size, Provenance::Hyperplane))
}

fn prune_small(mut codes: Vec<i64>, min_size: usize, provenance: Provenance) -> Partition {
    let max = codes.iter().copied().max().unwrap_or(-1);
    let mut sizes = vec![0usize; (max + 1).max(0) as usize];
    for &c in &codes {
        if c >= 0 {
            sizes[c as usize] += 1;
        }
    }
    for c in codes.iter_mut() {
        if *c >= 0 && sizes[*c as usize] < min_size {
            *c = DISCARDED;
        }
    }
    Partition::from_assignment(&codes, provenance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperplaneOptions {
    pub pool_size: usize,
    pub retry_cap: usize,
}

impl Default for HyperplaneOptions {
    fn default() -> Self {
        Self {
            pool_size: 1000,
            retry_cap: 100,
        }
    }
}

/// Pre-computed hyperplanes with per-point side and margin masks.
#[derive(Clone, Debug)]
pub struct HyperplanePool {
    planes: Vec<Hyperplane>,
    /// `positive[h][i]`: point `i` lies on the non-negative side of plane `h`.
    positive: Vec<Vec<bool>>,
    /// `kept[h][i]`: point `i` is at least `margin` away from plane `h`.
    kept: Vec<Vec<bool>>,
    margin: f64,
}

impl HyperplanePool {
    /// Normals are standard Gaussian; each plane passes through a uniformly drawn data point.
    pub fn sample(points: &Mat, size: usize, margin: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(margin >= 0.0) {
            return Err(Error::Contract(format!("margin {margin} must be >= 0")));
        }
        if points.rows() == 0 || size == 0 {
            return Err(Error::Infeasible("hyperplane pool needs points and a positive size".into()));
        }
        let d = points.cols();
        let mut planes = Vec::with_capacity(size);
        while planes.len() < size {
            let normal: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let anchor = points.row(rng.random_range(0..points.rows())).to_vec();
            if let Ok(h) = Hyperplane::new(normal, anchor) {
                planes.push(h);
            }
        }
        let (positive, kept) = planes
            .iter()
            .map(|h| {
                (0..points.rows())
                    .map(|i| {
                        let dist = h.signed_distance(points.row(i)).expect("dims checked");
                        (dist >= 0.0, dist.abs() >= margin)
                    })
                    .unzip()
            })
            .unzip();
        Ok(Self {
            planes,
            positive,
            kept,
            margin,
        })
    }

    pub fn planes(&self) -> &[Hyperplane] {
        &self.planes
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Draws partitions from random plane combinations until one has at least
    /// `way` subsets of `min_size` members, or the retry cap is reached.
    /// Returns the partition and the plane indices used.
    pub fn partition(
        &self,
        way: usize,
        min_size: usize,
        retry_cap: usize,
        rng: &mut impl Rng,
    ) -> Result<(Partition, Vec<usize>)> {
        let h = hyperplanes_for_way(way);
        if h == 0 || h > self.planes.len() {
            return Err(Error::Infeasible(format!(
                "{way}-way tasks need {h} hyperplanes but the pool has {}",
                self.planes.len()
            )));
        }
        let n = self.positive[0].len();
        let mut kept_fraction_sum = 0.0;
        for attempt in 0..retry_cap.max(1) {
            let chosen = index::sample(rng, self.planes.len(), h).into_vec();
            let mut codes = vec![DISCARDED; n];
            let mut kept = 0usize;
            for (i, code) in codes.iter_mut().enumerate() {
                if chosen.iter().all(|&p| self.kept[p][i]) {
                    kept += 1;
                    *code = chosen
                        .iter()
                        .enumerate()
                        .filter(|&(_, &p)| self.positive[p][i])
                        .fold(0i64, |acc, (bit, _)| acc | 1 << bit);
                }
            }
            kept_fraction_sum += kept as f64 / n as f64;
            let part = prune_small(codes, min_size, Provenance::Hyperplane);
            if part.num_clusters() >= way {
                return Ok((part, chosen));
            }
            log::debug!("hyperplane partition rejected on attempt {attempt}: {} subsets", part.num_clusters());
        }
        Err(Error::Infeasible(format!(
            "margin {} left too few points: no partition with {way} subsets of >= {min_size} members \
             after {retry_cap} attempts (mean kept-point fraction {:.4})",
            self.margin,
            kept_fraction_sum / retry_cap.max(1) as f64
        )))
    }
}

/// One hyperplane partition of the meta-train embeddings.
pub fn hyperplane_partition(
    ds: &DataSet,
    way: usize,
    margin: f64,
    min_size: usize,
    seed: u64,
    opts: &HyperplaneOptions,
) -> Result<Partition> {
    let (rows, points) = meta_train_features(ds, Representation::Embedding)?;
    let mut rng = seed::rng(seed);
    let pool = HyperplanePool::sample(&points, opts.pool_size, margin, &mut rng)?;
    let (local, _) = pool.partition(way, min_size, opts.retry_cap, &mut rng)?;
    Ok(local.lift(&rows, ds.len())?.with_seed(seed))
}

/// `count` hyperplane partitions sharing one pre-computed pool.
pub fn hyperplane_partitions(
    ds: &DataSet,
    count: usize,
    way: usize,
    margin: f64,
    min_size: usize,
    seed: u64,
    opts: &HyperplaneOptions,
) -> Result<Vec<Partition>> {
    let (rows, points) = meta_train_features(ds, Representation::Embedding)?;
    let pool = HyperplanePool::sample(&points, opts.pool_size, margin, &mut seed::rng(seed))?;
    (0..count)
        .map(|p| {
            let part_seed = seed::mix(seed, streams::PARTITION, p as u64);
            let (local, _) = pool.partition(way, min_size, opts.retry_cap, &mut seed::rng(part_seed))?;
            Ok(local.lift(&rows, ds.len())?.with_seed(part_seed))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random and supervised partitions

/// Each of `n` points goes to one of `k` clusters uniformly; empty clusters are dropped.
pub fn random_partition(n: usize, k: usize, rng: &mut impl Rng) -> Result<Partition> {
    if k < 2 {
        return Err(Error::Contract(format!("random partition needs k >= 2, got {k}")));
    }
    let assignment: Vec<i64> = (0..n).map(|_| rng.random_range(0..k) as i64).collect();
    Ok(Partition::from_assignment(&assignment, Provenance::Random).with_requested_k(k))
}

/// Random partition of the meta-train rows.
pub fn random_partition_of(ds: &DataSet, k: usize, seed: u64) -> Result<Partition> {
    let rows = ds.rows_in(Split::MetaTrain);
    let local = random_partition(rows.len(), k, &mut seed::rng(seed))?;
    Ok(local.lift(&rows, ds.len())?.with_seed(seed))
}

/// One cluster per label value among the rows of `split`.
pub fn partition_from_labels(ds: &DataSet, split: Split) -> Result<Partition> {
    let labels = ds.require_labels()?;
    let assignment: Vec<i64> = labels
        .iter()
        .zip(ds.splits())
        .map(|(&l, &s)| if s == split { l as i64 } else { DISCARDED })
        .collect();
    let p = Partition::from_assignment(&assignment, Provenance::Supervised);
    let k = p.num_clusters();
    Ok(p.with_requested_k(k))
}

// ---------------------------------------------------------------------------
// Text serialization

/// Writes the partition as `# key=value` header lines followed by an
/// `index,cluster` table. `extra_header` lines are emitted verbatim after `# `.
pub fn partition_to_text(p: &Partition, extra_header: &[String]) -> String {
    let mut out = String::new();
    out.push_str("# umeta partition\n");
    let _ = writeln!(out, "# provenance={}", p.provenance);
    let _ = writeln!(out, "# space={}", p.space);
    let _ = writeln!(out, "# k={}", p.requested_k);
    let _ = writeln!(out, "# seed={}", p.seed);
    match &p.scaling {
        Some(s) => {
            let v: Vec<String> = s.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "# scaling={}", v.join(";"));
        }
        None => out.push_str("# scaling=none\n"),
    }
    for line in extra_header {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("index,cluster\n");
    for (i, c) in p.assignment.iter().enumerate() {
        let _ = writeln!(out, "{i},{c}");
    }
    out
}

pub fn partition_from_text(text: &str) -> Result<Partition> {
    let mut provenance = None;
    let mut space = Representation::Embedding;
    let mut k = None;
    let mut seed_value = 0u64;
    let mut scaling = None;
    let mut assignment = Vec::new();
    let mut saw_table = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let h = h.trim();
            let bad = |what: &str| Error::Data(format!("line {}: bad {what} `{h}`", lineno + 1));
            if let Some(v) = h.strip_prefix("provenance=") {
                provenance = Some(v.parse()?);
            } else if let Some(v) = h.strip_prefix("space=") {
                space = v.parse().map_err(|_| bad("space"))?;
            } else if let Some(v) = h.strip_prefix("k=") {
                k = Some(v.parse::<usize>().map_err(|_| bad("k"))?);
            } else if let Some(v) = h.strip_prefix("seed=") {
                seed_value = v.parse().map_err(|_| bad("seed"))?;
            } else if let Some(v) = h.strip_prefix("scaling=") {
                if v != "none" {
                    scaling = Some(
                        v.split(';')
                            .map(|x| x.parse::<f64>().map_err(|_| bad("scaling")))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
            }
            continue;
        }
        if line == "index,cluster" {
            saw_table = true;
            continue;
        }
        if !saw_table {
            return Err(Error::Data(format!("line {}: data before `index,cluster` header", lineno + 1)));
        }
        let (i, c) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("line {}: expected `index,cluster`", lineno + 1)))?;
        let i: usize = i.trim().parse().map_err(|_| Error::Data(format!("line {}: bad index", lineno + 1)))?;
        let c: i64 = c.trim().parse().map_err(|_| Error::Data(format!("line {}: bad cluster", lineno + 1)))?;
        if i != assignment.len() {
            return Err(Error::Data(format!("line {}: index {i} out of order", lineno + 1)));
        }
        assignment.push(c);
    }
    let provenance = provenance.ok_or_else(|| Error::Data("partition file lacks a provenance header".into()))?;
    let mut p = Partition::from_assignment(&assignment, provenance).with_space(space).with_seed(seed_value);
    if let Some(k) = k {
        p = p.with_requested_k(k);
    }
    if let Some(s) = scaling {
        p = p.with_scaling(s);
    }
    Ok(p)
}
