//! Comparison methods that read a task through fixed embeddings (or, for
//! training from scratch, a freshly initialized network).

use rand::Rng;

use crate::error::{shape, Error, Result};
use crate::linalg::{argmax, sq_dist, Mat};
use crate::metalearn::{init_model, maml_adapt, predict_labels, LearnerKind};
use crate::nn::{backward, forward_cached, softmax_xent, Activation, Layer, ModelParams};
use crate::optim::OptimizerState;
use crate::partition::{nearest_centroid, Partition};
use crate::seed;
use crate::taskgen::Task;

fn one_hot(labels: &[usize], way: usize) -> Result<Mat> {
    let mut m = Mat::zeros(labels.len(), way);
    for (r, &l) in labels.iter().enumerate() {
        if l >= way {
            return Err(Error::Contract(format!("label {l} outside a {way}-way task")));
        }
        m[(r, l)] = 1.0;
    }
    Ok(m)
}

fn check_fit_inputs(x: &Mat, labels: &[usize], way: usize) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if x.rows() < way {
        return Err(Error::Contract(format!("{} training rows for {way} classes", x.rows())));
    }
    Ok(())
}

/// Plurality vote of the `k` nearest training rows. Tied labels are resolved
/// by the smaller summed distance, then by the lower label.
pub fn knn_classify(train: &Mat, labels: &[usize], queries: &Mat, k: usize) -> Result<Vec<usize>> {
    if train.rows() == 0 {
        return Err(Error::Contract("knn needs a nonempty train set".into()));
    }
    if labels.len() != train.rows() {
        return Err(shape(format!("{} labels for {} train rows", labels.len(), train.rows())));
    }
    if k == 0 || k > train.rows() {
        return Err(Error::Contract(format!("k_nn = {k} with {} train rows", train.rows())));
    }
    if queries.cols() != train.cols() {
        return Err(shape("query and train widths differ"));
    }
    let way = labels.iter().max().map_or(0, |&m| m + 1);
    let mut out = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let mut d: Vec<(f64, usize)> = (0..train.rows())
            .map(|i| (sq_dist(queries.row(q), train.row(i)), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; way];
        let mut dist = vec![0.0; way];
        for &(d2, i) in &d[..k] {
            votes[labels[i]] += 1;
            dist[labels[i]] += d2.sqrt();
        }
        let best = (0..way)
            .filter(|&l| votes[l] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then(dist[a].total_cmp(&dist[b]))
                    .then(a.cmp(&b))
            })
            .expect("k >= 1");
        out.push(best);
    }
    Ok(out)
}

/// Default neighbour count for a `shots`-shot task.
pub fn default_knn_k(shots: usize) -> usize {
    shots.clamp(1, 5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearOptions {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// d × N.
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub l2: f64,
    pub iterations: usize,
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 ||W||^2`, with
/// the step set from a bound on the loss curvature.
pub fn linear_fit(x: &Mat, labels: &[usize], way: usize, opts: &LinearOptions) -> Result<LinearModel> {
    check_fit_inputs(x, labels, way)?;
    let y = one_hot(labels, way)?;
    let max_sq = (0..x.rows())
        .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>() + 1.0)
        .fold(0.0, f64::max);
    let step = 1.0 / (0.5 * max_sq + opts.l2);
    let mut params = ModelParams::new(vec![Layer {
        weight: Mat::zeros(x.cols(), way),
        bias: vec![0.0; way],
        activation: Activation::Identity,
    }])?;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        let cache = forward_cached(&params, x.clone())?;
        let (loss, d) = softmax_xent(cache.output(), &y);
        let (mut g, _) = backward(&params, &cache, d)?;
        let w = &params.layers()[0].weight;
        for (gv, wv) in g.layers_mut()[0].weight.as_mut_slice().iter_mut().zip(w.as_slice()) {
            *gv += opts.l2 * wv;
        }
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::Numeric(format!("linear classifier diverged at iteration {it}")));
        }
        iterations = it + 1;
        if g.norm() < opts.tol {
            break;
        }
        params.add_scaled(&g, -step)?;
    }
    let layer = params.layers()[0].clone();
    Ok(LinearModel {
        weight: layer.weight,
        bias: layer.bias,
        l2: opts.l2,
        iterations,
    })
}

pub fn linear_predict(model: &LinearModel, queries: &Mat) -> Result<Vec<usize>> {
    let logits = queries.matmul(&model.weight)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().zip(&model.bias).map(|(a, b)| a + b).collect();
            argmax(&row)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpOptions {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for MlpOptions {
    fn default() -> Self {
        Self {
            hidden: 128,
            dropout: 0.5,
            lr: 0.01,
            steps: 200,
            seed: 0,
        }
    }
}

/// One ReLU hidden layer followed by a linear head; dropout sits between them.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub hidden: ModelParams,
    pub head: ModelParams,
    pub dropout: f64,
}

impl MlpModel {
    /// Both layers as one network (dropout is inactive at prediction).
    pub fn network(&self) -> ModelParams {
        let layers = self.hidden.layers().iter().chain(self.head.layers()).cloned().collect();
        ModelParams::new(layers).expect("layers chain")
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Mat {
    let keep = 1.0 - rate;
    let data = (0..rows * cols)
        .map(|_| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    Mat::from_vec(rows, cols, data).expect("sized")
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// Full-batch Adam on cross-entropy with a fresh dropout mask every step.
pub fn mlp_dropout_fit(x: &Mat, labels: &[usize], way: usize, opts: &MlpOptions) -> Result<MlpModel> {
    check_fit_inputs(x, labels, way)?;
    if !(0.0..1.0).contains(&opts.dropout) {
        return Err(Error::Config(format!("dropout rate {} must lie in [0, 1)", opts.dropout)));
    }
    let y = one_hot(labels, way)?;
    let mut rng = seed::rng(opts.seed);
    let net = ModelParams::mlp(&[x.cols(), opts.hidden, way], Activation::Identity, &mut rng)?;
    let mut hidden = ModelParams::new(vec![net.layers()[0].clone()])?;
    let mut head = ModelParams::new(vec![net.layers()[1].clone()])?;
    let mut opt_h = OptimizerState::adam(opts.lr, &hidden)?;
    let mut opt_o = OptimizerState::adam(opts.lr, &head)?;
    for step in 0..opts.steps {
        let ch = forward_cached(&hidden, x.clone())?;
        let mask = dropout_mask(x.rows(), opts.hidden, opts.dropout, &mut rng);
        let dropped = hadamard(ch.output(), &mask);
        let co = forward_cached(&head, dropped)?;
        let (loss, d) = softmax_xent(co.output(), &y);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("MLP classifier diverged at step {step}")));
        }
        let (go, d_dropped) = backward(&head, &co, d)?;
        let (gh, _) = backward(&hidden, &ch, hadamard(&d_dropped, &mask))?;
        head = opt_o.apply(&head, &go)?;
        hidden = opt_h.apply(&hidden, &gh)?;
    }
    if !hidden.is_finite() || !head.is_finite() {
        return Err(Error::Numeric("MLP classifier produced non-finite weights".into()));
    }
    Ok(MlpModel {
        hidden,
        head,
        dropout: opts.dropout,
    })
}

pub fn mlp_dropout_predict(model: &MlpModel, queries: &Mat) -> Result<Vec<usize>> {
    predict_labels(&model.network(), queries)
}

/// Labels each cluster by the plurality of train shots nearest to its centroid
/// (ties to the lower label), then gives each query the label of its nearest
/// centroid, falling back to the labeled centroid closest to that centroid.
pub fn cluster_matching_classify(p: &Partition, train: &Mat, labels: &[usize], queries: &Mat) -> Result<Vec<usize>> {
    let centroids = p
        .centroids()
        .ok_or_else(|| Error::Contract("cluster matching needs partition centroids".into()))?;
    if centroids.cols() != train.cols() || centroids.cols() != queries.cols() {
        return Err(shape(format!(
            "partition centroids have width {} but task features {}",
            centroids.cols(),
            train.cols()
        )));
    }
    if labels.len() != train.rows() {
        return Err(shape("label count differs from train rows"));
    }
    let ones = vec![1.0; centroids.cols()];
    let scaling = p.scaling().unwrap_or(&ones);
    let k = centroids.rows();
    let way = labels.iter().max().map_or(0, |&m| m + 1);
    let mut votes = vec![vec![0usize; way]; k];
    for (r, &l) in labels.iter().enumerate() {
        let (c, _) = nearest_centroid(train.row(r), centroids, scaling);
        votes[c][l] += 1;
    }
    let cluster_label: Vec<Option<usize>> = votes
        .iter()
        .map(|v| {
            let top = *v.iter().max()?;
            (top > 0).then(|| v.iter().position(|&c| c == top).expect("max present"))
        })
        .collect();
    let labeled: Vec<usize> = (0..k).filter(|&c| cluster_label[c].is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Contract("no cluster received a training label".into()));
    }
    (0..queries.rows())
        .map(|q| {
            let (c, _) = nearest_centroid(queries.row(q), centroids, scaling);
            Ok(match cluster_label[c] {
                Some(l) => l,
                None => {
                    let nearest = labeled
                        .iter()
                        .copied()
                        .min_by(|&a, &b| {
                            sq_dist(centroids.row(c), centroids.row(a))
                                .total_cmp(&sq_dist(centroids.row(c), centroids.row(b)))
                                .then(a.cmp(&b))
                        })
                        .expect("nonempty");
                    cluster_label[nearest].expect("labeled")
                }
            })
        })
        .collect()
}

/// A MAML-shaped network from a random initialization, adapted with the
/// evaluation protocol, predicting the task's queries.
pub fn train_from_scratch(task: &Task, hidden: &[usize], steps: usize, lr: f64, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed);
    let init = init_model(LearnerKind::Maml, task.train_x.cols(), task.shape.way, hidden, &mut rng)?;
    let adapted = maml_adapt(&init, task, lr, steps)?;
    predict_labels(&adapted, &task.query_x)
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_mixture, Representation, Split, SynthSpec};
    use crate::nn::xent_loss_grad;
    use crate::partition::{partition_from_labels, Provenance};
    use crate::taskgen::{sample_supervised_task, EpisodeShape};

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn knn_examples() {
        let train = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[5.0, 5.0]]);
        let labels = [0, 0, 1, 1];
        assert_eq!(knn_classify(&train, &labels, &m(&[&[5.0, 5.0]]), 1).unwrap(), vec![1]);
        // Neighbours of (0.2, 0.1) at k=3: labels {0, 0, 1}.
        assert_eq!(knn_classify(&train, &labels, &m(&[&[0.2, 0.1]]), 3).unwrap(), vec![0]);
        // k = NK: 2 vs 2 tie, broken by summed distance.
        assert_eq!(knn_classify(&train, &labels, &m(&[&[4.0, 4.0]]), 4).unwrap(), vec![1]);
        let global = [0, 1, 1, 1];
        assert_eq!(knn_classify(&train, &global, &m(&[&[0.0, 0.0]]), 4).unwrap(), vec![1]);
        assert!(knn_classify(&Mat::zeros(0, 2), &[], &m(&[&[0.0, 0.0]]), 1).is_err());
        assert!(knn_classify(&train, &labels, &m(&[&[0.0, 0.0]]), 5).is_err());
    }

    #[test]
    fn knn_one_is_brute_force_nearest_neighbour() {
        let mut rng = seed::rng(8);
        for _ in 0..20 {
            let train = Mat::from_vec(12, 3, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
            let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
            let q = Mat::from_vec(5, 3, (0..15).map(|_| rng.random::<f64>()).collect()).unwrap();
            let pred = knn_classify(&train, &labels, &q, 1).unwrap();
            for r in 0..5 {
                let mut best = (f64::INFINITY, 0);
                for i in 0..12 {
                    let d: f64 = (0..3).map(|j| (q[(r, j)] - train[(i, j)]).powi(2)).sum();
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                assert_eq!(pred[r], labels[best.1]);
            }
        }
    }

    #[test]
    fn linear_separable_and_degenerate() {
        let x = m(&[&[1.0, 2.0], &[2.0, 1.5], &[-1.0, -2.0], &[-2.0, -0.5]]);
        let labels = [0, 0, 1, 1];
        let model = linear_fit(&x, &labels, 2, &LinearOptions::default()).unwrap();
        assert_eq!(linear_predict(&model, &x).unwrap(), labels.to_vec());
        assert_eq!(linear_predict(&model, &m(&[&[2.0, 1.5]])).unwrap(), vec![0]);
        let same = m(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let flat = linear_fit(&same, &labels, 2, &LinearOptions::default()).unwrap();
        let p = linear_predict(&flat, &m(&[&[1.0, 1.0], &[3.0, -2.0]])).unwrap();
        assert_eq!(p[0], p[1]);
        assert!(linear_fit(&x, &labels[..3], 2, &LinearOptions::default()).is_err());
    }

    #[test]
    fn mlp_hidden_width_and_separable_fit() {
        let x = m(&[&[1.0, 2.0], &[2.0, 1.5], &[-1.0, -2.0], &[-2.0, -0.5]]);
        let labels = [0, 0, 1, 1];
        let model = mlp_dropout_fit(&x, &labels, 2, &MlpOptions::default()).unwrap();
        assert_eq!(model.hidden.out_dim(), 128);
        assert_eq!(mlp_dropout_predict(&model, &x).unwrap(), labels.to_vec());
    }

    #[test]
    fn zero_dropout_matches_plain_training() {
        let x = m(&[&[1.0, 2.0], &[2.0, 1.5], &[-1.0, -2.0], &[-2.0, -0.5], &[0.3, 0.1]]);
        let labels = [0, 0, 1, 1, 2];
        let opts = MlpOptions {
            dropout: 0.0,
            steps: 25,
            hidden: 16,
            ..MlpOptions::default()
        };
        let model = mlp_dropout_fit(&x, &labels, 3, &opts).unwrap();
        let mut rng = seed::rng(opts.seed);
        let mut p = ModelParams::mlp(&[2, 16, 3], Activation::Identity, &mut rng).unwrap();
        let mut opt = OptimizerState::adam(opts.lr, &p).unwrap();
        let y = one_hot(&labels, 3).unwrap();
        for _ in 0..opts.steps {
            let (_, g) = xent_loss_grad(&p, &x, &y).unwrap();
            p = opt.apply(&p, &g).unwrap();
        }
        let diff = model.network().flatten().iter().zip(p.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn inverted_dropout_preserves_expected_preactivation() {
        let mut rng = seed::rng(2);
        let h = Mat::from_vec(1, 128, (0..128).map(|_| rng.random::<f64>()).collect()).unwrap();
        let w = Mat::from_vec(128, 3, (0..384).map(|_| rng.random::<f64>()).collect()).unwrap();
        let clean = h.matmul(&w).unwrap();
        let mut mean = [0.0; 3];
        let trials = 10_000;
        for _ in 0..trials {
            let z = hadamard(&h, &dropout_mask(1, 128, 0.5, &mut rng)).matmul(&w).unwrap();
            for j in 0..3 {
                mean[j] += z[(0, j)] / trials as f64;
            }
        }
        for j in 0..3 {
            assert!((mean[j] - clean[(0, j)]).abs() / clean[(0, j)].abs() < 0.01);
        }
    }

    #[test]
    fn cluster_matching_examples() {
        // Two clusters, only the first labeled: queries near the second fall back.
        let p = Partition::from_assignment(&[0, 0, 1, 1, 2, 2], Provenance::KMeans);
        let pts = m(&[&[0.0, 0.0], &[0.0, 0.2], &[5.0, 0.0], &[5.0, 0.2], &[20.0, 0.0], &[20.0, 0.2]]);
        let p = p.with_member_means(&pts).unwrap();
        let train = m(&[&[0.0, 0.1], &[20.0, 0.1]]);
        let pred = cluster_matching_classify(&p, &train, &[1, 0], &m(&[&[5.1, 0.0], &[0.1, 0.1], &[19.0, 0.0]])).unwrap();
        // Centroid 1 (x=5) is nearer centroid 0 (x=0) than centroid 2 (x=20).
        assert_eq!(pred, vec![1, 1, 0]);
    }

    #[test]
    fn cluster_matching_on_true_classes_is_perfect() {
        let ds = synth_mixture(&SynthSpec::new(8, 20, 6, 3, 0.05, 3)).unwrap();
        let emb = ds.embeddings().unwrap();
        let p = partition_from_labels(&ds, Split::MetaTrain).unwrap().with_member_means(emb).unwrap();
        let shape = EpisodeShape::new(5, 1, 5).unwrap();
        for s in 0..10 {
            let t = sample_supervised_task(&ds, Split::MetaTrain, shape, Representation::Embedding, &mut seed::rng(s)).unwrap();
            let pred = cluster_matching_classify(&p, &t.train_x, &t.train_labels(), &t.query_x).unwrap();
            assert_eq!(accuracy(&pred, &t.query_labels()), 1.0);
        }
    }

    #[test]
    fn scratch_is_deterministic_and_fits_separable_tasks() {
        let ds = synth_mixture(&SynthSpec::new(4, 20, 6, 3, 0.05, 3)).unwrap();
        let shape = EpisodeShape::new(2, 5, 5).unwrap();
        let t = sample_supervised_task(&ds, Split::MetaTrain, shape, Representation::Raw, &mut seed::rng(0)).unwrap();
        let a = train_from_scratch(&t, &[64, 64], 50, 0.05, 1).unwrap();
        assert_eq!(a, train_from_scratch(&t, &[64, 64], 50, 0.05, 1).unwrap());
        let init = init_model(LearnerKind::Maml, 6, 2, &[64, 64], &mut seed::rng(1)).unwrap();
        let adapted = maml_adapt(&init, &t, 0.05, 300).unwrap();
        assert_eq!(predict_labels(&adapted, &t.train_x).unwrap(), t.train_labels());
    }
}
