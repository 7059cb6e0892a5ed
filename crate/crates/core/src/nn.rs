//! Dense feed-forward classifier with exact reverse-mode gradients.
//!
//! Second-order terms for adaptation-through-gradient-descent are computed as
//! Hessian-vector products: the analytic backward pass is run on [`Dual`]
//! parameters whose tangent is the vector being multiplied.

use rand::Rng;

use crate::error::{shape, Error, Result};
use crate::linalg::{Dual, Mat, Real};
use crate::optim::apply_sgd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z.value() > 0.0 {
                    z
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// One affine layer followed by an activation. `weight` is `in_dim x out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f64> {
    pub weight: Mat<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Network weights. Gradients share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f64> {
    layers: Vec<Layer<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape("a model needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(shape(format!(
                    "layer {i}: bias length {} != out_dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        if layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias))
            .any(|v| !v.value().is_finite())
        {
            return Err(Error::Numeric("model parameters contain non-finite entries".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Mat::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![T::zero(); l.out_dim()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn same_shape<U: Real>(&self, other: &ModelParams<U>) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim() == b.in_dim()
                    && a.out_dim() == b.out_dim()
                    && a.activation == b.activation
            })
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.value().is_finite())
    }
}

impl ModelParams<f64> {
    /// Fully connected net through `dims` (`dims[0]` is the input width).
    /// Hidden layers use ReLU; the final layer uses `output_activation`.
    /// Weights are uniform on `±sqrt(6 / (in + out))`, biases zero.
    pub fn mlp(dims: &[usize], output_activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(shape(format!("invalid layer widths {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Mat::from_vec(w[0], w[1], data).expect("sized"),
                    bias: vec![0.0; w[1]],
                    activation: if i == last {
                        output_activation
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Same shape as `self`, filled from `flat`.
    pub fn with_values(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(shape(format!(
                "{} values for a model with {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        for (d, s) in out.values_mut().zip(flat) {
            *d = *s;
        }
        Ok(out)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape("parameter shapes differ"));
        }
        for (d, s) in self.values_mut().zip(other.values()) {
            *d += alpha * s;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values_mut() {
            *v *= alpha;
        }
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Keep only the first `n` output units of the final layer.
    pub fn prune_outputs(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.out_dim() {
            return Err(shape(format!(
                "cannot prune a {}-output head to {n} outputs",
                self.out_dim()
            )));
        }
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("nonempty");
        last.weight = last.weight.leading_cols(n);
        last.bias.truncate(n);
        Ok(out)
    }

    /// Lift to dual numbers with tangent `direction`.
    fn to_dual(&self, direction: &ModelParams) -> ModelParams<Dual> {
        let layers = self
            .layers
            .iter()
            .zip(&direction.layers)
            .map(|(l, d)| Layer {
                weight: Mat::from_vec(
                    l.in_dim(),
                    l.out_dim(),
                    l.weight
                        .as_slice()
                        .iter()
                        .zip(d.weight.as_slice())
                        .map(|(&re, &du)| Dual::new(re, du))
                        .collect(),
                )
                .expect("sized"),
                bias: l
                    .bias
                    .iter()
                    .zip(&d.bias)
                    .map(|(&re, &du)| Dual::new(re, du))
                    .collect(),
                activation: l.activation,
            })
            .collect();
        ModelParams { layers }
    }
}

impl ModelParams<Dual> {
    fn tangent(&self) -> ModelParams<f64> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.map(|d| d.du),
                    bias: l.bias.iter().map(|d| d.du).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// Pre- and post-activation values of every layer, kept for the backward pass.
#[derive(Debug)]
pub struct ForwardCache<T = f64> {
    /// `inputs[l]` is the input to layer `l`.
    inputs: Vec<Mat<T>>,
    pre: Vec<Mat<T>>,
    output: Mat<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &Mat<T> {
        &self.output
    }
}

pub fn forward_cached<T: Real>(params: &ModelParams<T>, inputs: Mat<T>) -> Result<ForwardCache<T>> {
    if inputs.cols() != params.in_dim() {
        return Err(shape(format!(
            "input width {} but the model expects {}",
            inputs.cols(),
            params.in_dim()
        )));
    }
    if inputs.rows() == 0 {
        return Err(shape("empty input batch"));
    }
    let mut cache_in = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut a = inputs;
    for layer in &params.layers {
        let mut z = a.matmul(&layer.weight)?;
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let next = z.map(|v| layer.activation.apply(v));
        cache_in.push(a);
        pre.push(z);
        a = next;
    }
    Ok(ForwardCache {
        inputs: cache_in,
        pre,
        output: a,
    })
}

/// Logits of the network for a batch of row inputs.
pub fn forward(params: &ModelParams, inputs: &Mat) -> Result<Mat> {
    Ok(forward_cached(params, inputs.clone())?.output)
}

/// Gradient of a scalar loss with respect to every parameter, given the loss
/// gradient `d_out` with respect to the network output.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_out: Mat<T>,
) -> Result<(ModelParams<T>, Mat<T>)> {
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut delta = d_out;
    for (l, layer) in params.layers.iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            for (d, z) in delta.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                if z.value() <= 0.0 {
                    *d = T::zero();
                }
            }
        }
        let gw = cache.inputs[l].t_matmul(&delta)?;
        let gb = delta.col_sums();
        let prev = delta.matmul_t(&layer.weight)?;
        grads.push(Layer {
            weight: gw,
            bias: gb,
            activation: layer.activation,
        });
        delta = prev;
    }
    grads.reverse();
    Ok((ModelParams { layers: grads }, delta))
}

fn check_one_hot(labels: &Mat) -> Result<()> {
    for i in 0..labels.rows() {
        let row = labels.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Contract(format!("label row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` against one-hot `labels`, and its
/// gradient with respect to the logits.
pub fn softmax_xent<T: Real>(logits: &Mat<T>, labels: &Mat) -> (T, Mat<T>) {
    let b = logits.rows();
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut loss = T::zero();
    let mut d = Mat::zeros(b, logits.cols());
    for i in 0..b {
        let row = logits.row(i);
        let mut m = row[0];
        for &v in row {
            if v.value() > m.value() {
                m = v;
            }
        }
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let mut sum = T::zero();
        for &e in &exps {
            sum += e;
        }
        let lse = m + sum.ln();
        let target = labels.row(i);
        for (j, (&v, &e)) in row.iter().zip(&exps).enumerate() {
            if target[j] == 1.0 {
                loss += lse - v;
            }
            d[(i, j)] = (e / sum - T::from_f64(target[j])) * inv_b;
        }
    }
    (loss * inv_b, d)
}

/// Mean cross-entropy loss over the batch and its parameter gradient.
pub fn xent_loss_grad<T: Real>(
    params: &ModelParams<T>,
    inputs: &Mat,
    onehot_labels: &Mat,
) -> Result<(T, ModelParams<T>)> {
    check_one_hot(onehot_labels)?;
    if onehot_labels.rows() != inputs.rows() {
        return Err(shape(format!(
            "{} label rows for {} inputs",
            onehot_labels.rows(),
            inputs.rows()
        )));
    }
    if onehot_labels.cols() != params.out_dim() {
        return Err(shape(format!(
            "{}-way labels for a {}-output model",
            onehot_labels.cols(),
            params.out_dim()
        )));
    }
    let cache = forward_cached(params, inputs.map(T::from_f64))?;
    let (loss, d_logits) = softmax_xent(&cache.output, onehot_labels);
    let (grads, _) = backward(params, &cache, d_logits)?;
    Ok((loss, grads))
}

/// Hessian of the cross-entropy loss at `params`, applied to `direction`.
pub fn hessian_vector_product(
    params: &ModelParams,
    inputs: &Mat,
    onehot_labels: &Mat,
    direction: &ModelParams,
) -> Result<ModelParams> {
    if !params.same_shape(direction) {
        return Err(shape("direction does not match parameter shape"));
    }
    let dual = params.to_dual(direction);
    let (_, g) = xent_loss_grad(&dual, inputs, onehot_labels)?;
    Ok(g.tangent())
}

/// A labeled batch: row inputs with one-hot targets.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub inputs: &'a Mat,
    pub labels: &'a Mat,
}

/// Inner-loop settings for gradient-based adaptation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adaptation {
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Drop second-order terms: the query gradient at the adapted parameters
    /// is used as the meta-gradient.
    pub first_order: bool,
}

/// Runs `inner_steps` of SGD on `train` and returns the adapted parameters.
pub fn adapt(params: &ModelParams, train: Batch<'_>, inner_lr: f64, inner_steps: usize) -> Result<ModelParams> {
    let mut theta = params.clone();
    for step in 0..inner_steps {
        let (loss, g) = xent_loss_grad(&theta, train.inputs, train.labels)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss or gradient at adaptation step {step}")));
        }
        theta = apply_sgd(&theta, &g, inner_lr)?;
    }
    Ok(theta)
}

/// Query loss after adaptation on `train`, and its exact derivative with
/// respect to the pre-adaptation parameters.
pub fn grad_through_adaptation(
    params: &ModelParams,
    train: Batch<'_>,
    query: Batch<'_>,
    adaptation: Adaptation,
) -> Result<(f64, ModelParams)> {
    let Adaptation {
        inner_lr,
        inner_steps,
        first_order,
    } = adaptation;
    if !(inner_lr >= 0.0) {
        return Err(Error::Contract(format!("inner learning rate {inner_lr} must be >= 0")));
    }
    let mut trajectory = Vec::with_capacity(inner_steps);
    let mut theta = params.clone();
    for step in 0..inner_steps {
        let (loss, g) = xent_loss_grad(&theta, train.inputs, train.labels)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite inner loss or gradient at step {step}")));
        }
        let next = apply_sgd(&theta, &g, inner_lr)?;
        trajectory.push(theta);
        theta = next;
    }
    let (query_loss, mut meta_grad) = xent_loss_grad(&theta, query.inputs, query.labels)?;
    if !query_loss.is_finite() || !meta_grad.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite query loss or gradient after {inner_steps} adaptation steps"
        )));
    }
    if first_order || inner_lr == 0.0 {
        return Ok((query_loss, meta_grad));
    }
    // d theta_{i+1} / d theta_i = I - lr * H_i, applied right to left.
    for (step, theta_i) in trajectory.iter().enumerate().rev() {
        let hv = hessian_vector_product(theta_i, train.inputs, train.labels, &meta_grad)?;
        meta_grad.add_scaled(&hv, -inner_lr)?;
        if !meta_grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite meta-gradient at step {step}")));
        }
    }
    Ok((query_loss, meta_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: Mat, act: Activation) -> ModelParams {
        let out = weight.cols();
        ModelParams::new(vec![Layer {
            weight,
            bias: vec![0.0; out],
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let p = single(Mat::identity(3), Activation::Identity);
        let x = Mat::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(forward(&p, &x).unwrap(), x);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let p = single(Mat::identity(2), Activation::Relu);
        let x = Mat::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(forward(&p, &x).unwrap().as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_forward_matches_explicit_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ModelParams::mlp(&[3, 4, 2], Activation::Identity, &mut rng).unwrap();
        for (i, v) in p.values_mut().enumerate() {
            if i % 5 == 0 {
                *v += 0.1;
            }
        }
        let x = Mat::from_vec(2, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]).unwrap();
        let out = forward(&p, &x).unwrap();
        let (l0, l1) = (&p.layers()[0], &p.layers()[1]);
        for r in 0..2 {
            let mut h = [0.0; 4];
            for j in 0..4 {
                let mut acc = l0.bias[j];
                for i in 0..3 {
                    acc += x[(r, i)] * l0.weight[(i, j)];
                }
                h[j] = acc.max(0.0);
            }
            for k in 0..2 {
                let mut acc = l1.bias[k];
                for j in 0..4 {
                    acc += h[j] * l1.weight[(j, k)];
                }
                assert!((out[(r, k)] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = single(Mat::identity(2), Activation::Identity);
        let x = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(forward(&p, &x), Err(Error::Shape(_))));
        let bad = Layer {
            weight: Mat::identity(2),
            bias: vec![0.0; 2],
            activation: Activation::Relu,
        };
        let bad2 = Layer {
            weight: Mat::zeros(3, 2),
            bias: vec![0.0; 2],
            activation: Activation::Relu,
        };
        assert!(ModelParams::new(vec![bad, bad2]).is_err());
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let p = single(Mat::zeros(2, 4), Activation::Identity);
        let x = Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let y = Mat::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = xent_loss_grad(&p, &x, &y).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_class_zero_logit_gradient() {
        let logits = Mat::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let y = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let (loss, d) = softmax_xent(&logits, &y);
        assert!((loss - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(d.as_slice(), &[-0.5, 0.5]);
        let logits = Mat::from_vec(2, 2, vec![0.0; 4]).unwrap();
        let y = Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (_, d) = softmax_xent(&logits, &y);
        assert_eq!(d.as_slice(), &[-0.25, 0.25, -0.25, 0.25]);
    }

    #[test]
    fn rejects_non_one_hot_labels() {
        let p = single(Mat::identity(2), Activation::Identity);
        let x = Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let y = Mat::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(matches!(xent_loss_grad(&p, &x, &y), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_steps_and_zero_lr_reduce_to_query_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::mlp(&[3, 5, 2], Activation::Identity, &mut rng).unwrap();
        let x = Mat::from_vec(2, 3, vec![0.2, 0.1, -0.3, 1.0, -1.0, 0.5]).unwrap();
        let y = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Batch { inputs: &x, labels: &y };
        let direct = xent_loss_grad(&p, &x, &y).unwrap();
        let zero_steps = grad_through_adaptation(
            &p,
            b,
            b,
            Adaptation { inner_lr: 0.3, inner_steps: 0, first_order: false },
        )
        .unwrap();
        let zero_lr = grad_through_adaptation(
            &p,
            b,
            b,
            Adaptation { inner_lr: 0.0, inner_steps: 4, first_order: false },
        )
        .unwrap();
        assert_eq!(zero_steps, direct);
        assert_eq!(zero_lr, direct);
    }

    #[test]
    fn adaptation_overflow_reports_step() {
        let p = single(Mat::from_vec(1, 2, vec![1e300, -1e300]).unwrap(), Activation::Identity);
        let x = Mat::from_vec(1, 1, vec![1e10]).unwrap();
        let y = Mat::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let b = Batch { inputs: &x, labels: &y };
        let err = grad_through_adaptation(
            &p,
            b,
            b,
            Adaptation { inner_lr: 1e300, inner_steps: 3, first_order: false },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("step")), "{err}");
    }

    #[test]
    fn pruning_keeps_leading_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::mlp(&[2, 3, 5], Activation::Identity, &mut rng).unwrap();
        let q = p.prune_outputs(2).unwrap();
        let x = Mat::from_vec(1, 2, vec![0.4, -0.7]).unwrap();
        let full = forward(&p, &x).unwrap();
        let pruned = forward(&q, &x).unwrap();
        assert_eq!(pruned.as_slice(), &full.as_slice()[..2]);
        assert!(p.prune_outputs(6).is_err());
    }
}
