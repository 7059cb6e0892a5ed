//! Analytic gradients against central finite differences.

use rand::Rng;
use umeta::data::{synth_mixture, Representation, Split, SynthSpec};
use umeta::metalearn::protonet_loss_grad;
use umeta::nn::{adapt, grad_through_adaptation, xent_loss_grad, Activation, Adaptation, Batch, ModelParams};
use umeta::seed;
use umeta::taskgen::{sample_supervised_task, EpisodeShape};

mod common;

use common::{finite_difference, generic, random_batch, relative_error};

const TOL: f64 = 1e-4;

fn small_net(rng: &mut impl Rng, d: usize, way: usize) -> ModelParams {
    let hidden = rng.random_range(3..=8);
    let p = ModelParams::mlp(&[d, hidden, hidden, way], Activation::Identity, rng).unwrap();
    generic(p, rng)
}

#[test]
fn cross_entropy_gradient() {
    for s in 0..20 {
        let mut rng = seed::rng(s);
        let p = small_net(&mut rng, 4, 3);
        let (x, y) = random_batch(&mut rng, 6, 4, 3);
        let (_, g) = xent_loss_grad(&p, &x, &y).unwrap();
        let fd = finite_difference(&p, |q| xent_loss_grad(q, &x, &y).unwrap().0);
        let err = relative_error(&g.flatten(), &fd);
        assert!(err < TOL, "seed {s}: {err}");
    }
}

#[test]
fn second_order_maml_gradient() {
    for s in 0..10 {
        let mut rng = seed::rng(100 + s);
        let p = small_net(&mut rng, 3, 2);
        let (xs, ys) = random_batch(&mut rng, 4, 3, 2);
        let (xq, yq) = random_batch(&mut rng, 6, 3, 2);
        let train = Batch { inputs: &xs, labels: &ys };
        let query = Batch { inputs: &xq, labels: &yq };
        let a = Adaptation { inner_lr: 0.3, inner_steps: 3, first_order: false };
        let (_, g) = grad_through_adaptation(&p, train, query, a).unwrap();
        let fd = finite_difference(&p, |q| {
            let adapted = adapt(q, train, a.inner_lr, a.inner_steps).unwrap();
            xent_loss_grad(&adapted, &xq, &yq).unwrap().0
        });
        let err = relative_error(&g.flatten(), &fd);
        assert!(err < TOL, "seed {s}: {err}");

        // Dropping second-order terms should be measurably different.
        let (_, fo) = grad_through_adaptation(&p, train, query, Adaptation { first_order: true, ..a }).unwrap();
        assert!(relative_error(&fo.flatten(), &fd) > TOL);
    }
}

#[test]
fn prototype_gradient_includes_the_mean() {
    let ds = synth_mixture(&SynthSpec::new(5, 6, 4, 2, 0.5, 3)).unwrap();
    for s in 0..10 {
        let mut rng = seed::rng(200 + s);
        let shots = 1 + (s as usize % 3);
        let task = sample_supervised_task(&ds, Split::MetaTrain, EpisodeShape::new(3, shots, 2).unwrap(), Representation::Raw, &mut rng)
            .unwrap();
        let hidden = rng.random_range(3..=8);
        let p = ModelParams::mlp(&[4, hidden, 5], Activation::Relu, &mut rng).unwrap();
        let p = generic(p, &mut rng);
        let (_, g) = protonet_loss_grad(&p, &task).unwrap();
        let fd = finite_difference(&p, |q| protonet_loss_grad(q, &task).unwrap().0);
        let err = relative_error(&g.flatten(), &fd);
        assert!(err < TOL, "seed {s}: {err}");
    }
}

