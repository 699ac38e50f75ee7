use fedpr::nn::{finite_diff_gradient, loss_and_grad, loss_and_grad_with, max_relative_error, Layer, ModelParams};
use fedpr::prototype::{GlobalPrototype, GlobalPrototypeSet, ProtoDistance};
use fedpr::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

struct Instance {
    params: ModelParams,
    batch: Tensor,
    labels: Vec<usize>,
    protos: GlobalPrototypeSet,
    lambda: f64,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = rng.random_range(2..=12);
    let hidden = rng.random_range(2..=16);
    let classes = rng.random_range(2..=5);
    let params = ModelParams::mlp2(inputs, hidden, classes).init_uniform(&mut rng);
    assert!(params.num_parameters() <= 2000);
    let rows = rng.random_range(1..=6);
    let batch = Tensor::new(vec![rows, inputs], (0..rows * inputs).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let mut protos = GlobalPrototypeSet::default();
    for class in 0..classes {
        if rng.random_bool(0.7) {
            let v = (0..hidden).map(|_| rng.random_range(0.0..1.0)).collect();
            protos.insert(class, GlobalPrototype { vector: Tensor::vector(v), contributors: 1 });
        }
    }
    Instance { params, batch, labels, protos, lambda: rng.random_range(0.0..2.0) }
}

fn check(inst: &Instance, distance: ProtoDistance) -> f64 {
    let analytic = loss_and_grad_with(&inst.params, &inst.batch, &inst.labels, &inst.protos, inst.lambda, distance).unwrap();
    let numeric = finite_diff_gradient(
        |p| loss_and_grad_with(p, &inst.batch, &inst.labels, &inst.protos, inst.lambda, distance).map(|r| r.total_loss),
        &inst.params,
        EPS,
    )
    .unwrap();
    max_relative_error(&analytic.grads, &numeric, FLOOR)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mlp_gradients_match_finite_differences(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let err = check(&inst, ProtoDistance::Squared);
        prop_assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn alternative_distance_gradients_match_finite_differences() {
    for seed in 0..10 {
        for distance in [ProtoDistance::Euclidean, ProtoDistance::MeanSquared] {
            let err = check(&random_instance(seed), distance);
            assert!(err < 1e-4, "seed {seed}, {distance:?}: relative error {err}");
        }
    }
}

#[test]
fn conv_network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParams::new(
        vec![1, 8, 8],
        vec![
            Layer::conv("conv1", 1, 3, 3, true),
            Layer::conv("conv2", 3, 4, 2, false),
            Layer::dense("fc1", 4 * 2 * 2, 6, true),
            Layer::dense("fc2", 6, 3, false),
        ],
        3,
    )
    .unwrap()
    .init_uniform(&mut rng);
    let batch = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let labels = [2, 0];
    let mut protos = GlobalPrototypeSet::default();
    protos.insert(2, GlobalPrototype { vector: Tensor::vector(vec![0.5; 6]), contributors: 1 });
    let analytic = loss_and_grad(&params, &batch, &labels, &protos, 1.0).unwrap();
    let numeric = finite_diff_gradient(
        |p| loss_and_grad(p, &batch, &labels, &protos, 1.0).map(|r| r.total_loss),
        &params,
        EPS,
    )
    .unwrap();
    let err = max_relative_error(&analytic.grads, &numeric, FLOOR);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn cnn4_gradients_match_on_a_sample_of_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ModelParams::cnn4(10).init_uniform(&mut rng);
    let batch = Tensor::new(vec![2, 1, 28, 28], (0..2 * 784).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let labels = [3, 8];
    let mut protos = GlobalPrototypeSet::default();
    protos.insert(3, GlobalPrototype { vector: Tensor::vector(vec![0.2; 50]), contributors: 1 });
    let analytic = loss_and_grad(&params, &batch, &labels, &protos, 1.0).unwrap();
    let loss = |p: &ModelParams| loss_and_grad(p, &batch, &labels, &protos, 1.0).unwrap().total_loss;
    // A conv bias moves hundreds of pre-activations at once; a smaller step keeps
    // them clear of ReLU and pooling switch points.
    let eps = 1e-6;
    for (t, tensor) in params.tensors().enumerate() {
        for _ in 0..15 {
            let i = rng.random_range(0..tensor.len());
            let mut plus = params.clone();
            plus.tensors_mut().nth(t).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.tensors_mut().nth(t).unwrap().data_mut()[i] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = analytic.grads.tensors()[t].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            assert!(err < 1e-4, "tensor {t} entry {i}: analytic {a}, numeric {numeric}");
        }
    }
}
