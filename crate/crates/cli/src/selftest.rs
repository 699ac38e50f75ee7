//! Quick built-in checks on synthetic data: gradients, aggregation,
//! FedAvg reduction and partition completeness.

use fedpr::data::dirichlet_partition;
use fedpr::eval::InferenceMode;
use fedpr::federation::{run_experiment, server_weighted_average, DatasetKind, FederationConfig, Strategy};
use fedpr::nn::{finite_diff_gradient, loss_and_grad, max_relative_error, ModelKind, ModelParams};
use fedpr::prototype::{aggregate_global_prototypes, GlobalPrototype, GlobalPrototypeSet, Prototype};
use fedpr::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifacts::render_round_csv;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> Result<(bool, String)>;

pub fn run_selftest(seed: u64) -> Vec<CheckOutcome> {
    let checks: [(&'static str, Check); 4] = [
        ("gradient", gradient_check),
        ("aggregation", aggregation_check),
        ("fedavg-reduction", reduction_check),
        ("partition", partition_check),
    ];
    checks
        .into_iter()
        .map(|(name, check)| match check(seed) {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome { name, passed: false, detail: e.to_string() },
        })
        .collect()
}

fn gradient_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (inputs, hidden, classes) = (rng.random_range(2..=10), rng.random_range(2..=12), rng.random_range(2..=5));
        let params = ModelParams::mlp2(inputs, hidden, classes).init_uniform(&mut rng);
        let rows = rng.random_range(1..=5);
        let batch = Tensor::new(vec![rows, inputs], (0..rows * inputs).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let mut protos = GlobalPrototypeSet::default();
        for c in 0..classes {
            let v = (0..hidden).map(|_| rng.random_range(0.0..1.0)).collect();
            protos.insert(c, GlobalPrototype { vector: Tensor::vector(v), contributors: 1 });
        }
        let lambda = rng.random_range(0.0..2.0);
        let analytic = loss_and_grad(&params, &batch, &labels, &protos, lambda)?;
        let numeric = finite_diff_gradient(
            |p| loss_and_grad(p, &batch, &labels, &protos, lambda).map(|r| r.total_loss),
            &params,
            1e-5,
        )?;
        worst = worst.max(max_relative_error(&analytic.grads, &numeric, 1e-6));
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over 20 models")))
}

fn aggregation_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa99);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (clients, classes, dim) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=6));
        let mut lists = Vec::new();
        for _ in 0..clients {
            let mut list = Vec::new();
            for c in 0..classes {
                if rng.random_bool(0.6) {
                    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                    list.push(Prototype { class_id: c, vector: Tensor::vector(v), support: rng.random_range(1..20) });
                }
            }
            lists.push(list);
        }
        let global = aggregate_global_prototypes(&lists)?;
        for c in 0..classes {
            let members: Vec<&Prototype> = lists.iter().flatten().filter(|p| p.class_id == c).collect();
            match global.get(c) {
                None => worst = worst.max(if members.is_empty() { 0.0 } else { f64::INFINITY }),
                Some(g) => {
                    for k in 0..dim {
                        let mean = members.iter().map(|p| p.vector.data()[k]).sum::<f64>() / members.len() as f64;
                        worst = worst.max((mean - g.vector.data()[k]).abs());
                    }
                }
            }
        }

        let template = ModelParams::mlp2(2, 2, 2);
        let models: Vec<(ModelParams, usize)> = (0..clients)
            .map(|_| (template.clone().init_uniform(&mut rng), rng.random_range(1..100)))
            .collect();
        let refs: Vec<(usize, &ModelParams, usize)> = models.iter().enumerate().map(|(i, (m, d))| (i, m, *d)).collect();
        let avg = server_weighted_average(&refs)?;
        let total: usize = models.iter().map(|m| m.1).sum();
        for (t, tensor) in avg.tensors().enumerate() {
            for (k, &v) in tensor.data().iter().enumerate() {
                let direct: f64 = models
                    .iter()
                    .map(|(m, d)| m.tensors().nth(t).unwrap().data()[k] * *d as f64)
                    .sum::<f64>()
                    / total as f64;
                worst = worst.max((direct - v).abs());
            }
        }
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e} over 50 instances")))
}

fn reduction_check(seed: u64) -> Result<(bool, String)> {
    let cfg = FederationConfig {
        dataset: DatasetKind::Synthetic,
        model: ModelKind::Mlp2,
        hidden_units: 16,
        synthetic_classes: 4,
        synthetic_dim: 8,
        synthetic_per_class: 40,
        synthetic_test_per_class: 20,
        subsample_n: 120,
        num_clients: 4,
        rounds: 3,
        lambda: 0.0,
        eval_inference: InferenceMode::Softmax,
        master_seed: seed,
        ..FederationConfig::default()
    };
    let fedpr = render_round_csv(&run_experiment(&cfg)?);
    let fedavg = render_round_csv(&run_experiment(&FederationConfig { strategy: Strategy::FedAvg, ..cfg })?);
    Ok((fedpr == fedavg, "fedpr with lambda 0 vs fedavg rounds.csv".into()))
}

fn partition_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7);
    let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..10)).collect();
    let mut ok = true;
    for alpha in [0.05, 1.0, 100.0] {
        let p = dirichlet_partition(&labels, 10, 10, alpha, seed)?;
        let mut seen = vec![0u32; labels.len()];
        for shard in &p.shards {
            for &i in &shard.indices {
                seen[i] += 1;
            }
        }
        ok &= seen.iter().all(|&n| n == 1);
    }
    Ok((ok, "every sample assigned exactly once at alpha 0.05, 1, 100".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for outcome in run_selftest(0) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
