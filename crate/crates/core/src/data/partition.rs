use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::ClientShard;
use crate::error::{Error, Result};

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    /// `counts[client][class]`
    pub counts: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn empty_clients(&self) -> Vec<usize> {
        self.shards.iter().filter(|s| s.is_empty()).map(|s| s.client_id).collect()
    }

    /// Mean over non-empty clients of the largest single-class share of the shard.
    pub fn mean_max_class_share(&self) -> f64 {
        let shares: Vec<f64> = self
            .counts
            .iter()
            .filter_map(|row| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| *row.iter().max().unwrap() as f64 / total as f64)
            })
            .collect();
        shares.iter().sum::<f64>() / shares.len().max(1) as f64
    }
}

/// Splits `total` into integer parts proportional to `weights`, giving the
/// leftover units to the largest fractional remainders (lowest index on ties).
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed split: for each class, client proportions are drawn from a
/// symmetric Dirichlet(α) and that class's samples are dealt out in order.
///
/// Clients may end up with no samples at all; they are reported, not rejected.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::Argument("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!("alpha must be positive, got {alpha}")));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::Label { index, label, classes: num_classes });
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|client_id| ClientShard { client_id, indices: Vec::new() })
        .collect();
    let mut counts = vec![vec![0; num_classes]; num_clients];
    for class in 0..num_classes {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = draws.iter().sum();
        let weights: Vec<f64> = if sum > 0.0 && sum.is_finite() {
            draws.iter().map(|g| g / sum).collect()
        } else {
            vec![1.0 / num_clients as f64; num_clients]
        };
        let split = largest_remainder(members.len(), &weights);
        let mut rest = members.as_slice();
        for (client, &n) in split.iter().enumerate() {
            let (take, tail) = rest.split_at(n);
            shards[client].indices.extend_from_slice(take);
            counts[client][class] = n;
            rest = tail;
        }
    }
    for shard in &mut shards {
        shard.indices.sort_unstable();
        if shard.is_empty() {
            tracing::warn!(client = shard.client_id, alpha, "client received no samples");
        }
    }
    Ok(Partition { shards, counts, alpha, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    fn assert_complete(p: &Partition, n: usize) {
        let mut all: Vec<usize> = p.shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced(10, 20);
        let p = dirichlet_partition(&labels, 10, 1, 0.05, 3).unwrap();
        assert_eq!(p.shards[0].indices, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let labels = balanced(10, 200);
        for seed in 0..20 {
            let p = dirichlet_partition(&labels, 10, 10, 1e6, seed).unwrap();
            assert_complete(&p, labels.len());
            for s in &p.shards {
                let dev = (s.len() as f64 - 200.0).abs() / 200.0;
                assert!(dev <= 0.10, "seed {seed}: shard of {}", s.len());
            }
        }
    }

    #[test]
    fn small_alpha_is_highly_skewed() {
        let labels = balanced(10, 200);
        let mean: f64 = (0..20)
            .map(|seed| dirichlet_partition(&labels, 10, 10, 0.05, seed).unwrap().mean_max_class_share())
            .sum::<f64>()
            / 20.0;
        assert!(mean > 0.6, "mean max-class share {mean}");
    }

    #[test]
    fn skew_decreases_with_alpha() {
        let labels = balanced(10, 200);
        let mean = |alpha: f64| -> f64 {
            (0..20)
                .map(|seed| dirichlet_partition(&labels, 10, 10, alpha, seed).unwrap().mean_max_class_share())
                .sum::<f64>()
                / 20.0
        };
        assert!(mean(0.05) > mean(10.0));
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(largest_remainder(3, &[1.0 / 3.0; 3]), vec![1, 1, 1]);
        assert_eq!(largest_remainder(0, &[0.7, 0.3]), vec![0, 0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(dirichlet_partition(&[0, 1], 2, 0, 1.0, 0).is_err());
        assert!(dirichlet_partition(&[0, 1], 2, 2, 0.0, 0).is_err());
        assert!(matches!(dirichlet_partition(&[0, 2], 2, 2, 1.0, 0), Err(Error::Label { .. })));
    }

    proptest! {
        #[test]
        fn complete_disjoint_and_counted(
            labels in proptest::collection::vec(0usize..5, 0..300),
            clients in 1usize..12,
            alpha in 0.01f64..50.0,
            seed in any::<u64>(),
        ) {
            let p = dirichlet_partition(&labels, 5, clients, alpha, seed).unwrap();
            let mut all: Vec<usize> = p.shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for class in 0..5 {
                let col: usize = p.counts.iter().map(|r| r[class]).sum();
                prop_assert_eq!(col, labels.iter().filter(|&&l| l == class).count());
            }
            for (s, row) in p.shards.iter().zip(&p.counts) {
                prop_assert_eq!(s.len(), row.iter().sum::<usize>());
            }
            prop_assert_eq!(&p, &dirichlet_partition(&labels, 5, clients, alpha, seed).unwrap());
        }
    }
}
