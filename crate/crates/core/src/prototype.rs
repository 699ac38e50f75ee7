//! Class prototypes: per-client embedding means and their server-side aggregate.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::tensor::Tensor;

/// Samples embedded per forward pass when computing prototypes.
const EMBED_CHUNK: usize = 256;

/// Mean embedding of one class on one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Tensor,
    /// Number of samples averaged.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrototype {
    pub vector: Tensor,
    /// Number of clients that reported the class.
    pub contributors: usize,
}

/// Aggregated prototypes keyed by class. Classes nobody reported are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalPrototypeSet {
    entries: BTreeMap<usize, GlobalPrototype>,
    pub round: usize,
}

impl GlobalPrototypeSet {
    pub fn get(&self, class_id: usize) -> Option<&GlobalPrototype> {
        self.entries.get(&class_id)
    }

    pub fn insert(&mut self, class_id: usize, proto: GlobalPrototype) {
        self.entries.insert(class_id, proto);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Iterates in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &GlobalPrototype)> {
        self.entries.iter().map(|(&c, p)| (c, p))
    }

    /// Shared vector dimension, `None` when empty.
    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|p| p.vector.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ProtoSetJson::from(self)).expect("prototype set serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ProtoSetJson =
            serde_json::from_str(text).map_err(|e| Error::Argument(format!("bad prototype JSON: {e}")))?;
        let mut set = GlobalPrototypeSet {
            entries: BTreeMap::new(),
            round: raw.round,
        };
        for (key, entry) in raw.classes {
            let class_id = key
                .parse()
                .map_err(|_| Error::Argument(format!("class key `{key}` is not an integer")))?;
            if entry.contributors == 0 {
                return Err(Error::Argument(format!("class {class_id} has no contributors")));
            }
            set.insert(
                class_id,
                GlobalPrototype {
                    vector: Tensor::vector(entry.vector),
                    contributors: entry.contributors,
                },
            );
        }
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct ProtoSetJson {
    round: usize,
    classes: BTreeMap<String, ProtoEntryJson>,
}

#[derive(Serialize, Deserialize)]
struct ProtoEntryJson {
    vector: Vec<f64>,
    contributors: usize,
}

impl From<&GlobalPrototypeSet> for ProtoSetJson {
    fn from(set: &GlobalPrototypeSet) -> Self {
        ProtoSetJson {
            round: set.round,
            classes: set
                .iter()
                .map(|(c, p)| {
                    (
                        c.to_string(),
                        ProtoEntryJson {
                            vector: p.vector.data().to_vec(),
                            contributors: p.contributors,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Distance used between embeddings and prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoDistance {
    /// `‖a − b‖²`
    #[default]
    Squared,
    /// `‖a − b‖`
    Euclidean,
    /// `‖a − b‖² / d`, the per-coordinate mean squared error.
    MeanSquared,
}

impl ProtoDistance {
    pub fn value(self, a: &[f64], b: &[f64]) -> f64 {
        let sq = squared_distance(a, b);
        match self {
            ProtoDistance::Squared => sq,
            ProtoDistance::Euclidean => sq.sqrt(),
            ProtoDistance::MeanSquared => sq / a.len().max(1) as f64,
        }
    }

    /// Distance and its gradient with respect to `a`. The Euclidean gradient
    /// is taken as zero where `a == b`.
    pub fn value_and_grad(self, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        match self {
            ProtoDistance::Squared => (sq, diff.into_iter().map(|d| 2.0 * d).collect()),
            ProtoDistance::MeanSquared => {
                let n = diff.len().max(1) as f64;
                (sq / n, diff.into_iter().map(|d| 2.0 * d / n).collect())
            }
            ProtoDistance::Euclidean => {
                let norm = sq.sqrt();
                if norm == 0.0 {
                    (0.0, vec![0.0; diff.len()])
                } else {
                    (norm, diff.into_iter().map(|d| d / norm).collect())
                }
            }
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distance between an embedding and a prototype vector.
pub fn proto_distance(embedding: &Tensor, prototype: &Tensor) -> Result<f64> {
    if embedding.len() != prototype.len() {
        return Err(Error::dim(
            "prototype",
            format!("embedding has {} entries, prototype {}", embedding.len(), prototype.len()),
        ));
    }
    Ok(squared_distance(embedding.data(), prototype.data()))
}

/// Per-class mean embedding over one client's shard, in ascending class order.
///
/// The whole shard is embedded in index order in fixed-size chunks, so the
/// result does not depend on any training-time batching.
pub fn compute_local_prototypes(params: &ModelParams, dataset: &Dataset, shard: &ClientShard) -> Result<Vec<Prototype>> {
    if shard.indices.is_empty() {
        return Err(Error::Argument(format!("client {} has an empty shard", shard.client_id)));
    }
    let d = params.embedding_dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in shard.indices.chunks(EMBED_CHUNK) {
        let (batch, labels) = dataset.gather(chunk)?;
        let pass = params.forward(&batch)?;
        for (row, &label) in labels.iter().enumerate() {
            let (sum, count) = sums.entry(label).or_insert_with(|| (vec![0.0; d], 0));
            for (s, e) in sum.iter_mut().zip(pass.embeddings.row(row)) {
                *s += e;
            }
            *count += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(class_id, (sum, support))| Prototype {
            class_id,
            vector: Tensor::vector(sum.into_iter().map(|s| s / support as f64).collect()),
            support,
        })
        .collect())
}

/// Denominator of the per-class prototype mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggDenominator {
    /// Clients that reported the class.
    #[default]
    Contributors,
    /// Every client in the federation, reporting or not.
    AllClients,
}

/// How client prototypes are weighted against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtoWeighting {
    #[default]
    Unweighted,
    /// Weighted by each client's class support (extension; ignores the denominator setting).
    Support,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AggregationOptions {
    pub denominator: AggDenominator,
    pub weighting: ProtoWeighting,
    /// Federation size, used by [`AggDenominator::AllClients`]. Defaults to the
    /// number of prototype lists passed in when zero.
    pub num_clients: usize,
}

/// Unweighted mean of client prototypes over the clients reporting each class.
pub fn aggregate_global_prototypes(all_client_prototypes: &[Vec<Prototype>]) -> Result<GlobalPrototypeSet> {
    aggregate_global_prototypes_with(all_client_prototypes, &AggregationOptions::default())
}

fn lexicographic(a: &Prototype, b: &Prototype) -> Ordering {
    a.vector
        .data()
        .iter()
        .zip(b.vector.data())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
        .then(a.support.cmp(&b.support))
}

/// Prototype aggregation with explicit denominator and weighting choices.
///
/// Contributions are summed in a canonical order so the result is bitwise
/// independent of client order.
pub fn aggregate_global_prototypes_with(
    all_client_prototypes: &[Vec<Prototype>],
    opts: &AggregationOptions,
) -> Result<GlobalPrototypeSet> {
    let mut by_class: BTreeMap<usize, Vec<&Prototype>> = BTreeMap::new();
    let mut dim = None;
    for protos in all_client_prototypes {
        for p in protos {
            if p.support == 0 {
                return Err(Error::Argument(format!("prototype for class {} has zero support", p.class_id)));
            }
            match dim {
                None => dim = Some(p.vector.len()),
                Some(d) if d != p.vector.len() => {
                    return Err(Error::dim(
                        "prototypes",
                        format!("class {} has dimension {}, expected {d}", p.class_id, p.vector.len()),
                    ));
                }
                _ => {}
            }
            by_class.entry(p.class_id).or_default().push(p);
        }
    }
    let num_clients = if opts.num_clients == 0 {
        all_client_prototypes.len()
    } else {
        opts.num_clients
    };
    let mut set = GlobalPrototypeSet::default();
    for (class_id, mut protos) in by_class {
        protos.sort_by(|a, b| lexicographic(a, b));
        let d = protos[0].vector.len();
        let mut sum = vec![0.0; d];
        let denom = match opts.weighting {
            ProtoWeighting::Unweighted => {
                for p in &protos {
                    for (s, v) in sum.iter_mut().zip(p.vector.data()) {
                        *s += v;
                    }
                }
                match opts.denominator {
                    AggDenominator::Contributors => protos.len(),
                    AggDenominator::AllClients => num_clients.max(protos.len()),
                }
            }
            ProtoWeighting::Support => {
                for p in &protos {
                    for (s, v) in sum.iter_mut().zip(p.vector.data()) {
                        *s += p.support as f64 * v;
                    }
                }
                protos.iter().map(|p| p.support).sum()
            }
        };
        set.insert(
            class_id,
            GlobalPrototype {
                vector: Tensor::vector(sum.into_iter().map(|s| s / denom as f64).collect()),
                contributors: protos.len(),
            },
        );
    }
    Ok(set)
}
