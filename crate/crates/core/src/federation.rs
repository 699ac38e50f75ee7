//! Round orchestration: local training, weighted model averaging and
//! prototype exchange.
//!
//! Every round follows the same choreography. Each client starts from the
//! current global model and trains on its shard against the previous round's
//! global prototypes. Clients upload parameters (and, for FedPR, per-class
//! prototypes). The server averages parameters weighted by shard size and
//! averages prototypes per class, then both are broadcast for the next round.
//! All clients see the same snapshot, so the order in which they run does not
//! matter.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, dirichlet_partition, synthetic_blobs, ClientShard, Dataset, Partition};
use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, InferenceMode};
use crate::nn::{loss_and_grad_with, sgd_momentum_step, ModelKind, ModelParams, OptimizerState};
use crate::prototype::{
    aggregate_global_prototypes_with, compute_local_prototypes, AggDenominator, AggregationOptions,
    GlobalPrototypeSet, ProtoDistance, ProtoWeighting, Prototype,
};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Weighted model averaging only.
    FedAvg,
    /// Model averaging plus prototype exchange and prototype-regularised local training.
    FedPr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fashion,
    Synthetic,
}

/// Every experiment knob. Defaults follow the MNIST setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dirichlet_alpha: f64,
    pub lambda: f64,
    pub strategy: Strategy,
    pub model: ModelKind,
    /// Hidden width of `mlp2`.
    pub hidden_units: usize,
    pub master_seed: u64,
    pub dataset: DatasetKind,
    /// Directory holding the IDX files; `data/<dataset>` when unset.
    pub data_dir: Option<PathBuf>,
    pub subsample_n: usize,
    pub agg_denominator: AggDenominator,
    pub proto_weighting: ProtoWeighting,
    pub proto_distance: ProtoDistance,
    pub eval_inference: InferenceMode,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_spread: f64,
    /// Wall-clock time makes round records non-reproducible, so it is opt-in.
    pub record_wall_time: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 10,
            rounds: 100,
            local_epochs: 1,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.5,
            dirichlet_alpha: 0.05,
            lambda: 1.0,
            strategy: Strategy::FedPr,
            model: ModelKind::Cnn4,
            hidden_units: 128,
            master_seed: 0,
            dataset: DatasetKind::Mnist,
            data_dir: None,
            subsample_n: 2000,
            agg_denominator: AggDenominator::Contributors,
            proto_weighting: ProtoWeighting::Unweighted,
            proto_distance: ProtoDistance::Squared,
            eval_inference: InferenceMode::Both,
            synthetic_classes: 10,
            synthetic_dim: 32,
            synthetic_per_class: 300,
            synthetic_test_per_class: 100,
            synthetic_spread: 0.5,
            record_wall_time: false,
        }
    }
}

impl FederationConfig {
    /// Checks every range constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clients", self.num_clients),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("subsample_n", self.subsample_n),
            ("hidden_units", self.hidden_units),
            ("synthetic_dim", self.synthetic_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.synthetic_classes < 2 {
            return Err(Error::config("synthetic_classes", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config("dirichlet_alpha", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        if !(self.synthetic_spread >= 0.0 && self.synthetic_spread.is_finite()) {
            return Err(Error::config("synthetic_spread", "must be non-negative"));
        }
        if self.strategy == Strategy::FedAvg && self.lambda != 0.0 {
            return Err(Error::config("lambda", "fedavg trains without the prototype term; lambda must be 0"));
        }
        if self.num_clients > u32::MAX as usize || self.rounds > u32::MAX as usize {
            return Err(Error::config("num_clients", "client and round counts must fit in 32 bits"));
        }
        if self.model == ModelKind::Cnn4 && self.dataset == DatasetKind::Synthetic {
            return Err(Error::config("model", "cnn4 needs 28×28 images; use mlp2 with synthetic data"));
        }
        Ok(())
    }

    fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| {
            PathBuf::from("data").join(match self.dataset {
                DatasetKind::Mnist => "mnist",
                DatasetKind::Fashion => "fashion",
                DatasetKind::Synthetic => "synthetic",
            })
        })
    }
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Shard-size weighted mean of the clients' final-epoch losses.
    pub mean_train_loss: f64,
    pub test_accuracy_softmax: Option<f64>,
    /// Absent for FedAvg, which has no prototypes.
    pub test_accuracy_prototype: Option<f64>,
    pub wall_time_ms: Option<u64>,
}

/// Training and test data for one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

fn idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (plain or .gz)"),
    ))
}

/// Loads (or generates) the data and draws the training subsample.
pub fn load_experiment_data(cfg: &FederationConfig) -> Result<ExperimentData> {
    let subsample_seed = derive_seed(cfg.master_seed, Stream::Subsample);
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let pool = synthetic_blobs(
                cfg.synthetic_classes,
                cfg.synthetic_dim,
                cfg.synthetic_per_class,
                cfg.synthetic_spread,
                derive_seed(cfg.master_seed, Stream::SyntheticTrain),
            )?;
            let test = synthetic_blobs(
                cfg.synthetic_classes,
                cfg.synthetic_dim,
                cfg.synthetic_test_per_class,
                cfg.synthetic_spread,
                derive_seed(cfg.master_seed, Stream::SyntheticTest),
            )?;
            let train = data::subsample(&pool, cfg.subsample_n, subsample_seed)
                .map_err(|e| Error::config("subsample_n", e.to_string()))?;
            Ok(ExperimentData { train, test })
        }
        DatasetKind::Mnist | DatasetKind::Fashion => {
            let dir = cfg.data_dir();
            let images = data::read_idx_images(idx_file(&dir, "train-images-idx3-ubyte")?)?;
            let labels = data::load_idx_labels(idx_file(&dir, "train-labels-idx1-ubyte")?)?;
            let picked = data::subsample_indices(images.count, cfg.subsample_n, subsample_seed)
                .map_err(|e| Error::config("subsample_n", e.to_string()))?;
            let train = Dataset::from_idx_subset(&images, &labels, &picked, 10)?;
            drop(images);
            let test = Dataset::from_idx(
                idx_file(&dir, "t10k-images-idx3-ubyte")?,
                idx_file(&dir, "t10k-labels-idx1-ubyte")?,
                10,
            )?;
            Ok(ExperimentData { train, test })
        }
    }
}

/// Builds `ω⁰` for the configured architecture. Depends only on the seed,
/// never on the strategy.
pub fn initial_params(cfg: &FederationConfig, train: &Dataset) -> Result<ModelParams> {
    let classes = train.num_classes();
    let sample: usize = train.sample_shape().iter().product();
    let model = match cfg.model {
        ModelKind::Cnn4 => {
            if train.sample_shape() != [1, 28, 28] {
                return Err(Error::config(
                    "model",
                    format!("cnn4 expects 1×28×28 samples, data has {:?}", train.sample_shape()),
                ));
            }
            ModelParams::cnn4(classes)
        }
        ModelKind::Mlp2 => ModelParams::mlp2(sample, cfg.hidden_units, classes),
    };
    Ok(model.init_uniform(&mut stream_rng(cfg.master_seed, Stream::Init, 0, 0)))
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    /// Parameters after the client's most recent local update.
    pub params: Option<ModelParams>,
    pub optimizer: OptimizerState,
    master_seed: u64,
}

impl ClientState {
    pub fn new(shard: ClientShard, model: &ModelParams, cfg: &FederationConfig) -> Result<Self> {
        Ok(ClientState {
            client_id: shard.client_id,
            shard,
            params: None,
            optimizer: OptimizerState::new(model, cfg.learning_rate, cfg.momentum)?,
            master_seed: cfg.master_seed,
        })
    }
}

/// What one client uploads after local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    /// Empty for FedAvg.
    pub prototypes: Vec<Prototype>,
    /// Mean total loss over the final local epoch.
    pub train_loss: f64,
    pub num_samples: usize,
}

/// `local_epochs` passes of mini-batch SGD starting from the global model,
/// followed by local prototype computation (FedPR only).
///
/// The shard is reshuffled every epoch from the `(client, round)` stream and
/// the final short batch is kept. Momentum starts from zero every round.
pub fn client_local_update(
    state: &mut ClientState,
    global_params: &ModelParams,
    global_protos: &GlobalPrototypeSet,
    cfg: &FederationConfig,
    train: &Dataset,
    round: usize,
) -> Result<LocalUpdate> {
    if state.shard.is_empty() {
        return Err(Error::Argument(format!("client {} has no samples", state.client_id)));
    }
    let mut params = global_params.clone();
    state.optimizer.reset();
    let mut rng = stream_rng(state.master_seed, Stream::ClientShuffle, state.client_id, round);
    let mut order = state.shard.indices.clone();
    let mut epoch_loss = 0.0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = train.gather(chunk)?;
            let report = loss_and_grad_with(&params, &batch, &labels, global_protos, cfg.lambda, cfg.proto_distance)?;
            if !report.total_loss.is_finite() {
                return Err(Error::Divergence {
                    client: state.client_id,
                    round,
                    loss: report.total_loss,
                });
            }
            sgd_momentum_step(&mut params, &report.grads, &mut state.optimizer)?;
            epoch_loss += report.total_loss * chunk.len() as f64;
        }
    }
    if !params.all_finite() {
        return Err(Error::Divergence {
            client: state.client_id,
            round,
            loss: f64::NAN,
        });
    }
    let prototypes = match cfg.strategy {
        Strategy::FedPr => compute_local_prototypes(&params, train, &state.shard)?,
        Strategy::FedAvg => Vec::new(),
    };
    state.params = Some(params.clone());
    Ok(LocalUpdate {
        client_id: state.client_id,
        params,
        prototypes,
        train_loss: epoch_loss / state.shard.len() as f64,
        num_samples: state.shard.len(),
    })
}

/// `D_i / Σ D` for each size.
pub fn normalized_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Argument("total aggregation weight is zero".into()));
    }
    Ok(sizes.iter().map(|&d| d as f64 / total as f64).collect())
}

/// Element-wise average of client models weighted by shard size, summed in
/// client-id order.
pub fn server_weighted_average(updates: &[(usize, &ModelParams, usize)]) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::Argument("no client updates to average".into()));
    }
    let mut ordered: Vec<&(usize, &ModelParams, usize)> = updates.iter().collect();
    ordered.sort_by_key(|u| u.0);
    let sizes: Vec<usize> = ordered.iter().map(|u| u.2).collect();
    let weights = normalized_weights(&sizes)?;
    let first = ordered[0].1;
    let mut avg = first.zeroed();
    for (u, &w) in ordered.iter().zip(&weights) {
        if !u.1.compatible(first) {
            return Err(Error::dim("params", format!("client {} model shape differs", u.0)));
        }
        avg.add_scaled(w, u.1)?;
    }
    Ok(avg)
}

/// One synchronous round: every non-empty client trains against the same
/// snapshot, then the server averages models and prototypes and evaluates.
pub fn run_round(
    global_params: &ModelParams,
    global_protos: &GlobalPrototypeSet,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    data: &ExperimentData,
    round: usize,
) -> Result<(ModelParams, GlobalPrototypeSet, RoundRecord)> {
    if round == 0 {
        return Err(Error::Argument("rounds are numbered from 1".into()));
    }
    let started = Instant::now();
    let updates: Vec<LocalUpdate> = clients
        .par_iter_mut()
        .filter(|c| !c.shard.is_empty())
        .map(|c| client_local_update(c, global_params, global_protos, cfg, &data.train, round))
        .collect::<Result<_>>()?;

    let weighted: Vec<(usize, &ModelParams, usize)> =
        updates.iter().map(|u| (u.client_id, &u.params, u.num_samples)).collect();
    let params = server_weighted_average(&weighted)?;

    let mut protos = match cfg.strategy {
        Strategy::FedPr => {
            let per_client: Vec<Vec<Prototype>> = updates.iter().map(|u| u.prototypes.clone()).collect();
            aggregate_global_prototypes_with(
                &per_client,
                &AggregationOptions {
                    denominator: cfg.agg_denominator,
                    weighting: cfg.proto_weighting,
                    num_clients: cfg.num_clients,
                },
            )?
        }
        Strategy::FedAvg => GlobalPrototypeSet::default(),
    };
    protos.round = round;

    let sizes: Vec<usize> = updates.iter().map(|u| u.num_samples).collect();
    let mean_train_loss = normalized_weights(&sizes)?
        .iter()
        .zip(&updates)
        .map(|(w, u)| w * u.train_loss)
        .sum();

    let eval_protos = (cfg.strategy == Strategy::FedPr && !protos.is_empty()).then_some(&protos);
    let report = evaluate_accuracy(&params, eval_protos, &data.test, cfg.eval_inference)?;
    let record = RoundRecord {
        round,
        mean_train_loss,
        test_accuracy_softmax: report.accuracy_softmax(),
        test_accuracy_prototype: report.accuracy_prototype(),
        wall_time_ms: cfg.record_wall_time.then(|| started.elapsed().as_millis() as u64),
    };
    Ok((params, protos, record))
}

/// A federation in progress.
pub struct Federation {
    cfg: FederationConfig,
    data: ExperimentData,
    partition: Partition,
    clients: Vec<ClientState>,
    global: ModelParams,
    protos: GlobalPrototypeSet,
    round: usize,
}

impl Federation {
    /// Partitions the training data and initialises `ω⁰` with an empty prototype set.
    pub fn new(cfg: FederationConfig, data: ExperimentData) -> Result<Self> {
        cfg.validate()?;
        if data.test.is_empty() {
            return Err(Error::Argument("empty test set".into()));
        }
        let global = initial_params(&cfg, &data.train)?;
        let partition = dirichlet_partition(
            data.train.labels(),
            data.train.num_classes(),
            cfg.num_clients,
            cfg.dirichlet_alpha,
            derive_seed(cfg.master_seed, Stream::Partition),
        )?;
        let clients = partition
            .shards
            .iter()
            .map(|s| ClientState::new(s.clone(), &global, &cfg))
            .collect::<Result<_>>()?;
        Ok(Federation {
            cfg,
            data,
            partition,
            clients,
            global,
            protos: GlobalPrototypeSet::default(),
            round: 0,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn data(&self) -> &ExperimentData {
        &self.data
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global_params(&self) -> &ModelParams {
        &self.global
    }

    pub fn global_prototypes(&self) -> &GlobalPrototypeSet {
        &self.protos
    }

    pub fn rounds_completed(&self) -> usize {
        self.round
    }

    pub fn step(&mut self) -> Result<RoundRecord> {
        let t = self.round + 1;
        let (params, protos, record) =
            run_round(&self.global, &self.protos, &mut self.clients, &self.cfg, &self.data, t)?;
        self.global = params;
        self.protos = protos;
        self.round = t;
        Ok(record)
    }
}

/// Runs all configured rounds, reporting each record as it completes.
pub fn run_experiment_with<F>(cfg: &FederationConfig, mut on_round: F) -> Result<Vec<RoundRecord>>
where
    F: FnMut(&RoundRecord),
{
    cfg.validate()?;
    let data = load_experiment_data(cfg)?;
    let mut fed = Federation::new(cfg.clone(), data)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let r = fed.step()?;
        on_round(&r);
        records.push(r);
    }
    Ok(records)
}

pub fn run_experiment(cfg: &FederationConfig) -> Result<Vec<RoundRecord>> {
    run_experiment_with(cfg, |_| {})
}
