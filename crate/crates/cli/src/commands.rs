//! The `run`, `compare` and `partition-report` subcommands.

use std::fmt::Write as _;
use std::path::Path;

use fedpr::data::Partition;
use fedpr::federation::{
    load_experiment_data, run_experiment_with, Federation, FederationConfig, RoundRecord, Strategy,
};
use fedpr::Result;
use tracing::info;

use crate::artifacts::{write_comparison, write_round_csv, write_summary, Comparison, RunArtifact};

fn log_round(strategy: Strategy, r: &RoundRecord) {
    let pct = |v: Option<f64>| v.map(|a| format!("{:.2}%", a * 100.0)).unwrap_or_else(|| "-".into());
    info!(
        ?strategy,
        round = r.round,
        loss = format!("{:.4}", r.mean_train_loss),
        softmax = pct(r.test_accuracy_softmax),
        prototype = pct(r.test_accuracy_prototype),
        "round finished"
    );
}

/// Runs one experiment without touching the filesystem beyond data loading.
pub fn execute(cfg: &FederationConfig) -> Result<RunArtifact> {
    let records = run_experiment_with(cfg, |r| log_round(cfg.strategy, r))?;
    Ok(RunArtifact { config: cfg.clone(), records })
}

/// `run`: executes and writes `rounds.csv` and `summary.json` into `out`.
pub fn run(cfg: &FederationConfig, out: &Path) -> Result<RunArtifact> {
    let artifact = execute(cfg)?;
    write_round_csv(&artifact.records, &out.join("rounds.csv"))?;
    write_summary(&artifact, &out.join("summary.json"))?;
    Ok(artifact)
}

/// The FedAvg and FedPR variants of `cfg`, identical except for strategy and λ.
pub fn comparison_configs(cfg: &FederationConfig) -> (FederationConfig, FederationConfig) {
    let fedavg = FederationConfig { strategy: Strategy::FedAvg, lambda: 0.0, ..cfg.clone() };
    let fedpr = FederationConfig { strategy: Strategy::FedPr, ..cfg.clone() };
    (fedavg, fedpr)
}

/// `compare`: both strategies under one seed, plus the joint comparison files.
pub fn compare(cfg: &FederationConfig, out: &Path) -> Result<Comparison> {
    let (fedavg, fedpr) = comparison_configs(cfg);
    fedpr.validate()?;
    let cmp = Comparison { fedavg: execute(&fedavg)?, fedpr: execute(&fedpr)? };
    write_comparison(&cmp, out)?;
    Ok(cmp)
}

/// The `client,class,count` matrix, every cell included.
pub fn render_partition_csv(partition: &Partition) -> String {
    let mut out = String::from("client,class,count\n");
    for (client, row) in partition.counts.iter().enumerate() {
        for (class, count) in row.iter().enumerate() {
            let _ = writeln!(out, "{client},{class},{count}");
        }
    }
    out
}

/// `partition-report`: loads and partitions the data exactly as `run` would.
pub fn partition_report(cfg: &FederationConfig) -> Result<String> {
    let data = load_experiment_data(cfg)?;
    let fed = Federation::new(cfg.clone(), data)?;
    Ok(render_partition_csv(fed.partition()))
}
