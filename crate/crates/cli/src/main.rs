use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedpr::federation::FederationConfig;
use fedpr_cli::{commands, config, selftest};
use tracing_subscriber::EnvFilter;

/// Federated learning simulator comparing FedAvg with prototype-regularised FedPR.
#[derive(Parser)]
#[command(name = "fedpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv and summary.json.
    Run(ExperimentArgs),
    /// Run FedAvg and FedPR with the same seed and write a joint comparison.
    Compare(ExperimentArgs),
    /// Print the client-by-class sample counts of the Dirichlet partition.
    PartitionReport(ExperimentArgs),
    /// Run the built-in gradient and oracle checks on synthetic data.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// `key = value` or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedavg or fedpr.
    #[arg(long)]
    strategy: Option<String>,
    /// mnist, fashion or synthetic.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory with the IDX files (default: data/<dataset>).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Dirichlet concentration.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the prototype term.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Local epochs per round.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// cnn4 or mlp2.
    #[arg(long)]
    model: Option<String>,
    /// Any other configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (partition-report prints to stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, String> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v));
            }
        };
        push("strategy", self.strategy.clone());
        push("dataset", self.dataset.clone());
        push("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        push("dirichlet_alpha", self.alpha.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("rounds", self.rounds.map(|v| v.to_string()));
        push("local_epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch.map(|v| v.to_string()));
        push("learning_rate", self.lr.map(|v| v.to_string()));
        push("num_clients", self.clients.map(|v| v.to_string()));
        push("master_seed", self.seed.map(|v| v.to_string()));
        push("model", self.model.clone());
        for item in &self.set {
            let (k, v) = item.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    fn resolve(&self) -> Result<FederationConfig, String> {
        config::parse_config(self.config.as_deref(), &self.overrides()?).map_err(|e| e.to_string())
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn dispatch(command: Command) -> Result<(), String> {
    match command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = args.out_dir();
            let artifact = commands::run(&cfg, &out).map_err(|e| e.to_string())?;
            let last = artifact.records.last().expect("at least one round");
            println!(
                "wrote {} ({} rounds, final softmax accuracy {})",
                out.display(),
                artifact.records.len(),
                last.test_accuracy_softmax.map(|a| format!("{:.4}", a)).unwrap_or_else(|| "-".into())
            );
        }
        Command::Compare(args) => {
            let cfg = args.resolve()?;
            let out = args.out_dir();
            let cmp = commands::compare(&cfg, &out).map_err(|e| e.to_string())?;
            let summary = fedpr_cli::artifacts::comparison_json(&cmp);
            println!("{}", serde_json::to_string_pretty(&summary["delta_last10"]).unwrap_or_default());
            println!("wrote {}", out.display());
        }
        Command::PartitionReport(args) => {
            let cfg = args.resolve()?;
            let csv = commands::partition_report(&cfg).map_err(|e| e.to_string())?;
            match &args.out {
                Some(dir) => {
                    let path = dir.join("partition.csv");
                    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                    std::fs::write(&path, csv).map_err(|e| format!("{}: {e}", path.display()))?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Selftest { seed } => {
            let outcomes = selftest::run_selftest(seed);
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Err("selftest failed".into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
