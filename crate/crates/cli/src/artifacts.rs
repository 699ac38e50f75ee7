//! Run artifacts: `rounds.csv`, `summary.json` and the comparison files.
//!
//! Every byte is a function of the resolved configuration. Floats in CSV use
//! six fractional digits; JSON objects have sorted keys.

use std::fmt::Write as _;
use std::path::Path;

use fedpr::eval::{last_k_mean, RecordField};
use fedpr::federation::{FederationConfig, RoundRecord};
use fedpr::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;
pub const ROUND_CSV_HEADER: &str = "round,mean_train_loss,acc_softmax,acc_prototype,wall_time_ms";
/// Rounds averaged for the headline accuracy.
pub const LAST_K: usize = 10;

/// A finished run: the configuration it resolved to and its round records.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub config: FederationConfig,
    pub records: Vec<RoundRecord>,
}

fn fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn render_round_csv(records: &[RoundRecord]) -> String {
    let mut out = format!("{ROUND_CSV_HEADER}\n");
    for r in records {
        let wall = r.wall_time_ms.map(|w| w.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.round,
            fixed(Some(r.mean_train_loss)),
            fixed(r.test_accuracy_softmax),
            fixed(r.test_accuracy_prototype),
            wall
        );
    }
    out
}

/// Parses a `rounds.csv` body back into records (values rounded to 6 digits).
pub fn parse_round_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let bad = |line: usize, detail: &str| Error::Format {
        path: "rounds.csv".into(),
        detail: format!("line {line}: {detail}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(ROUND_CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let opt_f64 = |s: &str, n: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(n, "bad number"))
        }
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let cols: Vec<&str> = line.split(',').collect();
            let [round, loss, soft, proto, wall] = cols[..] else {
                return Err(bad(n, "expected 5 columns"));
            };
            Ok(RoundRecord {
                round: round.parse().map_err(|_| bad(n, "bad round"))?,
                mean_train_loss: loss.parse().map_err(|_| bad(n, "bad loss"))?,
                test_accuracy_softmax: opt_f64(soft, n)?,
                test_accuracy_prototype: opt_f64(proto, n)?,
                wall_time_ms: if wall.is_empty() {
                    None
                } else {
                    Some(wall.parse().map_err(|_| bad(n, "bad wall time"))?)
                },
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_round_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    write_text(path, &render_round_csv(records))
}

/// SHA-256 of the config's canonical JSON, hex encoded.
pub fn config_hash(cfg: &FederationConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean of `field` over the last `min(k, len)` records; `None` when the field is absent.
pub fn last_mean(records: &[RoundRecord], field: RecordField) -> Option<f64> {
    last_k_mean(records, LAST_K.min(records.len()), field).ok()
}

fn record_json(r: &RoundRecord) -> Value {
    json!({
        "round": r.round,
        "mean_train_loss": r.mean_train_loss,
        "acc_softmax": r.test_accuracy_softmax,
        "acc_prototype": r.test_accuracy_prototype,
        "wall_time_ms": r.wall_time_ms,
    })
}

fn last_means_json(records: &[RoundRecord]) -> Value {
    json!({
        "acc_softmax": last_mean(records, RecordField::AccSoftmax),
        "acc_prototype": last_mean(records, RecordField::AccPrototype),
        "mean_train_loss": last_mean(records, RecordField::TrainLoss),
    })
}

pub fn summary_json(artifact: &RunArtifact) -> Result<Value> {
    let last = artifact
        .records
        .last()
        .ok_or_else(|| Error::Argument("summary needs at least one round".into()))?;
    Ok(json!({
        "format_version": FORMAT_VERSION,
        "config": artifact.config,
        "config_hash": config_hash(&artifact.config),
        "master_seed": artifact.config.master_seed,
        "strategy": artifact.config.strategy,
        "rounds_completed": artifact.records.len(),
        "last_k": LAST_K.min(artifact.records.len()),
        "last_k_mean": last_means_json(&artifact.records),
        "final_round": record_json(last),
    }))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON value serializes");
    s.push('\n');
    s
}

pub fn write_summary(artifact: &RunArtifact, path: &Path) -> Result<()> {
    write_text(path, &pretty(&summary_json(artifact)?))
}

/// FedAvg and FedPR runs sharing one seed and every other setting.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub fedavg: RunArtifact,
    pub fedpr: RunArtifact,
}

/// The accuracy each strategy is judged by: softmax for FedAvg, nearest
/// prototype for FedPR (falling back to softmax when not recorded).
pub fn natural_accuracy(r: &RoundRecord) -> Option<f64> {
    r.test_accuracy_prototype.or(r.test_accuracy_softmax)
}

fn delta_json(fedpr: Option<f64>, fedavg: Option<f64>) -> Value {
    match (fedpr, fedavg) {
        (Some(p), Some(a)) => json!({
            "fedpr": p,
            "fedavg": a,
            "absolute_pp": (p - a) * 100.0,
            "relative_percent": if a > 0.0 { Some((p - a) / a * 100.0) } else { None },
        }),
        _ => Value::Null,
    }
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

pub fn render_comparison_csv(cmp: &Comparison) -> String {
    let mut out =
        String::from("round,fedavg_acc_softmax,fedpr_acc_softmax,fedpr_acc_prototype,delta_softmax,delta_natural\n");
    for (a, p) in cmp.fedavg.records.iter().zip(&cmp.fedpr.records) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            a.round,
            fixed(a.test_accuracy_softmax),
            fixed(p.test_accuracy_softmax),
            fixed(p.test_accuracy_prototype),
            fixed(delta(p.test_accuracy_softmax, a.test_accuracy_softmax)),
            fixed(delta(natural_accuracy(p), a.test_accuracy_softmax)),
        );
    }
    out
}

pub fn comparison_json(cmp: &Comparison) -> Value {
    let natural: Vec<RoundRecord> = cmp
        .fedpr
        .records
        .iter()
        .map(|r| RoundRecord { test_accuracy_softmax: natural_accuracy(r), ..r.clone() })
        .collect();
    json!({
        "format_version": FORMAT_VERSION,
        "master_seed": cmp.fedpr.config.master_seed,
        "config_hash": {
            "fedavg": config_hash(&cmp.fedavg.config),
            "fedpr": config_hash(&cmp.fedpr.config),
        },
        "last_k": LAST_K.min(cmp.fedpr.records.len()),
        "last_k_mean": {
            "fedavg": last_means_json(&cmp.fedavg.records),
            "fedpr": last_means_json(&cmp.fedpr.records),
        },
        "delta_last10": delta_json(
            last_mean(&natural, RecordField::AccSoftmax),
            last_mean(&cmp.fedavg.records, RecordField::AccSoftmax),
        ),
        "delta_last10_softmax": delta_json(
            last_mean(&cmp.fedpr.records, RecordField::AccSoftmax),
            last_mean(&cmp.fedavg.records, RecordField::AccSoftmax),
        ),
    })
}

/// Writes both runs' artifacts under `fedavg/` and `fedpr/` plus the joint files.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<()> {
    for (name, run) in [("fedavg", &cmp.fedavg), ("fedpr", &cmp.fedpr)] {
        write_round_csv(&run.records, &dir.join(name).join("rounds.csv"))?;
        write_summary(run, &dir.join(name).join("summary.json"))?;
    }
    write_text(&dir.join("comparison.csv"), &render_comparison_csv(cmp))?;
    write_text(&dir.join("comparison.json"), &pretty(&comparison_json(cmp)))
}
