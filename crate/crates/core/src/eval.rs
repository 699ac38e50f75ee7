//! Softmax and nearest-prototype inference, accuracy, and round summaries.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::RoundRecord;
use crate::nn::ModelParams;
use crate::prototype::GlobalPrototypeSet;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 500;

/// Which inference path(s) to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Softmax,
    Prototype,
    #[default]
    Both,
}

impl InferenceMode {
    pub fn softmax(self) -> bool {
        matches!(self, InferenceMode::Softmax | InferenceMode::Both)
    }

    pub fn prototype(self) -> bool {
        matches!(self, InferenceMode::Prototype | InferenceMode::Both)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class of the closest prototype under squared distance; lowest class wins ties.
fn nearest(embedding: &[f64], protos: &[(usize, &[f64])]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &(class, p) in protos {
        let d: f64 = embedding.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, class);
        }
    }
    best.1
}

fn proto_table(params: &ModelParams, protos: &GlobalPrototypeSet) -> Result<Vec<(usize, Vec<f64>)>> {
    if protos.is_empty() {
        return Err(Error::State("no global prototypes available for inference".into()));
    }
    let d = params.embedding_dim();
    protos
        .iter()
        .map(|(c, p)| {
            if p.vector.len() != d {
                Err(Error::dim(
                    "prototypes",
                    format!("class {c} prototype has {} entries, embeddings have {d}", p.vector.len()),
                ))
            } else {
                Ok((c, p.vector.data().to_vec()))
            }
        })
        .collect()
}

pub fn predict_softmax(params: &ModelParams, inputs: &Tensor) -> Result<Vec<usize>> {
    let pass = params.forward(inputs)?;
    Ok((0..pass.logits.rows()).map(|i| argmax(pass.logits.row(i))).collect())
}

/// Classifies each input by the global prototype nearest to its embedding.
pub fn predict_nearest_prototype(params: &ModelParams, protos: &GlobalPrototypeSet, inputs: &Tensor) -> Result<Vec<usize>> {
    let table = proto_table(params, protos)?;
    let view: Vec<(usize, &[f64])> = table.iter().map(|(c, v)| (*c, v.as_slice())).collect();
    let pass = params.forward(inputs)?;
    Ok((0..pass.embeddings.rows()).map(|i| nearest(pass.embeddings.row(i), &view)).collect())
}

/// Correct-prediction count and `[true × predicted]` confusion matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub confusion: Vec<Vec<usize>>,
}

pub fn tally(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Tally> {
    if labels.len() != predictions.len() {
        return Err(Error::dim("predictions", "count differs from labels"));
    }
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    let mut correct = 0;
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= num_classes || p >= num_classes {
            return Err(Error::Label { index: 0, label: y.max(p), classes: num_classes });
        }
        confusion[y][p] += 1;
        correct += usize::from(y == p);
    }
    Ok(Tally { correct, confusion })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub softmax: Option<Tally>,
    pub prototype: Option<Tally>,
}

impl EvalReport {
    pub fn from_predictions(
        labels: &[usize],
        num_classes: usize,
        softmax: Option<&[usize]>,
        prototype: Option<&[usize]>,
    ) -> Result<Self> {
        Ok(EvalReport {
            n_samples: labels.len(),
            softmax: softmax.map(|p| tally(labels, p, num_classes)).transpose()?,
            prototype: prototype.map(|p| tally(labels, p, num_classes)).transpose()?,
        })
    }

    pub fn accuracy_softmax(&self) -> Option<f64> {
        self.softmax.as_ref().map(|t| t.correct as f64 / self.n_samples as f64)
    }

    pub fn accuracy_prototype(&self) -> Option<f64> {
        self.prototype.as_ref().map(|t| t.correct as f64 / self.n_samples as f64)
    }
}

/// Scores `testset` with the requested paths. The prototype path is skipped
/// when `protos` is `None`; an empty set is an error.
pub fn evaluate_accuracy(
    params: &ModelParams,
    protos: Option<&GlobalPrototypeSet>,
    testset: &Dataset,
    mode: InferenceMode,
) -> Result<EvalReport> {
    if testset.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let table = match protos {
        Some(p) if mode.prototype() => Some(proto_table(params, p)?),
        _ => None,
    };
    let view: Option<Vec<(usize, &[f64])>> =
        table.as_ref().map(|t| t.iter().map(|(c, v)| (*c, v.as_slice())).collect());
    let mut soft = mode.softmax().then(Vec::new);
    let mut proto = view.as_ref().map(|_| Vec::new());
    let all: Vec<usize> = (0..testset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (batch, _) = testset.gather(chunk)?;
        let pass = params.forward(&batch)?;
        if let Some(out) = soft.as_mut() {
            out.extend((0..pass.logits.rows()).map(|i| argmax(pass.logits.row(i))));
        }
        if let (Some(out), Some(v)) = (proto.as_mut(), view.as_ref()) {
            out.extend((0..pass.embeddings.rows()).map(|i| nearest(pass.embeddings.row(i), v)));
        }
    }
    EvalReport::from_predictions(testset.labels(), testset.num_classes(), soft.as_deref(), proto.as_deref())
}

/// Metric selector for [`last_k_mean`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordField {
    AccSoftmax,
    AccPrototype,
    TrainLoss,
}

impl RecordField {
    fn get(self, r: &RoundRecord) -> Option<f64> {
        match self {
            RecordField::AccSoftmax => r.test_accuracy_softmax,
            RecordField::AccPrototype => r.test_accuracy_prototype,
            RecordField::TrainLoss => Some(r.mean_train_loss),
        }
    }
}

/// Mean of `field` over the final `k` rounds. Absent values are an error,
/// never treated as zero.
pub fn last_k_mean(records: &[RoundRecord], k: usize, field: RecordField) -> Result<f64> {
    if k == 0 || k > records.len() {
        return Err(Error::Argument(format!("cannot average the last {k} of {} rounds", records.len())));
    }
    let tail = &records[records.len() - k..];
    let mut sum = 0.0;
    for r in tail {
        sum += field
            .get(r)
            .ok_or_else(|| Error::Argument(format!("round {} has no {field:?} value", r.round)))?;
    }
    Ok(sum / k as f64)
}
