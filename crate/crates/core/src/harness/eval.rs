use serde_json::{json, Map, Value};

use super::checkpoint::Checkpoint;
use super::config::Task;
use super::model::Model;
use crate::analysis::{in_batch_retrieval, knn_classify, linear_probe, score_slots_retrieval, ProbeConfig};
use crate::error::{Error, Result};
use crate::synthworld::{make_splits, Dataset, Splits};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    RetrievalAt1,
    RetrievalAt5,
    Knn,
    LinearProbe,
    SlotScores,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::RetrievalAt1,
        Metric::RetrievalAt5,
        Metric::Knn,
        Metric::LinearProbe,
        Metric::SlotScores,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::RetrievalAt1 => "retrieval@1",
            Metric::RetrievalAt5 => "retrieval@5",
            Metric::Knn => "knn",
            Metric::LinearProbe => "linear_probe",
            Metric::SlotScores => "slot_scores",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Comma-separated metric names, duplicates dropped.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Metric::parse(name).ok_or_else(|| {
            let known: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
            Error::Usage(format!("unknown metric {name:?} (expected one of {})", known.join(", ")))
        })?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("metrics list is empty".into()));
    }
    Ok(out)
}

/// The data splits a checkpoint was trained with.
pub fn splits_for<T>(ck: &Checkpoint<T>) -> Result<Splits> {
    let c = &ck.config;
    make_splits(&c.world, c.data.n_train, c.data.n_val, c.data.n_test, c.data.seed, c.data.compositional)
}

/// Evaluation encodings of a whole dataset: `(image, text)`.
pub fn encode_dataset<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    let (ie, is) = model.image_encoder();
    let img = model.encode(ie, is, data.len(), &|idx| data.image_batch(idx))?;
    let txt = match model.text_encoder() {
        Some((te, ts)) => Some(model.encode(te, ts, data.len(), &|idx| data.text_batch(idx))?),
        None => None,
    };
    Ok((img, txt))
}

fn needs_text(m: Metric, task: Task) -> Result<()> {
    if task == Task::Dino {
        return Err(Error::Usage(format!("metric {} needs a contrastive checkpoint", m.name())));
    }
    Ok(())
}

/// Report of the requested metrics on one split. Keys are sorted, so the
/// serialized report is a pure function of its inputs.
pub fn evaluate<T: Scalar>(ck: &Checkpoint<T>, split: &str, metrics: &[Metric]) -> Result<Value> {
    if metrics.is_empty() {
        return Err(Error::Usage("metrics list is empty".into()));
    }
    let splits = splits_for(ck)?;
    let data = splits.get(split)?;
    let task = ck.model.task();
    for &m in metrics {
        if matches!(m, Metric::RetrievalAt1 | Metric::RetrievalAt5 | Metric::SlotScores) {
            needs_text(m, task)?;
        }
    }
    let (img, txt) = encode_dataset(&ck.model, data)?;
    let batch = ck.config.batch_size.min(data.len());
    let needs_train = metrics.iter().any(|m| matches!(m, Metric::Knn | Metric::LinearProbe));
    let train = if needs_train {
        Some(encode_dataset(&ck.model, &splits.train)?.0)
    } else {
        None
    };
    let mut out = Map::new();
    for &m in metrics {
        let v = match m {
            Metric::RetrievalAt1 | Metric::RetrievalAt5 => {
                let k = if m == Metric::RetrievalAt1 { 1 } else { 5 };
                let txt = txt.as_ref().expect("contrastive checkpoint");
                serde_json::to_value(in_batch_retrieval(&img, txt, batch, k.min(batch))?)?
            }
            Metric::Knn => {
                let tr = train.as_ref().expect("train encodings");
                let k = ck.config.knn_k;
                json!({ "k": k, "accuracy": knn_classify(tr, &splits.train.labels(), &img, &data.labels(), k)? })
            }
            Metric::LinearProbe => {
                let tr = train.as_ref().expect("train encodings");
                let cfg = ProbeConfig {
                    seed: ck.config.seed,
                    ..ProbeConfig::default()
                };
                let r = linear_probe(tr, &splits.train.labels(), &img, &data.labels(), &cfg)?;
                json!({ "accuracy": r.accuracy, "weight_decay": r.weight_decay, "sweep": r.sweep })
            }
            Metric::SlotScores => {
                let layout = ck.model.image_encoder().0.layout();
                if ck.model.image_encoder().0.sparo().is_none() {
                    return Err(Error::contract("slot scores need a sparo head"));
                }
                let txt = txt.as_ref().expect("contrastive checkpoint");
                serde_json::to_value(score_slots_retrieval(&img, txt, layout, batch, split)?)?
            }
        };
        out.insert(m.name().to_string(), v);
    }
    Ok(json!({
        "task": task.name(),
        "split": split,
        "step": ck.step,
        "items": data.len(),
        "metrics": Value::Object(out),
    }))
}
