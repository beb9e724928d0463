use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::model::LossBundle;
use crate::tensor::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    Macro,
    Micro,
    Weighted,
}

/// `(tp, fp, fn)` per class.
pub fn confusion_counts(preds: &[usize], labels: &[usize], c: usize) -> Vec<(usize, usize, usize)> {
    let mut counts = vec![(0, 0, 0); c];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            counts[p].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[y].2 += 1;
        }
    }
    counts
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check(preds: &[usize], labels: &[usize], c: usize) -> Result<(), TensorError> {
    if preds.is_empty() {
        return Err(TensorError::Contract("F1 of an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(TensorError::Contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&v| v >= c) {
        return Err(TensorError::Contract(format!("class index {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// F1 of each class; a class with no predictions and no labels scores 0.
pub fn per_class_f1(preds: &[usize], labels: &[usize], c: usize) -> Result<Vec<f64>, TensorError> {
    check(preds, labels, c)?;
    Ok(confusion_counts(preds, labels, c).into_iter().map(|(tp, fp, fn_)| f1(tp, fp, fn_)).collect())
}

/// Unweighted mean of per-class F1 over all `c` classes.
pub fn macro_f1(preds: &[usize], labels: &[usize], c: usize) -> Result<f64, TensorError> {
    let per = per_class_f1(preds, labels, c)?;
    Ok(per.iter().sum::<f64>() / c as f64)
}

pub fn f1_score(preds: &[usize], labels: &[usize], c: usize, average: F1Average) -> Result<f64, TensorError> {
    match average {
        F1Average::Macro => macro_f1(preds, labels, c),
        F1Average::Micro => {
            check(preds, labels, c)?;
            let (tp, fp, fn_) = confusion_counts(preds, labels, c)
                .into_iter()
                .fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
            Ok(f1(tp, fp, fn_))
        }
        F1Average::Weighted => {
            let per = per_class_f1(preds, labels, c)?;
            let mut support = vec![0usize; c];
            for &y in labels {
                support[y] += 1;
            }
            Ok(per.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / labels.len() as f64)
        }
    }
}

pub const METRICS_HEADER: [&str; 17] = [
    "fold",
    "epoch",
    "ce_causal",
    "ce_fusion",
    "ce_intervention",
    "ce_noncausal",
    "mi",
    "cond_mi",
    "pred_mi",
    "inv_mi",
    "orth",
    "contrastive",
    "center",
    "gate_conf",
    "total",
    "train_f1",
    "val_f1",
];

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub ce_causal: f64,
    pub ce_fusion: f64,
    pub ce_intervention: f64,
    pub ce_noncausal: f64,
    pub mi: f64,
    pub cond_mi: f64,
    pub pred_mi: f64,
    pub inv_mi: f64,
    pub orth: f64,
    pub contrastive: f64,
    pub center: f64,
    pub gate_conf: f64,
    pub total: f64,
    pub train_f1: f64,
    pub val_f1: f64,
}

impl EpochRecord {
    pub fn new(fold: usize, epoch: usize, l: &LossBundle, train_f1: f64, val_f1: f64) -> Self {
        Self {
            fold,
            epoch,
            ce_causal: l.ce_causal,
            ce_fusion: l.ce_fusion,
            ce_intervention: l.ce_intervention,
            ce_noncausal: l.ce_noncausal,
            mi: l.mi,
            cond_mi: l.cond_mi,
            pred_mi: l.pred_mi,
            inv_mi: l.inv_mi,
            orth: l.orth,
            contrastive: l.contrastive,
            center: l.center,
            gate_conf: l.gate_conf,
            total: l.total,
            train_f1,
            val_f1,
        }
    }

    /// Value of a numeric column by header name.
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "fold" => self.fold as f64,
            "epoch" => self.epoch as f64,
            "ce_causal" => self.ce_causal,
            "ce_fusion" => self.ce_fusion,
            "ce_intervention" => self.ce_intervention,
            "ce_noncausal" => self.ce_noncausal,
            "mi" => self.mi,
            "cond_mi" => self.cond_mi,
            "pred_mi" => self.pred_mi,
            "inv_mi" => self.inv_mi,
            "orth" => self.orth,
            "contrastive" => self.contrastive,
            "center" => self.center,
            "gate_conf" => self.gate_conf,
            "total" => self.total,
            "train_f1" => self.train_f1,
            "val_f1" => self.val_f1,
            _ => return None,
        })
    }
}

/// Extra per-epoch values that do not belong in `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub fold: usize,
    pub epoch: usize,
    pub gate_mean: f64,
    pub alpha_mean: f64,
    pub alpha_int: f64,
    pub ramp: f64,
    pub adaptive: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { found: Vec<String>, expected: Vec<String> },
    #[error("no data rows")]
    Empty,
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_records<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<(), CsvError> {
    let mut out = writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads `metrics.csv`, checking the header exactly.
pub fn read_metrics<R: Read>(r: R) -> Result<Vec<EpochRecord>, CsvError> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(CsvError::Header {
            found: header,
            expected: METRICS_HEADER.iter().map(|s| s.to_string()).collect(),
        });
    }
    let rows = reader.deserialize().collect::<Result<Vec<EpochRecord>, _>>()?;
    if rows.is_empty() {
        return Err(CsvError::Empty);
    }
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `summary.csv`: one `fold,test_f1,best_epoch` row per fold, then
/// `mean,<mean>,<std>`.
pub fn write_summary<W: Write>(w: W, folds: &[(usize, f64, usize)]) -> Result<(), CsvError> {
    let mut out = writer(w);
    out.write_record(["fold", "test_f1", "best_epoch"])?;
    for &(fold, f1, best) in folds {
        out.write_record([fold.to_string(), f1.to_string(), best.to_string()])?;
    }
    let (mean, std) = mean_std(&folds.iter().map(|f| f.1).collect::<Vec<_>>());
    out.write_record(["mean".to_string(), mean.to_string(), std.to_string()])?;
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub folds: Vec<(usize, f64, usize)>,
    pub mean: f64,
    pub std: f64,
}

pub fn read_summary<R: Read>(r: R) -> Result<Summary, CsvError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != ["fold", "test_f1", "best_epoch"] {
        return Err(CsvError::Header { found: header, expected: vec!["fold".into(), "test_f1".into(), "best_epoch".into()] });
    }
    let mut folds = Vec::new();
    let mut agg = None;
    for rec in reader.records() {
        let rec = rec?;
        let parse = |i: usize| rec.get(i).unwrap_or("").parse::<f64>().unwrap_or(f64::NAN);
        if rec.get(0) == Some("mean") {
            agg = Some((parse(1), parse(2)));
        } else {
            folds.push((parse(0) as usize, parse(1), parse(2) as usize));
        }
    }
    let (mean, std) = agg.ok_or(CsvError::Empty)?;
    Ok(Summary { folds, mean, std })
}
