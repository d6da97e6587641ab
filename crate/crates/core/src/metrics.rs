//! Per-client evaluation, cross-client averages and multi-repeat aggregation.
//!
//! Scores are percentages. F1 treats class 1 as positive and is 0 when
//! precision + recall is 0. Cross-client averages are unweighted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{predict_labels, ModelSpec};
use crate::params::WeightVector;

fn check_lengths(preds: &[u8], truth: &[u8]) -> Result<()> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(Error::usage(format!(
            "predictions ({}) and labels ({}) must be nonempty and equally long",
            preds.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// `100 * correct / total`.
pub fn accuracy(preds: &[u8], truth: &[u8]) -> Result<f64> {
    check_lengths(preds, truth)?;
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

/// Binary F1 for `positive`, in percent.
pub fn f1_score(preds: &[u8], truth: &[u8], positive: u8) -> Result<f64> {
    check_lengths(preds, truth)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client: usize,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// 1-based: the point after `round` rounds of training.
    pub round: usize,
    pub avg_test_acc: f64,
    pub avg_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_client: Vec<ClientScore>,
    pub avg_accuracy: f64,
    pub avg_f1: f64,
    pub curves: Vec<CurvePoint>,
    pub repeats: usize,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

impl EvalReport {
    pub fn new(method: impl Into<String>, per_client: Vec<ClientScore>, curves: Vec<CurvePoint>) -> Self {
        let avg_accuracy = mean(per_client.iter().map(|c| c.accuracy));
        let avg_f1 = mean(per_client.iter().map(|c| c.f1));
        Self {
            method: method.into(),
            per_client,
            avg_accuracy,
            avg_f1,
            curves,
            repeats: 1,
        }
    }

    /// Table rows: `Client,Method,ACC,F1`, one per client (`C1`..) then `Avg`.
    pub fn table_rows(&self) -> String {
        let mut out = String::new();
        for c in &self.per_client {
            writeln!(out, "C{},{},{:.2},{:.2}", c.client, self.method, c.accuracy, c.f1).unwrap();
        }
        writeln!(out, "Avg,{},{:.2},{:.2}", self.method, self.avg_accuracy, self.avg_f1).unwrap();
        out
    }

    /// `table.csv` contents for one or more reports.
    pub fn table_csv(reports: &[&EvalReport]) -> String {
        let mut out = String::from("Client,Method,ACC,F1\n");
        for r in reports {
            out.push_str(&r.table_rows());
        }
        out
    }

    /// `curves.csv` contents: `round,avg_test_acc,avg_train_loss`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("round,avg_test_acc,avg_train_loss\n");
        for p in &self.curves {
            writeln!(out, "{},{:.6},{:.6}", p.round, p.avg_test_acc, p.avg_train_loss).unwrap();
        }
        out
    }
}

/// Scores `w` on every client's test split.
pub fn evaluate_clients(
    spec: &ModelSpec,
    w: &WeightVector,
    clients: &[ClientDataset],
) -> Result<Vec<ClientScore>> {
    clients
        .iter()
        .map(|c| {
            let truth: Vec<u8> = c.test.iter().map(|e| e.label).collect();
            let preds = predict_labels(spec, w, &c.test)?;
            Ok(ClientScore {
                client: c.client_id,
                accuracy: accuracy(&preds, &truth)?,
                f1: f1_score(&preds, &truth, 1)?,
            })
        })
        .collect()
}

/// Elementwise mean over repeats of the same experiment.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::usage("aggregate_runs needs at least one report"))?;
    for r in &reports[1..] {
        let same_clients = r.per_client.len() == first.per_client.len()
            && r.per_client.iter().zip(&first.per_client).all(|(a, b)| a.client == b.client);
        let same_rounds = r.curves.len() == first.curves.len()
            && r.curves.iter().zip(&first.curves).all(|(a, b)| a.round == b.round);
        if !same_clients || !same_rounds {
            return Err(Error::usage("reports differ in clients or round counts"));
        }
    }
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let per_client = (0..first.per_client.len())
        .map(|i| ClientScore {
            client: first.per_client[i].client,
            accuracy: avg(&|r| r.per_client[i].accuracy),
            f1: avg(&|r| r.per_client[i].f1),
        })
        .collect();
    let curves = (0..first.curves.len())
        .map(|i| CurvePoint {
            round: first.curves[i].round,
            avg_test_acc: avg(&|r| r.curves[i].avg_test_acc),
            avg_train_loss: avg(&|r| r.curves[i].avg_train_loss),
        })
        .collect();
    Ok(EvalReport {
        method: first.method.clone(),
        per_client,
        avg_accuracy: avg(&|r| r.avg_accuracy),
        avg_f1: avg(&|r| r.avg_f1),
        curves,
        repeats: reports.iter().map(|r| r.repeats).sum(),
    })
}
