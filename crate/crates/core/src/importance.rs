//! Importance-weight heads: softmax over a batch scaled by its size.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Alignment, DomainDataset, ImageTensor};
use crate::diffnet::{Network, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{beta_report, ess_statistic, weight_histogram, BetaReport, Histogram};

/// Per-sample weights of one batch, each ≥ 0 and summing to the batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub indices: Vec<usize>,
}

impl WeightVector {
    pub fn uniform(indices: Vec<usize>) -> Self {
        Self {
            weights: vec![1.0; indices.len()],
            indices,
        }
    }

    pub fn from_scores(scores: &[f64], indices: Vec<usize>) -> Result<Self> {
        if scores.len() != indices.len() {
            return Err(Error::length("scores vs indices", scores.len(), indices.len()));
        }
        Ok(Self {
            weights: batch_weights(scores)?,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `βᵢ = n·exp(sᵢ)/Σⱼ exp(sⱼ)`, with the maximum score subtracted first.
pub fn batch_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "importance weights need at least 2 samples, got {}",
            scores.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("importance score {s}")));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let n = scores.len() as f64;
    Ok(e.iter().map(|v| n * v / z).collect())
}

/// Pulls a gradient on the weights back onto the scores:
/// `∂L/∂sⱼ = βⱼ (gⱼ − Σᵢ gᵢβᵢ / n)`.
pub fn weights_vjp(beta: &[f64], grad_beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != grad_beta.len() {
        return Err(Error::length("weights vs gradient", beta.len(), grad_beta.len()));
    }
    let n = beta.len() as f64;
    let mean: f64 = grad_beta.iter().zip(beta).map(|(g, b)| g * b).sum::<f64>() / n;
    Ok(beta.iter().zip(grad_beta).map(|(b, g)| b * (g - mean)).collect())
}

/// One unnormalized score per sample.
pub fn raw_scores(net: &Network, batch: &[ImageTensor]) -> Result<Vec<f64>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "importance scores need at least 2 samples, got {}",
            batch.len()
        )));
    }
    batch.iter().map(|img| score_one(net, &Tensor::from(img))).collect()
}

pub fn score_one(net: &Network, x: &Tensor) -> Result<f64> {
    Ok(net.infer_one(x)?.item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub index: usize,
    pub filename: String,
    /// Dataset-global weight: one softmax over all samples, scaled by their count.
    pub weight: f64,
    /// Weight under the training convention: softmax within consecutive chunks.
    pub batch_weight: f64,
    pub label: Option<Alignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub domain: String,
    pub chunk: usize,
    pub entries: Vec<WeightEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub domain: String,
    pub n: usize,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
    pub ess: f64,
    pub ess_paper: f64,
    pub mean_aligned: Option<f64>,
    pub mean_unaligned: Option<f64>,
    pub report: Option<BetaReport>,
    pub batch_convention: Option<BetaReport>,
    pub histogram: Histogram,
}

/// Scores the whole dataset in chunks, then normalizes once over all of it.
pub fn dataset_weights(net: &Network, dataset: &DomainDataset, chunk: usize) -> Result<WeightReport> {
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument("dataset weights need at least 2 samples".into()));
    }
    let chunk = chunk.max(2);
    let mut scores = Vec::with_capacity(dataset.len());
    for block in dataset.samples().chunks(chunk) {
        for img in block {
            scores.push(score_one(net, &Tensor::from(img))?);
        }
    }
    report_from_scores(dataset, &scores, chunk)
}

pub(crate) fn report_from_scores(dataset: &DomainDataset, scores: &[f64], chunk: usize) -> Result<WeightReport> {
    let global = batch_weights(scores)?;
    let mut batch = Vec::with_capacity(scores.len());
    for block in scores.chunks(chunk) {
        if block.len() >= 2 {
            batch.extend(batch_weights(block)?);
        } else {
            batch.push(1.0);
        }
    }
    let entries = (0..dataset.len())
        .map(|i| WeightEntry {
            index: i,
            filename: dataset.names()[i].clone(),
            weight: global[i],
            batch_weight: batch[i],
            label: dataset.labels().map(|l| l[i]),
        })
        .collect();
    Ok(WeightReport {
        domain: dataset.name().to_string(),
        chunk,
        entries,
    })
}

impl WeightReport {
    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn labels(&self) -> Option<Vec<Alignment>> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,filename,weight,label\n");
        for e in &self.entries {
            let label = e.label.map(|l| l.as_flag().to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", e.index, e.filename, e.weight, label);
        }
        s
    }

    pub fn summary(&self) -> Result<WeightSummary> {
        let w = self.weights();
        let labels = self.labels();
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let hist = weight_histogram(&w, labels.as_deref(), 20, 0.0, max.max(2.0))?;
        let mean_of = |want: Alignment| -> Option<f64> {
            let l = labels.as_ref()?;
            let sel: Vec<f64> = w.iter().zip(l).filter(|(_, l)| **l == want).map(|(w, _)| *w).collect();
            (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
        };
        let batch_w: Vec<f64> = self.entries.iter().map(|e| e.batch_weight).collect();
        let sum_sq: f64 = w.iter().map(|b| b * b).sum();
        Ok(WeightSummary {
            domain: self.domain.clone(),
            n: w.len(),
            sum: w.iter().sum(),
            min: w.iter().cloned().fold(f64::INFINITY, f64::min),
            max,
            ess: ess_statistic(&w)?,
            ess_paper: w.len() as f64 / sum_sq,
            mean_aligned: mean_of(Alignment::Aligned),
            mean_unaligned: mean_of(Alignment::Unaligned),
            report: labels.as_ref().map(|l| beta_report(&w, l, 0.5)).transpose()?,
            batch_convention: labels.as_ref().map(|l| beta_report(&batch_w, l, 0.5)).transpose()?,
            histogram: hist,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(&self.summary()?)?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_are_uniform() {
        assert_eq!(batch_weights(&[0.7; 4]).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn softmax_arithmetic() {
        let w = batch_weights(&[2f64.ln(), 0.0, 0.0]).unwrap();
        for (a, b) in w.iter().zip([1.5, 0.75, 0.75]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_degenerate_batches() {
        assert!(batch_weights(&[1.0]).is_err());
        assert!(batch_weights(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let s = [0.3, -1.2, 0.8, 0.1];
        let g = [0.5, -0.2, 1.1, 0.0];
        let beta = batch_weights(&s).unwrap();
        let a = weights_vjp(&beta, &g).unwrap();
        let f = |s: &[f64]| -> f64 {
            batch_weights(s).unwrap().iter().zip(&g).map(|(b, g)| b * g).sum()
        };
        for j in 0..4 {
            let (mut p, mut m) = (s, s);
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - a[j]).abs() < 1e-8, "{j}: {num} vs {}", a[j]);
        }
    }
}
