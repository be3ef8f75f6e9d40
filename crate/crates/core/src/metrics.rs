//! FID, KID, weight classification reports, effective sample size and histograms.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Alignment, ImageTensor};
use crate::error::{Error, Result};

const EIG_TOL: f64 = 1e-8;

/// Maps an image to a feature vector.
pub trait FeatureExtractor {
    fn tag(&self) -> &str;
    fn extract(&self, img: &ImageTensor) -> Vec<f64>;
}

/// Flattened pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawPixels;

impl FeatureExtractor for RawPixels {
    fn tag(&self) -> &str {
        "raw-pixels"
    }

    fn extract(&self, img: &ImageTensor) -> Vec<f64> {
        img.data().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, extractor: impl Into<String>) -> Result<Self> {
        if let Some(d) = rows.first().map(Vec::len) {
            if rows.iter().any(|r| r.len() != d) {
                return Err(Error::Shape("feature rows differ in length".into()));
            }
        }
        Ok(Self {
            rows,
            extractor: extractor.into(),
        })
    }

    pub fn extract(images: &[ImageTensor], ex: &dyn FeatureExtractor) -> Result<Self> {
        Self::new(images.iter().map(|i| ex.extract(i)).collect(), ex.tag())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (m, d) = (self.len(), self.dim());
        let mut mu = DVector::zeros(d);
        for r in &self.rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= m as f64;
        let mut centered = DMatrix::zeros(m, d);
        for (i, r) in self.rows.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = r[j] - mu[j];
            }
        }
        let cov = centered.transpose() * &centered / (m as f64 - 1.0);
        (mu, cov)
    }
}

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 feature vectors per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::length("feature dimension", a.dim(), b.dim()));
    }
    if a.extractor != b.extractor {
        return Err(Error::InvalidArgument(format!(
            "features come from different extractors: {} vs {}",
            a.extractor, b.extractor
        )));
    }
    Ok(())
}

fn clamped_eigenvalues(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for l in eig.eigenvalues.iter_mut() {
        if *l < -EIG_TOL {
            return Err(Error::NotPsd(*l));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let ea = clamped_eigenvalues(cov_a.clone())?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let trace_sqrt: f64 = clamped_eigenvalues(inner)?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    Ok(d.max(0.0))
}

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / u.len() as f64 + 1.0).powi(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kid {
    pub raw: f64,
    pub x100: f64,
}

/// Unbiased squared MMD under the cubic polynomial kernel.
pub fn kid(a: &FeatureSet, b: &FeatureSet) -> Result<Kid> {
    check_pair(a, b)?;
    let within = |s: &FeatureSet| -> f64 {
        let m = s.len();
        let mut t = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    t += poly_kernel(&s.rows[i], &s.rows[j]);
                }
            }
        }
        t / (m * (m - 1)) as f64
    };
    let mut cross = 0.0;
    for u in &a.rows {
        for v in &b.rows {
            cross += poly_kernel(u, v);
        }
    }
    cross /= (a.len() * b.len()) as f64;
    let raw = within(a) + within(b) - 2.0 * cross;
    Ok(Kid { raw, x100: raw * 100.0 })
}

/// Confusion-matrix summary with "aligned" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub threshold: f64,
    /// `None` when no sample is predicted aligned or labels hold a single class.
    pub precision: Option<f64>,
    /// `None` when labels hold a single class.
    pub recall: Option<f64>,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn beta_report(weights: &[f64], labels: &[Alignment], threshold: f64) -> Result<BetaReport> {
    if weights.len() != labels.len() {
        return Err(Error::length("weights vs labels", weights.len(), labels.len()));
    }
    if weights.is_empty() {
        return Err(Error::InvalidArgument("empty weight report".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (w, l) in weights.iter().zip(labels) {
        match (*w >= threshold, l.is_aligned()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let both_classes = tp + fn_ > 0 && fp + tn > 0;
    Ok(BetaReport {
        threshold,
        precision: (both_classes && tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        recall: both_classes.then(|| tp as f64 / (tp + fn_) as f64),
        accuracy: (tp + tn) as f64 / weights.len() as f64,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Kish effective sample size `(Σβ)²/Σβ²`.
pub fn ess_statistic(weights: &[f64]) -> Result<f64> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("weight {w} is not a finite non-negative value")));
    }
    let s: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq == 0.0 {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }
    Ok(s * s / sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub count_aligned: usize,
    pub count_unaligned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
}

/// Uniform bins over `[lo, hi]`; values outside fall into the end bins.
pub fn weight_histogram(
    weights: &[f64],
    labels: Option<&[Alignment]>,
    bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Histogram> {
    if bins < 2 || !(hi > lo) {
        return Err(Error::InvalidArgument(format!("histogram needs ≥ 2 bins and hi > lo, got {bins} over [{lo}, {hi}]")));
    }
    if let Some(l) = labels {
        if l.len() != weights.len() {
            return Err(Error::length("weights vs labels", weights.len(), l.len()));
        }
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            low: lo + i as f64 * width,
            high: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
            count_aligned: 0,
            count_unaligned: 0,
        })
        .collect();
    for (i, w) in weights.iter().enumerate() {
        let k = (((w - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        out[k].count += 1;
        match labels.map(|l| l[i]) {
            Some(Alignment::Aligned) => out[k].count_aligned += 1,
            Some(Alignment::Unaligned) => out[k].count_unaligned += 1,
            None => {}
        }
    }
    Ok(Histogram { bins: out })
}

impl Histogram {
    /// The trailing `count` column also covers unlabeled samples.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count_aligned,count_unaligned,count\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{},{},{}", b.low, b.high, b.count_aligned, b.count_unaligned, b.count);
        }
        s
    }
}

/// The evaluation summary written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub kid: f64,
    pub kid_x100: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub ess_x: f64,
    pub ess_y: f64,
    pub detail: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set1d(v: &[f64]) -> FeatureSet {
        FeatureSet::new(v.iter().map(|x| vec![*x]).collect(), "t").unwrap()
    }

    #[test]
    fn fid_closed_forms() {
        // sample mean 0, variance 1 (1/(m−1)) vs mean 1, variance 1
        let a = set1d(&[-1.0, 1.0, 0.0]);
        let b = set1d(&[0.0, 2.0, 1.0]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-10);
        let c = set1d(&[-2.0, 2.0, 0.0]);
        assert!((fid(&a, &c).unwrap() - 1.0).abs() < 1e-10);
        assert!(fid(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn kid_hand_case() {
        let k = kid(&set1d(&[0.0, 0.0]), &set1d(&[1.0, 1.0])).unwrap();
        assert_eq!(k.raw, 7.0);
        assert_eq!(k.x100, 700.0);
        let v = set1d(&[0.3, 0.3]);
        assert_eq!(kid(&v, &v).unwrap().raw, 0.0);
        assert!(kid(&set1d(&[0.0]), &v).is_err());
    }

    #[test]
    fn beta_report_cases() {
        use Alignment::*;
        let r = beta_report(&[0.9, 1.2, 0.1, 0.05], &[Aligned, Aligned, Unaligned, Unaligned], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.accuracy), (Some(1.0), Some(1.0), 1.0));
        let r = beta_report(&[0.4, 0.6], &[Aligned, Unaligned], 0.5).unwrap();
        assert_eq!(r.accuracy, 0.0);
        let r = beta_report(&[1.0; 4], &[Aligned, Unaligned, Aligned, Aligned], 0.5).unwrap();
        assert_eq!((r.recall, r.precision), (Some(1.0), Some(0.75)));
        let r = beta_report(&[1.0, 0.1], &[Aligned, Aligned], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.accuracy), (None, None, 0.5));
    }

    #[test]
    fn ess_cases() {
        assert_eq!(ess_statistic(&[1.0; 20]).unwrap(), 20.0);
        assert_eq!(ess_statistic(&[0.0, 20.0, 0.0]).unwrap(), 1.0);
        assert_eq!(ess_statistic(&[2.0, 2.0, 0.0, 0.0]).unwrap(), 2.0);
        assert!(ess_statistic(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn histogram_counts() {
        use Alignment::*;
        let h = weight_histogram(&[1.0; 5], None, 20, 0.0, 2.0).unwrap();
        assert_eq!(h.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert!(h.bins[10].low <= 1.0 && 1.0 < h.bins[10].high && h.bins[10].count == 5);
        let w = [0.1, 3.5, -1.0, 0.9];
        let l = [Aligned, Unaligned, Unaligned, Aligned];
        let h = weight_histogram(&w, Some(&l), 4, 0.0, 2.0).unwrap();
        assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(h.bins.iter().map(|b| b.count_aligned).sum::<usize>(), 2);
        assert_eq!(h.bins[3].count_unaligned, 1);
        assert_eq!(h.bins[0].count_unaligned, 1);
    }
}
