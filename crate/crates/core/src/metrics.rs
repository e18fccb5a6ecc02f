//! Evaluation metrics: accuracy tables, calibration, mask overlap, Fréchet
//! distance and caption similarity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::toy::classifier::argmax;

/// One classifier output on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub source_id: String,
    pub variant_name: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub confidence_vector: Vec<f64>,
}

impl PredictionRecord {
    /// Builds a record, taking the predicted label as the arg-max confidence.
    pub fn new(source_id: &str, variant_name: &str, true_label: usize, confidence_vector: Vec<f64>) -> Result<Self> {
        let r = Self {
            source_id: source_id.to_string(),
            variant_name: variant_name.to_string(),
            true_label,
            predicted_label: argmax(&confidence_vector),
            confidence_vector,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.confidence_vector;
        if v.is_empty() || v.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return invalid(alloc::format!("{}: confidences must lie in [0, 1]", self.source_id));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return invalid(alloc::format!("{}: confidences sum to {sum}", self.source_id));
        }
        if self.predicted_label != argmax(v) {
            return invalid(alloc::format!("{}: predicted label is not the arg-max", self.source_id));
        }
        if self.true_label >= v.len() {
            return invalid(alloc::format!("{}: label {} out of range", self.source_id, self.true_label));
        }
        Ok(())
    }

    pub fn confidence(&self) -> f64 {
        self.confidence_vector[self.predicted_label]
    }

    pub fn correct(&self) -> bool {
        self.predicted_label == self.true_label
    }
}

/// Percentage of records whose prediction matches the label.
pub fn top1_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return invalid("accuracy of an empty record set");
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Records of one model on one variant.
#[derive(Clone, Copy, Debug)]
pub struct RecordSet<'a> {
    pub model: &'a str,
    pub variant: &'a str,
    pub records: &'a [PredictionRecord],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub variant: String,
    /// One accuracy per model, in table column order.
    pub accuracies: Vec<f64>,
    pub average: f64,
    /// `average − baseline average`; zero for the baseline row.
    pub delta: f64,
    /// Per-model differences from the baseline.
    pub model_deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyTable {
    pub models: Vec<String>,
    pub baseline: AccuracyRow,
    pub rows: Vec<AccuracyRow>,
    /// Set when some variant covered a different source set than the baseline.
    pub coverage_warnings: Vec<String>,
}

fn row(variant: &str, accuracies: Vec<f64>, average: Option<f64>, base: Option<&AccuracyRow>) -> AccuracyRow {
    let average = average.unwrap_or_else(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64);
    let (delta, model_deltas) = match base {
        Some(b) => (average - b.average, accuracies.iter().zip(&b.accuracies).map(|(a, b)| a - b).collect()),
        None => (0.0, alloc::vec![0.0; accuracies.len()]),
    };
    AccuracyRow { variant: variant.to_string(), accuracies, average, delta, model_deltas }
}

/// Accuracy per (variant, model) with deltas against the baseline sets.
///
/// Each model needs one baseline set; a variant set is scored on the source ids
/// it shares with that model's baseline.
pub fn accuracy_drop_table(baseline: &[RecordSet], variants: &[RecordSet]) -> Result<AccuracyTable> {
    if baseline.is_empty() {
        return invalid("accuracy table needs at least one baseline set");
    }
    let models: Vec<String> = baseline.iter().map(|b| b.model.to_string()).collect();
    let mut base_ids: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut base_acc = Vec::new();
    for b in baseline {
        base_ids.insert(b.model, b.records.iter().map(|r| r.source_id.as_str()).collect());
        base_acc.push(top1_accuracy(b.records)?);
    }
    let base_row = row(baseline[0].variant, base_acc, None, None);
    let mut order: Vec<&str> = Vec::new();
    for v in variants {
        if !order.contains(&v.variant) {
            order.push(v.variant);
        }
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for name in order {
        let mut accs = Vec::new();
        for model in &models {
            let Some(set) = variants.iter().find(|v| v.variant == name && v.model == model) else {
                return invalid(alloc::format!("variant `{name}` has no records for model `{model}`"));
            };
            let ids = &base_ids[model.as_str()];
            let shared: Vec<PredictionRecord> =
                set.records.iter().filter(|r| ids.contains(r.source_id.as_str())).cloned().collect();
            if shared.is_empty() {
                return invalid(alloc::format!("variant `{name}` shares no sources with the baseline"));
            }
            if shared.len() != set.records.len() || shared.len() != ids.len() {
                warnings.push(alloc::format!(
                    "variant `{name}`, model `{model}`: scored on {} of {} baseline sources",
                    shared.len(),
                    ids.len()
                ));
            }
            accs.push(top1_accuracy(&shared)?);
        }
        rows.push(row(name, accs, None, Some(&base_row)));
    }
    Ok(AccuracyTable { models, baseline: base_row, rows, coverage_warnings: warnings })
}

/// Stored per-model accuracies of one table row, with an optional stored average.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracySummary {
    pub variant: String,
    pub accuracies: Vec<f64>,
    pub average: Option<f64>,
}

impl AccuracyTable {
    /// Builds a table from stored summaries; stored averages are kept verbatim.
    pub fn from_summaries(models: &[&str], baseline: &AccuracySummary, rows: &[AccuracySummary]) -> Result<Self> {
        let n = models.len();
        if n == 0 || baseline.accuracies.len() != n || rows.iter().any(|r| r.accuracies.len() != n) {
            return invalid("every summary row needs one accuracy per model");
        }
        let base = row(&baseline.variant, baseline.accuracies.clone(), baseline.average, None);
        let rows = rows
            .iter()
            .map(|r| row(&r.variant, r.accuracies.clone(), r.average, Some(&base)))
            .collect();
        Ok(Self { models: models.iter().map(|m| m.to_string()).collect(), baseline: base, rows, coverage_warnings: Vec::new() })
    }

    pub fn row(&self, variant: &str) -> Option<&AccuracyRow> {
        core::iter::once(&self.baseline).chain(&self.rows).find(|r| r.variant == variant)
    }

    /// Plain-text rendering with two decimals; drops follow the average.
    pub fn render(&self) -> String {
        let mut out = String::from("Variant");
        for m in &self.models {
            out.push_str(" | ");
            out.push_str(m);
        }
        out.push_str(" | Average\n");
        for (i, r) in core::iter::once(&self.baseline).chain(&self.rows).enumerate() {
            out.push_str(&r.variant);
            for a in &r.accuracies {
                out.push_str(&alloc::format!(" | {a:.2}"));
            }
            out.push_str(&alloc::format!(" | {:.2}", r.average));
            if i > 0 {
                let drop = alloc::format!("{:.2}", -r.delta);
                let drop = if drop == "-0.00" { "0.00" } else { drop.as_str() };
                out.push_str(&alloc::format!(" (drop {drop})"));
            }
            out.push('\n');
        }
        out
    }
}

/// Equal-width bin containing `value`; values on an edge go to the higher bin
/// and 1.0 goes to the top bin.
pub fn bin_index(value: f64, num_bins: usize) -> usize {
    let edge = |i: usize| i as f64 / num_bins as f64;
    let mut b = ((value * num_bins as f64) as usize).min(num_bins - 1);
    while b + 1 < num_bins && value >= edge(b + 1) {
        b += 1;
    }
    while b > 0 && value < edge(b) {
        b -= 1;
    }
    b
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBins {
    pub num_bins: usize,
    pub bins: Vec<ReliabilityBin>,
}

pub fn reliability_bins(records: &[PredictionRecord], num_bins: usize) -> Result<ReliabilityBins> {
    if num_bins == 0 {
        return invalid("need at least one bin");
    }
    if records.is_empty() {
        return invalid("calibration of an empty record set");
    }
    let mut sums = alloc::vec![(0usize, 0.0f64, 0.0f64); num_bins];
    for r in records {
        let c = r.confidence();
        let s = &mut sums[bin_index(c, num_bins)];
        s.0 += 1;
        s.1 += c;
        s.2 += r.correct() as u8 as f64;
    }
    let bins = sums
        .iter()
        .enumerate()
        .map(|(i, (n, c, a))| {
            let d = (*n).max(1) as f64;
            ReliabilityBin {
                lower: i as f64 / num_bins as f64,
                upper: (i + 1) as f64 / num_bins as f64,
                count: *n,
                mean_confidence: c / d,
                mean_accuracy: a / d,
            }
        })
        .collect();
    Ok(ReliabilityBins { num_bins, bins })
}

impl ReliabilityBins {
    pub fn ece(&self) -> f64 {
        let total: usize = self.bins.iter().map(|b| b.count).sum();
        self.bins
            .iter()
            .map(|b| b.count as f64 / total as f64 * (b.mean_confidence - b.mean_accuracy).abs())
            .sum()
    }
}

/// Expected calibration error over `num_bins` equal-width confidence bins.
pub fn ece(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    Ok(reliability_bins(records, num_bins)?.ece())
}

pub const IOU_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Percentage of values per interval of `edges`; edge values go to the higher
/// interval and the last edge to the top interval.
pub fn iou_histogram(values: &[f64], edges: &[f64]) -> Result<Vec<f64>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("histogram edges must be strictly increasing");
    }
    if values.is_empty() {
        return invalid("histogram of no values");
    }
    let k = edges.len() - 1;
    let mut counts = alloc::vec![0usize; k];
    for v in values {
        if *v < edges[0] || *v > edges[k] {
            return invalid(alloc::format!("value {v} outside histogram range"));
        }
        let b = (0..k).rev().find(|&i| *v >= edges[i]).unwrap_or(0);
        counts[b] += 1;
    }
    Ok(counts.iter().map(|c| 100.0 * *c as f64 / values.len() as f64).collect())
}

/// Mean and covariance of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major d×d covariance.
    pub covariance: Vec<f64>,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.len() != d * d {
            return invalid("covariance must be d×d for a d-dimensional mean");
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > 1e-9 {
                    return invalid("covariance is not symmetric");
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    /// Sample mean and unbiased covariance of at least two feature vectors.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("no samples");
        };
        let d = first.len();
        if samples.len() < 2 || samples.iter().any(|s| s.len() != d) {
            return invalid("need at least two samples of equal dimension");
        }
        let n = samples.len() as f64;
        let mut mean = alloc::vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / n;
            }
        }
        let mut cov = alloc::vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Result of [`frechet_distance_detailed`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetDistance {
    pub value: f64,
    /// Magnitude of the most negative eigenvalue clipped to zero (0 if none).
    pub max_clipped: f64,
}

/// Symmetric square root via eigendecomposition, clipping negative eigenvalues.
fn sqrtm_psd(m: DMatrix<f64>, clipped: &mut f64) -> DMatrix<f64> {
    let eig = m.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *clipped = clipped.max(-*v);
            *v = 0.0;
        }
        *v = libm::sqrt(*v);
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn frechet_distance_detailed(a: &GaussianSummary, b: &GaussianSummary) -> Result<FrechetDistance> {
    let d = a.dim();
    if b.dim() != d {
        return invalid(alloc::format!("dimension mismatch: {d} vs {}", b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.covariance);
    let sb = DMatrix::from_row_slice(d, d, &b.covariance);
    let mut clipped = 0.0;
    let root_a = sqrtm_psd(sa.clone(), &mut clipped);
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(inner, &mut clipped);
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(FrechetDistance { value: value.max(0.0), max_clipped: clipped })
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    Ok(frechet_distance_detailed(a, b)?.value)
}

/// Cosine similarity of two nonzero vectors.
pub fn caption_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("embeddings must be nonempty and of equal length");
    }
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return invalid("cosine similarity of a zero vector");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
