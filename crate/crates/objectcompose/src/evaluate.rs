//! Classifier predictions on originals and generated variants.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use objectcompose_core::metrics::PredictionRecord;
use objectcompose_core::toy::classifier::Classifier;

use crate::corpus::Corpus;
use crate::error::{Error, IoContext, Result};
use crate::imageio::load_png;
use crate::manifest::Manifest;

pub const ORIGINAL: &str = "original";
pub const TOY_MODEL: &str = "toy-classifier";

/// One prediction as stored in a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub model: String,
    pub source_id: String,
    pub variant_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub true_label: usize,
    pub predicted_label: usize,
    pub confidence_vector: Vec<f64>,
    /// Penultimate-layer features, used for Fréchet distances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl PredictionLine {
    pub fn record(&self) -> Result<PredictionRecord> {
        let r = PredictionRecord {
            source_id: self.source_id.clone(),
            variant_name: self.variant_name.clone(),
            true_label: self.true_label,
            predicted_label: self.predicted_label,
            confidence_vector: self.confidence_vector.clone(),
        };
        r.validate()?;
        Ok(r)
    }
}

fn predict(
    clf: &Classifier<f32>,
    image: &objectcompose_core::tensor::Tensor<f32>,
    source_id: &str,
    variant: &str,
    seed: Option<u64>,
    label: usize,
) -> Result<PredictionLine> {
    let c = clf.classify(image)?;
    Ok(PredictionLine {
        model: TOY_MODEL.to_string(),
        source_id: source_id.to_string(),
        variant_name: variant.to_string(),
        seed,
        true_label: label,
        predicted_label: c.predicted_label(),
        confidence_vector: c.confidences,
        features: Some(c.features),
    })
}

/// Classifies every corpus image (as variant `original`) and every generated
/// output of the manifest, reading images back from disk.
pub fn evaluate_manifest(clf: &Classifier<f32>, corpus: &Corpus, manifest: &Manifest) -> Result<Vec<PredictionLine>> {
    let mut out = Vec::new();
    for e in &corpus.entries {
        let img = corpus.image(e)?;
        out.push(predict(clf, &img.pixels, &e.id, ORIGINAL, None, e.class_label)?);
    }
    for r in manifest.variants() {
        let img = load_png(&manifest.root().join(&r.output_path))?;
        out.push(predict(clf, &img, &r.source_id, &r.variant_name, Some(r.seed), r.class_label)?);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        let s = serde_json::to_string(l).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(buf, "{s}").at(path)?;
    }
    crate::error::write_atomic(path, &buf)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let file = std::fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.at(path)?;
        if !line.trim().is_empty() {
            let p: PredictionLine = serde_json::from_str(&line).at(path)?;
            p.record()?;
            out.push(p);
        }
    }
    Ok(out)
}
