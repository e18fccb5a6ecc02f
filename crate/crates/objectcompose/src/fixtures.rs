//! Published reference values, shipped as data files for format checks.

use serde::Deserialize;

use objectcompose_core::metrics::{AccuracySummary, AccuracyTable};

use crate::error::{Error, Result};

pub const PUBLISHED_ACCURACY: &str = include_str!("../data/published_accuracy.json");
pub const PUBLISHED_CAPTION_SCORES: &str = include_str!("../data/published_caption_scores.json");

#[derive(Clone, Debug, Deserialize)]
struct RowFixture {
    variant: String,
    accuracies: Vec<f64>,
    average: f64,
}

#[derive(Clone, Debug, Deserialize)]
struct TableFixture {
    models: Vec<String>,
    baseline: RowFixture,
    rows: Vec<RowFixture>,
}

fn summary(r: &RowFixture) -> AccuracySummary {
    AccuracySummary { variant: r.variant.clone(), accuracies: r.accuracies.clone(), average: Some(r.average) }
}

/// Published accuracy table for background changes, with its stored averages.
pub fn published_accuracy_table() -> Result<AccuracyTable> {
    let f: TableFixture = serde_json::from_str(PUBLISHED_ACCURACY).map_err(|e| Error::Invalid(e.to_string()))?;
    let models: Vec<&str> = f.models.iter().map(String::as_str).collect();
    let rows: Vec<AccuracySummary> = f.rows.iter().map(summary).collect();
    Ok(AccuracyTable::from_summaries(&models, &summary(&f.baseline), &rows)?)
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct CaptionScore {
    pub dataset: String,
    pub variant: String,
    pub clip_score: f64,
}

/// Reference caption similarities; not an acceptance target.
pub fn published_caption_scores() -> Result<Vec<CaptionScore>> {
    #[derive(Deserialize)]
    struct F {
        scores: Vec<CaptionScore>,
    }
    let f: F = serde_json::from_str(PUBLISHED_CAPTION_SCORES).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(f.scores)
}
