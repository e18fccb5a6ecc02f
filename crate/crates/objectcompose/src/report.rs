//! Metric summary, tables and plots for a set of predictions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use objectcompose_core::metrics::{
    accuracy_drop_table, frechet_distance_detailed, iou_histogram, reliability_bins, top1_accuracy, AccuracyTable,
    GaussianSummary, PredictionRecord, RecordSet, IOU_EDGES,
};

use crate::error::{write_atomic, Error, IoContext, Result};
use crate::evaluate::{PredictionLine, ORIGINAL};
use crate::generate::ADVERSARIAL;
use crate::manifest::Manifest;
use crate::plot::{accuracy_bars, reliability_diagram};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportConfig {
    pub num_bins: usize,
    pub iou_edges: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { num_bins: 10, iou_edges: IOU_EDGES.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub model: String,
    pub variant: String,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEntry {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub model: String,
    pub variant: String,
    pub ece: f64,
    pub bins: Vec<BinEntry>,
    pub plot: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetEntry {
    pub model: String,
    pub variant: String,
    pub distance: f64,
    pub max_clipped_eigenvalue: f64,
}

/// Lowest-accuracy prompt of a family for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstPrompt {
    pub model: String,
    pub family: String,
    pub variant: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub accuracies: Vec<f64>,
    pub average: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub models: Vec<String>,
    pub rows: Vec<TableRow>,
    pub coverage_warnings: Vec<String>,
}

impl From<&AccuracyTable> for TableSummary {
    fn from(t: &AccuracyTable) -> Self {
        let rows = std::iter::once(&t.baseline)
            .chain(&t.rows)
            .map(|r| TableRow { variant: r.variant.clone(), accuracies: r.accuracies.clone(), average: r.average, delta: r.delta })
            .collect();
        Self { models: t.models.clone(), rows, coverage_warnings: t.coverage_warnings.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub variant: String,
    pub count: usize,
    pub percentages: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub count: usize,
    /// Fraction of attacks whose final loss is at least the initial loss.
    pub non_decreasing_fraction: f64,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
    pub mean_best_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: Vec<AccuracyEntry>,
    pub table: Option<TableSummary>,
    /// Rows per prompt family with the worst prompt chosen per model.
    pub family_table: Option<TableSummary>,
    pub worst_prompts: Vec<WorstPrompt>,
    pub calibration: Vec<CalibrationEntry>,
    pub frechet: Vec<FrechetEntry>,
    pub iou_edges: Vec<f64>,
    pub iou: Vec<IouSummary>,
    pub attack: Option<AttackSummary>,
}

/// Prompt family of a variant name.
pub fn family(variant: &str) -> &str {
    if variant.starts_with("color_prompt") {
        "color"
    } else if variant.starts_with("texture_prompt") {
        "texture"
    } else {
        variant
    }
}

type Groups = BTreeMap<(String, String), Vec<PredictionLine>>;

fn records(lines: &[PredictionLine]) -> Result<Vec<PredictionRecord>> {
    lines.iter().map(PredictionLine::record).collect()
}

/// Preferred row order: original, class label, caption, colors, textures,
/// anything else, adversarial last.
fn variant_rank(v: &str) -> (u8, String) {
    let r = match family(v) {
        ORIGINAL => 0,
        "class_label" => 1,
        "caption" => 2,
        "color" => 3,
        "texture" => 4,
        ADVERSARIAL => 6,
        _ => 5,
    };
    (r, v.to_string())
}

fn sets_table(groups: &Groups, models: &[String], pick: &dyn Fn(&str, &str) -> Option<String>) -> Result<Option<AccuracyTable>> {
    let mut recs: BTreeMap<(String, String), Vec<PredictionRecord>> = BTreeMap::new();
    for ((m, v), lines) in groups {
        if let Some(row) = pick(m, v) {
            recs.entry((m.clone(), row)).or_default().extend(records(lines)?);
        }
    }
    let baseline: Vec<RecordSet> = models
        .iter()
        .filter_map(|m| recs.get(&(m.clone(), ORIGINAL.to_string())).map(|r| RecordSet { model: m, variant: ORIGINAL, records: r }))
        .collect();
    if baseline.len() != models.len() {
        return Ok(None);
    }
    let mut keys: Vec<&(String, String)> = recs.keys().filter(|(_, v)| v != ORIGINAL).collect();
    keys.sort_by_key(|(m, v)| (variant_rank(v), m.clone()));
    let variants: Vec<RecordSet> =
        keys.iter().map(|k| RecordSet { model: &k.0, variant: &k.1, records: &recs[*k] }).collect();
    Ok(Some(accuracy_drop_table(&baseline, &variants)?))
}

/// Computes every metric and writes `summary.json`, `table.txt`, the family
/// table and the plots into `out_dir`.
pub fn emit_report(
    manifest: Option<&Manifest>,
    predictions: &[PredictionLine],
    cfg: &ReportConfig,
    out_dir: &Path,
) -> Result<Summary> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut groups: Groups = BTreeMap::new();
    for p in predictions {
        groups.entry((p.model.clone(), p.variant_name.clone())).or_default().push(p.clone());
    }
    let models: Vec<String> = {
        let mut m: Vec<String> = groups.keys().map(|(m, _)| m.clone()).collect();
        m.dedup();
        m
    };

    let mut accuracy = Vec::new();
    let mut calibration = Vec::new();
    let mut frechet = Vec::new();
    let mut ordered: Vec<&(String, String)> = groups.keys().collect();
    ordered.sort_by_key(|(m, v)| (m.clone(), variant_rank(v)));
    for key in &ordered {
        let (model, variant) = key;
        let lines = &groups[*key];
        let recs = records(lines)?;
        accuracy.push(AccuracyEntry { model: model.clone(), variant: variant.clone(), count: recs.len(), accuracy: top1_accuracy(&recs)? });
        let bins = reliability_bins(&recs, cfg.num_bins)?;
        let plot = format!("reliability_{model}_{variant}.png");
        let img = reliability_diagram(&bins);
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        write_atomic(&out_dir.join(&plot), &png)?;
        calibration.push(CalibrationEntry {
            model: model.clone(),
            variant: variant.clone(),
            ece: bins.ece(),
            bins: bins
                .bins
                .iter()
                .map(|b| BinEntry { lower: b.lower, upper: b.upper, count: b.count, mean_confidence: b.mean_confidence, mean_accuracy: b.mean_accuracy })
                .collect(),
            plot,
        });
        if variant != ORIGINAL {
            let feats = |ls: &[PredictionLine]| -> Option<Vec<Vec<f64>>> { ls.iter().map(|l| l.features.clone()).collect() };
            let base = groups.get(&(model.clone(), ORIGINAL.to_string()));
            if let (Some(a), Some(b)) = (base.and_then(|b| feats(b)), feats(lines)) {
                if a.len() >= 2 && b.len() >= 2 {
                    let d = frechet_distance_detailed(&GaussianSummary::from_samples(&a)?, &GaussianSummary::from_samples(&b)?)?;
                    if d.max_clipped > 1e-6 {
                        log::warn!("{model}/{variant}: clipped a negative eigenvalue of magnitude {:.3e}", d.max_clipped);
                    }
                    frechet.push(FrechetEntry { model: model.clone(), variant: variant.clone(), distance: d.value, max_clipped_eigenvalue: d.max_clipped });
                }
            }
        }
    }

    let full = sets_table(&groups, &models, &|_, v| Some(v.to_string()))?;
    let mut worst_prompts = Vec::new();
    for m in &models {
        for fam in ["color", "texture"] {
            let worst = accuracy
                .iter()
                .filter(|a| &a.model == m && family(&a.variant) == fam)
                .min_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then_with(|| a.variant.cmp(&b.variant)));
            if let Some(w) = worst {
                worst_prompts.push(WorstPrompt { model: m.clone(), family: fam.into(), variant: w.variant.clone(), accuracy: w.accuracy });
            }
        }
    }
    let wp = worst_prompts.clone();
    let family_table = sets_table(&groups, &models, &move |m, v| {
        let fam = family(v);
        match fam {
            "color" | "texture" => wp.iter().find(|w| w.model == m && w.variant == v).map(|_| fam.to_string()),
            _ => Some(v.to_string()),
        }
    })?;

    let mut text = String::new();
    if let Some(t) = &full {
        text.push_str(&t.render());
        for w in &t.coverage_warnings {
            log::warn!("{w}");
        }
    }
    if let Some(t) = &family_table {
        text.push_str("\nWorst prompt per family\n");
        text.push_str(&t.render());
    }
    write_atomic(&out_dir.join("table.txt"), text.as_bytes())?;
    if let Some(t) = &family_table {
        let values: Vec<f64> = std::iter::once(&t.baseline).chain(&t.rows).map(|r| r.average).collect();
        let mut png = Vec::new();
        accuracy_bars(&values)
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        write_atomic(&out_dir.join("accuracy_bars.png"), &png)?;
    }

    let mut iou = Vec::new();
    let mut attack = None;
    if let Some(man) = manifest {
        let mut by_variant: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in man.variants() {
            if let Some(v) = r.mask_iou_after {
                by_variant.entry(r.variant_name.clone()).or_default().push(v);
            }
        }
        for (variant, vals) in by_variant {
            iou.push(IouSummary { count: vals.len(), percentages: iou_histogram(&vals, &cfg.iou_edges)?, variant });
        }
        let attacks: Vec<_> = man.variants().filter_map(|r| r.attack.as_ref()).collect();
        if !attacks.is_empty() {
            let n = attacks.len() as f64;
            attack = Some(AttackSummary {
                count: attacks.len(),
                non_decreasing_fraction: attacks.iter().filter(|a| a.final_loss >= a.initial_loss).count() as f64 / n,
                mean_initial_loss: attacks.iter().map(|a| a.initial_loss).sum::<f64>() / n,
                mean_final_loss: attacks.iter().map(|a| a.final_loss).sum::<f64>() / n,
                mean_best_loss: attacks.iter().map(|a| a.best_loss).sum::<f64>() / n,
            });
        }
    }

    let summary = Summary {
        accuracy,
        table: full.as_ref().map(Into::into),
        family_table: family_table.as_ref().map(Into::into),
        worst_prompts,
        calibration,
        frechet,
        iou_edges: cfg.iou_edges.clone(),
        iou,
        attack,
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(&out_dir.join("summary.json"), &json)?;
    Ok(summary)
}
