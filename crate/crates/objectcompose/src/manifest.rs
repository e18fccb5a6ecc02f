//! JSON-lines variant manifest: a header line, then one record per generated
//! or skipped (source, variant, seed).

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub generator: String,
}

impl Default for ManifestHeader {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, generator: format!("objectcompose {}", env!("CARGO_PKG_VERSION")) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackFields {
    pub iterations: usize,
    pub learning_rate: f64,
    pub start_step: usize,
    pub loss_kind: String,
    pub target: String,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub loss_trace: Vec<f64>,
    pub effective_perturbation_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub source_id: String,
    pub class_label: usize,
    pub class_name: String,
    pub variant_name: String,
    pub prompt_text: String,
    pub global_seed: u64,
    /// Per-item seed derived from the global seed, source and variant.
    pub seed: u64,
    pub guidance_lambda: f64,
    pub num_steps: usize,
    pub strength: f64,
    pub dilation_radius: usize,
    /// Relative to the manifest directory.
    pub output_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackFields>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_iou_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub source_id: String,
    pub variant_name: String,
    pub global_seed: u64,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record_type", rename_all = "snake_case")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Variant(VariantRecord),
    Skip(SkipRecord),
}

/// Identity of a record within a manifest.
pub type RecordKey = (String, String, u64);

impl ManifestLine {
    pub fn key(&self) -> Option<RecordKey> {
        match self {
            ManifestLine::Header(_) => None,
            ManifestLine::Variant(r) => Some((r.source_id.clone(), r.variant_name.clone(), r.seed)),
            ManifestLine::Skip(r) => Some((r.source_id.clone(), r.variant_name.clone(), r.seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub header: ManifestHeader,
    pub lines: Vec<ManifestLine>,
}

impl Manifest {
    /// Directory that record output paths are relative to.
    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).at(path)?;
        let mut header = None;
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).at(path)? {
                ManifestLine::Header(h) if i == 0 => header = Some(h),
                ManifestLine::Header(_) => {
                    return Err(Error::Format { path: path.into(), message: "header must be the first line".into() })
                }
                l => lines.push(l),
            }
        }
        let header = header.ok_or_else(|| Error::Format { path: path.into(), message: "missing header".into() })?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.into(),
                message: format!("schema version {} is not {SCHEMA_VERSION}", header.schema_version),
            });
        }
        let m = Self { path: path.to_path_buf(), header, lines };
        m.check_unique()?;
        Ok(m)
    }

    /// Loads `path`, creating it with a fresh header if absent.
    pub fn open_or_create(path: &Path) -> Result<Self> {
        if path.exists() {
            return Self::load(path);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let header = ManifestHeader::default();
        let mut f = std::fs::File::create(path).at(path)?;
        writeln!(f, "{}", to_line(&ManifestLine::Header(header.clone()))?).at(path)?;
        Ok(Self { path: path.to_path_buf(), header, lines: Vec::new() })
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for l in &self.lines {
            if let Some(k) = l.key() {
                if seen.insert(k.clone(), ()).is_some() {
                    return Err(Error::Format { path: self.path.clone(), message: format!("duplicate record {k:?}") });
                }
            }
        }
        Ok(())
    }

    pub fn index(&self) -> BTreeMap<RecordKey, &ManifestLine> {
        self.lines.iter().filter_map(|l| l.key().map(|k| (k, l))).collect()
    }

    pub fn variants(&self) -> impl Iterator<Item = &VariantRecord> {
        self.lines.iter().filter_map(|l| match l {
            ManifestLine::Variant(r) => Some(r),
            _ => None,
        })
    }

    pub fn skips(&self) -> impl Iterator<Item = &SkipRecord> {
        self.lines.iter().filter_map(|l| match l {
            ManifestLine::Skip(r) => Some(r),
            _ => None,
        })
    }
}

fn to_line(l: &ManifestLine) -> Result<String> {
    serde_json::to_string(l).map_err(|e| Error::Invalid(e.to_string()))
}

/// The only writer of a manifest file; appends and flushes line by line.
pub struct ManifestWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl ManifestWriter {
    pub fn new(manifest: &Manifest) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(&manifest.path).at(&manifest.path)?;
        Ok(Self { path: manifest.path.clone(), file })
    }

    pub fn append(&mut self, line: &ManifestLine) -> Result<()> {
        writeln!(self.file, "{}", to_line(line)?).at(&self.path)?;
        self.file.flush().at(&self.path)
    }
}
