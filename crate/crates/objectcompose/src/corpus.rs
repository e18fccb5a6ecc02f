//! Source corpora: a directory of PNG images and masks indexed by `corpus.jsonl`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use objectcompose_core::conditioning::{
    CaptionProvider, MaskProvider, OracleMaskProvider, SourceImage, TemplateCaptionProvider, ThresholdMaskProvider,
};
use objectcompose_core::toy::scenes::{generate_shapes_dataset, Split};

use crate::error::{Error, IoContext, Result};
use crate::imageio::{load_mask_png, load_png, save_mask_png, save_png};

pub const INDEX_FILE: &str = "corpus.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub class_label: usize,
    pub class_name: String,
    /// Image path relative to the corpus root.
    pub image: String,
    /// Ground-truth mask path relative to the corpus root.
    pub mask: String,
    pub background_descriptor: String,
    pub background_color: [f32; 3],
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

/// Which segmenter supplies object masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Oracle,
    Threshold(f32),
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let file = std::fs::File::open(&path).at(&path)?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.at(&path)?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line).at(&path)?);
            }
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn image(&self, e: &CorpusEntry) -> Result<SourceImage> {
        Ok(SourceImage::new(&e.id, load_png(&self.root.join(&e.image))?)?)
    }

    pub fn images(&self) -> Result<Vec<SourceImage>> {
        self.entries.iter().map(|e| self.image(e)).collect()
    }

    pub fn mask_provider(&self, source: MaskSource) -> Result<Box<dyn MaskProvider>> {
        Ok(match source {
            MaskSource::Oracle => {
                let mut p = OracleMaskProvider::new();
                for e in &self.entries {
                    p.insert(&e.id, load_mask_png(&self.root.join(&e.mask))?);
                }
                Box::new(p)
            }
            MaskSource::Threshold(t) => {
                let mut p = ThresholdMaskProvider::new(t);
                for e in &self.entries {
                    p.insert(&e.id, e.background_color);
                }
                Box::new(p)
            }
        })
    }

    pub fn caption_provider(&self) -> Box<dyn CaptionProvider> {
        let mut p = TemplateCaptionProvider::new();
        for e in &self.entries {
            p.insert(&e.id, &e.class_name, &e.background_descriptor);
        }
        Box::new(p)
    }
}

/// Writes `n` procedural scenes as a corpus under `root`.
pub fn write_toy_corpus(root: &Path, n: usize, seed: u64, split: Split) -> Result<Corpus> {
    let scenes = generate_shapes_dataset(n, seed, split);
    let mut entries = Vec::with_capacity(n);
    for s in &scenes {
        let e = CorpusEntry {
            id: s.id.clone(),
            class_label: s.class_label,
            class_name: s.class_name().to_string(),
            image: format!("images/{}.png", s.id),
            mask: format!("masks/{}.png", s.id),
            background_descriptor: s.background_descriptor.clone(),
            background_color: s.background_color,
            caption: s.caption.clone(),
        };
        save_png(&root.join(&e.image), &s.image)?;
        save_mask_png(&root.join(&e.mask), &s.ground_truth_mask)?;
        entries.push(e);
    }
    let path = root.join(INDEX_FILE);
    let mut f = std::fs::File::create(&path).at(&path)?;
    for e in &entries {
        let line = serde_json::to_string(e).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(f, "{line}").at(&path)?;
    }
    Ok(Corpus { root: root.to_path_buf(), entries })
}

