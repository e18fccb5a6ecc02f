//! Batch generation of background variants over a corpus.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use crossbeam::channel;

use objectcompose_core::attack::{adversarial_background, AttackConfig};
use objectcompose_core::conditioning::{build_conditioning, MaskProvider, CaptionProvider, SourceImage, ThresholdMaskProvider};
use objectcompose_core::mask::iou;
use objectcompose_core::pipeline::{Engine, EngineConfig};
use objectcompose_core::prompt::PromptTemplate;
use objectcompose_core::seed::item_seed;
use objectcompose_core::toy::ToyBackends;
use objectcompose_core::CoreError;

use crate::corpus::{Corpus, CorpusEntry, MaskSource};
use crate::error::{Error, Result};
use crate::imageio::{encode_png, quantized};
use crate::manifest::{AttackFields, Manifest, ManifestLine, ManifestWriter, SkipRecord, VariantRecord, MANIFEST_FILE};

pub const ADVERSARIAL: &str = "adversarial";

#[derive(Clone, Debug, PartialEq)]
pub enum VariantSpec {
    Prompt(PromptTemplate),
    Adversarial(AttackConfig),
}

impl VariantSpec {
    pub fn name(&self) -> &str {
        match self {
            VariantSpec::Prompt(t) => &t.variant_name,
            VariantSpec::Adversarial(_) => ADVERSARIAL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub engine: EngineConfig,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub mask_source: MaskSource,
    /// Threshold of the segmenter used for `mask_iou_after`; `None` skips it.
    pub resegment_threshold: Option<f32>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            seeds: vec![0],
            workers: 1,
            mask_source: MaskSource::Oracle,
            resegment_threshold: Some(0.25),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenerateSummary {
    /// Jobs whose record and output already existed.
    pub up_to_date: usize,
    /// New variant records appended.
    pub appended: usize,
    /// Missing outputs of existing records written again.
    pub regenerated: usize,
    /// New skip records appended.
    pub skipped: usize,
}

struct Job<'a> {
    entry: &'a CorpusEntry,
    image: &'a SourceImage,
    variant: &'a VariantSpec,
    global_seed: u64,
    seed: u64,
    output_path: String,
    /// Existing record whose output is missing.
    existing: Option<&'a VariantRecord>,
}

enum Outcome {
    Variant { record: VariantRecord, append: bool },
    Skip(SkipRecord),
}

struct Context<'a> {
    engine: Engine<'a, f32>,
    masks: Box<dyn MaskProvider>,
    captions: Box<dyn CaptionProvider>,
    opts: &'a GenerateOptions,
    out_dir: &'a Path,
}

pub fn output_path(variant: &str, source_id: &str, global_seed: u64) -> String {
    format!("{variant}/{source_id}_{global_seed}.png")
}

fn check_same_parameters(old: &VariantRecord, new: &VariantRecord) -> Result<()> {
    let same = old.prompt_text == new.prompt_text
        && old.guidance_lambda == new.guidance_lambda
        && old.num_steps == new.num_steps
        && old.strength == new.strength
        && old.dilation_radius == new.dilation_radius;
    if same {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "record ({}, {}, {}) was generated with different parameters; use a new output directory",
            old.source_id, old.variant_name, old.seed
        )))
    }
}

impl Context<'_> {
    fn run(&self, job: &Job) -> Result<Outcome> {
        let e = job.entry;
        let cfg = &self.engine.config;
        let skip = |reason: String| {
            Outcome::Skip(SkipRecord {
                source_id: e.id.clone(),
                variant_name: job.variant.name().to_string(),
                global_seed: job.global_seed,
                seed: job.seed,
                reason,
            })
        };
        let bundle = match build_conditioning(job.image, e.class_label, &e.class_name, &*self.masks, &*self.captions) {
            Ok(b) => b,
            Err(CoreError::UnsupportedImage(reason)) => return Ok(skip(reason)),
            Err(err) => return Err(err.into()),
        };
        let pixels = &job.image.pixels;
        let (bundle, image, attack) = match job.variant {
            VariantSpec::Prompt(t) => {
                let bundle = bundle.with_template(t)?;
                let image = self.engine.generate(pixels, &bundle, job.seed)?.image;
                (bundle, image, None)
            }
            VariantSpec::Adversarial(ac) => {
                let r = adversarial_background(&self.engine, pixels, &bundle, ac, job.seed)?;
                let fields = AttackFields {
                    iterations: ac.iterations,
                    learning_rate: ac.learning_rate,
                    start_step: ac.start_step,
                    loss_kind: format!("{:?}", ac.loss_kind),
                    target: format!("{:?}", ac.target),
                    beta1: ac.beta1,
                    beta2: ac.beta2,
                    weight_decay: ac.weight_decay,
                    initial_loss: r.loss_trace[0],
                    final_loss: r.final_loss(),
                    best_loss: r.best_loss(),
                    best_iteration: r.best_iteration,
                    loss_trace: r.loss_trace.clone(),
                    effective_perturbation_norm: r.effective_perturbation_norm,
                };
                (bundle, r.adversarial_image, Some(fields))
            }
        };
        let mask_iou_after = match self.opts.resegment_threshold {
            Some(t) => {
                let stored = SourceImage::new(&e.id, quantized(&image))?;
                let seg = ThresholdMaskProvider::new(t).mask(&stored, &e.class_name)?;
                Some(iou(&seg, &bundle.mask)?)
            }
            None => None,
        };
        let record = VariantRecord {
            source_id: e.id.clone(),
            class_label: e.class_label,
            class_name: e.class_name.clone(),
            variant_name: job.variant.name().to_string(),
            prompt_text: bundle.prompt_text.clone(),
            global_seed: job.global_seed,
            seed: job.seed,
            guidance_lambda: cfg.guide.lambda,
            num_steps: cfg.num_steps,
            strength: cfg.guide.strength,
            dilation_radius: cfg.dilation_radius,
            output_path: job.output_path.clone(),
            attack,
            mask_iou_after,
        };
        if let Some(old) = job.existing {
            check_same_parameters(old, &record)?;
        }
        crate::error::write_atomic(&self.out_dir.join(&job.output_path), &encode_png(&image)?)?;
        Ok(Outcome::Variant { append: job.existing.is_none(), record: job.existing.cloned().unwrap_or(record) })
    }
}

/// Generates every (source, variant, seed) of the corpus into `out_dir`.
///
/// Records already in the manifest with their output on disk are left alone;
/// missing outputs of existing records are regenerated without a new record.
/// Results are appended in job order by a single writer.
pub fn generate_variant_set(
    backends: &ToyBackends<f32>,
    corpus: &Corpus,
    variants: &[VariantSpec],
    opts: &GenerateOptions,
    out_dir: &Path,
) -> Result<GenerateSummary> {
    let manifest = Manifest::open_or_create(&out_dir.join(MANIFEST_FILE))?;
    let index = manifest.index();
    let images = corpus.images()?;
    let mut summary = GenerateSummary::default();
    let mut jobs = Vec::new();
    for (entry, image) in corpus.entries.iter().zip(&images) {
        for variant in variants {
            for &global_seed in &opts.seeds {
                let seed = item_seed(global_seed, &entry.id, variant.name());
                let key = (entry.id.clone(), variant.name().to_string(), seed);
                let output_path = output_path(variant.name(), &entry.id, global_seed);
                let existing = match index.get(&key) {
                    Some(ManifestLine::Skip(_)) => {
                        summary.up_to_date += 1;
                        continue;
                    }
                    Some(ManifestLine::Variant(r)) => {
                        if out_dir.join(&r.output_path).exists() {
                            summary.up_to_date += 1;
                            continue;
                        }
                        Some(r)
                    }
                    _ => None,
                };
                jobs.push(Job { entry, image, variant, global_seed, seed, output_path, existing });
            }
        }
    }
    if jobs.is_empty() {
        return Ok(summary);
    }
    let ctx = Context {
        engine: Engine::new(backends, opts.engine)?,
        masks: corpus.mask_provider(opts.mask_source)?,
        captions: corpus.caption_provider(),
        opts,
        out_dir,
    };
    let mut writer = ManifestWriter::new(&manifest)?;
    let stop = AtomicBool::new(false);
    let total = jobs.len();
    let (job_tx, job_rx) = channel::unbounded::<usize>();
    let (res_tx, res_rx) = channel::unbounded::<(usize, Result<Outcome>)>();
    for i in 0..total {
        job_tx.send(i).expect("receiver alive");
    }
    drop(job_tx);
    let workers = opts.workers.clamp(1, total);
    let mut first_error = None;
    crossbeam::scope(|s| {
        for _ in 0..workers {
            let (job_rx, res_tx, ctx, jobs, stop) = (job_rx.clone(), res_tx.clone(), &ctx, &jobs, &stop);
            s.spawn(move |_| {
                for i in job_rx.iter() {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    if res_tx.send((i, ctx.run(&jobs[i]))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(res_tx);
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, res) in res_rx.iter() {
            pending.insert(i, res);
            while let Some(res) = pending.remove(&next) {
                next += 1;
                if first_error.is_some() {
                    continue;
                }
                let step = res.and_then(|o| match o {
                    Outcome::Variant { record, append } => {
                        if append {
                            summary.appended += 1;
                            writer.append(&ManifestLine::Variant(record))
                        } else {
                            summary.regenerated += 1;
                            Ok(())
                        }
                    }
                    Outcome::Skip(r) => {
                        summary.skipped += 1;
                        log::warn!("skipping {} ({}): {}", r.source_id, r.variant_name, r.reason);
                        writer.append(&ManifestLine::Skip(r))
                    }
                });
                if let Err(e) = step {
                    stop.store(true, Ordering::Relaxed);
                    first_error = Some(e);
                }
                if next % 50 == 0 {
                    log::info!("generated {next}/{total}");
                }
            }
        }
    })
    .map_err(|_| Error::Invalid("generation worker panicked".into()))?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
