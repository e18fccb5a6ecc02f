use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use objectcompose::corpus::{write_toy_corpus, Corpus, MaskSource};
use objectcompose::evaluate::{evaluate_manifest, read_predictions, write_predictions};
use objectcompose::fixtures::published_accuracy_table;
use objectcompose::generate::{generate_variant_set, GenerateOptions, VariantSpec};
use objectcompose::manifest::{Manifest, MANIFEST_FILE};
use objectcompose::report::{emit_report, ReportConfig};
use objectcompose::weights::{load_weights, save_weights, Provenance};
use objectcompose_core::attack::{AttackConfig, AttackTarget, LossKind};
use objectcompose_core::pipeline::EngineConfig;
use objectcompose_core::prompt::{default_prompt_suite, parse_prompt_suite};
use objectcompose_core::schedule::{default_schedule, GuidanceConfig};
use objectcompose_core::toy::scenes::Split;
use objectcompose_core::toy::train::{train_toy_backends, TrainConfig, TrainEvent};
use objectcompose_core::toy::ToyConfig;

#[derive(Parser)]
#[command(name = "objectcompose", version, about = "Object-to-background compositional changes on a toy diffusion stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy autoencoder, text encoder, denoiser and classifier.
    TrainToy(TrainArgs),
    /// Write procedural scenes as a source corpus.
    MakeCorpus(CorpusArgs),
    /// Generate natural background variants from a prompt suite.
    Generate(GenerateArgs),
    /// Generate adversarial background variants.
    Attack(AttackArgs),
    /// Classify originals and generated variants.
    Evaluate(EvaluateArgs),
    /// Compute metrics, tables and plots from predictions.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().train_scenes)]
    train_scenes: usize,
    #[arg(long, default_value_t = TrainConfig::default().ae_epochs)]
    ae_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().clf_steps)]
    clf_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().den_steps)]
    den_steps: usize,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Comma-separated global seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 7.5)]
    lambda: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    #[arg(long, default_value_t = 6)]
    dilation_radius: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Segment with a colour threshold instead of the stored masks.
    #[arg(long)]
    threshold_masks: Option<f32>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Prompt suite file; the shipped suite when omitted.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Comma-separated subset of variant names.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    CrossEntropy,
    FeatureDistance,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Both,
    TextOnly,
    LatentOnly,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    start_step: usize,
    #[arg(long, value_enum, default_value_t = LossArg::CrossEntropy)]
    loss: LossArg,
    #[arg(long, value_enum, default_value_t = TargetArg::Both)]
    target: TargetArg,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding the manifest and generated images.
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Directory holding the manifest, for IoU and attack statistics.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Print the published reference accuracy table from the shipped fixture.
    #[arg(long)]
    published_table: bool,
}

fn engine_options(a: &EngineArgs) -> Result<GenerateOptions> {
    Ok(GenerateOptions {
        engine: EngineConfig {
            num_steps: a.steps,
            guide: GuidanceConfig::new(a.lambda, a.strength)?,
            dilation_radius: a.dilation_radius,
        },
        seeds: a.seeds.clone(),
        workers: a.workers,
        mask_source: a.threshold_masks.map_or(MaskSource::Oracle, MaskSource::Threshold),
        ..Default::default()
    })
}

fn run_generation(a: &EngineArgs, variants: &[VariantSpec]) -> Result<()> {
    let (backends, _) = load_weights(&a.weights)?;
    let corpus = Corpus::load(&a.corpus)?;
    let opts = engine_options(a)?;
    let t0 = Instant::now();
    let s = generate_variant_set(&backends, &corpus, variants, &opts, &a.output_dir)?;
    println!(
        "{} appended, {} regenerated, {} skipped, {} up to date in {:.1}s",
        s.appended,
        s.regenerated,
        s.skipped,
        s.up_to_date,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let tc = TrainConfig {
        seed: a.seed,
        train_scenes: a.train_scenes,
        ae_epochs: a.ae_epochs,
        clf_steps: a.clf_steps,
        den_steps: a.den_steps,
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut stage_start = Instant::now();
    let mut stages = Vec::new();
    let mut log = |e: TrainEvent| match e {
        TrainEvent::Progress { stage, step, total, loss } => {
            if step % 100 == 0 || step == total {
                log::info!("{stage} {step}/{total} loss {loss:.4}");
            }
        }
        TrainEvent::StageDone { stage } => {
            stages.push((stage.to_string(), stage_start.elapsed().as_secs_f64()));
            stage_start = Instant::now();
        }
    };
    let (backends, report) = train_toy_backends(ToyConfig::default(), &tc, &default_schedule(), &mut log)?;
    let provenance = Provenance::new(&tc, &report, stages);
    std::fs::create_dir_all(&a.out_dir)?;
    save_weights(&a.out_dir.join("weights.ocw"), &backends, Some(provenance.clone()))?;
    std::fs::write(a.out_dir.join("train_report.json"), serde_json::to_vec_pretty(&provenance)?)?;
    println!("{}", serde_json::to_string_pretty(&provenance)?);
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::TrainToy(a) => train(&a)?,
        Command::MakeCorpus(a) => {
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let c = write_toy_corpus(&a.out_dir, a.count, a.seed, split)?;
            println!("wrote {} scenes to {}", c.entries.len(), a.out_dir.display());
        }
        Command::Generate(a) => {
            let suite = match &a.prompts {
                Some(p) => parse_prompt_suite(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
                None => default_prompt_suite(),
            };
            let chosen: Vec<VariantSpec> = suite
                .into_iter()
                .filter(|t| a.variants.is_empty() || a.variants.contains(&t.variant_name))
                .map(VariantSpec::Prompt)
                .collect();
            if chosen.is_empty() {
                bail!("no prompt variants selected");
            }
            run_generation(&a.engine, &chosen)?;
        }
        Command::Attack(a) => {
            let cfg = AttackConfig {
                iterations: a.iterations,
                learning_rate: a.learning_rate,
                start_step: a.start_step,
                loss_kind: match a.loss {
                    LossArg::CrossEntropy => LossKind::CrossEntropy,
                    LossArg::FeatureDistance => LossKind::FeatureDistance,
                },
                target: match a.target {
                    TargetArg::Both => AttackTarget::Both,
                    TargetArg::TextOnly => AttackTarget::TextOnly,
                    TargetArg::LatentOnly => AttackTarget::LatentOnly,
                },
                ..Default::default()
            };
            run_generation(&a.engine, &[VariantSpec::Adversarial(cfg)])?;
        }
        Command::Evaluate(a) => {
            let (backends, _) = load_weights(&a.weights)?;
            let corpus = Corpus::load(&a.corpus)?;
            let manifest = Manifest::load(&a.output_dir.join(MANIFEST_FILE))?;
            let preds = evaluate_manifest(&backends.classifier, &corpus, &manifest)?;
            write_predictions(&a.predictions, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), a.predictions.display());
        }
        Command::Report(a) => {
            if a.published_table {
                print!("{}", published_accuracy_table()?.render());
            }
            if let Some(p) = &a.predictions {
                let Some(dir) = &a.report_dir else { bail!("--report-dir is required with --predictions") };
                let preds = read_predictions(p)?;
                let manifest = a.output_dir.as_ref().map(|d| Manifest::load(&d.join(MANIFEST_FILE))).transpose()?;
                let cfg = ReportConfig { num_bins: a.bins, ..Default::default() };
                emit_report(manifest.as_ref(), &preds, &cfg, dir)?;
                print!("{}", std::fs::read_to_string(dir.join("table.txt"))?);
            } else if !a.published_table {
                bail!("nothing to report: pass --predictions or --published-table");
            }
        }
    }
    Ok(())
}
