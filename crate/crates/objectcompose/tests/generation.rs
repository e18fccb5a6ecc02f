use std::collections::BTreeMap;
use std::path::Path;

use objectcompose::corpus::{write_toy_corpus, MaskSource};
use objectcompose::evaluate::{evaluate_manifest, read_predictions, write_predictions, ORIGINAL};
use objectcompose::generate::{generate_variant_set, output_path, GenerateOptions, VariantSpec, ADVERSARIAL};
use objectcompose::imageio::{load_mask_png, load_png, save_mask_png};
use objectcompose::manifest::{Manifest, MANIFEST_FILE};
use objectcompose::report::{emit_report, ReportConfig};
use objectcompose_core::attack::AttackConfig;
use objectcompose_core::mask::ObjectMask;
use objectcompose_core::pipeline::EngineConfig;
use objectcompose_core::prompt::default_prompt_suite;
use objectcompose_core::schedule::GuidanceConfig;
use objectcompose_core::toy::scenes::Split;
use objectcompose_core::toy::{ToyBackends, ToyConfig};

fn backends() -> ToyBackends<f32> {
    ToyBackends::init(ToyConfig::default(), 21).unwrap()
}

fn variants() -> Vec<VariantSpec> {
    let suite = default_prompt_suite();
    let mut v: Vec<VariantSpec> = ["caption", "color_prompt_1", "texture_prompt_2"]
        .iter()
        .map(|n| VariantSpec::Prompt(suite.iter().find(|t| t.variant_name == *n).unwrap().clone()))
        .collect();
    v.push(VariantSpec::Adversarial(AttackConfig { iterations: 2, start_step: 2, ..Default::default() }));
    v
}

fn options(workers: usize) -> GenerateOptions {
    GenerateOptions {
        engine: EngineConfig { num_steps: 4, ..Default::default() },
        seeds: vec![0, 7],
        workers,
        ..Default::default()
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_deterministic_resumable_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(&tmp.path().join("corpus"), 4, 3, Split::Test).unwrap();
    // One source without an object is skipped, not failed.
    let bad = &corpus.entries[3];
    save_mask_png(&corpus.root.join(&bad.mask), &ObjectMask::from_fn(64, 64, |_, _| false).unwrap()).unwrap();
    let b = backends();
    let v = variants();
    let a_dir = tmp.path().join("a");

    let s = generate_variant_set(&b, &corpus, &v, &options(1), &a_dir).unwrap();
    assert_eq!((s.appended, s.skipped, s.regenerated, s.up_to_date), (3 * 4 * 2, 4 * 2, 0, 0));
    let m = Manifest::load(&a_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.variants().count() + m.skips().count(), 4 * 4 * 2);
    assert!(m.skips().all(|r| r.source_id == bad.id));
    for r in m.variants() {
        assert!(a_dir.join(&r.output_path).exists());
        assert_eq!(r.output_path, output_path(&r.variant_name, &r.source_id, r.global_seed));
        assert!(r.mask_iou_after.is_some_and(|v| (0.0..=1.0).contains(&v)));
        assert_eq!(r.attack.is_some(), r.variant_name == ADVERSARIAL);
    }
    let first = files(&a_dir);

    let s = generate_variant_set(&b, &corpus, &v, &options(1), &a_dir).unwrap();
    assert_eq!((s.appended, s.skipped, s.regenerated, s.up_to_date), (0, 0, 0, 4 * 4 * 2));
    assert_eq!(files(&a_dir), first);

    // Delete one output per variant and regenerate them.
    for r in m.variants().filter(|r| r.global_seed == 7 && r.source_id == corpus.entries[1].id) {
        std::fs::remove_file(a_dir.join(&r.output_path)).unwrap();
    }
    let s = generate_variant_set(&b, &corpus, &v, &options(1), &a_dir).unwrap();
    assert_eq!((s.appended, s.regenerated), (0, 4));
    assert_eq!(files(&a_dir), first);

    // Worker count does not change any byte.
    let b_dir = tmp.path().join("b");
    generate_variant_set(&b, &corpus, &v, &options(3), &b_dir).unwrap();
    assert_eq!(files(&b_dir), first);
}

#[test]
fn changed_parameters_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(&tmp.path().join("corpus"), 1, 5, Split::Test).unwrap();
    let b = backends();
    let v = &variants()[..1];
    let out = tmp.path().join("out");
    let mut opts = options(1);
    opts.seeds = vec![0];
    generate_variant_set(&b, &corpus, v, &opts, &out).unwrap();
    let m = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    std::fs::remove_file(out.join(&m.variants().next().unwrap().output_path)).unwrap();
    opts.engine.guide = GuidanceConfig::new(3.0, 1.0).unwrap();
    assert!(generate_variant_set(&b, &corpus, v, &opts, &out).is_err());
}

#[test]
fn object_pixels_survive_on_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(&tmp.path().join("corpus"), 3, 9, Split::Test).unwrap();
    let out = tmp.path().join("out");
    let mut opts = options(1);
    opts.seeds = vec![1];
    opts.mask_source = MaskSource::Threshold(0.25);
    generate_variant_set(&backends(), &corpus, &variants(), &opts, &out).unwrap();
    let m = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    let by_id: BTreeMap<_, _> = corpus.entries.iter().map(|e| (e.id.clone(), e)).collect();
    let masks = corpus.mask_provider(MaskSource::Threshold(0.25)).unwrap();
    let mut checked = 0;
    for r in m.variants() {
        let e = by_id[&r.source_id];
        let src = load_png(&corpus.root.join(&e.image)).unwrap();
        let gen = load_png(&out.join(&r.output_path)).unwrap();
        let mask = masks.mask(&corpus.image(e).unwrap(), &e.class_name).unwrap();
        let hw = 64 * 64;
        for c in 0..3 {
            for i in (0..hw).filter(|&i| mask.get(i / 64, i % 64)) {
                assert_eq!(src.data()[c * hw + i].to_bits(), gen.data()[c * hw + i].to_bits());
            }
        }
        checked += 1;
    }
    assert_eq!(checked, 3 * 4);
    // Stored ground-truth masks agree with what the corpus wrote.
    let gt = load_mask_png(&corpus.root.join(&corpus.entries[0].mask)).unwrap();
    assert!(gt.count() > 0);
}

#[test]
fn evaluation_and_report_are_complete_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(&tmp.path().join("corpus"), 3, 2, Split::Test).unwrap();
    let b = backends();
    let out = tmp.path().join("out");
    generate_variant_set(&b, &corpus, &variants(), &options(1), &out).unwrap();
    let m = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    let preds = evaluate_manifest(&b.classifier, &corpus, &m).unwrap();
    assert_eq!(preds.len(), 3 + m.variants().count());
    assert_eq!(preds.iter().filter(|p| p.variant_name == ORIGINAL).count(), 3);
    let pp = tmp.path().join("preds.jsonl");
    write_predictions(&pp, &preds).unwrap();
    assert_eq!(read_predictions(&pp).unwrap(), preds);

    let cfg = ReportConfig::default();
    let s1 = emit_report(Some(&m), &preds, &cfg, &tmp.path().join("r1")).unwrap();
    let s2 = emit_report(Some(&m), &preds, &cfg, &tmp.path().join("r2")).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(files(&tmp.path().join("r1")), files(&tmp.path().join("r2")));
    let table = s1.table.unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, [ORIGINAL, "caption", "color_prompt_1", "texture_prompt_2", ADVERSARIAL]);
    let fam: Vec<&str> = s1.family_table.as_ref().unwrap().rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(fam, [ORIGINAL, "caption", "color", "texture", ADVERSARIAL]);
    assert_eq!(s1.calibration.len(), 5);
    assert_eq!(s1.iou.len(), 4);
    for i in &s1.iou {
        assert!((i.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }
    assert_eq!(s1.attack.as_ref().unwrap().count, 6);
    for c in &s1.calibration {
        assert!(tmp.path().join("r1").join(&c.plot).exists());
    }
    for f in ["summary.json", "table.txt", "accuracy_bars.png"] {
        assert!(tmp.path().join("r1").join(f).exists(), "{f}");
    }
}
