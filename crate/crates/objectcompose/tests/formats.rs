use objectcompose::fixtures::{published_caption_scores, published_accuracy_table};
use objectcompose::imageio::{load_mask_png, load_png, quantized, save_mask_png, save_png};
use objectcompose::manifest::{Manifest, MANIFEST_FILE};
use objectcompose::plot::{accuracy_bars, bar_height, measured_bar_heights, reliability_diagram};
use objectcompose::weights::{decode_weights, encode_weights, load_weights, save_weights};
use objectcompose_core::mask::ObjectMask;
use objectcompose_core::metrics::{reliability_bins, PredictionRecord};
use objectcompose_core::sampler::seeded_normal;
use objectcompose_core::toy::{ToyBackends, ToyConfig};
use proptest::prelude::*;
use std::path::Path;

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let b = ToyBackends::<f32>::init(ToyConfig::default(), 4).unwrap();
    let path = dir.path().join("w.ocw");
    save_weights(&path, &b, None).unwrap();
    let (back, header) = load_weights(&path).unwrap();
    assert_eq!(header.seed, 4);
    for ((na, ta), (nb, tb)) in b.named_tensors().iter().zip(back.named_tensors()) {
        assert_eq!(na, &nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &objectcompose_core::tensor::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(&tb), "{na}");
    }
    assert_eq!(encode_weights(&back, None).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn corrupt_weights_are_rejected() {
    let b = ToyBackends::<f32>::init(ToyConfig::default(), 0).unwrap();
    let bytes = encode_weights(&b, None).unwrap();
    let p = Path::new("w.ocw");
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(decode_weights(p, &flipped).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_weights(p, &magic).is_err());
    assert!(decode_weights(p, &bytes[..bytes.len() - 4]).is_err());
}

#[test]
fn png_round_trip_is_lossless_for_quantized_images() {
    let dir = tempfile::tempdir().unwrap();
    let img = quantized(&seeded_normal::<f32>(&[3, 16, 12], 1).map(|v| (v * 0.3 + 0.5).clamp(0.0, 1.0)));
    let path = dir.path().join("a/b.png");
    save_png(&path, &img).unwrap();
    assert_eq!(load_png(&path).unwrap(), img);
    let mask = ObjectMask::from_fn(16, 12, |y, x| (x * y) % 3 == 0).unwrap();
    save_mask_png(&dir.path().join("m.png"), &mask).unwrap();
    assert_eq!(load_mask_png(&dir.path().join("m.png")).unwrap(), mask);
}

#[test]
fn manifest_rejects_bad_headers_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let m = Manifest::open_or_create(&path).unwrap();
    assert_eq!(m.lines.len(), 0);
    let header = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, header.replace("\"schema_version\":1", "\"schema_version\":9")).unwrap();
    assert!(Manifest::load(&path).is_err());
    let skip = r#"{"record_type":"skip","source_id":"a","variant_name":"v","global_seed":0,"seed":5,"reason":"r"}"#;
    std::fs::write(&path, format!("{header}{skip}\n")).unwrap();
    assert_eq!(Manifest::load(&path).unwrap().skips().count(), 1);
    std::fs::write(&path, format!("{header}{skip}\n{skip}\n")).unwrap();
    assert!(Manifest::load(&path).is_err());
    std::fs::write(&path, format!("{skip}\n")).unwrap();
    assert!(Manifest::load(&path).is_err());
}

#[test]
fn published_table_renders_stored_averages() {
    let t = published_accuracy_table().unwrap();
    assert_eq!(t.models.len(), 7);
    let text = t.render();
    for needle in ["| 97.71", "| 81.55 (drop 16.16)", "| 21.65 (drop 76.06)", "| 94.70 (drop 3.01)"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
    assert_eq!(t.row("Adversarial").unwrap().average, 21.65);
}

#[test]
fn caption_scores_fixture() {
    let s = published_caption_scores().unwrap();
    assert_eq!(s.len(), 5);
    assert!(s.iter().any(|c| c.variant == "BLIP-2 Caption" && c.clip_score == 0.84));
    assert!(s.iter().any(|c| c.variant == "Adversarial" && c.clip_score == 0.62));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reliability_plot_bars_match_bin_accuracy(
        raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..80),
        m in 1usize..12,
    ) {
        let recs: Vec<PredictionRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, (c, ok))| {
                let c = 0.5 + c / 2.0;
                let conf = vec![c, 1.0 - c];
                let label = if *ok { 0 } else { 1 };
                PredictionRecord::new(&format!("s{i}"), "v", label, conf).unwrap()
            })
            .collect();
        let bins = reliability_bins(&recs, m).unwrap();
        let measured = measured_bar_heights(&reliability_diagram(&bins), m);
        let expected: Vec<u32> = bins.bins.iter().map(|b| bar_height(b.mean_accuracy)).collect();
        prop_assert_eq!(measured, expected);
    }

    #[test]
    fn accuracy_bars_match_percentages(p in prop::collection::vec(0.0f64..=100.0, 1..8)) {
        let measured = measured_bar_heights(&accuracy_bars(&p), p.len());
        let expected: Vec<u32> = p.iter().map(|v| bar_height(v / 100.0)).collect();
        prop_assert_eq!(measured, expected);
    }
}
