use objectcompose_core::attack::{adversarial_background, adversarial_loss, AttackConfig, AttackObjective, LossKind};
use objectcompose_core::conditioning::ConditioningBundle;
use objectcompose_core::mask::ObjectMask;
use objectcompose_core::pipeline::{Engine, EngineConfig};
use objectcompose_core::sampler::{initial_latent, run_until};
use objectcompose_core::schedule::GuidanceConfig;
use objectcompose_core::tensor::Tensor;
use objectcompose_core::toy::{ToyBackends, ToyConfig};
use objectcompose_core::CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(size: usize, seed: u64) -> (Tensor<f64>, ConditioningBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
    let image = Tensor::from_vec(&[3, size, size], px).unwrap();
    let q = size / 4;
    let mask = ObjectMask::from_fn(size, size, |r, c| (q..3 * q).contains(&r) && (q..3 * q).contains(&c)).unwrap();
    let bundle = ConditioningBundle {
        prompt_text: "a picture of a circle on a striped background".into(),
        mask,
        source_image_id: "s".into(),
        class_label: 1,
        class_name: "square".into(),
        caption: "a picture of a circle on a striped background".into(),
    };
    (image, bundle)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs())).max(1e-10)
}

/// Random miniature backends with the near-zero output gains of a fresh
/// initialisation replaced by generic weights, so every input matters.
fn generic_backends() -> ToyBackends<f64> {
    let mut b = ToyBackends::<f64>::init(ToyConfig::miniature(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in b.denoiser.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.4 * (rng.random::<f64>() - 0.5);
        }
    }
    b
}

fn gradient_check(kind: LossKind) {
    let backends = generic_backends();
    let engine = Engine::new(&backends, EngineConfig { dilation_radius: 1, ..Default::default() }).unwrap();
    let (image, bundle) = scene(32, 3);
    let prepared = engine.prepare(&image, &bundle).unwrap();
    let start = initial_latent(&prepared.cond, &engine.grid, &engine.config.guide, &engine.schedule, 5).unwrap();
    let z = run_until(&backends.noise_predictor(), &prepared.cond, &engine.grid, 7.5, &engine.schedule, start, 2, &mut Vec::new())
        .unwrap()
        .values;
    assert_eq!(z.shape(), &[2, 8, 8]);
    let clean = backends.classifier.classify(&image).unwrap();
    let objective = AttackObjective {
        backends: &backends,
        engine: &engine,
        cond: &prepared.cond,
        original: &image,
        mask: &bundle.mask,
        label: bundle.class_label,
        loss_kind: kind,
        // Offset so the feature loss has a nonzero gradient at the start.
        clean_features: Some(Tensor::from_vec(&[clean.features.len()], clean.features.iter().map(|f| f + 0.1).collect()).unwrap()),
        tail: 2,
    };
    let e = prepared.cond.text_embedding.clone();
    let v = objective.evaluate(&z, &e, true, true).unwrap();
    let (gz, ge) = (v.grad_latent.unwrap(), v.grad_text.unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..24 {
        let on_latent = k % 2 == 0;
        let (base, grad) = if on_latent { (&z, &gz) } else { (&e, &ge) };
        let idx = rng.random_range(0..base.len());
        let mut plus = base.clone();
        plus.data_mut()[idx] += h;
        let mut minus = base.clone();
        minus.data_mut()[idx] -= h;
        let f = |x: &Tensor<f64>| {
            let (zz, ee) = if on_latent { (x, &e) } else { (&z, x) };
            objective.evaluate(zz, ee, false, false).unwrap().loss
        };
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let analytic = grad.data()[idx];
        assert!(analytic.abs() > 1e-8, "degenerate coordinate {idx}: {analytic}");
        worst = worst.max(rel_err(analytic, numeric));
        assert!(rel_err(analytic, numeric) <= 1e-3, "coordinate {idx} (latent {on_latent}): {analytic} vs {numeric}");
    }
    assert!(worst <= 1e-3);
}

#[test]
fn gradient_matches_finite_differences_cross_entropy() {
    gradient_check(LossKind::CrossEntropy);
}

#[test]
fn gradient_matches_finite_differences_feature_distance() {
    gradient_check(LossKind::FeatureDistance);
}

#[test]
fn loss_examples() {
    let ce = |l: &[f64], y| adversarial_loss(l, y, LossKind::CrossEntropy, None, None).unwrap();
    assert!((ce(&[0.0; 8], 3) - 8f64.ln()).abs() < 1e-12);
    let e2 = 2f64.exp();
    assert!((ce(&[2.0, 0.0, 0.0], 0) - -(e2 / (e2 + 2.0)).ln()).abs() < 1e-12);
    assert!((ce(&[2.0, 0.0, 0.0], 0) - 0.2395).abs() < 1e-4);
    let f = [0.5, -1.0, 2.0];
    assert_eq!(adversarial_loss(&[0.0], 0, LossKind::FeatureDistance, Some(&f), Some(&f)).unwrap(), 0.0);
    assert!(matches!(
        adversarial_loss(&[0.0], 0, LossKind::FeatureDistance, Some(&f), None),
        Err(CoreError::Validation(_))
    ));
}

#[test]
fn zero_iterations_is_plain_generation() {
    let backends = ToyBackends::<f32>::init(ToyConfig::miniature(), 2).unwrap();
    let engine = Engine::new(&backends, EngineConfig::default()).unwrap();
    let (image, bundle) = scene(32, 8);
    let image = image.cast::<f32>();
    let cfg = AttackConfig { iterations: 0, ..Default::default() };
    let res = adversarial_background(&engine, &image, &bundle, &cfg, 42).unwrap();
    let gen = engine.generate(&image, &bundle, 42).unwrap();
    assert_eq!(res.loss_trace.len(), 1);
    assert_eq!(res.best_iteration, 0);
    assert_eq!(res.adversarial_image, gen.image);
}

#[test]
fn trace_and_best_iterate() {
    let backends = ToyBackends::<f32>::init(ToyConfig::miniature(), 2).unwrap();
    let engine = Engine::new(&backends, EngineConfig::default()).unwrap();
    let (image, bundle) = scene(32, 9);
    let image = image.cast::<f32>();
    let cfg = AttackConfig { iterations: 5, ..Default::default() };
    let res = adversarial_background(&engine, &image, &bundle, &cfg, 1).unwrap();
    assert_eq!(res.loss_trace.len(), 6);
    let max = res.loss_trace.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(res.best_loss(), max);
    let hw = 32 * 32;
    for (i, (a, o)) in res.adversarial_image.data().iter().zip(image.data()).enumerate() {
        if bundle.mask.bits()[i % hw] {
            assert_eq!(a.to_bits(), o.to_bits());
        }
    }
    assert!(res.effective_perturbation_norm > 0.0);
}

#[test]
fn partial_strength_and_guidance_one() {
    let backends = ToyBackends::<f32>::init(ToyConfig::miniature(), 4).unwrap();
    let config = EngineConfig { guide: GuidanceConfig::new(1.0, 0.1).unwrap(), ..Default::default() };
    let engine = Engine::new(&backends, config).unwrap();
    let (image, bundle) = scene(32, 10);
    let image = image.cast::<f32>();
    let res = adversarial_background(&engine, &image, &bundle, &AttackConfig { iterations: 2, ..Default::default() }, 3).unwrap();
    assert_eq!(res.loss_trace.len(), 3);
}
