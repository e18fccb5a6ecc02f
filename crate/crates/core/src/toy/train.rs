//! Deterministic training loops for the toy backends.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tape;
use crate::error::{CoreError, Result};
use crate::mask::dilate_mask;
use crate::nn::{shuffled_indices, AdamW, AdamWConfig};
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::seed::stable_hash;
use crate::tensor::Tensor;
use crate::toy::autoencoder::DOWNSAMPLE;
use crate::toy::scenes::{generate_scene, generate_shapes_dataset, ShapesScene, Split};
use crate::toy::text::Tokens;
use crate::toy::{Autoencoder, Classifier, Denoiser, TextEncoder, ToyBackends, ToyConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_scenes: usize,
    /// Held-out scenes used for the quality measurements in [`TrainReport`].
    pub validation_scenes: usize,
    pub dilation_radius: usize,
    pub ae_epochs: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub clf_steps: usize,
    pub clf_batch: usize,
    pub clf_lr: f64,
    pub den_steps: usize,
    pub den_batch: usize,
    pub den_lr: f64,
    /// Fraction of denoiser samples trained with the null text embedding.
    pub text_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 1600,
            validation_scenes: 240,
            dilation_radius: 6,
            ae_epochs: 8,
            ae_batch: 16,
            ae_lr: 3e-3,
            clf_steps: 1200,
            clf_batch: 32,
            clf_lr: 2e-3,
            den_steps: 3000,
            den_batch: 16,
            den_lr: 2e-3,
            text_drop: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainEvent {
    Progress { stage: &'static str, step: usize, total: usize, loss: f64 },
    StageDone { stage: &'static str },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub ae_validation_mse: f64,
    pub classifier_validation_accuracy: f64,
    /// Mean per-dimension noise-prediction loss on held-out samples.
    pub denoiser_loss_conditional: f64,
    pub denoiser_loss_unconditional: f64,
    /// Loss of always predicting zero noise on the same samples.
    pub denoiser_loss_zero: f64,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
}

fn rng_for(seed: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), b"train", stage.as_bytes()]))
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac)))
}

fn check_finite(stage: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Training(alloc::format!("{stage} diverged at step {step}")))
    }
}

fn stack_images(scenes: &[ShapesScene], idx: &[usize]) -> Tensor<f32> {
    let items: Vec<&Tensor<f32>> = idx.iter().map(|i| &scenes[*i].image).collect();
    Tensor::stack(&items).expect("equal image shapes")
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}

pub fn train_autoencoder(
    cfg: &ToyConfig,
    tc: &TrainConfig,
    scenes: &[ShapesScene],
    ae: &mut Autoencoder<f32>,
    log: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let mut rng = rng_for(tc.seed, "autoencoder");
    let n_train = ae.trainable_len();
    let shapes: Vec<&[usize]> = ae.params.tensors()[..n_train].iter().map(|t| t.shape()).collect();
    let mut opt = AdamW::new(AdamWConfig::with_lr(tc.ae_lr), &shapes);
    let per_epoch = scenes.len().div_ceil(tc.ae_batch.max(1));
    let total = tc.ae_epochs * per_epoch;
    let mut step = 0;
    for _ in 0..tc.ae_epochs {
        let order = shuffled_indices(scenes.len(), &mut rng);
        for idx in batches(&order, tc.ae_batch) {
            let mut tape = Tape::new();
            let p = ae.params.bind(&mut tape, true);
            let x = tape.constant(stack_images(scenes, idx));
            let z = ae.encode_raw_var(&mut tape, &p, x);
            let y = ae.decode_raw_var(&mut tape, &p, z);
            let loss = tape.mse(y, x);
            let lv = tape.value(loss).data()[0] as f64;
            check_finite("autoencoder", step, lv)?;
            let mut g = tape.backward(loss);
            let grads = p.grads(&mut g, &ae.params);
            opt.config.lr = cosine_lr(tc.ae_lr, step, total);
            opt.step(&mut ae.params.tensors_mut()[..n_train], &grads[..n_train]);
            step += 1;
            log(TrainEvent::Progress { stage: "autoencoder", step, total, loss: lv });
        }
    }
    // Per-channel statistics of the raw latents fix the normalisation.
    let c = cfg.latent_channels;
    let (mut sum, mut sq, mut count) = (alloc::vec![0f64; c], alloc::vec![0f64; c], 0usize);
    let all: Vec<usize> = (0..scenes.len()).collect();
    for idx in batches(&all, 64) {
        let mut tape = Tape::new();
        let p = ae.params.bind(&mut tape, false);
        let x = tape.constant(stack_images(scenes, idx));
        let z = ae.encode_raw_var(&mut tape, &p, x);
        let zv = tape.value(z);
        let hw = zv.len() / (zv.dim(0) * c);
        for (i, v) in zv.data().iter().enumerate() {
            let ch = (i / hw) % c;
            sum[ch] += *v as f64;
            sq[ch] += (*v as f64) * (*v as f64);
        }
        count += zv.dim(0) * hw;
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&sum)
        .map(|(q, s)| {
            let m = s / count as f64;
            libm::sqrt((q / count as f64 - m * m).max(1e-8)) as f32
        })
        .collect();
    ae.set_latent_stats(&mean, &std)?;
    log(TrainEvent::StageDone { stage: "autoencoder" });
    Ok(())
}

pub fn reconstruction_mse(ae: &Autoencoder<f32>, scenes: &[ShapesScene]) -> f64 {
    let all: Vec<usize> = (0..scenes.len()).collect();
    let mut total = 0.0;
    for idx in batches(&all, 64) {
        let mut tape = Tape::new();
        let p = ae.params.bind(&mut tape, false);
        let x = tape.constant(stack_images(scenes, idx));
        let z = ae.encode_var(&mut tape, &p, x);
        let y = ae.decode_var(&mut tape, &p, z);
        let l = tape.mse(y, x);
        total += tape.value(l).data()[0] as f64 * idx.len() as f64;
    }
    total / scenes.len().max(1) as f64
}

/// Trains on a stream of fresh train-split scenes, `clf_steps` batches long.
pub fn train_classifier(
    tc: &TrainConfig,
    clf: &mut Classifier<f32>,
    log: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let mut opt = AdamW::for_store(AdamWConfig::with_lr(tc.clf_lr), &clf.params);
    let total = tc.clf_steps;
    for step in 0..total {
        let scenes: Vec<ShapesScene> =
            (0..tc.clf_batch).map(|j| generate_scene(tc.seed, Split::Train, step * tc.clf_batch + j)).collect();
        let labels: Vec<usize> = scenes.iter().map(|s| s.class_label).collect();
        let idx: Vec<usize> = (0..scenes.len()).collect();
        let mut tape = Tape::new();
        let p = clf.params.bind(&mut tape, true);
        let x = tape.constant(stack_images(&scenes, &idx));
        let (logits, _) = clf.forward_var(&mut tape, &p, x);
        let loss = tape.softmax_cross_entropy(logits, &labels);
        let lv = tape.value(loss).data()[0] as f64;
        check_finite("classifier", step, lv)?;
        let mut g = tape.backward(loss);
        let grads = p.grads(&mut g, &clf.params);
        opt.config.lr = cosine_lr(tc.clf_lr, step, total);
        opt.step(clf.params.tensors_mut(), &grads);
        log(TrainEvent::Progress { stage: "classifier", step: step + 1, total, loss: lv });
    }
    log(TrainEvent::StageDone { stage: "classifier" });
    Ok(())
}

/// Top-1 accuracy in [0, 1].
pub fn classifier_accuracy(clf: &Classifier<f32>, scenes: &[ShapesScene]) -> f64 {
    let all: Vec<usize> = (0..scenes.len()).collect();
    let mut correct = 0usize;
    for idx in batches(&all, 64) {
        let mut tape = Tape::new();
        let p = clf.params.bind(&mut tape, false);
        let x = tape.constant(stack_images(scenes, idx));
        let (logits, _) = clf.forward_var(&mut tape, &p, x);
        let k = clf.num_classes();
        for (row, i) in tape.value(logits).data().chunks(k).zip(idx) {
            let row: Vec<f64> = row.iter().map(|v| *v as f64).collect();
            correct += (super::classifier::argmax(&row) == scenes[*i].class_label) as usize;
        }
    }
    correct as f64 / scenes.len().max(1) as f64
}

/// Encoded latent, dilated latent-resolution mask and caption tokens per scene.
struct DenoiserData {
    latents: Vec<Tensor<f32>>,
    masks: Vec<Tensor<f32>>,
    tokens: Vec<Tokens>,
}

fn denoiser_data(
    tc: &TrainConfig,
    scenes: &[ShapesScene],
    ae: &Autoencoder<f32>,
    text: &TextEncoder<f32>,
) -> Result<DenoiserData> {
    let mut d = DenoiserData { latents: Vec::new(), masks: Vec::new(), tokens: Vec::new() };
    for s in scenes {
        d.latents.push(ae.encode(&s.image)?);
        d.masks.push(dilate_mask(&s.ground_truth_mask, tc.dilation_radius).downsample(DOWNSAMPLE)?);
        d.tokens.push(text.tokenize(&s.caption));
    }
    Ok(d)
}

struct NoisyBatch {
    z: Tensor<f32>,
    eps: Tensor<f32>,
    image: Tensor<f32>,
    mask: Tensor<f32>,
    ts: Vec<usize>,
}

fn noisy_batch(
    data: &DenoiserData,
    idx: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<NoisyBatch> {
    let (mut zs, mut es, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for &i in idx {
        let t = rng.random_range(1..=schedule.train_steps());
        let x0 = &data.latents[i];
        let eps: Vec<f32> = (0..x0.len())
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v as f32
            })
            .collect();
        let eps = Tensor::from_vec(x0.shape(), eps)?;
        zs.push(forward_noise(x0, t, &eps, schedule)?);
        es.push(eps);
        ts.push(t);
    }
    let refs = |v: &[Tensor<f32>]| -> Result<Tensor<f32>> { Tensor::stack(&v.iter().collect::<Vec<_>>()) };
    let images: Vec<Tensor<f32>> = idx.iter().map(|i| data.latents[*i].clone()).collect();
    let masks: Vec<Tensor<f32>> = idx.iter().map(|i| data.masks[*i].clone()).collect();
    Ok(NoisyBatch { z: refs(&zs)?, eps: refs(&es)?, image: refs(&images)?, mask: refs(&masks)?, ts })
}

fn denoiser_loss(
    den: &Denoiser<f32>,
    text: &TextEncoder<f32>,
    batch: &NoisyBatch,
    tokens: &[&Tokens],
    trainable: bool,
) -> (Tape<f32>, crate::autograd::Var, crate::nn::Bound, crate::nn::Bound) {
    let mut tape = Tape::new();
    let pd = den.params.bind(&mut tape, trainable);
    let pt = text.params.bind(&mut tape, trainable);
    let codes = tape.constant(text.codes(tokens));
    let e = text.embed_var(&mut tape, &pt, codes);
    let z = tape.constant(batch.z.clone());
    let i = tape.constant(batch.image.clone());
    let m = tape.constant(batch.mask.clone());
    let pred = den.forward_var(&mut tape, &pd, z, &batch.ts, e, i, m);
    let target = tape.constant(batch.eps.clone());
    let loss = tape.mse(pred, target);
    (tape, loss, pd, pt)
}

#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    tc: &TrainConfig,
    scenes: &[ShapesScene],
    ae: &Autoencoder<f32>,
    schedule: &NoiseSchedule,
    den: &mut Denoiser<f32>,
    text: &mut TextEncoder<f32>,
    log: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let mut rng = rng_for(tc.seed, "denoiser");
    let data = denoiser_data(tc, scenes, ae, text)?;
    let null = Tokens { ids: None, truncated: false };
    let mut opt_d = AdamW::for_store(AdamWConfig::with_lr(tc.den_lr), &den.params);
    let mut opt_t = AdamW::for_store(AdamWConfig::with_lr(tc.den_lr), &text.params);
    let mut order = shuffled_indices(scenes.len(), &mut rng);
    let mut cursor = 0;
    for step in 0..tc.den_steps {
        let mut idx = Vec::with_capacity(tc.den_batch);
        while idx.len() < tc.den_batch {
            if cursor == order.len() {
                order = shuffled_indices(scenes.len(), &mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = noisy_batch(&data, &idx, schedule, &mut rng)?;
        let tokens: Vec<&Tokens> = idx
            .iter()
            .map(|i| if rng.random_bool(tc.text_drop) { &null } else { &data.tokens[*i] })
            .collect();
        let (tape, loss, pd, pt) = denoiser_loss(den, text, &batch, &tokens, true);
        let lv = tape.value(loss).data()[0] as f64;
        check_finite("denoiser", step, lv)?;
        let mut g = tape.backward(loss);
        let gd = pd.grads(&mut g, &den.params);
        let gt = pt.grads(&mut g, &text.params);
        let lr = cosine_lr(tc.den_lr, step, tc.den_steps);
        opt_d.config.lr = lr;
        opt_t.config.lr = lr;
        opt_d.step(den.params.tensors_mut(), &gd);
        opt_t.step(text.params.tensors_mut(), &gt);
        log(TrainEvent::Progress { stage: "denoiser", step: step + 1, total: tc.den_steps, loss: lv });
    }
    log(TrainEvent::StageDone { stage: "denoiser" });
    Ok(())
}

/// Held-out noise-prediction losses: (conditional, unconditional, zero predictor).
pub fn denoiser_validation(
    tc: &TrainConfig,
    scenes: &[ShapesScene],
    ae: &Autoencoder<f32>,
    schedule: &NoiseSchedule,
    den: &Denoiser<f32>,
    text: &TextEncoder<f32>,
) -> Result<(f64, f64, f64)> {
    let mut rng = rng_for(tc.seed, "denoiser-validation");
    let data = denoiser_data(tc, scenes, ae, text)?;
    let null = Tokens { ids: None, truncated: false };
    let (mut cond, mut uncond, mut zero) = (0.0, 0.0, 0.0);
    let all: Vec<usize> = (0..scenes.len()).collect();
    for idx in batches(&all, 32) {
        let batch = noisy_batch(&data, idx, schedule, &mut rng)?;
        let with: Vec<&Tokens> = idx.iter().map(|i| &data.tokens[*i]).collect();
        let without: Vec<&Tokens> = idx.iter().map(|_| &null).collect();
        let (t1, l1, _, _) = denoiser_loss(den, text, &batch, &with, false);
        let (t2, l2, _, _) = denoiser_loss(den, text, &batch, &without, false);
        let w = idx.len() as f64;
        cond += t1.value(l1).data()[0] as f64 * w;
        uncond += t2.value(l2).data()[0] as f64 * w;
        zero += batch.eps.sum_squares() as f64 / batch.eps.len() as f64 * w;
    }
    let n = scenes.len().max(1) as f64;
    Ok((cond / n, uncond / n, zero / n))
}

/// Trains all four backends on a fresh corpus and measures them on held-out scenes.
pub fn train_toy_backends(
    cfg: ToyConfig,
    tc: &TrainConfig,
    schedule: &NoiseSchedule,
    log: &mut dyn FnMut(TrainEvent),
) -> Result<(ToyBackends<f32>, TrainReport)> {
    let train = generate_shapes_dataset(tc.train_scenes, tc.seed, Split::Train);
    let val = generate_shapes_dataset(tc.validation_scenes, tc.seed ^ 0x5eed, Split::Test);
    let mut b = ToyBackends::<f32>::init(cfg, tc.seed)?;
    train_autoencoder(&cfg, tc, &train, &mut b.autoencoder, log)?;
    train_classifier(tc, &mut b.classifier, log)?;
    train_denoiser(tc, &train, &b.autoencoder, schedule, &mut b.denoiser, &mut b.text_encoder, log)?;
    let (c, u, z) = denoiser_validation(tc, &val, &b.autoencoder, schedule, &b.denoiser, &b.text_encoder)?;
    let n = b.autoencoder.trainable_len();
    let report = TrainReport {
        ae_validation_mse: reconstruction_mse(&b.autoencoder, &val),
        classifier_validation_accuracy: classifier_accuracy(&b.classifier, &val),
        denoiser_loss_conditional: c,
        denoiser_loss_unconditional: u,
        denoiser_loss_zero: z,
        latent_mean: b.autoencoder.params.tensors()[n].data().iter().map(|v| *v as f64).collect(),
        latent_std: b.autoencoder.params.tensors()[n + 1].data().iter().map(|v| *v as f64).collect(),
    };
    Ok((b, report))
}
