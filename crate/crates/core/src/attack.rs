//! Adversarial backgrounds: gradient ascent on the classifier loss with
//! respect to an intermediate latent and the prompt embedding, differentiating
//! through the remaining DDIM steps, the decoder and the composite.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::conditioning::ConditioningBundle;
use crate::error::{invalid, CoreError, Result};
use crate::mask::{composite, ObjectMask};
use crate::metrics::PredictionRecord;
use crate::nn::{AdamW, AdamWConfig};
use crate::sampler::{initial_latent, run_until, InpaintConditioning};
use crate::scalar::Real;
use crate::schedule::DdimCoefficients;
use crate::tensor::Tensor;
use crate::pipeline::Engine;
use crate::toy::classifier::softmax;
use crate::toy::ToyBackends;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `−log softmax(logits)[label]`.
    CrossEntropy,
    /// Squared L2 distance between clean and adversarial penultimate features.
    FeatureDistance,
}

/// Which of `(z_t, e_T)` the optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackTarget {
    Both,
    TextOnly,
    LatentOnly,
}

impl AttackTarget {
    fn latent(self) -> bool {
        self != AttackTarget::TextOnly
    }

    fn text(self) -> bool {
        self != AttackTarget::LatentOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// DDIM transitions still to run when the optimization variables are taken.
    pub start_step: usize,
    pub loss_kind: LossKind,
    pub target: AttackTarget,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let a = AdamWConfig::with_lr(0.1);
        Self {
            iterations: 30,
            learning_rate: a.lr,
            start_step: 4,
            loss_kind: LossKind::CrossEntropy,
            target: AttackTarget::Both,
            beta1: a.beta1,
            beta2: a.beta2,
            weight_decay: a.weight_decay,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, grid_len: usize) -> Result<()> {
        if self.start_step > grid_len {
            return invalid(alloc::format!("start step {} beyond grid of {grid_len}", self.start_step));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning rate must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, weight_decay: self.weight_decay, ..AdamWConfig::with_lr(self.learning_rate) }
    }
}

/// Attack loss on plain vectors.
pub fn adversarial_loss(
    logits: &[f64],
    label: usize,
    kind: LossKind,
    clean_features: Option<&[f64]>,
    adv_features: Option<&[f64]>,
) -> Result<f64> {
    match kind {
        LossKind::CrossEntropy => {
            if label >= logits.len() {
                return invalid(alloc::format!("label {label} out of range"));
            }
            Ok(-libm::log(softmax(logits)[label]))
        }
        LossKind::FeatureDistance => {
            let (Some(a), Some(b)) = (clean_features, adv_features) else {
                return invalid("feature distance needs clean and adversarial features");
            };
            if a.len() != b.len() {
                return invalid("feature vectors differ in length");
            }
            Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        }
    }
}

/// Everything the attack objective depends on besides `(z_t, e_T)`.
#[derive(Clone, Debug)]
pub struct AttackObjective<'a, F: Real> {
    pub backends: &'a ToyBackends<F>,
    pub engine: &'a Engine<'a, F>,
    pub cond: &'a InpaintConditioning<F>,
    pub original: &'a Tensor<F>,
    /// Pre-dilation object mask used for compositing.
    pub mask: &'a ObjectMask,
    pub label: usize,
    pub loss_kind: LossKind,
    pub clean_features: Option<Tensor<F>>,
    /// Transitions between `z_t` and the clean latent.
    pub tail: usize,
}

/// One evaluation of the attack objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue<F> {
    pub loss: f64,
    pub latent: Tensor<F>,
    pub decoded: Tensor<F>,
    pub logits: Vec<f64>,
    pub features: Vec<f64>,
    pub grad_latent: Option<Tensor<F>>,
    pub grad_text: Option<Tensor<F>>,
}

fn batched<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let mut shape = alloc::vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

fn unbatched<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let shape = x.shape()[1..].to_vec();
    x.clone().reshape(&shape)
}

fn to_f64<F: Real>(x: &Tensor<F>) -> Vec<f64> {
    x.data().iter().map(|v| v.to_f64_lossless()).collect()
}

impl<F: Real> AttackObjective<'_, F> {
    /// Runs the tail from `z_t` with prompt embedding `text`, decodes,
    /// composites and scores; gradients are taken for the flagged inputs.
    pub fn evaluate(&self, z_t: &Tensor<F>, text: &Tensor<F>, grad_latent: bool, grad_text: bool) -> Result<ObjectiveValue<F>> {
        let b = self.backends;
        let e = self.engine;
        let mut tape = Tape::new();
        let pd = b.denoiser.params.bind(&mut tape, false);
        let pa = b.autoencoder.params.bind(&mut tape, false);
        let pc = b.classifier.params.bind(&mut tape, false);
        let z0 = tape.leaf(batched(z_t)?, grad_latent);
        let et = tape.leaf(batched(text)?, grad_text);
        let null = tape.constant(batched(&b.text_encoder.null_embedding())?);
        let i = tape.constant(batched(&self.cond.image_latent)?);
        let m = tape.constant(batched(&self.cond.mask_latent)?);
        let predictor = b.noise_predictor();
        let lambda = F::of(e.config.guide.lambda);
        let cond_text = if self.cond.has_text { et } else { null };
        let mut z = z0;
        for k in (1..=self.tail).rev() {
            let (t, t_prev) = (e.grid.timestep(k), e.grid.timestep(k - 1));
            let ec = predictor.predict_var(&mut tape, &pd, z, t, cond_text, i, m);
            let eu = predictor.predict_var(&mut tape, &pd, z, t, null, i, m);
            let eps = tape.cfg(eu, ec, lambda);
            z = tape.ddim_update(z, eps, DdimCoefficients::new(t, t_prev, &e.schedule)?);
        }
        let x = b.autoencoder.decode_var(&mut tape, &pa, z);
        let img = self.composite_var(&mut tape, x)?;
        let (logits, features) = b.classifier.forward_var(&mut tape, &pc, img);
        let loss = match self.loss_kind {
            LossKind::CrossEntropy => tape.softmax_cross_entropy(logits, &[self.label]),
            LossKind::FeatureDistance => {
                let Some(clean) = &self.clean_features else {
                    return invalid("feature distance needs clean features");
                };
                let c = tape.constant(clean.clone().reshape(tape.shape(features))?);
                let d = tape.sub(features, c);
                tape.sum_squares(d)
            }
        };
        let loss_value = tape.value(loss).data()[0].to_f64_lossless();
        let (mut gl, mut gt) = (None, None);
        if grad_latent || grad_text {
            let mut g = tape.backward(loss);
            if grad_latent {
                gl = Some(unbatched(&g.take(z0).unwrap_or_else(|| Tensor::zeros(&[1, 1])))?);
            }
            if grad_text {
                gt = Some(unbatched(&g.take(et).unwrap_or_else(|| Tensor::zeros(&[1, 1])))?);
            }
        }
        Ok(ObjectiveValue {
            loss: loss_value,
            latent: unbatched(tape.value(z))?,
            decoded: unbatched(tape.value(x))?,
            logits: to_f64(tape.value(logits)),
            features: to_f64(tape.value(features)),
            grad_latent: gl,
            grad_text: gt,
        })
    }

    /// `x ⊙ (1 − m) + I ⊙ m` on the tape; exact selection for a binary mask.
    fn composite_var(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let (h, w) = (self.mask.height(), self.mask.width());
        let bg: Vec<F> = self.mask.bits().iter().map(|&o| if o { F::zero() } else { F::one() }).collect();
        let bg = tape.constant(Tensor::from_vec(&[1, 1, h, w], bg)?);
        let kept = composite(self.original, &Tensor::zeros(self.original.shape()), self.mask)?;
        let obj = tape.constant(batched(&kept)?);
        let xb = tape.mul_spatial(x, bg);
        Ok(tape.add(xb, obj))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<F> {
    /// Composited image of the best iterate, (3, H, W).
    pub adversarial_image: Tensor<F>,
    /// Loss before any update followed by the loss after each update.
    pub loss_trace: Vec<f64>,
    pub best_iteration: usize,
    pub clean_prediction: PredictionRecord,
    pub adversarial_prediction: PredictionRecord,
    /// L2 norm of `I_adv − I` over all pixels.
    pub effective_perturbation_norm: f64,
}

impl<F> AttackResult<F> {
    pub fn best_loss(&self) -> f64 {
        self.loss_trace[self.best_iteration]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }
}

/// Generates an adversarial background for the bundle's source image.
///
/// The chain runs from the seeded start down to `start_step` remaining
/// transitions once; each iteration then re-runs only those transitions from
/// the current `(z_t, e_T)`. No projection or norm bound is applied.
pub fn adversarial_background<F: Real>(
    engine: &Engine<'_, F>,
    image: &Tensor<F>,
    bundle: &ConditioningBundle,
    config: &AttackConfig,
    seed: u64,
) -> Result<AttackResult<F>> {
    config.validate(engine.grid.len())?;
    let b = engine.backends;
    let prepared = engine.prepare(image, bundle)?;
    let cond = &prepared.cond;
    let start = initial_latent(cond, &engine.grid, &engine.config.guide, &engine.schedule, seed)?;
    let stop = config.start_step.min(start.timestep_index);
    let mut trajectory = Vec::new();
    let state = run_until(&b.noise_predictor(), cond, &engine.grid, engine.config.guide.lambda, &engine.schedule, start, stop, &mut trajectory)?;

    let clean = b.classifier.classify(image)?;
    let clean_prediction = PredictionRecord::new(&bundle.source_image_id, "original", bundle.class_label, clean.confidences.clone())?;
    let objective = AttackObjective {
        backends: b,
        engine,
        cond,
        original: image,
        mask: &bundle.mask,
        label: bundle.class_label,
        loss_kind: config.loss_kind,
        clean_features: match config.loss_kind {
            LossKind::FeatureDistance => Some(Tensor::from_vec(&[clean.features.len()], clean.features.iter().map(|v| F::of(*v)).collect())?),
            LossKind::CrossEntropy => None,
        },
        tail: stop,
    };

    let mut z = state.values;
    let mut e = cond.text_embedding.clone();
    let shapes: Vec<&[usize]> = [(config.target.latent(), z.shape()), (config.target.text(), e.shape())]
        .into_iter()
        .filter_map(|(on, s)| on.then_some(s))
        .collect();
    let mut opt = AdamW::<F>::new(config.adamw(), &shapes);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(usize, ObjectiveValue<F>)> = None;
    for it in 0..=config.iterations {
        let update = it < config.iterations;
        let v = objective.evaluate(&z, &e, update && config.target.latent(), update && config.target.text())?;
        let grads_ok = v.grad_latent.as_ref().is_none_or(|g| g.all_finite()) && v.grad_text.as_ref().is_none_or(|g| g.all_finite());
        if !v.loss.is_finite() || !grads_ok {
            return Err(CoreError::Numerical { stage: "attack", index: it });
        }
        trace.push(v.loss);
        let (gl, gt) = (v.grad_latent.clone(), v.grad_text.clone());
        if best.as_ref().is_none_or(|(_, bv)| v.loss > bv.loss) {
            best = Some((it, ObjectiveValue { grad_latent: None, grad_text: None, ..v }));
        }
        if update {
            let mut params = Vec::new();
            let mut grads = Vec::new();
            if let Some(g) = gl {
                params.push(z.clone());
                grads.push(g);
            }
            if let Some(g) = gt {
                params.push(e.clone());
                grads.push(g);
            }
            opt.ascend(&mut params, &grads);
            let mut it_p = params.into_iter();
            if config.target.latent() {
                z = it_p.next().expect("latent slot");
            }
            if config.target.text() {
                e = it_p.next().expect("text slot");
            }
        }
    }
    let (best_iteration, bv) = best.expect("at least one evaluation");
    let adversarial_image = composite(image, &bv.decoded, &bundle.mask)?;
    let diff = adversarial_image.zip_with(image, |a, c| a - c)?;
    Ok(AttackResult {
        effective_perturbation_norm: libm::sqrt(diff.sum_squares().to_f64_lossless()),
        adversarial_image,
        loss_trace: trace,
        best_iteration,
        clean_prediction,
        adversarial_prediction: PredictionRecord::new(&bundle.source_image_id, "adversarial", bundle.class_label, softmax(&bv.logits))?,
    })
}
