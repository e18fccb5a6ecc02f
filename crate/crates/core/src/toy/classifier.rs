//! Small convolutional image classifier.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{log_sum_exp, Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv, Dense, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::toy::ToyConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<F> {
    pub params: ParamStore<F>,
    convs: [Conv; 5],
    head: Dense,
    num_classes: usize,
}

/// Output of [`Classifier::classify`].
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub logits: Vec<f64>,
    /// Softmax of the logits.
    pub confidences: Vec<f64>,
    /// Penultimate (pooled) features.
    pub features: Vec<f64>,
}

impl Classification {
    /// Arg-max with ties going to the lowest index.
    pub fn predicted_label(&self) -> usize {
        argmax(&self.confidences)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| libm::exp(l - lse)).collect()
}

impl<F: Real> Classifier<F> {
    pub fn new(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new();
        let w = cfg.classifier_width;
        let convs = [
            Conv::new(&mut s, rng, "clf.conv1", 3, w, 3, 2, 1, 1.0),
            Conv::new(&mut s, rng, "clf.conv2", w, 2 * w, 3, 2, 1, 1.0),
            Conv::new(&mut s, rng, "clf.conv3", 2 * w, 4 * w, 3, 2, 1, 1.0),
            Conv::same3(&mut s, rng, "clf.conv4", 4 * w, 4 * w),
            Conv::new(&mut s, rng, "clf.conv5", 4 * w, 8 * w, 3, 2, 1, 1.0),
        ];
        let head = Dense::new(&mut s, rng, "clf.head", 16 * w, cfg.num_classes, 1.0);
        Self { params: s, convs, head, num_classes: cfg.num_classes }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Returns `(logits (N, K), features (N, D))` for a (N, 3, H, W) batch.
    pub fn forward_var(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> (Var, Var) {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(t, p, h);
            h = t.group_norm(h, 4, F::of(1e-5));
            h = t.silu(h);
        }
        let avg = t.global_avg_pool(h);
        let max = t.global_max_pool(h);
        let features = t.concat1(&[avg, max]);
        (self.head.forward(t, p, features), features)
    }

    /// Classifies one (3, H, W) image.
    pub fn classify(&self, image: &Tensor<F>) -> Result<Classification> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return invalid(alloc::format!("classify expects (3, H, W), got {s:?}"));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let (logits, features) = self.forward_var(&mut tape, &p, x);
        let logits: Vec<f64> = tape.value(logits).data().iter().map(|v| v.to_f64_lossless()).collect();
        let features = tape.value(features).data().iter().map(|v| v.to_f64_lossless()).collect();
        Ok(Classification { confidences: softmax(&logits), logits, features })
    }
}
