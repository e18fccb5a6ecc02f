//! Conditional noise predictor for inpainting in latent space.
//!
//! Input channels are `(z_t, i ⊙ m, m)`: the noisy latent, the source latent
//! kept only where the object mask is set, and the mask itself. Timestep and
//! text enter through per-block feature-wise modulation.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv, Dense, ParamStore};
use crate::sampler::NoisePredictor;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::toy::text::TextEncoder;
use crate::toy::ToyConfig;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    scale: Dense,
    shift: Dense,
    groups: usize,
}

impl ResBlock {
    fn new<F: Real>(s: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, ch: usize, emb: usize) -> Self {
        Self {
            conv1: Conv::same3(s, rng, &alloc::format!("{name}.conv1"), ch, ch),
            conv2: Conv::new(s, rng, &alloc::format!("{name}.conv2"), ch, ch, 3, 1, 1, 0.1),
            scale: Dense::new(s, rng, &alloc::format!("{name}.film_scale"), emb, ch, 0.1),
            shift: Dense::new(s, rng, &alloc::format!("{name}.film_shift"), emb, ch, 0.1),
            groups: 8,
        }
    }

    fn forward<F: Real>(&self, t: &mut Tape<F>, p: &Bound, x: Var, emb: Var) -> Var {
        let h = t.group_norm(x, self.groups, F::of(GN_EPS));
        let h = t.silu(h);
        let h = self.conv1.forward(t, p, h);
        // Modulate after normalising so the group statistics cannot cancel it.
        let h = t.group_norm(h, self.groups, F::of(GN_EPS));
        let sc = self.scale.forward(t, p, emb);
        let sh = self.shift.forward(t, p, emb);
        let h = t.film(h, Some(sc), sh);
        let h = t.silu(h);
        let h = self.conv2.forward(t, p, h);
        t.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<F> {
    pub params: ParamStore<F>,
    conv_in: Conv,
    block_hi: ResBlock,
    down: Conv,
    block_lo: ResBlock,
    merge: Conv,
    block_out: ResBlock,
    conv_out: Conv,
    time: [Dense; 2],
    text: [Dense; 2],
    freqs: usize,
}

/// Sinusoidal timestep features, (N, 2·freqs).
pub fn timestep_features<F: Real>(ts: &[usize], freqs: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(ts.len() * 2 * freqs);
    for &t in ts {
        for k in 0..freqs {
            let w = libm::exp(-libm::log(10_000.0) * k as f64 / freqs as f64);
            data.push(F::of(libm::sin(t as f64 * w)));
        }
        for k in 0..freqs {
            let w = libm::exp(-libm::log(10_000.0) * k as f64 / freqs as f64);
            data.push(F::of(libm::cos(t as f64 * w)));
        }
    }
    Tensor::from_vec(&[ts.len(), 2 * freqs], data).expect("dims")
}

impl<F: Real> Denoiser<F> {
    pub fn new(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new();
        let (c, w, e) = (cfg.latent_channels, cfg.denoiser_width, cfg.embed_dim);
        let freqs = e / 2;
        let conv_in = Conv::same3(&mut s, rng, "den.conv_in", 2 * c + 1, w);
        let block_hi = ResBlock::new(&mut s, rng, "den.block_hi", w, e);
        let down = Conv::new(&mut s, rng, "den.down", w, 2 * w, 3, 2, 1, 1.0);
        let block_lo = ResBlock::new(&mut s, rng, "den.block_lo", 2 * w, e);
        let merge = Conv::new(&mut s, rng, "den.merge", 3 * w, w, 1, 1, 0, 1.0);
        let block_out = ResBlock::new(&mut s, rng, "den.block_out", w, e);
        let conv_out = Conv::new(&mut s, rng, "den.conv_out", w, c, 3, 1, 1, 0.1);
        let time = [
            Dense::new(&mut s, rng, "den.time1", 2 * freqs, e, 1.0),
            Dense::new(&mut s, rng, "den.time2", e, e, 1.0),
        ];
        let text = [
            Dense::new(&mut s, rng, "den.text1", cfg.text.dim, e, 1.0),
            Dense::new(&mut s, rng, "den.text2", e, e, 1.0),
        ];
        Self { params: s, conv_in, block_hi, down, block_lo, merge, block_out, conv_out, time, text, freqs }
    }

    /// Predicts noise for a batch: `z`, `image` (N, C, h, w), `mask` (N, 1, h, w),
    /// `text` (N, tokens, dim), one timestep per item.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_var(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        z: Var,
        ts: &[usize],
        text: Var,
        image: Var,
        mask: Var,
    ) -> Var {
        let tf = t.constant(timestep_features(ts, self.freqs));
        let te = self.time[0].forward(t, p, tf);
        let te = t.silu(te);
        let te = self.time[1].forward(t, p, te);
        let pooled = t.mean_axis1(text);
        let xe = self.text[0].forward(t, p, pooled);
        let xe = t.silu(xe);
        let xe = self.text[1].forward(t, p, xe);
        let emb = t.add(te, xe);
        let emb = t.silu(emb);

        let kept = t.mul_spatial(image, mask);
        let x = t.concat1(&[z, kept, mask]);
        let h = self.conv_in.forward(t, p, x);
        let hi = self.block_hi.forward(t, p, h, emb);
        let lo = self.down.forward(t, p, hi);
        let lo = t.silu(lo);
        let lo = self.block_lo.forward(t, p, lo, emb);
        let up = t.upsample_nearest2x(lo);
        let cat = t.concat1(&[up, hi]);
        let h = self.merge.forward(t, p, cat);
        let h = self.block_out.forward(t, p, h, emb);
        let h = t.group_norm(h, 8, F::of(GN_EPS));
        let h = t.silu(h);
        self.conv_out.forward(t, p, h)
    }
}

/// The trained denoiser together with the text encoder that supplies its null
/// embedding.
#[derive(Clone, Copy, Debug)]
pub struct ToyNoisePredictor<'a, F> {
    pub denoiser: &'a Denoiser<F>,
    pub text_encoder: &'a TextEncoder<F>,
}

impl<F: Real> ToyNoisePredictor<'_, F> {
    /// Tape version of [`NoisePredictor::predict`] on (1, ...) batches.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_var(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        z: Var,
        timestep: usize,
        text: Var,
        image: Var,
        mask: Var,
    ) -> Var {
        self.denoiser.forward_var(t, p, z, &[timestep], text, image, mask)
    }
}

fn batched<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let mut shape = alloc::vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

impl<F: Real> NoisePredictor<F> for ToyNoisePredictor<'_, F> {
    fn predict(
        &self,
        z_t: &Tensor<F>,
        t: usize,
        text: Option<&Tensor<F>>,
        image_latent: &Tensor<F>,
        mask_latent: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let cfg = self.text_encoder.config();
        let text = match text {
            Some(e) => e.clone(),
            None => self.text_encoder.null_embedding(),
        };
        if text.shape() != [cfg.tokens, cfg.dim] {
            return invalid(alloc::format!("text embedding must be ({}, {})", cfg.tokens, cfg.dim));
        }
        let mut tape = Tape::new();
        let p = self.denoiser.params.bind(&mut tape, false);
        let z = tape.constant(batched(z_t)?);
        let e = tape.constant(batched(&text)?);
        let i = tape.constant(batched(image_latent)?);
        let m = tape.constant(batched(mask_latent)?);
        let out = self.predict_var(&mut tape, &p, z, t, e, i, m);
        tape.value(out).clone().reshape(z_t.shape())
    }
}
