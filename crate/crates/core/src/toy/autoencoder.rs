//! Convolutional autoencoder with a 4× spatial downsampling factor.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::toy::ToyConfig;

pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<F> {
    pub params: ParamStore<F>,
    enc: [Conv; 3],
    dec: [Conv; 3],
    /// Per-channel latent mean and standard deviation, fixed after training.
    shift: ParamId,
    scale: ParamId,
    latent_channels: usize,
    trainable: usize,
}

impl<F: Real> Autoencoder<F> {
    pub fn new(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new();
        let (h, c) = (cfg.ae_hidden, cfg.latent_channels);
        let enc = [
            Conv::new(&mut s, rng, "enc.patch", 3, h, DOWNSAMPLE, DOWNSAMPLE, 0, 1.0),
            Conv::same3(&mut s, rng, "enc.mid", h, h),
            Conv::new(&mut s, rng, "enc.out", h, c, 1, 1, 0, 1.0),
        ];
        let r2 = DOWNSAMPLE * DOWNSAMPLE;
        let dec = [
            Conv::same3(&mut s, rng, "dec.in", c, h),
            Conv::same3(&mut s, rng, "dec.mid", h, h),
            Conv::new(&mut s, rng, "dec.out", h, 3 * r2, 1, 1, 0, 1.0),
        ];
        let trainable = s.len();
        let shift = s.add("latent.mean", Tensor::zeros(&[c]));
        let scale = s.add("latent.std", Tensor::full(&[c], F::one()));
        Self { params: s, enc, dec, shift, scale, latent_channels: c, trainable }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Number of leading tensors in `params` that training updates.
    pub fn trainable_len(&self) -> usize {
        self.trainable
    }

    pub fn set_latent_stats(&mut self, mean: &[F], std: &[F]) -> Result<()> {
        let c = self.latent_channels;
        if mean.len() != c || std.len() != c || std.iter().any(|s| *s <= F::zero()) {
            return invalid("latent statistics need one mean and one positive std per channel");
        }
        self.params.tensors_mut()[self.trainable] = Tensor::from_vec(&[c], mean.to_vec())?;
        self.params.tensors_mut()[self.trainable + 1] = Tensor::from_vec(&[c], std.to_vec())?;
        Ok(())
    }

    fn modulators(&self, tape: &mut Tape<F>, n: usize, inverse: bool) -> (Var, Var) {
        let mean = self.params.get(self.shift).data();
        let std = self.params.get(self.scale).data();
        let (mut sc, mut sh) = (Vec::with_capacity(n * mean.len()), Vec::with_capacity(n * mean.len()));
        for _ in 0..n {
            for (m, s) in mean.iter().zip(std) {
                if inverse {
                    sc.push(*s - F::one());
                    sh.push(*m);
                } else {
                    sc.push(F::one() / *s - F::one());
                    sh.push(-*m / *s);
                }
            }
        }
        let shape = [n, mean.len()];
        (
            tape.constant(Tensor::from_vec(&shape, sc).expect("dims")),
            tape.constant(Tensor::from_vec(&shape, sh).expect("dims")),
        )
    }

    /// Unnormalised encoder output, (N, C, H/4, W/4).
    pub fn encode_raw_var(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Var {
        let h = self.enc[0].forward(tape, p, x);
        let h = tape.silu(h);
        let h = self.enc[1].forward(tape, p, h);
        let h = tape.silu(h);
        self.enc[2].forward(tape, p, h)
    }

    /// Normalised latent of a (N, 3, H, W) batch.
    pub fn encode_var(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Var {
        let raw = self.encode_raw_var(tape, p, x);
        let n = tape.shape(raw)[0];
        let (sc, sh) = self.modulators(tape, n, false);
        tape.film(raw, Some(sc), sh)
    }

    /// Decodes a normalised latent batch to images in (0, 1).
    pub fn decode_var(&self, tape: &mut Tape<F>, p: &Bound, z: Var) -> Var {
        let n = tape.shape(z)[0];
        let (sc, sh) = self.modulators(tape, n, true);
        let raw = tape.film(z, Some(sc), sh);
        self.decode_raw_var(tape, p, raw)
    }

    pub fn decode_raw_var(&self, tape: &mut Tape<F>, p: &Bound, raw: Var) -> Var {
        let h = self.dec[0].forward(tape, p, raw);
        let h = tape.silu(h);
        let h = self.dec[1].forward(tape, p, h);
        let h = tape.silu(h);
        let h = self.dec[2].forward(tape, p, h);
        let h = tape.pixel_shuffle(h, DOWNSAMPLE);
        tape.sigmoid(h)
    }

    /// Encodes one (3, H, W) image to a (C, H/4, W/4) latent.
    pub fn encode(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(DOWNSAMPLE) || !s[2].is_multiple_of(DOWNSAMPLE) {
            return invalid(alloc::format!("encode expects (3, H, W) with H, W divisible by 4, got {s:?}"));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let z = self.encode_var(&mut tape, &p, x);
        let out = tape.value(z).clone();
        let zs = out.shape()[1..].to_vec();
        out.reshape(&zs)
    }

    /// Decodes one (C, h, w) latent to a (3, 4h, 4w) image.
    pub fn decode(&self, latent: &Tensor<F>) -> Result<Tensor<F>> {
        let s = latent.shape();
        if s.len() != 3 || s[0] != self.latent_channels {
            return invalid(alloc::format!("decode expects ({}, h, w), got {s:?}", self.latent_channels));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(latent.clone().reshape(&[1, s[0], s[1], s[2]])?);
        let x = self.decode_var(&mut tape, &p, z);
        let out = tape.value(x).clone();
        let xs = out.shape()[1..].to_vec();
        out.reshape(&xs)
    }
}
