//! Guided DDIM sampling with inpainting conditioning.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, CoreError, Result};
use crate::scalar::Real;
use crate::schedule::{
    cfg_combine, ddim_elem, forward_noise, DdimCoefficients, DdimGrid, GuidanceConfig,
    NoiseSchedule,
};
use crate::tensor::Tensor;

/// A latent array of shape (channels, h, w) at a DDIM grid position (0 = clean).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<F> {
    pub values: Tensor<F>,
    pub timestep_index: usize,
}

/// Conditioning passed to the noise predictor alongside the noisy latent.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintConditioning<F> {
    /// Encoded source image, (channels, h, w).
    pub image_latent: Tensor<F>,
    /// Object mask at latent resolution, (1, h, w), values in [0, 1].
    pub mask_latent: Tensor<F>,
    /// Prompt embedding, (tokens, dim).
    pub text_embedding: Tensor<F>,
    pub has_text: bool,
}

impl<F: Real> InpaintConditioning<F> {
    pub fn validate(&self, latent_shape: &[usize]) -> Result<()> {
        if self.image_latent.shape() != latent_shape {
            return invalid(alloc::format!(
                "image latent {:?} does not match latent {:?}",
                self.image_latent.shape(),
                latent_shape
            ));
        }
        let ms = self.mask_latent.shape();
        if ms.len() != 3 || ms[0] != 1 || ms[1..] != latent_shape[1..] {
            return invalid(alloc::format!("mask latent {ms:?} does not match latent spatial dims"));
        }
        if self.mask_latent.data().iter().any(|m| *m < F::zero() || *m > F::one()) {
            return invalid("mask latent values must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A noise-prediction backend `ε_θ(z_t, t, e_T | ∅, i, m)`.
///
/// `text = None` requests the unconditional estimate.
pub trait NoisePredictor<F: Real> {
    fn predict(
        &self,
        z_t: &Tensor<F>,
        t: usize,
        text: Option<&Tensor<F>>,
        image_latent: &Tensor<F>,
        mask_latent: &Tensor<F>,
    ) -> Result<Tensor<F>>;
}

/// Deterministic DDIM update on a latent state.
pub fn ddim_step<F: Real>(
    z_t: &LatentState<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentState<F>> {
    let c = DdimCoefficients::<F>::new(t, t_prev, schedule)?;
    let values = z_t.values.zip_with(eps_hat, |z, e| ddim_elem(z, e, &c))?;
    Ok(LatentState { values, timestep_index: z_t.timestep_index.saturating_sub(1) })
}

/// Seeded standard-normal array; f32 and f64 draw the same underlying values.
pub fn seeded_normal<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            F::of(v)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Starting latent for a run: pure seeded noise at full strength, otherwise the
/// source latent forward-noised to the grid position `⌈strength · len⌉`.
pub fn initial_latent<F: Real>(
    cond: &InpaintConditioning<F>,
    grid: &DdimGrid,
    guide: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LatentState<F>> {
    let shape = cond.image_latent.shape();
    let noise = seeded_normal::<F>(shape, seed);
    let start = grid.steps_for_strength(guide.strength);
    let values = if guide.strength >= 1.0 {
        noise
    } else {
        forward_noise(&cond.image_latent, grid.timestep(start), &noise, schedule)?
    };
    Ok(LatentState { values, timestep_index: start })
}

/// One guided transition: two predictor calls, guidance, then the DDIM update.
pub fn guided_step<F: Real, D: NoisePredictor<F> + ?Sized>(
    denoiser: &D,
    cond: &InpaintConditioning<F>,
    state: &LatentState<F>,
    t: usize,
    t_prev: usize,
    lambda: f64,
    schedule: &NoiseSchedule,
) -> Result<LatentState<F>> {
    let text = cond.has_text.then_some(&cond.text_embedding);
    let eps_c = denoiser.predict(&state.values, t, text, &cond.image_latent, &cond.mask_latent)?;
    let eps_u = denoiser.predict(&state.values, t, None, &cond.image_latent, &cond.mask_latent)?;
    if !eps_c.all_finite() || !eps_u.all_finite() {
        return Err(CoreError::Numerical { stage: "denoiser", index: t });
    }
    let eps = cfg_combine(&eps_u, &eps_c, F::of(lambda))?;
    ddim_step(state, &eps, t, t_prev, schedule)
}

/// Runs guided transitions from `state` until `stop_remaining` transitions are left.
pub fn run_until<F: Real, D: NoisePredictor<F> + ?Sized>(
    denoiser: &D,
    cond: &InpaintConditioning<F>,
    grid: &DdimGrid,
    lambda: f64,
    schedule: &NoiseSchedule,
    state: LatentState<F>,
    stop_remaining: usize,
    trajectory: &mut Vec<LatentState<F>>,
) -> Result<LatentState<F>> {
    let mut state = state;
    while state.timestep_index > stop_remaining {
        let i = state.timestep_index;
        state = guided_step(denoiser, cond, &state, grid.timestep(i), grid.timestep(i - 1), lambda, schedule)?;
        trajectory.push(state.clone());
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<F> {
    pub latent: LatentState<F>,
    /// Start latent followed by the output of every transition.
    pub trajectory: Vec<LatentState<F>>,
}

/// Full guided inpainting run down to the clean latent.
pub fn sample<F: Real, D: NoisePredictor<F> + ?Sized>(
    denoiser: &D,
    cond: &InpaintConditioning<F>,
    grid: &DdimGrid,
    guide: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput<F>> {
    cond.validate(cond.image_latent.shape())?;
    let start = initial_latent(cond, grid, guide, schedule, seed)?;
    let mut trajectory = alloc::vec![start.clone()];
    let latent = run_until(denoiser, cond, grid, guide.lambda, schedule, start, 0, &mut trajectory)?;
    Ok(SampleOutput { latent, trajectory })
}

/// Noise predictor that knows the clean latent and returns the noise consistent
/// with it: `(z_t − sqrt(ᾱ_t)·x0) / sqrt(1 − ᾱ_t)`.
pub struct OracleDenoiser<F> {
    pub x0: Tensor<F>,
    pub schedule: NoiseSchedule,
}

impl<F: Real> NoisePredictor<F> for OracleDenoiser<F> {
    fn predict(
        &self,
        z_t: &Tensor<F>,
        t: usize,
        _text: Option<&Tensor<F>>,
        _image_latent: &Tensor<F>,
        _mask_latent: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (F::of(libm::sqrt(ab)), F::of(libm::sqrt(1.0 - ab)));
        z_t.zip_with(&self.x0, |z, x| (z - a * x) / b)
    }
}
