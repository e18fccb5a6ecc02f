//! Noise schedules, the forward noising process, guidance and the DDIM update.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Variance schedule over training timesteps `1..=T`.
///
/// `alpha_bar(0)` is defined as exactly 1 so the last DDIM transition lands on
/// the predicted clean sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return invalid("schedule needs at least one timestep");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return invalid(alloc::format!("beta {b} outside (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative product at timestep `t` (1-based); `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.train_steps() {
            return invalid(alloc::format!(
                "timestep {t} outside [1, {}]",
                self.train_steps()
            ));
        }
        Ok(())
    }
}

/// Betas linearly interpolated from `beta_min` to `beta_max` over `t_train` steps.
pub fn make_linear_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_train < 1 {
        return invalid("t_train must be at least 1");
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return invalid(alloc::format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        ));
    }
    let betas = (0..t_train)
        .map(|i| {
            if t_train == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t_train - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// The schedule used by the toy stack: 1000 steps, betas 1e-4 to 0.02.
pub fn default_schedule() -> NoiseSchedule {
    make_linear_schedule(1000, 1e-4, 0.02).expect("constant arguments are valid")
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
pub fn forward_noise<F: Real>(
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (F::of(libm::sqrt(ab)), F::of(libm::sqrt(1.0 - ab)));
    x0.zip_with(eps, |x, e| a * x + b * e)
}

/// One element of the guidance combination.
///
/// `lambda == 1` returns the conditional estimate itself, which the
/// `u + λ(c − u)` form only reproduces up to rounding.
#[inline]
pub fn cfg_elem<F: Real>(uncond: F, cond: F, lambda: F) -> F {
    if lambda == F::one() {
        cond
    } else {
        uncond + lambda * (cond - uncond)
    }
}

/// Classifier-free guidance: `uncond + λ·(cond − uncond)`.
pub fn cfg_combine<F: Real>(uncond: &Tensor<F>, cond: &Tensor<F>, lambda: F) -> Result<Tensor<F>> {
    uncond.zip_with(cond, |u, c| cfg_elem(u, c, lambda))
}

/// Square roots of `ᾱ` at both ends of a DDIM transition, in working precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimCoefficients<F> {
    pub sqrt_ab: F,
    pub sqrt_one_minus_ab: F,
    pub sqrt_ab_prev: F,
    pub sqrt_one_minus_ab_prev: F,
}

impl<F: Real> DdimCoefficients<F> {
    pub fn new(t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if t_prev >= t {
            return invalid(alloc::format!("DDIM needs t_prev < t, got t={t}, t_prev={t_prev}"));
        }
        schedule.check_timestep(t)?;
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        Ok(Self {
            sqrt_ab: F::of(libm::sqrt(ab)),
            sqrt_one_minus_ab: F::of(libm::sqrt(1.0 - ab)),
            sqrt_ab_prev: F::of(libm::sqrt(ab_prev)),
            sqrt_one_minus_ab_prev: F::of(libm::sqrt(1.0 - ab_prev)),
        })
    }

    /// Derivatives of the update with respect to `z_t` and `eps_hat`.
    pub fn partials(&self) -> (F, F) {
        let dz = self.sqrt_ab_prev / self.sqrt_ab;
        let de = self.sqrt_one_minus_ab_prev - self.sqrt_ab_prev * self.sqrt_one_minus_ab / self.sqrt_ab;
        (dz, de)
    }
}

/// Elementwise deterministic DDIM update.
#[inline]
pub fn ddim_elem<F: Real>(z: F, eps: F, c: &DdimCoefficients<F>) -> F {
    let x0 = (z - c.sqrt_one_minus_ab * eps) / c.sqrt_ab;
    c.sqrt_ab_prev * x0 + c.sqrt_one_minus_ab_prev * eps
}

/// Predicted clean sample `(z_t − sqrt(1 − ᾱ_t)·eps) / sqrt(ᾱ_t)`.
pub fn predict_x0<F: Real>(
    z_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let c = DdimCoefficients::<F>::new(t, 0, schedule)?;
    z_t.zip_with(eps_hat, |z, e| (z - c.sqrt_one_minus_ab * e) / c.sqrt_ab)
}

/// Evenly spaced subsequence of training timesteps used for sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DdimGrid {
    steps: Vec<usize>,
}

impl DdimGrid {
    /// `steps[i] = floor((i + 1) · T_train / n)` for `i < n`, so the top step is `T_train`.
    pub fn uniform(num_steps: usize, schedule: &NoiseSchedule) -> Result<Self> {
        let t_train = schedule.train_steps();
        if num_steps == 0 || num_steps > t_train {
            return invalid(alloc::format!("grid length {num_steps} outside [1, {t_train}]"));
        }
        let steps = (1..=num_steps).map(|i| i * t_train / num_steps).collect();
        Self::from_steps(steps, schedule)
    }

    pub fn from_steps(steps: Vec<usize>, schedule: &NoiseSchedule) -> Result<Self> {
        if steps.is_empty() {
            return invalid("empty DDIM grid");
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("DDIM grid must be strictly increasing");
        }
        if steps[0] < 1 || *steps.last().unwrap() > schedule.train_steps() {
            return invalid("DDIM grid steps must lie in [1, T_train]");
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Training timestep at grid position `index` (1-based); position 0 is clean.
    pub fn timestep(&self, index: usize) -> usize {
        if index == 0 {
            0
        } else {
            self.steps[index - 1]
        }
    }

    /// Number of transitions traversed for a given strength: `⌈strength · len⌉`.
    pub fn steps_for_strength(&self, strength: f64) -> usize {
        let n = libm::ceil(strength * self.len() as f64) as usize;
        n.clamp(1, self.len())
    }

    /// `(t, t_prev)` pairs from grid position `start` down to the clean boundary.
    pub fn transitions_from(&self, start: usize) -> Vec<(usize, usize)> {
        (1..=start.min(self.len())).rev().map(|i| (self.timestep(i), self.timestep(i - 1))).collect()
    }
}

/// Guidance scale and the fraction of the grid actually traversed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub strength: f64,
}

impl GuidanceConfig {
    pub fn new(lambda: f64, strength: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return invalid(alloc::format!("guidance scale {lambda} must be >= 0"));
        }
        if !(strength > 0.0 && strength <= 1.0) {
            return invalid(alloc::format!("strength {strength} outside (0, 1]"));
        }
        Ok(Self { lambda, strength })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda: 7.5, strength: 1.0 }
    }
}
