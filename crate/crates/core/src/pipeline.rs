//! Background generation with the toy backends: conditioning, guided sampling,
//! decoding and compositing.

use crate::conditioning::ConditioningBundle;
use crate::error::{invalid, Result};
use crate::mask::{composite, dilate_mask, ObjectMask};
use crate::sampler::{sample, InpaintConditioning, SampleOutput};
use crate::scalar::Real;
use crate::schedule::{default_schedule, DdimGrid, GuidanceConfig, NoiseSchedule};
use crate::tensor::Tensor;
use crate::toy::autoencoder::DOWNSAMPLE;
use crate::toy::ToyBackends;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineConfig {
    pub num_steps: usize,
    pub guide: GuidanceConfig,
    pub dilation_radius: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { num_steps: 20, guide: GuidanceConfig::default(), dilation_radius: 6 }
    }
}

/// Backends plus the schedule and grid they sample with.
#[derive(Clone, Debug)]
pub struct Engine<'a, F> {
    pub backends: &'a ToyBackends<F>,
    pub schedule: NoiseSchedule,
    pub grid: DdimGrid,
    pub config: EngineConfig,
}

/// Sampler conditioning for one bundle, with the dilated pixel mask it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<F> {
    pub cond: InpaintConditioning<F>,
    pub dilated: ObjectMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation<F> {
    /// Composited output, (3, H, W).
    pub image: Tensor<F>,
    /// Decoder output before compositing.
    pub decoded: Tensor<F>,
    pub sample: SampleOutput<F>,
}

impl<'a, F: Real> Engine<'a, F> {
    pub fn new(backends: &'a ToyBackends<F>, config: EngineConfig) -> Result<Self> {
        let schedule = default_schedule();
        let grid = DdimGrid::uniform(config.num_steps, &schedule)?;
        Ok(Self { backends, schedule, grid, config })
    }

    /// Encodes the image, dilates and downsamples the mask and embeds the prompt.
    pub fn prepare(&self, image: &Tensor<F>, bundle: &ConditioningBundle) -> Result<Prepared<F>> {
        let s = image.shape();
        if s.len() != 3 || s[1] != bundle.mask.height() || s[2] != bundle.mask.width() {
            return invalid(alloc::format!(
                "image {s:?} does not match mask {}x{}",
                bundle.mask.height(),
                bundle.mask.width()
            ));
        }
        let dilated = dilate_mask(&bundle.mask, self.config.dilation_radius);
        let text = self.backends.text_encoder.text_encode(&bundle.prompt_text);
        let cond = InpaintConditioning {
            image_latent: self.backends.autoencoder.encode(image)?,
            mask_latent: dilated.downsample(DOWNSAMPLE)?,
            text_embedding: text.values,
            has_text: !bundle.prompt_text.trim().is_empty(),
        };
        Ok(Prepared { cond, dilated })
    }

    /// Samples a new background and composites the source object over it.
    pub fn generate(&self, image: &Tensor<F>, bundle: &ConditioningBundle, seed: u64) -> Result<Generation<F>> {
        let prepared = self.prepare(image, bundle)?;
        let predictor = self.backends.noise_predictor();
        let out = sample(&predictor, &prepared.cond, &self.grid, &self.config.guide, &self.schedule, seed)?;
        let decoded = self.backends.autoencoder.decode(&out.latent.values)?;
        let image = composite(image, &decoded, &bundle.mask)?;
        Ok(Generation { image, decoded, sample: out })
    }
}
