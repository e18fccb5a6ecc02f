//! Desk-scale backends: a procedural corpus and four small networks.

pub mod autoencoder;
pub mod classifier;
pub mod denoiser;
pub mod scenes;
pub mod text;
pub mod train;

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::nn::ParamStore;
use crate::scalar::Real;
use crate::seed::stable_hash;
use crate::tensor::Tensor;

pub use autoencoder::Autoencoder;
pub use classifier::{Classification, Classifier};
pub use denoiser::{Denoiser, ToyNoisePredictor};
pub use text::{TextConfig, TextEmbedding, TextEncoder};

/// Architecture sizes shared by the toy networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub ae_hidden: usize,
    pub text: TextConfig,
    pub denoiser_width: usize,
    pub embed_dim: usize,
    pub classifier_width: usize,
    pub num_classes: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: scenes::IMAGE_SIZE,
            latent_channels: 4,
            ae_hidden: 32,
            text: TextConfig::default(),
            denoiser_width: 32,
            embed_dim: 64,
            classifier_width: 16,
            num_classes: scenes::NUM_CLASSES,
        }
    }
}

impl ToyConfig {
    /// 32×32 images and 8×8 latents with narrow layers, for gradient checks.
    pub fn miniature() -> Self {
        Self {
            image_size: 32,
            latent_channels: 2,
            ae_hidden: 8,
            text: TextConfig { vocab_buckets: 32, tokens: 4, dim: 8 },
            denoiser_width: 8,
            embed_dim: 16,
            classifier_width: 8,
            num_classes: 4,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / autoencoder::DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(2 * autoencoder::DOWNSAMPLE) {
            return invalid("image size must be a multiple of 8");
        }
        if !self.denoiser_width.is_multiple_of(8) {
            return invalid("denoiser width must be a multiple of 8");
        }
        if self.latent_channels == 0 || self.num_classes < 2 || self.text.vocab_buckets < 2 {
            return invalid("degenerate toy configuration");
        }
        Ok(())
    }
}

/// The four toy networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackends<F> {
    pub config: ToyConfig,
    pub seed: u64,
    pub autoencoder: Autoencoder<F>,
    pub text_encoder: TextEncoder<F>,
    pub denoiser: Denoiser<F>,
    pub classifier: Classifier<F>,
}

fn rng_for(seed: u64, part: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), part.as_bytes()]))
}

pub const NETWORKS: [&str; 4] = ["autoencoder", "text_encoder", "denoiser", "classifier"];

impl<F: Real> ToyBackends<F> {
    /// Freshly initialised (untrained) networks.
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            seed,
            autoencoder: Autoencoder::new(&config, &mut rng_for(seed, NETWORKS[0])),
            text_encoder: TextEncoder::new(&config, &mut rng_for(seed, NETWORKS[1])),
            denoiser: Denoiser::new(&config, &mut rng_for(seed, NETWORKS[2])),
            classifier: Classifier::new(&config, &mut rng_for(seed, NETWORKS[3])),
        })
    }

    pub fn noise_predictor(&self) -> ToyNoisePredictor<'_, F> {
        ToyNoisePredictor { denoiser: &self.denoiser, text_encoder: &self.text_encoder }
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore<F>); 4] {
        [
            (NETWORKS[0], &self.autoencoder.params),
            (NETWORKS[1], &self.text_encoder.params),
            (NETWORKS[2], &self.denoiser.params),
            (NETWORKS[3], &self.classifier.params),
        ]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore<F>; 4] {
        [
            &mut self.autoencoder.params,
            &mut self.text_encoder.params,
            &mut self.denoiser.params,
            &mut self.classifier.params,
        ]
    }

    /// Every tensor as `network/name`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        for (net, store) in self.stores() {
            for (name, t) in store.iter() {
                out.push((alloc::format!("{net}/{name}"), t.clone()));
            }
        }
        out
    }

    /// Rebuilds backends from [`named_tensors`](Self::named_tensors) output.
    pub fn from_named(config: ToyConfig, seed: u64, named: &[(String, Tensor<F>)]) -> Result<Self> {
        let mut b = Self::init(config, seed)?;
        for (net, store) in NETWORKS.iter().zip(b.stores_mut()) {
            let prefix = alloc::format!("{net}/");
            let part: Vec<(String, Tensor<F>)> = named
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())))
                .collect();
            store.load(&part)?;
        }
        let total: usize = b.stores().iter().map(|(_, s)| s.len()).sum();
        if total != named.len() {
            return invalid("weight file has tensors for unknown networks");
        }
        Ok(b)
    }

    pub fn cast<G: Real>(&self) -> ToyBackends<G> {
        let named: Vec<(String, Tensor<G>)> =
            self.named_tensors().into_iter().map(|(n, t)| (n, t.cast())).collect();
        ToyBackends::from_named(self.config, self.seed, &named).expect("same architecture")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_round_trip_reproduces_forward() {
        let b = ToyBackends::<f32>::init(ToyConfig::miniature(), 4).unwrap();
        let named = b.named_tensors();
        let c = ToyBackends::from_named(b.config, b.seed, &named).unwrap();
        assert_eq!(b, c);
        let img = Tensor::full(&[3, 32, 32], 0.3f32);
        assert_eq!(b.autoencoder.encode(&img).unwrap(), c.autoencoder.encode(&img).unwrap());
        let mut short = named.clone();
        short.pop();
        assert!(ToyBackends::<f32>::from_named(b.config, b.seed, &short).is_err());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ToyConfig::default();
        let b = ToyBackends::<f32>::init(cfg, 1).unwrap();
        let img = Tensor::full(&[3, 64, 64], 0.5f32);
        let z = b.autoencoder.encode(&img).unwrap();
        assert_eq!(z.shape(), &[4, 16, 16]);
        assert_eq!(b.autoencoder.decode(&z).unwrap().shape(), &[3, 64, 64]);
        let c = b.classifier.classify(&img).unwrap();
        assert_eq!(c.confidences.len(), 8);
        assert!((c.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        use crate::sampler::NoisePredictor;
        let e = b.text_encoder.text_encode("a red square").values;
        let m = Tensor::full(&[1, 16, 16], 0.5f32);
        let eps = b.noise_predictor().predict(&z, 500, Some(&e), &z, &m).unwrap();
        assert_eq!(eps.shape(), z.shape());
    }
}
