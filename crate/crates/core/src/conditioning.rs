//! Object-to-background conditioning: masks and captions from pluggable
//! providers, combined into a prompt and mask per source image.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::error::{invalid, CoreError, Result};
use crate::mask::ObjectMask;
use crate::prompt::{render_prompt, PromptCategory, PromptTemplate};
use crate::tensor::Tensor;
use crate::toy::scenes::{caption_for, ShapesScene, SHAPE_NAMES};

/// An image to be edited, (3, H, W) in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pub id: String,
    pub pixels: Tensor<f32>,
}

impl SourceImage {
    pub fn new(id: &str, pixels: Tensor<f32>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return invalid(alloc::format!("source image must be (3, H, W), got {s:?}"));
        }
        if !pixels.all_finite() {
            return invalid(alloc::format!("source image `{id}` has non-finite pixels"));
        }
        Ok(Self { id: id.to_string(), pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Produces the object mask of an image given its class name.
pub trait MaskProvider: Send + Sync {
    fn mask(&self, image: &SourceImage, class_name: &str) -> Result<ObjectMask>;
}

/// Produces a caption describing an image.
pub trait CaptionProvider: Send + Sync {
    fn caption(&self, image: &SourceImage) -> Result<String>;
}

impl<T: MaskProvider + ?Sized> MaskProvider for Box<T> {
    fn mask(&self, image: &SourceImage, class_name: &str) -> Result<ObjectMask> {
        (**self).mask(image, class_name)
    }
}

impl<T: CaptionProvider + ?Sized> CaptionProvider for Box<T> {
    fn caption(&self, image: &SourceImage) -> Result<String> {
        (**self).caption(image)
    }
}

/// Prompt and pre-dilation mask for one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub prompt_text: String,
    pub mask: ObjectMask,
    pub source_image_id: String,
    pub class_label: usize,
    pub class_name: String,
    /// Caption of the source, kept so other prompt variants can be derived.
    pub caption: String,
}

impl ConditioningBundle {
    /// The same bundle prompted with `template`: captions pass through, class
    /// templates take the class name and the rest use their default fill.
    pub fn with_template(&self, template: &PromptTemplate) -> Result<Self> {
        let sub = match template.category {
            PromptCategory::Caption => Some(self.caption.as_str()),
            PromptCategory::ClassLabel => Some(self.class_name.as_str()),
            _ => None,
        };
        let prompt_text = render_prompt(template, sub)?;
        if prompt_text.trim().is_empty() {
            return invalid(alloc::format!("variant `{}` rendered an empty prompt", template.variant_name));
        }
        Ok(Self { prompt_text, ..self.clone() })
    }
}

/// Builds the bundle for `image`, prompting with the provider caption.
pub fn build_conditioning(
    image: &SourceImage,
    class_label: usize,
    class_name: &str,
    mask_provider: &dyn MaskProvider,
    caption_provider: &dyn CaptionProvider,
) -> Result<ConditioningBundle> {
    let mask = mask_provider.mask(image, class_name)?;
    if mask.height() != image.height() || mask.width() != image.width() {
        return invalid(alloc::format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        ));
    }
    let mask = mask.require_separable()?;
    let caption = caption_provider.caption(image).map_err(|e| match e {
        CoreError::Provider(m) => CoreError::Provider(m),
        other => CoreError::Provider(alloc::format!("caption provider failed on `{}`: {other}", image.id)),
    })?;
    if caption.trim().is_empty() {
        return Err(CoreError::Provider(alloc::format!("empty caption for `{}`", image.id)));
    }
    Ok(ConditioningBundle {
        prompt_text: caption.clone(),
        mask,
        source_image_id: image.id.clone(),
        class_label,
        class_name: class_name.to_string(),
        caption,
    })
}

/// Returns stored ground-truth masks by image id.
#[derive(Clone, Debug, Default)]
pub struct OracleMaskProvider {
    masks: BTreeMap<String, ObjectMask>,
}

impl OracleMaskProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, mask: ObjectMask) {
        self.masks.insert(id.to_string(), mask);
    }

    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a ShapesScene>) -> Self {
        let mut p = Self::new();
        for s in scenes {
            p.insert(&s.id, s.ground_truth_mask.clone());
        }
        p
    }
}

impl MaskProvider for OracleMaskProvider {
    fn mask(&self, image: &SourceImage, _class_name: &str) -> Result<ObjectMask> {
        self.masks
            .get(&image.id)
            .cloned()
            .ok_or_else(|| CoreError::Provider(alloc::format!("no stored mask for `{}`", image.id)))
    }
}

/// Captions from scene metadata: "a picture of a {class} on a {descriptor} background".
#[derive(Clone, Debug, Default)]
pub struct TemplateCaptionProvider {
    scenes: BTreeMap<String, (String, String)>,
}

impl TemplateCaptionProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, class_name: &str, descriptor: &str) {
        self.scenes.insert(id.to_string(), (class_name.to_string(), descriptor.to_string()));
    }

    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a ShapesScene>) -> Self {
        let mut p = Self::new();
        for s in scenes {
            p.insert(&s.id, SHAPE_NAMES[s.class_label], &s.background_descriptor);
        }
        p
    }
}

impl CaptionProvider for TemplateCaptionProvider {
    fn caption(&self, image: &SourceImage) -> Result<String> {
        let (class, descriptor) = self
            .scenes
            .get(&image.id)
            .ok_or_else(|| CoreError::Provider(alloc::format!("no metadata for `{}`", image.id)))?;
        Ok(caption_for(class, descriptor))
    }
}

/// Foreground = RGB distance from the background colour strictly above the threshold.
///
/// The background colour comes from a per-image table, falling back to the
/// mean of the border pixels.
#[derive(Clone, Debug)]
pub struct ThresholdMaskProvider {
    pub threshold: f32,
    backgrounds: BTreeMap<String, [f32; 3]>,
}

impl Default for ThresholdMaskProvider {
    fn default() -> Self {
        Self::new(0.25)
    }
}

impl ThresholdMaskProvider {
    pub fn new(threshold: f32) -> Self {
        Self { threshold, backgrounds: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: &str, color: [f32; 3]) {
        self.backgrounds.insert(id.to_string(), color);
    }

    pub fn from_scenes<'a>(threshold: f32, scenes: impl IntoIterator<Item = &'a ShapesScene>) -> Self {
        let mut p = Self::new(threshold);
        for s in scenes {
            p.insert(&s.id, s.background_color);
        }
        p
    }

    fn border_mean(image: &SourceImage) -> [f32; 3] {
        let (h, w) = (image.height(), image.width());
        let d = image.pixels.data();
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for r in 0..h {
            for c in 0..w {
                if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                    for (ch, s) in sum.iter_mut().enumerate() {
                        *s += d[ch * h * w + r * w + c] as f64;
                    }
                    n += 1;
                }
            }
        }
        sum.map(|s| (s / n as f64) as f32)
    }
}

impl MaskProvider for ThresholdMaskProvider {
    fn mask(&self, image: &SourceImage, _class_name: &str) -> Result<ObjectMask> {
        let bg = self.backgrounds.get(&image.id).copied().unwrap_or_else(|| Self::border_mean(image));
        let (h, w) = (image.height(), image.width());
        let d = image.pixels.data();
        let t2 = self.threshold * self.threshold;
        ObjectMask::from_fn(h, w, |r, c| {
            let dist2: f32 = (0..3)
                .map(|ch| {
                    let v = d[ch * h * w + r * w + c] - bg[ch];
                    v * v
                })
                .sum();
            dist2 > t2
        })
    }
}
