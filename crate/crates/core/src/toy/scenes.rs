//! Procedural shapes-on-backgrounds corpus.
//!
//! Every scene is one flat-coloured shape over a background drawn from a small
//! family of colours and patterns. Pixel values are multiples of 1/255 so a
//! scene survives 8-bit storage exactly.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mask::ObjectMask;
use crate::seed::stable_hash;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;

pub const SHAPE_NAMES: [&str; 8] =
    ["circle", "square", "triangle", "diamond", "cross", "ring", "star", "crescent"];

pub const NUM_CLASSES: usize = SHAPE_NAMES.len();

const COLORS: [(&str, [f64; 3]); 7] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.2]),
    ("purple", [0.55, 0.2, 0.7]),
    ("orange", [0.95, 0.55, 0.1]),
    ("gray", [0.5, 0.5, 0.5]),
];

const OBJECT_COLORS: [[f64; 3]; 8] = [
    [0.05, 0.05, 0.05],
    [0.95, 0.95, 0.95],
    [0.85, 0.15, 0.15],
    [0.15, 0.7, 0.2],
    [0.15, 0.25, 0.85],
    [0.9, 0.85, 0.2],
    [0.55, 0.2, 0.7],
    [0.95, 0.55, 0.1],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesScene {
    pub id: String,
    /// (3, H, W) in [0, 1].
    pub image: Tensor<f32>,
    pub class_label: usize,
    pub ground_truth_mask: ObjectMask,
    pub background_descriptor: String,
    /// Mean colour of the background, used by threshold segmenters.
    pub background_color: [f32; 3],
    pub caption: String,
}

impl ShapesScene {
    pub fn class_name(&self) -> &'static str {
        SHAPE_NAMES[self.class_label]
    }
}

pub fn caption_for(class_name: &str, descriptor: &str) -> String {
    alloc::format!("a picture of a {class_name} on a {descriptor} background")
}

/// Whether normalised offset (u, v) from the shape centre is inside the shape.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let rho = libm::sqrt(u * u + v * v);
    match class {
        0 => rho <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) / 1.8 * 0.95,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => (0.55..=1.0).contains(&rho),
        6 => {
            let theta = libm::atan2(v, u);
            let s = (libm::cos(5.0 * (theta + PI / 2.0)) + 1.0) / 2.0;
            rho <= 0.4 + 0.6 * libm::pow(s, 1.5)
        }
        7 => {
            let du = u - 0.45;
            rho <= 1.0 && libm::sqrt(du * du + v * v) > 0.8
        }
        _ => false,
    }
}

/// Bilinearly interpolated random grid, values in [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, grid: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..grid * grid).map(|_| rng.random::<f64>()).collect();
    let n = IMAGE_SIZE;
    let scale = (grid - 1) as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 * scale, x as f64 * scale);
            let (y0, x0) = ((fy as usize).min(grid - 2), (fx as usize).min(grid - 2));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |r: usize, c: usize| g[r * grid + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Nearest 8-bit level of a [0, 1] value.
pub fn to_u8(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Exact inverse of [`to_u8`] on its range.
pub fn from_u8(k: u8) -> f32 {
    (k as f64 / 255.0) as f32
}

fn quantize(v: f64) -> f32 {
    from_u8(to_u8(v))
}

struct Background {
    pixels: Vec<[f64; 3]>,
    descriptor: String,
    base: [f64; 3],
}

fn render_background(rng: &mut ChaCha8Rng) -> Background {
    let n = IMAGE_SIZE;
    let (cname, base) = COLORS[rng.random_range(0..COLORS.len())];
    let pattern = rng.random_range(0..6u32);
    let mut pixels = alloc::vec![base; n * n];
    let descriptor = match pattern {
        0 => {
            if cname == "gray" {
                String::from("plain")
            } else if rng.random_bool(0.5) {
                alloc::format!("vivid {cname}")
            } else {
                alloc::format!("plain {cname}")
            }
        }
        1 => {
            let orient = rng.random_range(0..3u32);
            let phase = rng.random_range(0..16usize);
            for (i, p) in pixels.iter_mut().enumerate() {
                let (y, x) = (i / n, i % n);
                let k = match orient {
                    0 => y,
                    1 => x,
                    _ => x + y,
                };
                if ((k + phase) / 8) % 2 == 1 {
                    *p = [base[0] * 0.5, base[1] * 0.5, base[2] * 0.5];
                }
            }
            alloc::format!("{cname} striped")
        }
        2 => {
            for (i, p) in pixels.iter_mut().enumerate() {
                let (y, x) = (i / n, i % n);
                if ((y / 8) + (x / 8)) % 2 == 1 {
                    *p = [0.5 * base[0] + 0.5, 0.5 * base[1] + 0.5, 0.5 * base[2] + 0.5];
                }
            }
            alloc::format!("{cname} checkered")
        }
        3 => {
            let noise = value_noise(rng, 9);
            for (p, v) in pixels.iter_mut().zip(noise) {
                let s = 0.45 + 0.75 * v;
                *p = [base[0] * s, base[1] * s, base[2] * s];
            }
            alloc::format!("{cname} textured")
        }
        4 => {
            let ch: Vec<Vec<f64>> = (0..3).map(|_| value_noise(rng, 5)).collect();
            for (i, p) in pixels.iter_mut().enumerate() {
                *p = [ch[0][i], ch[1][i], ch[2][i]];
            }
            String::from("colorful")
        }
        _ => {
            let ch: Vec<Vec<f64>> = (0..3).map(|_| value_noise(rng, 9)).collect();
            for (i, p) in pixels.iter_mut().enumerate() {
                *p = [ch[0][i], ch[1][i], ch[2][i]];
            }
            String::from("colorful textured")
        }
    };
    let base = if pattern >= 4 { [0.5, 0.5, 0.5] } else { base };
    Background { pixels, descriptor, base }
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    libm::sqrt((0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum())
}

/// Renders scene `index` of a split. Classes cycle so any prefix is balanced.
pub fn generate_scene(seed: u64, split: Split, index: usize) -> ShapesScene {
    let n = IMAGE_SIZE;
    let class_label = index % NUM_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
        &seed.to_le_bytes(),
        split.as_str().as_bytes(),
        &(index as u64).to_le_bytes(),
    ]));
    let bg = render_background(&mut rng);
    let mask = loop {
        let r = rng.random_range(10.0..26.0);
        let margin = r + 1.0;
        let cx = rng.random_range(margin..(n as f64 - margin));
        let cy = rng.random_range(margin..(n as f64 - margin));
        let m = ObjectMask::from_fn(n, n, |y, x| {
            inside(class_label, (x as f64 + 0.5 - cx) / r, (y as f64 + 0.5 - cy) / r)
        })
        .expect("dims");
        let cov = m.coverage();
        if (0.05..=0.60).contains(&cov) {
            break m;
        }
    };
    let mut object_color;
    loop {
        object_color = OBJECT_COLORS[rng.random_range(0..OBJECT_COLORS.len())];
        let dist = if bg.descriptor.starts_with("colorful") {
            // Multi-coloured backgrounds only take black or white objects.
            if object_color[0] == object_color[1] { 1.0 } else { 0.0 }
        } else {
            color_distance(object_color, bg.base)
        };
        if dist >= 0.5 {
            break;
        }
    }
    let mut data = alloc::vec![0f32; 3 * n * n];
    let mut bg_sum = [0f64; 3];
    let mut bg_count = 0usize;
    for i in 0..n * n {
        let px = if mask.bits()[i] { object_color } else { bg.pixels[i] };
        for c in 0..3 {
            data[c * n * n + i] = quantize(px[c]);
        }
        if !mask.bits()[i] {
            for c in 0..3 {
                bg_sum[c] += data[c * n * n + i] as f64;
            }
            bg_count += 1;
        }
    }
    let denom = bg_count.max(1) as f64;
    let background_color =
        [(bg_sum[0] / denom) as f32, (bg_sum[1] / denom) as f32, (bg_sum[2] / denom) as f32];
    let caption = caption_for(SHAPE_NAMES[class_label], &bg.descriptor);
    ShapesScene {
        id: alloc::format!("{}-{:05}", split.as_str(), index),
        image: Tensor::from_vec(&[3, n, n], data).expect("dims"),
        class_label,
        ground_truth_mask: mask,
        background_descriptor: bg.descriptor,
        background_color,
        caption,
    }
}

pub fn generate_shapes_dataset(n: usize, seed: u64, split: Split) -> Vec<ShapesScene> {
    (0..n).map(|i| generate_scene(seed, split, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_shapes_dataset(800, 3, Split::Train);
        let b = generate_shapes_dataset(800, 3, Split::Train);
        assert_eq!(a, b);
        let mut counts = [0usize; NUM_CLASSES];
        for s in &a {
            counts[s.class_label] += 1;
        }
        assert!(counts.iter().all(|c| *c == 100));
        let t = generate_scene(3, Split::Test, 0);
        assert_ne!(t.image, a[0].image);
    }

    #[test]
    fn coverage_invariant_and_quantisation() {
        for s in generate_shapes_dataset(1000, 11, Split::Test) {
            let cov = s.ground_truth_mask.coverage();
            assert!((0.05..=0.60).contains(&cov), "{} coverage {cov}", s.id);
            for v in s.image.data() {
                assert_eq!(from_u8(to_u8(*v as f64)), *v);
            }
        }
    }

    #[test]
    fn caption_template() {
        assert_eq!(caption_for("circle", "plain"), "a picture of a circle on a plain background");
        let s = generate_scene(0, Split::Train, 5);
        assert_eq!(s.caption, caption_for(s.class_name(), &s.background_descriptor));
    }
}
