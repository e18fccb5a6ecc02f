//! Minimal raster plots: reliability diagrams and accuracy bar charts.

use image::{Rgb, RgbImage};

use objectcompose_core::metrics::ReliabilityBins;

pub const PLOT_SIZE: u32 = 240;
/// Margin around the plotting area on every side.
pub const MARGIN: u32 = 20;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const BAR: Rgb<u8> = Rgb([66, 110, 200]);
const IDEAL: Rgb<u8> = Rgb([200, 60, 60]);

fn area() -> u32 {
    PLOT_SIZE - 2 * MARGIN
}

/// Bar height in pixels for a value in [0, 1].
pub fn bar_height(value: f64) -> u32 {
    (value.clamp(0.0, 1.0) * area() as f64).round() as u32
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, WHITE);
    let base = PLOT_SIZE - MARGIN;
    for x in MARGIN - 1..=PLOT_SIZE - MARGIN {
        img.put_pixel(x, base, AXIS);
    }
    for y in MARGIN..=base {
        img.put_pixel(MARGIN - 1, y, AXIS);
    }
    img
}

/// Fills `n` equal-width bars with the given heights in [0, 1]; one pixel of
/// white separates neighbours.
fn bars(img: &mut RgbImage, values: &[f64]) {
    let n = values.len().max(1) as u32;
    let w = area() / n;
    let base = PLOT_SIZE - MARGIN;
    for (i, v) in values.iter().enumerate() {
        let h = bar_height(*v);
        let x0 = MARGIN + i as u32 * w;
        for x in x0..x0 + w.saturating_sub(1) {
            for y in base - h..base {
                img.put_pixel(x, y, BAR);
            }
        }
    }
}

/// Bars of per-bin accuracy with the ideal diagonal drawn over them.
pub fn reliability_diagram(bins: &ReliabilityBins) -> RgbImage {
    let mut img = canvas();
    let heights: Vec<f64> = bins.bins.iter().map(|b| b.mean_accuracy).collect();
    bars(&mut img, &heights);
    let base = PLOT_SIZE - MARGIN;
    for k in 0..area() {
        let x = MARGIN + k;
        let y = base - 1 - k;
        if img.get_pixel(x, y) == &WHITE {
            img.put_pixel(x, y, IDEAL);
        }
    }
    img
}

/// Bar per entry, values are percentages.
pub fn accuracy_bars(percentages: &[f64]) -> RgbImage {
    let mut img = canvas();
    let v: Vec<f64> = percentages.iter().map(|p| p / 100.0).collect();
    bars(&mut img, &v);
    img
}

/// Heights of the bars in a plot, read back from its pixels.
pub fn measured_bar_heights(img: &RgbImage, n: usize) -> Vec<u32> {
    let w = area() / n as u32;
    let base = PLOT_SIZE - MARGIN;
    (0..n as u32)
        .map(|i| {
            let x = MARGIN + i * w;
            (1..=area()).take_while(|&k| img.get_pixel(x, base - k) == &BAR).count() as u32
        })
        .collect()
}
