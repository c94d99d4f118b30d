//! Small raster renderings for reports.

use dinolens::image::Image;

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale(img: &Image, factor: usize) -> Image {
    let f = factor.max(1);
    let (h, w) = (img.height * f, img.width * f);
    let n = img.height * img.width;
    let mut data = Vec::with_capacity(img.channels * h * w);
    for ch in 0..img.channels {
        for r in 0..h {
            for c in 0..w {
                data.push(img.data[ch * n + (r / f) * img.width + c / f]);
            }
        }
    }
    Image::new(img.channels, h, w, data).expect("upscaled layout")
}

/// Gray map of `values` (row-major `rows x cols`) with `lo` black and `hi`
/// white.
pub fn heatmap(values: &[f64], rows: usize, cols: usize, lo: f64, hi: f64) -> Image {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = values.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0) as f32).collect();
    Image::new(1, rows, cols, data).expect("heatmap layout")
}

/// Gray levels evenly spread over `0..k` cluster labels.
pub fn label_map(labels: &[usize], rows: usize, cols: usize, k: usize) -> Image {
    let top = k.saturating_sub(1).max(1) as f32;
    let data = labels.iter().map(|&l| l as f32 / top).collect();
    Image::new(1, rows, cols, data).expect("label layout")
}
