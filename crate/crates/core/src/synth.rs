//! Seed derivation and procedural datasets: noise images, homogeneous
//! textures and a three-phase segmentation set with exact masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::filters;
use crate::image::Image;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a sub-task identified by `parts`, e.g. `(image id, repeat)`.
/// Depends only on its arguments, so serial and parallel runs agree.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit id for a string image id.
pub fn hash_id(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Noise,
    Voronoi,
    Blobs,
    Stripes,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Noise,
        TextureKind::Voronoi,
        TextureKind::Blobs,
        TextureKind::Stripes,
    ];
}

fn normalize01(v: &mut [f64]) {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.5 };
    }
}

/// Field of blurred white noise rescaled to `[0, 1]`.
fn smooth_field(size: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>()).collect();
    let mut f = filters::gaussian_blur(&raw, size, size, sigma);
    normalize01(&mut f);
    f
}

fn to_image(size: usize, channels: usize, v: &[f64]) -> Image {
    let plane: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    Image::new(channels, size, size, plane.repeat(channels)).expect("consistent size")
}

/// A homogeneous (statistically stationary) texture.
pub fn texture(kind: TextureKind, size: usize, channels: usize, seed: u64) -> Image {
    let mut rng = rng(seed);
    let n = size * size;
    let v: Vec<f64> = match kind {
        TextureKind::Noise => {
            let data = (0..channels * n).map(|_| rng.random::<f32>()).collect();
            return Image::new(channels, size, size, data).expect("consistent size");
        }
        TextureKind::Voronoi => {
            // Cells on the torus so the texture has no preferred location.
            let sites: Vec<(f64, f64, f64)> = (0..(n / 48).max(4))
                .map(|_| {
                    (
                        rng.random::<f64>() * size as f64,
                        rng.random::<f64>() * size as f64,
                        rng.random::<f64>(),
                    )
                })
                .collect();
            let s = size as f64;
            (0..n)
                .map(|i| {
                    let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
                    let mut best = (f64::INFINITY, 0.0);
                    for &(sy, sx, val) in &sites {
                        let dy = (y - sy).abs().min(s - (y - sy).abs());
                        let dx = (x - sx).abs().min(s - (x - sx).abs());
                        let d = dy * dy + dx * dx;
                        if d < best.0 {
                            best = (d, val);
                        }
                    }
                    best.1
                })
                .collect()
        }
        TextureKind::Blobs => {
            let sigma = rng.random_range(1.5..3.5);
            smooth_field(size, sigma, &mut rng)
                .into_iter()
                .map(|x| if x > 0.55 { 0.8 } else { 0.2 } + 0.1 * x)
                .collect()
        }
        TextureKind::Stripes => {
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let period = rng.random_range(4.0..12.0);
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let (sy, sx) = theta.sin_cos();
            (0..n)
                .map(|i| {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    let t = (x * sx + y * sy) * std::f64::consts::TAU / period + phase;
                    0.5 + 0.4 * t.sin() + 0.1 * rng.random::<f64>()
                })
                .collect()
        }
    };
    to_image(size, channels, &v)
}

/// `count` homogeneous images cycling through every texture kind.
pub fn homogeneous_set(count: usize, size: usize, channels: usize, seed: u64) -> Vec<(String, Image)> {
    (0..count)
        .map(|i| {
            let kind = TextureKind::ALL[i % TextureKind::ALL.len()];
            let s = derive_seed(seed, &[i as u64]);
            (format!("{kind:?}-{i:03}").to_lowercase(), texture(kind, size, channels, s))
        })
        .collect()
}

pub fn noise_set(count: usize, size: usize, channels: usize, seed: u64) -> Vec<(String, Image)> {
    (0..count)
        .map(|i| {
            let s = derive_seed(seed, &[i as u64]);
            (format!("noise-{i:03}"), texture(TextureKind::Noise, size, channels, s))
        })
        .collect()
}

/// One image of the segmentation benchmark with its ground-truth labels
/// (`1..=classes`, row-major).
#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    pub image: Image,
    pub mask: Vec<u8>,
}

pub const SEG_CLASSES: usize = 3;

/// Three-phase microstructure: a blurred noise field thresholded at its
/// tertiles gives the phases; each phase gets its own texture (smooth bright
/// matrix, grainy dark pores, mid-grey speckled "pore-back"), and every image
/// has its own exposure, contrast and noise level.
pub fn seg_sample(id: &str, size: usize, seed: u64) -> SegSample {
    let mut rng = rng(seed);
    let n = size * size;
    let sigma = rng.random_range(8.0..12.0);
    let field = smooth_field(size, sigma, &mut rng);
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let (t1, t2) = (sorted[n * 2 / 5], sorted[n * 7 / 10]);
    let mask: Vec<u8> = field
        .iter()
        .map(|&v| if v < t1 { 1 } else if v < t2 { 2 } else { 3 })
        .collect();

    let grain = smooth_field(size, 0.8, &mut rng);
    let speckle = smooth_field(size, 1.5, &mut rng);
    let gain = rng.random_range(0.7..1.1);
    let offset = rng.random_range(-0.1..0.1);
    let noise_sd = rng.random_range(0.03..0.08);
    let normal = Normal::new(0.0, noise_sd).expect("valid sd");
    let data: Vec<f32> = (0..n)
        .map(|i| {
            let base = match mask[i] {
                1 => 0.62 + 0.05 * (field[i] - 0.5),
                2 => 0.30 + 0.30 * (grain[i] - 0.5),
                _ => 0.46 + 0.25 * (speckle[i] - 0.5),
            };
            let v = gain * base + offset + normal.sample(&mut rng);
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    SegSample {
        id: id.to_string(),
        image: Image::new(1, size, size, data).expect("consistent size"),
        mask,
    }
}

pub fn seg_set(count: usize, size: usize, seed: u64, prefix: &str) -> Vec<SegSample> {
    (0..count)
        .map(|i| seg_sample(&format!("{prefix}-{i:03}"), size, derive_seed(seed, &[i as u64])))
        .collect()
}

/// Disjoint train and test sets of the segmentation benchmark for `seed`.
pub fn seg_benchmark(train: usize, test: usize, size: usize, seed: u64) -> (Vec<SegSample>, Vec<SegSample>) {
    (
        seg_set(train, size, derive_seed(seed, &[0]), "train"),
        seg_set(test, size, derive_seed(seed, &[1]), "test"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_repeat() {
        let a = derive_seed(7, &[1, 2]);
        assert_eq!(a, derive_seed(7, &[1, 2]));
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
    }

    #[test]
    fn textures_are_deterministic_and_in_range() {
        for kind in TextureKind::ALL {
            let a = texture(kind, 32, 1, 3);
            assert_eq!(a, texture(kind, 32, 1, 3));
            assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)), "{kind:?}");
        }
    }

    #[test]
    fn seg_sample_has_every_class() {
        let s = seg_sample("x", 64, 5);
        for c in 1..=SEG_CLASSES as u8 {
            assert!(s.mask.iter().any(|&m| m == c));
        }
    }
}
