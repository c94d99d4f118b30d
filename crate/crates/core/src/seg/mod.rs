//! Trainable pixel segmentation: classical filter banks, PCA-reduced ViT
//! features, a boosted-tree classifier and scribble-round benchmarks.

mod bench;
mod gbt;

pub use bench::{build_bank, fit_segmenter, predict_map, scribble_rounds_bench, BenchConfig, BenchResult, Segmenter};
pub use gbt::{Gbt, GbtParams};

use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::pca_fit;
use crate::error::{Error, Result};
use crate::filters::{gaussian_blur, reflect, separable};
use crate::image::Image;
use crate::interp;
use crate::synth::{self, derive_seed};
use crate::vit::{ForwardOptions, ViTModel};

pub const BLUR_SIGMAS: [f64; 6] = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0];
pub const MEMBRANE_LEN: usize = 17;
pub const MEMBRANE_ORIENTATIONS: usize = 12;
pub const DEEP_DIMS: usize = 9;

/// Per-pixel features, row-major `[height * width, names.len()]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    pub data: Vec<f32>,
}

impl FeatureBank {
    fn from_planes(image_id: &str, height: usize, width: usize, planes: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = height * width;
        let f = planes.len();
        let mut data = vec![0.0f32; n * f];
        for (j, (name, p)) in planes.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("feature {name} of {image_id} is not finite")));
            }
            for (i, &v) in p.iter().enumerate() {
                data[i * f + j] = v as f32;
            }
        }
        Ok(FeatureBank {
            image_id: image_id.to_string(),
            height,
            width,
            names: planes.into_iter().map(|(n, _)| n).collect(),
            data,
        })
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        let f = self.n_features();
        &self.data[i * f..(i + 1) * f]
    }

    /// One feature as a `[height, width]` plane.
    pub fn plane(&self, name: &str) -> Option<Vec<f32>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.data.iter().skip(j).step_by(self.n_features()).copied().collect())
    }

    /// Appends the channels of `other`, which must cover the same pixels.
    pub fn concat(&self, other: &FeatureBank) -> Result<FeatureBank> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(format!(
                "banks of {} ({}x{}) and {} ({}x{}) differ in size",
                self.image_id, self.height, self.width, other.image_id, other.height, other.width
            )));
        }
        if let Some(dup) = other.names.iter().find(|n| self.names.contains(n)) {
            return Err(Error::Validation(format!("duplicate feature name {dup}")));
        }
        let (fa, fb) = (self.n_features(), other.n_features());
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for i in 0..self.n_pixels() {
            data.extend_from_slice(&self.data[i * fa..(i + 1) * fa]);
            data.extend_from_slice(&other.data[i * fb..(i + 1) * fb]);
        }
        Ok(FeatureBank {
            image_id: self.image_id.clone(),
            height: self.height,
            width: self.width,
            names: self.names.iter().chain(&other.names).cloned().collect(),
            data,
        })
    }
}

fn sobel_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let gx = separable(p, h, w, &[-1.0, 0.0, 1.0], &[1.0, 2.0, 1.0]);
    let gy = separable(p, h, w, &[1.0, 2.0, 1.0], &[-1.0, 0.0, 1.0]);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

/// Second derivatives by central differences: `(xx, xy, yy)`.
fn hessian(p: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xx = separable(p, h, w, &[1.0, -2.0, 1.0], &[1.0]);
    let yy = separable(p, h, w, &[1.0], &[1.0, -2.0, 1.0]);
    let xy = separable(p, h, w, &[-0.5, 0.0, 0.5], &[-0.5, 0.0, 0.5]);
    (xx, xy, yy)
}

/// Pixel offsets of a centred line of `len` pixels at angle `theta`.
fn line_offsets(len: usize, theta: f64) -> Vec<(isize, isize)> {
    let r = (len / 2) as isize;
    let mut taps: Vec<(isize, isize)> = (-r..=r)
        .map(|t| {
            let t = t as f64;
            ((t * theta.sin()).round() as isize, (t * theta.cos()).round() as isize)
        })
        .collect();
    taps.sort_unstable();
    taps.dedup();
    taps
}

/// Mean along rotated line kernels, aggregated over orientations into
/// `(mean, max, min, std)` planes.
fn membrane_projections(p: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let n = h * w;
    let responses: Vec<Vec<f64>> = (0..MEMBRANE_ORIENTATIONS)
        .map(|o| {
            let theta = o as f64 * std::f64::consts::PI / MEMBRANE_ORIENTATIONS as f64;
            let taps = line_offsets(MEMBRANE_LEN, theta);
            let norm = 1.0 / taps.len() as f64;
            let mut out = vec![0.0; n];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for &(dy, dx) in &taps {
                        acc += p[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
                    }
                    out[y * w + x] = acc * norm;
                }
            }
            out
        })
        .collect();
    let k = MEMBRANE_ORIENTATIONS as f64;
    let mut agg = [vec![0.0; n], vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n], vec![0.0; n]];
    for r in &responses {
        for i in 0..n {
            agg[0][i] += r[i] / k;
            agg[1][i] = agg[1][i].max(r[i]);
            agg[2][i] = agg[2][i].min(r[i]);
        }
    }
    for r in &responses {
        for i in 0..n {
            agg[3][i] += (r[i] - agg[0][i]).powi(2) / k;
        }
    }
    agg[3].iter_mut().for_each(|v| *v = v.sqrt());
    agg
}

/// Classical multiscale bank on the grayscale image: for every blur scale
/// the blur, Sobel magnitude, Hessian entries and eigenvalues; all pairwise
/// differences of Gaussians; and membrane projections of the raw image.
pub fn classical_bank(image: &Image, image_id: &str) -> Result<FeatureBank> {
    let gray = image.to_gray();
    let (h, w) = (gray.height, gray.width);
    let src: Vec<f64> = gray.data.iter().map(|&v| v as f64).collect();
    let blurs: Vec<Vec<f64>> = BLUR_SIGMAS.iter().map(|&s| gaussian_blur(&src, h, w, s)).collect();
    let mut planes = Vec::new();
    for (&s, b) in BLUR_SIGMAS.iter().zip(&blurs) {
        let (xx, xy, yy) = hessian(b, h, w);
        let (mut l1, mut l2) = (vec![0.0; h * w], vec![0.0; h * w]);
        for i in 0..h * w {
            let mid = 0.5 * (xx[i] + yy[i]);
            let rad = (0.25 * (xx[i] - yy[i]).powi(2) + xy[i] * xy[i]).sqrt();
            l1[i] = mid + rad;
            l2[i] = mid - rad;
        }
        planes.push((format!("gauss_s{s}"), b.clone()));
        planes.push((format!("sobel_s{s}"), sobel_magnitude(b, h, w)));
        planes.push((format!("hess_xx_s{s}"), xx));
        planes.push((format!("hess_xy_s{s}"), xy));
        planes.push((format!("hess_yy_s{s}"), yy));
        planes.push((format!("hess_l1_s{s}"), l1));
        planes.push((format!("hess_l2_s{s}"), l2));
    }
    for a in 0..BLUR_SIGMAS.len() {
        for b in a + 1..BLUR_SIGMAS.len() {
            let dog = blurs[b].iter().zip(&blurs[a]).map(|(x, y)| x - y).collect();
            planes.push((format!("dog_s{}_s{}", BLUR_SIGMAS[a], BLUR_SIGMAS[b]), dog));
        }
    }
    let [mean, max, min, std] = membrane_projections(&src, h, w);
    for (name, p) in [("mean", mean), ("max", max), ("min", min), ("std", std)] {
        planes.push((format!("membrane_{name}"), p));
    }
    FeatureBank::from_planes(image_id, h, w, planes)
}

/// Final-layer ViT features reduced to `dims` by a per-image standardized
/// PCA and bilinearly upsampled to the pixel grid. Channels are named
/// `{prefix}_pca{i}`.
pub fn deep_bank(model: &ViTModel<f32>, image: &Image, image_id: &str, dims: usize, prefix: &str) -> Result<FeatureBank> {
    let stack = model.forward_features(image, image_id, &ForwardOptions::default())?;
    let pca = pca_fit(std::slice::from_ref(&stack), 0, dims, true, None)?;
    let coords: Vec<f64> = pca.project(&stack, 0)?.into_iter().flatten().collect();
    let (th, tw) = stack.grid;
    let up = interp::resize(&coords, th, tw, dims, image.height, image.width)?;
    let n = image.height * image.width;
    let planes = (0..dims)
        .map(|k| (format!("{prefix}_pca{k}"), (0..n).map(|i| up[i * dims + k]).collect()))
        .collect();
    FeatureBank::from_planes(image_id, image.height, image.width, planes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    pub value: f64,
    pub per_class: Vec<f64>,
    /// Classes absent from both prediction and truth, scored 1.
    pub absent: Vec<u8>,
}

/// Mean IoU over classes `1..=classes`.
pub fn miou_detailed(pred: &[u8], truth: &[u8], classes: usize) -> Result<Miou> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
    }
    let mut inter = vec![0usize; classes + 1];
    let mut union = vec![0usize; classes + 1];
    for (&p, &t) in pred.iter().zip(truth) {
        for k in 1..=classes as u8 {
            let (a, b) = (p == k, t == k);
            if a && b {
                inter[k as usize] += 1;
            }
            if a || b {
                union[k as usize] += 1;
            }
        }
    }
    let mut absent = Vec::new();
    let per_class: Vec<f64> = (1..=classes)
        .map(|k| {
            if union[k] == 0 {
                absent.push(k as u8);
                1.0
            } else {
                inter[k] as f64 / union[k] as f64
            }
        })
        .collect();
    Ok(Miou {
        value: per_class.iter().sum::<f64>() / classes as f64,
        per_class,
        absent,
    })
}

pub fn miou(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    Ok(miou_detailed(pred, truth, classes)?.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scribble {
    pub round: usize,
    pub class: u8,
    pub pixels: Vec<usize>,
}

/// Sparse labels for one image: `0` is unlabeled, `1..=K` a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScribbleSet {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub round: usize,
    pub provenance: String,
    pub scribbles: Vec<Scribble>,
}

impl ScribbleSet {
    pub fn labeled(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, &l)| (i, l))
    }
}

/// Random walk of up to `len` distinct pixels inside `truth == class`,
/// moving between 8-neighbours. Returns an empty walk if the class is absent.
fn random_walk(truth: &[u8], h: usize, w: usize, class: u8, len: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let members: Vec<usize> = (0..h * w).filter(|&i| truth[i] == class).collect();
    let Some(&start) = members.choose(rng) else {
        return Vec::new();
    };
    let mut path = vec![start];
    let mut cur = start;
    for _ in 0..len * 10 {
        if path.len() >= len {
            break;
        }
        let (y, x) = ((cur / w) as isize, (cur % w) as isize);
        let mut inside = Vec::new();
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (ny, nx) = (y + dy, x + dx);
                if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if truth[j] == class {
                    inside.push(j);
                }
            }
        }
        let fresh: Vec<usize> = inside.iter().copied().filter(|j| !path.contains(j)).collect();
        let next = if let Some(&j) = fresh.choose(rng) {
            path.push(j);
            j
        } else if let Some(&j) = inside.choose(rng) {
            j
        } else {
            break;
        };
        cur = next;
    }
    path
}

/// Accumulated scribbles after `round` rounds: each round adds one walk of
/// `len` pixels per class present in `truth`, always inside that class.
pub fn synth_scribbles(image_id: &str, truth: &[u8], height: usize, width: usize, classes: usize, round: usize, len: usize, seed: u64) -> Result<ScribbleSet> {
    if truth.len() != height * width {
        return Err(Error::dim(format!("truth for {image_id} has {} pixels, expected {}", truth.len(), height * width)));
    }
    let mut labels = vec![0u8; truth.len()];
    let mut scribbles = Vec::new();
    for r in 1..=round {
        for class in 1..=classes as u8 {
            let mut rng = synth::rng(derive_seed(seed, &[synth::hash_id(image_id), r as u64, class as u64]));
            let pixels = random_walk(truth, height, width, class, len, &mut rng);
            if pixels.is_empty() {
                continue;
            }
            for &p in &pixels {
                labels[p] = class;
            }
            scribbles.push(Scribble { round: r, class, pixels });
        }
    }
    Ok(ScribbleSet {
        image_id: image_id.to_string(),
        height,
        width,
        labels,
        round,
        provenance: format!("generated: random walk, {len} px, seed {seed}"),
        scribbles,
    })
}

/// Reads an 8-bit label image; pixel values are class ids.
pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn save_labels(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| Error::dim(format!("{} labels for a {height}x{width} image", labels.len())))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// RGB rendering of a label map over the grayscale image.
pub fn overlay(image: &Image, labels: &[u8], alpha: f32) -> Image {
    const PALETTE: [[f32; 3]; 6] = [
        [0.0, 0.0, 0.0],
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.2, 0.4, 0.95],
        [0.95, 0.8, 0.2],
        [0.7, 0.3, 0.8],
    ];
    let gray = image.to_gray();
    let n = gray.height * gray.width;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        let g = gray.data[i];
        let l = labels[i] as usize;
        for ch in 0..3 {
            data[ch * n + i] = if l == 0 {
                g
            } else {
                (1.0 - alpha) * g + alpha * PALETTE[(l - 1) % (PALETTE.len() - 1) + 1][ch]
            };
        }
    }
    Image::new(3, gray.height, gray.width, data).expect("rgb layout")
}
