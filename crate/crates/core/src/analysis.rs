//! Feature-space instruments: PCA maps, cosine similarity maps, k-means,
//! jitter diagnostics, resolution sweeps and transformation robustness.
//!
//! Every function reads one grid per [`FeatureStack`], picked by its
//! position `layer_pos` in `stack.grids`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::image::Image;
use crate::synth::{self, derive_seed};
use crate::tensor::Float;
use crate::vit::{ForwardOptions, ViTModel};

fn grid_at(stack: &FeatureStack, layer_pos: usize) -> Result<&[f32]> {
    stack.grids.get(layer_pos).map(|g| g.as_slice()).ok_or_else(|| {
        Error::Contract(format!(
            "layer position {layer_pos} out of range for {} ({} grids)",
            stack.image_id,
            stack.grids.len()
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Per-channel divisor applied after centring (all ones unless standardized).
    pub scale: Vec<f64>,
    /// `d'` orthonormal rows of length `C`.
    pub components: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
    /// Eigenvalues of the (scaled) covariance, all `C` of them, descending.
    pub eigenvalues: Vec<f64>,
    pub standardize: bool,
}

impl PcaModel {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, token: &[f32]) -> Vec<f64> {
        let z: Vec<f64> = token
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect();
        self.components
            .iter()
            .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn inverse_transform(&self, coords: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.channels()];
        for (row, &a) in self.components.iter().zip(coords) {
            for (zi, r) in z.iter_mut().zip(row) {
                *zi += a * r;
            }
        }
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Projects every token of one grid to `[N, d']`.
    pub fn project(&self, stack: &FeatureStack, layer_pos: usize) -> Result<Vec<Vec<f64>>> {
        if stack.channels != self.channels() {
            return Err(Error::dim(format!(
                "PCA fitted on {} channels, {} has {}",
                self.channels(),
                stack.image_id,
                stack.channels
            )));
        }
        let g = grid_at(stack, layer_pos)?;
        Ok(g.chunks(stack.channels).map(|t| self.transform(t)).collect())
    }
}

/// Fits a PCA on the tokens of every stack. `masks`, when given, holds one
/// token mask per stack and restricts the fit to `true` tokens.
pub fn pca_fit(stacks: &[FeatureStack], layer_pos: usize, d: usize, standardize: bool, masks: Option<&[Vec<bool>]>) -> Result<PcaModel> {
    let first = stacks.first().ok_or_else(|| Error::Contract("PCA needs at least one stack".into()))?;
    let c = first.channels;
    if d == 0 || d > c {
        return Err(Error::Contract(format!("PCA dimension {d} must be in 1..={c}")));
    }
    if let Some(m) = masks {
        if m.len() != stacks.len() {
            return Err(Error::Contract(format!("{} masks for {} stacks", m.len(), stacks.len())));
        }
    }
    let mut rows: Vec<&[f32]> = Vec::new();
    for (i, s) in stacks.iter().enumerate() {
        if s.channels != c {
            return Err(Error::dim(format!("{} has {} channels, expected {c}", s.image_id, s.channels)));
        }
        let g = grid_at(s, layer_pos)?;
        let mask = masks.map(|m| &m[i]);
        if let Some(m) = mask {
            if m.len() != s.n_tokens() {
                return Err(Error::dim(format!("mask for {} has {} entries, grid has {} tokens", s.image_id, m.len(), s.n_tokens())));
            }
        }
        for (t, tok) in g.chunks(c).enumerate() {
            if mask.map_or(true, |m| m[t]) {
                rows.push(tok);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Validation("PCA mask selects no tokens".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; c];
    for r in &rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut z = vec![0.0; c];
    for r in &rows {
        for (zi, (&v, m)) in z.iter_mut().zip(r.iter().zip(&mean)) {
            *zi = v as f64 - m;
        }
        for i in 0..c {
            for j in i..c {
                cov[(i, j)] += z[i] * z[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[(i, j)] /= n;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let mut scale = vec![1.0; c];
    if standardize {
        for (i, s) in scale.iter_mut().enumerate() {
            let sd = cov[(i, i)].sqrt();
            if sd > 0.0 {
                *s = sd;
            }
        }
        for i in 0..c {
            for j in 0..c {
                cov[(i, j)] /= scale[i] * scale[j];
            }
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite covariance in PCA".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let components: Vec<Vec<f64>> = order[..d]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: the largest-magnitude loading is positive.
            let mut best = 0;
            for (j, x) in v.iter().enumerate() {
                if x.abs() > v[best].abs() {
                    best = j;
                }
            }
            if v[best] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let explained = eigenvalues[..d]
        .iter()
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        scale,
        components,
        explained,
        eigenvalues,
        standardize,
    })
}

fn rgb_from_coords(grid: (usize, usize), coords: &[Vec<f64>], lo: &[f64; 3], hi: &[f64; 3]) -> Image {
    let n = grid.0 * grid.1;
    let mut data = vec![0.0f32; 3 * n];
    for (t, p) in coords.iter().enumerate() {
        for ch in 0..3.min(p.len()) {
            let span = hi[ch] - lo[ch];
            data[ch * n + t] = if span > 0.0 { ((p[ch] - lo[ch]) / span) as f32 } else { 0.5 };
        }
    }
    Image::new(3, grid.0, grid.1, data).expect("rgb layout")
}

fn ranges(coords: impl Iterator<Item = Vec<f64>>) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for ch in 0..3.min(p.len()) {
            lo[ch] = lo[ch].min(p[ch]);
            hi[ch] = hi[ch].max(p[ch]);
        }
    }
    (lo, hi)
}

/// First three components as an RGB image at token resolution, each
/// component min-max normalized over this image. Missing components are 0.
pub fn pca_rgb(stack: &FeatureStack, layer_pos: usize, model: &PcaModel) -> Result<Image> {
    let coords = model.project(stack, layer_pos)?;
    let (lo, hi) = ranges(coords.iter().cloned());
    Ok(rgb_from_coords(stack.grid, &coords, &lo, &hi))
}

/// Like [`pca_rgb`] for several images, normalized over their union so
/// colours are comparable across images.
pub fn pca_rgb_shared(stacks: &[FeatureStack], layer_pos: usize, model: &PcaModel) -> Result<Vec<Image>> {
    let all = stacks.iter().map(|s| model.project(s, layer_pos)).collect::<Result<Vec<_>>>()?;
    let (lo, hi) = ranges(all.iter().flatten().cloned());
    Ok(stacks
        .iter()
        .zip(&all)
        .map(|(s, c)| rgb_from_coords(s.grid, c, &lo, &hi))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub query: usize,
    pub grid: (usize, usize),
    pub values: Vec<f64>,
}

/// Cosine similarity of every token to token `query`. Zero-norm tokens
/// score 0; a zero-norm query is an error.
pub fn cosine_map(stack: &FeatureStack, layer_pos: usize, query: usize) -> Result<SimilarityMap> {
    let g = grid_at(stack, layer_pos)?;
    let c = stack.channels;
    if query >= stack.n_tokens() {
        return Err(Error::Contract(format!("query {query} outside {} tokens", stack.n_tokens())));
    }
    let q = &g[query * c..(query + 1) * c];
    let qn = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::Numeric(format!("query token {query} has zero norm")));
    }
    let values = g
        .chunks(c)
        .enumerate()
        .map(|(t, tok)| {
            if t == query {
                return 1.0;
            }
            let (mut dot, mut nn) = (0.0, 0.0);
            for (&a, &b) in tok.iter().zip(q) {
                dot += a as f64 * b as f64;
                nn += (a as f64).powi(2);
            }
            if nn == 0.0 {
                0.0
            } else {
                (dot / (nn.sqrt() * qn)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(SimilarityMap {
        query,
        grid: stack.grid,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub n_init: usize,
    pub standardize: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            n_init: 15,
            standardize: true,
            tol: 1e-6,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, in the space the
    /// clustering ran in (standardized if requested).
    pub inertia: f64,
    pub best_init: usize,
    pub init_inertias: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, tol: f64, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let dim = points[0].len();
    let k = centroids.len();
    let mut labels = vec![0; points.len()];
    for _ in 0..max_iter {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for j in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            moved = moved.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if moved < tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        let (j, d) = nearest(p, &centroids);
        *l = j;
        inertia += d;
    }
    (labels, centroids, inertia)
}

/// k-means++ seeded Lloyd iterations over `points`, best of `n_init` runs.
/// Ties in inertia go to the lowest init index.
pub fn kmeans_points(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig) -> Result<ClusterResult> {
    if k == 0 || k > points.len() {
        return Err(Error::Contract(format!("k = {k} must be in 1..={}", points.len())));
    }
    if cfg.n_init == 0 {
        return Err(Error::Contract("n_init must be positive".into()));
    }
    let mut pts = points.to_vec();
    if cfg.standardize {
        let dim = pts[0].len();
        let n = pts.len() as f64;
        for j in 0..dim {
            let mean = pts.iter().map(|p| p[j]).sum::<f64>() / n;
            let sd = (pts.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for p in pts.iter_mut() {
                p[j] = (p[j] - mean) / sd;
            }
        }
    }
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64, usize)> = None;
    let mut init_inertias = Vec::with_capacity(cfg.n_init);
    for init in 0..cfg.n_init {
        let mut rng = synth::rng(derive_seed(cfg.seed, &[init as u64]));
        let start = kmeans_pp(&pts, k, &mut rng);
        let (labels, centroids, inertia) = lloyd(&pts, start, cfg.tol, cfg.max_iter);
        init_inertias.push(inertia);
        if best.as_ref().map_or(true, |b| inertia < b.2) {
            best = Some((labels, centroids, inertia, init));
        }
    }
    let (labels, centroids, inertia, best_init) = best.expect("n_init > 0");
    Ok(ClusterResult {
        k,
        labels,
        inertia,
        best_init,
        init_inertias,
        centroids,
    })
}

pub fn kmeans(stack: &FeatureStack, layer_pos: usize, k: usize, cfg: &KMeansConfig) -> Result<ClusterResult> {
    let g = grid_at(stack, layer_pos)?;
    let points: Vec<Vec<f64>> = g.chunks(stack.channels).map(|t| t.iter().map(|&v| v as f64).collect()).collect();
    kmeans_points(&points, k, cfg)
}

/// Mean over channels of the across-token standard deviation.
pub fn token_std(grid: &[f32], channels: usize) -> f64 {
    let n = grid.len() / channels;
    let mut total = 0.0;
    for ch in 0..channels {
        let vals = grid[ch..].iter().step_by(channels).map(|&v| v as f64);
        let mean = vals.clone().sum::<f64>() / n as f64;
        total += (vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    total / channels as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub input: String,
    pub sigma: f64,
    pub seed: u64,
    pub token_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZeroInputReport {
    pub rows: Vec<DiagRow>,
    /// Final-layer features per row, in the same order.
    pub stacks: Vec<FeatureStack>,
}

pub const DIAG_SIGMAS: [f64; 4] = [0.0, 1e-4, 1e-3, 1e-2];

/// The three diagnostic inputs: all zeros, one bright pixel at the centre
/// of every patch, and seeded uniform noise.
pub fn diagnostic_inputs(size: usize, patch: usize, channels: usize) -> Vec<(String, Image)> {
    let zeros = Image::filled(channels, size, size, 0.0);
    let mut dots = zeros.clone();
    let n = size * size;
    for ch in 0..channels {
        for r in (patch / 2..size).step_by(patch) {
            for c in (patch / 2..size).step_by(patch) {
                dots.data[ch * n + r * size + c] = 1.0;
            }
        }
    }
    let noise = synth::noise_set(1, size, channels, 0x5eed).remove(0).1;
    vec![("zeros".into(), zeros), ("dots".into(), dots), ("noise".into(), noise)]
}

/// Runs the diagnostic inputs through `model` under ALiBi distance jitter
/// for every `(sigma, seed)` pair. `sigma = 0` runs without jitter.
pub fn zero_input_diagnostic<T: Float>(model: &ViTModel<T>, sigmas: &[f64], seeds: &[u64], size: usize) -> Result<ZeroInputReport> {
    let cfg = &model.config;
    let mut rows = Vec::new();
    let mut stacks = Vec::new();
    for (name, img) in diagnostic_inputs(size, cfg.patch_size, cfg.channels) {
        for &sigma in sigmas {
            for &seed in seeds {
                let opts = ForwardOptions {
                    collect: vec![cfg.layers],
                    jitter: (sigma > 0.0).then_some((sigma, seed)),
                };
                let id = format!("{name}-sigma{sigma:e}-seed{seed}");
                let stack = model.forward_features(&img, &id, &opts)?;
                rows.push(DiagRow {
                    input: name.clone(),
                    sigma,
                    seed,
                    token_std: token_std(stack.last(), stack.channels),
                });
                stacks.push(stack);
            }
        }
    }
    Ok(ZeroInputReport { rows, stacks })
}

/// Final-layer features of `image` resized to each square `size`.
pub fn resolution_sweep<T: Float>(model: &ViTModel<T>, image: &Image, id: &str, sizes: &[usize]) -> Result<Vec<FeatureStack>> {
    sizes
        .iter()
        .map(|&s| {
            let img = if (image.height, image.width) == (s, s) {
                image.clone()
            } else {
                image.resize_bilinear(s, s)?
            };
            model.forward_features(&img, &format!("{id}@{s}"), &ForwardOptions::default())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    FlipUd,
    /// Toroidal shift by whole patches `(rows, cols)`.
    Roll(isize, isize),
    Rot90,
}

impl Transform {
    pub fn name(&self) -> String {
        match self {
            Transform::Identity => "identity".into(),
            Transform::FlipUd => "flip_ud".into(),
            Transform::Roll(r, c) => format!("roll({r},{c})"),
            Transform::Rot90 => "rot90".into(),
        }
    }

    /// The default set: flip, a patch-aligned roll, and a quarter turn.
    pub fn standard() -> Vec<Transform> {
        vec![Transform::FlipUd, Transform::Roll(1, 2), Transform::Rot90]
    }

    fn apply_image(&self, img: &Image, patch: usize) -> Image {
        match *self {
            Transform::Identity => img.clone(),
            Transform::FlipUd => img.flip_ud(),
            Transform::Roll(r, c) => img.roll(r * patch as isize, c * patch as isize),
            Transform::Rot90 => img.rot90(),
        }
    }

    /// Maps a transformed-pixel mask back to the original frame.
    fn invert_image(&self, img: &Image, patch: usize) -> Image {
        match *self {
            Transform::Identity => img.clone(),
            Transform::FlipUd => img.flip_ud(),
            Transform::Roll(r, c) => img.roll(-r * patch as isize, -c * patch as isize),
            Transform::Rot90 => img.rot90().rot90().rot90(),
        }
    }

    fn invert_features(&self, f: &FeatureStack) -> FeatureStack {
        match *self {
            Transform::Identity => f.clone(),
            Transform::FlipUd => f.flip_ud(),
            Transform::Roll(r, c) => f.roll(-r, -c),
            Transform::Rot90 => f.rot270(),
        }
    }
}

/// Mean over tokens of `|f' - f| / |f|` on every stored grid.
pub fn relative_discrepancy(base: &FeatureStack, other: &FeatureStack) -> Result<f64> {
    if base.grid != other.grid || base.channels != other.channels || base.grids.len() != other.grids.len() {
        return Err(Error::dim("feature stacks have different layouts"));
    }
    let c = base.channels;
    let (mut total, mut count) = (0.0, 0usize);
    for (a, b) in base.grids.iter().zip(&other.grids) {
        for (ta, tb) in a.chunks(c).zip(b.chunks(c)) {
            let diff: f64 = ta.iter().zip(tb).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = ta.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            total += diff / norm.max(1e-12);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// A segmentation head for mIoU deltas: predicts per-pixel classes for an
/// image, scored against ground-truth masks.
pub trait MaskPredictor {
    fn predict(&self, image: &Image) -> Result<Vec<u8>>;
    fn miou(&self, pred: &[u8], truth: &[u8]) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceRow {
    pub transform: String,
    pub discrepancy: f64,
    pub miou_base: Option<f64>,
    pub miou_transformed: Option<f64>,
    pub miou_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub rows: Vec<EquivarianceRow>,
    /// Transforms not applicable to these inputs, with the reason.
    pub skipped: Vec<String>,
}

impl EquivarianceReport {
    pub fn get(&self, transform: Transform) -> Option<&EquivarianceRow> {
        let name = transform.name();
        self.rows.iter().find(|r| r.transform == name)
    }
}

fn mask_image(mask: &[u8], h: usize, w: usize) -> Image {
    Image::new(1, h, w, mask.iter().map(|&v| v as f32).collect()).expect("mask layout")
}

/// Transforms each image, extracts final features, undoes the transform on
/// the features and compares with the untransformed features. With a
/// `head` and ground truth, the same is done for predicted masks.
pub fn equivariance_report<T: Float>(
    model: &ViTModel<T>,
    images: &[(String, Image)],
    transforms: &[Transform],
    head: Option<(&dyn MaskPredictor, &[Vec<u8>])>,
) -> Result<EquivarianceReport> {
    if images.is_empty() {
        return Err(Error::Contract("equivariance report needs images".into()));
    }
    if let Some((_, truth)) = head {
        if truth.len() != images.len() {
            return Err(Error::Contract(format!("{} masks for {} images", truth.len(), images.len())));
        }
    }
    let patch = model.config.patch_size;
    let opts = ForwardOptions::default();
    let bases = images
        .iter()
        .map(|(id, img)| model.forward_features(img, id, &opts))
        .collect::<Result<Vec<_>>>()?;
    let base_preds = match head {
        Some((h, _)) => Some(images.iter().map(|(_, img)| h.predict(img)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let mut report = EquivarianceReport {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for &t in transforms {
        if t == Transform::Rot90 && images.iter().any(|(_, img)| img.height != img.width) {
            log::warn!("skipping rot90: inputs are not square");
            report.skipped.push("rot90: non-square input".into());
            continue;
        }
        let mut disc = 0.0;
        let (mut m_base, mut m_trans) = (0.0, 0.0);
        for (i, (id, img)) in images.iter().enumerate() {
            let moved = t.apply_image(img, patch);
            let f = model.forward_features(&moved, id, &opts)?;
            disc += relative_discrepancy(&bases[i], &t.invert_features(&f))?;
            if let (Some((h, truth)), Some(bp)) = (head, &base_preds) {
                let pred = h.predict(&moved)?;
                let back = t.invert_image(&mask_image(&pred, moved.height, moved.width), patch);
                let back: Vec<u8> = back.data.iter().map(|&v| v.round() as u8).collect();
                m_base += h.miou(&bp[i], &truth[i]);
                m_trans += h.miou(&back, &truth[i]);
            }
        }
        let n = images.len() as f64;
        let (miou_base, miou_transformed) = if head.is_some() {
            (Some(m_base / n), Some(m_trans / n))
        } else {
            (None, None)
        };
        report.rows.push(EquivarianceRow {
            transform: t.name(),
            discrepancy: disc / n,
            miou_base,
            miou_transformed,
            miou_delta: miou_base.zip(miou_transformed).map(|(b, t)| t - b),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pos_encoding::PeKind;
    use crate::vit::ViTConfig;

    fn stack_from(points: &[Vec<f32>], grid: (usize, usize)) -> FeatureStack {
        let c = points[0].len();
        FeatureStack::new("s", grid, c, vec![0], vec![points.concat()]).unwrap()
    }

    #[test]
    fn pca_on_a_line_explains_everything() {
        let pts: Vec<Vec<f32>> = (0..12).map(|i| vec![i as f32, 2.0 * i as f32 + 1.0, -0.5 * i as f32]).collect();
        let m = pca_fit(&[stack_from(&pts, (3, 4))], 0, 1, false, None).unwrap();
        assert!((m.explained[0] - 1.0).abs() < 1e-12, "{:?}", m.explained);
    }

    #[test]
    fn pca_reconstructs_d_points_exactly() {
        let pts = vec![vec![1.0f32, 0.0, 2.0, 5.0], vec![-3.0, 1.0, 0.5, 0.0], vec![0.0, 4.0, -1.0, 2.0]];
        let s = stack_from(&pts, (1, 3));
        let m = pca_fit(&[s], 0, 3, false, None).unwrap();
        for p in &pts {
            let back = m.inverse_transform(&m.transform(p));
            for (a, b) in back.iter().zip(p) {
                assert!((a - *b as f64).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_sign_convention_and_masks() {
        let pts: Vec<Vec<f32>> = (0..9).map(|i| vec![-(i as f32), 0.1 * (i % 2) as f32]).collect();
        let s = stack_from(&pts, (3, 3));
        let m = pca_fit(&[s.clone()], 0, 2, false, None).unwrap();
        for row in &m.components {
            let big = row.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
        let mask = vec![vec![true, true, false, false, false, false, false, false, false]];
        let mm = pca_fit(&[s.clone()], 0, 1, false, Some(&mask)).unwrap();
        assert!((mm.mean[0] + 0.5).abs() < 1e-12);
        let none = vec![vec![false; 9]];
        assert!(matches!(pca_fit(&[s], 0, 1, false, Some(&none)), Err(Error::Validation(_))));
    }

    #[test]
    fn shared_fit_uses_one_basis() {
        let a: Vec<Vec<f32>> = (0..4).map(|i| vec![i as f32, 1.0, (i * i) as f32]).collect();
        let b: Vec<Vec<f32>> = (0..4).map(|i| vec![1.0, i as f32, 2.0]).collect();
        let (sa, sb) = (stack_from(&a, (2, 2)), stack_from(&b, (2, 2)));
        let m = pca_fit(&[sa.clone(), sb.clone()], 0, 2, true, None).unwrap();
        let again = pca_fit(&[sa.clone(), sb.clone()], 0, 2, true, None).unwrap();
        assert_eq!(m, again);
        let imgs = pca_rgb_shared(&[sa.clone(), sb], 0, &m).unwrap();
        assert_eq!(imgs.len(), 2);
        let single = pca_rgb(&sa, 0, &m).unwrap();
        assert_eq!((single.channels, single.height, single.width), (3, 2, 2));
        assert!(single.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cosine_map_examples() {
        let pts = vec![vec![1.0f32, 0.0], vec![0.0, 2.0], vec![-3.0, 0.0], vec![1.0, 1.0]];
        let m = cosine_map(&stack_from(&pts, (2, 2)), 0, 0).unwrap();
        let want = [1.0, 0.0, -1.0, std::f64::consts::FRAC_1_SQRT_2];
        for (a, b) in m.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
        let same = vec![vec![0.3f32, -0.2]; 6];
        let m = cosine_map(&stack_from(&same, (2, 3)), 0, 4).unwrap();
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn kmeans_distinct_points_have_zero_inertia() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![5.0, 1.0], vec![-2.0, 7.0]];
        let many: Vec<Vec<f64>> = pts.iter().cycle().take(12).cloned().collect();
        let r = kmeans_points(&many, 3, &KMeansConfig::default()).unwrap();
        assert!(r.inertia < 1e-20);
        assert_eq!(r.labels[0], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[1]);
    }

    #[test]
    fn kmeans_separates_blobs_and_is_deterministic() {
        let mut rng = synth::rng(3);
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let off = if i < 100 { -10.0 } else { 10.0 };
                vec![off + rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, off * 0.5 + rng.random::<f64>() - 0.5]
            })
            .collect();
        let cfg = KMeansConfig { seed: 9, ..KMeansConfig::default() };
        let r = kmeans_points(&pts, 2, &cfg).unwrap();
        let a = r.labels[0];
        let agree = r.labels.iter().enumerate().filter(|(i, &l)| (l == a) == (*i < 100)).count();
        assert!(agree >= 198);
        assert_eq!(r, kmeans_points(&pts, 2, &cfg).unwrap());
        assert!(r.init_inertias.iter().all(|&v| r.inertia <= v));
    }

    fn small(pe: PeKind) -> ViTModel<f64> {
        let cfg = ViTConfig {
            dim: 16,
            heads: 2,
            layers: 2,
            pe,
            ..ViTConfig::default()
        };
        ViTModel::random(cfg, 11).unwrap()
    }

    #[test]
    fn zero_input_diagnostic_examples() {
        let m = small(PeKind::alibi());
        let r = zero_input_diagnostic(&m, &[0.0, 1e-2], &[1, 1], 32).unwrap();
        assert_eq!(r.rows.len(), 3 * 2 * 2);
        // Identical tokens attend to identical values, so a relative bias
        // (jittered or not) cannot create structure on zeros or the dot grid.
        for d in r.rows.iter().filter(|d| d.input != "noise") {
            assert!(d.token_std < 1e-6, "{d:?}");
        }
        let at = |input: &str, sigma: f64| r.rows.iter().position(|d| d.input == input && d.sigma == sigma).unwrap();
        assert_eq!(r.stacks[at("noise", 0.0)], r.stacks[at("noise", 0.0) + 1]);
        assert!(r.stacks[at("noise", 0.0)].max_abs_diff(&r.stacks[at("noise", 1e-2)]).unwrap() > 0.0);

        let mut learned = small(PeKind::Learned);
        learned.set_pos_embed(crate::pos_encoding::learned_pe_init::<f64>(8, 8, 16, 5)).unwrap();
        let r = zero_input_diagnostic(&learned, &[0.0], &[0], 32).unwrap();
        assert!(r.rows[0].token_std > 1e-3, "{:?}", r.rows[0]);
    }

    #[test]
    fn sweep_native_matches_forward() {
        let m = small(PeKind::Learned);
        let img = synth::texture(synth::TextureKind::Blobs, 64, 1, 2);
        let sweep = resolution_sweep(&m, &img, "x", &[64, 128]).unwrap();
        let direct = m.forward_features(&img, "x@64", &ForwardOptions::default()).unwrap();
        assert_eq!(sweep[0], direct);
        assert_eq!(sweep[1].grid, (16, 16));
    }

    #[test]
    fn equivariance_identity_and_roll() {
        let img = synth::texture(synth::TextureKind::Voronoi, 32, 1, 4);
        let imgs = vec![("v".to_string(), img)];
        let alibi = small(PeKind::alibi());
        let r = equivariance_report(&alibi, &imgs, &[Transform::Identity, Transform::Roll(1, 3)], None).unwrap();
        assert_eq!(r.rows[0].discrepancy, 0.0);
        assert!(r.rows[1].discrepancy < 1e-10, "{}", r.rows[1].discrepancy);
        let learned = small(PeKind::Learned);
        let mut learned = learned;
        let pe = crate::pos_encoding::learned_pe_init::<f64>(8, 8, 16, 3);
        learned.set_pos_embed(pe.map(|v| v * 50.0)).unwrap();
        let r = equivariance_report(&learned, &imgs, &[Transform::Rot90], None).unwrap();
        assert!(r.rows[0].discrepancy > 0.1, "{}", r.rows[0].discrepancy);
    }

    #[test]
    fn rot90_skipped_for_non_square() {
        let img = Image::gray_from_fn(16, 32, |r, c| ((r * 7 + c * 3) % 11) as f32 / 11.0);
        let r = equivariance_report(&small(PeKind::NoPe), &[("a".into(), img)], &[Transform::Rot90, Transform::Roll(1, 1)], None).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.skipped.len(), 1);
    }
}
