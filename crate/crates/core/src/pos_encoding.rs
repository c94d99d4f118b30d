//! Positional schemes: learned, sinusoidal, none, axial 2D RoPE and the
//! wrapped, normalised 2D ALiBi distance bias.
//!
//! The ALiBi bias for a token grid is `-m_h * D` where `D[i][j]` is the
//! Euclidean distance between tokens `i` and `j` on the grid, measured on a
//! torus when `wrap` is set and divided by the largest distance on that grid.
//! Under wrap every toroidal shift of the grid is an automorphism of `D`,
//! which is what makes a model using it shift-equivariant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;
use crate::tensor::{Float, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;
pub const SINUSOID_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeKind {
    Learned,
    Sinusoidal,
    #[serde(rename = "nope")]
    NoPe,
    Rope2d,
    Alibi2d {
        #[serde(default = "default_true")]
        wrap: bool,
        #[serde(default)]
        trainable_slopes: bool,
    },
}

fn default_true() -> bool {
    true
}

impl PeKind {
    pub fn alibi() -> Self {
        PeKind::Alibi2d {
            wrap: true,
            trainable_slopes: false,
        }
    }

    /// Whether the additive positional table is part of the model at all.
    pub fn uses_additive_table(&self) -> bool {
        matches!(self, PeKind::Learned | PeKind::Sinusoidal)
    }

    pub fn name(&self) -> &'static str {
        match self {
            PeKind::Learned => "learned",
            PeKind::Sinusoidal => "sinusoidal",
            PeKind::NoPe => "nope",
            PeKind::Rope2d => "rope2d",
            PeKind::Alibi2d { .. } => "alibi2d",
        }
    }
}

/// Per-head ALiBi slopes `m_h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerHeadSlopes {
    pub values: Vec<f64>,
    pub trainable: bool,
}

impl PerHeadSlopes {
    pub fn fixed(heads: usize) -> Self {
        PerHeadSlopes {
            values: vec![1.0; heads],
            trainable: false,
        }
    }
}

/// Normalised token-distance matrix of one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AlibiBias {
    h: usize,
    w: usize,
    wrap: bool,
    dist: Vec<f64>,
}

fn axis_delta(a: usize, b: usize, extent: usize, wrap: bool) -> usize {
    let d = a.abs_diff(b);
    if wrap {
        d.min(extent - d)
    } else {
        d
    }
}

impl AlibiBias {
    pub fn build(h: usize, w: usize, wrap: bool) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::dim(format!("cannot build ALiBi for a {h}x{w} grid")));
        }
        let n = h * w;
        // Largest per-axis separation, reached independently on each axis.
        let (mr, mc) = if wrap { (h / 2, w / 2) } else { (h - 1, w - 1) };
        let d_max = ((mr * mr + mc * mc) as f64).sqrt();
        let mut dist = vec![0.0; n * n];
        if n > 1 {
            for i in 0..n {
                let (ri, ci) = (i / w, i % w);
                for j in 0..n {
                    let (rj, cj) = (j / w, j % w);
                    let dr = axis_delta(ri, rj, h, wrap);
                    let dc = axis_delta(ci, cj, w, wrap);
                    dist[i * n + j] = ((dr * dr + dc * dc) as f64).sqrt() / d_max;
                }
            }
        }
        Ok(AlibiBias { h, w, wrap, dist })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn wrap(&self) -> bool {
        self.wrap
    }

    pub fn n_tokens(&self) -> usize {
        self.h * self.w
    }

    /// Row-major `[N, N]` normalised distances.
    pub fn dist(&self) -> &[f64] {
        &self.dist
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n_tokens() + j]
    }

    /// `-m * D`, the matrix added to one head's pre-softmax scores.
    pub fn logit_offset(&self, slope: f64) -> Vec<f64> {
        self.dist.iter().map(|&d| -slope * d).collect()
    }

    /// Embeds `D` into a `[S + N, S + N]` matrix whose first `S` rows and
    /// columns (special tokens) are zero.
    pub fn with_specials(dist: &[f64], n: usize, specials: usize) -> Vec<f64> {
        if specials == 0 {
            return dist.to_vec();
        }
        let t = n + specials;
        let mut out = vec![0.0; t * t];
        for i in 0..n {
            out[(specials + i) * t + specials..(specials + i) * t + t]
                .copy_from_slice(&dist[i * n..(i + 1) * n]);
        }
        out
    }
}

/// Independent `N(0, sigma²)` perturbations of `D`, one matrix per layer.
/// `sigma == 0` returns exact copies.
pub fn jitter_alibi(bias: &AlibiBias, sigma: f64, seed: u64, layers: usize) -> Result<Vec<Vec<f64>>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("jitter sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![bias.dist.clone(); layers]);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..layers)
        .map(|_| bias.dist.iter().map(|&d| d + normal.sample(&mut rng)).collect())
        .collect())
}

/// Axial sinusoidal table `[h*w, d]`: channels `0..d/2` encode the column,
/// channels `d/2..d` the row, each as interleaved `sin, cos` pairs on a
/// geometric wavelength ladder.
pub fn sinusoidal_pe(h: usize, w: usize, d: usize) -> Result<Tensor<f64>> {
    if h == 0 || w == 0 {
        return Err(Error::dim("sinusoidal table needs a non-empty grid"));
    }
    if d == 0 || d % 4 != 0 {
        return Err(Error::dim(format!(
            "axial sinusoidal encoding needs d divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let pairs = half / 2;
    let freq: Vec<f64> = (0..pairs)
        .map(|k| SINUSOID_BASE.powf(-(2.0 * k as f64) / half as f64))
        .collect();
    let mut out = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let row = &mut out[(r * w + c) * d..(r * w + c + 1) * d];
            for (k, &f) in freq.iter().enumerate() {
                row[2 * k] = (c as f64 * f).sin();
                row[2 * k + 1] = (c as f64 * f).cos();
                row[half + 2 * k] = (r as f64 * f).sin();
                row[half + 2 * k + 1] = (r as f64 * f).cos();
            }
        }
    }
    Tensor::new(&[h * w, d], out)
}

/// Learned table initialised `N(0, 0.02²)`.
pub fn learned_pe_init<T: Float>(h: usize, w: usize, d: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[h * w, d], 0.02, &mut rng)
}

/// Bilinear resampling of a `[h*w, d]` table to a new token grid.
pub fn interpolate_pe<T: Float>(pe: &Tensor<T>, from: (usize, usize), to: (usize, usize)) -> Result<Tensor<T>> {
    if pe.rank() != 2 || pe.shape()[0] != from.0 * from.1 {
        return Err(Error::dim(format!(
            "positional table of shape {:?} does not match grid {}x{}",
            pe.shape(),
            from.0,
            from.1
        )));
    }
    if from == to {
        return Ok(pe.clone());
    }
    let d = pe.shape()[1];
    let src: Vec<f64> = pe.data().iter().map(|v| v.as_f64()).collect();
    let out = interp::resize(&src, from.0, from.1, d, to.0, to.1)?;
    Tensor::new(&[to.0 * to.1, d], out.into_iter().map(T::of).collect())
}

/// Row-major `[to_h*to_w, from_h*from_w]` matrix applying the same bilinear
/// resampling as [`interpolate_pe`] to token rows.
pub fn interpolation_matrix(from: (usize, usize), to: (usize, usize)) -> Result<Vec<f64>> {
    if from.0 == 0 || from.1 == 0 || to.0 == 0 || to.1 == 0 {
        return Err(Error::dim("interpolation between empty grids"));
    }
    let (nf, nt) = (from.0 * from.1, to.0 * to.1);
    let mut m = vec![0.0; nt * nf];
    let axis = |p: usize, n_in: usize, n_out: usize| {
        let x = interp::source_coord(p, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    for r in 0..to.0 {
        let (y0, y1, fy) = axis(r, from.0, to.0);
        for c in 0..to.1 {
            let (x0, x1, fx) = axis(c, from.1, to.1);
            let row = &mut m[(r * to.1 + c) * nf..(r * to.1 + c + 1) * nf];
            row[y0 * from.1 + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * from.1 + x1] += (1.0 - fy) * fx;
            row[y1 * from.1 + x0] += fy * (1.0 - fx);
            row[y1 * from.1 + x1] += fy * fx;
        }
    }
    Ok(m)
}

/// Angle tables for axial 2D RoPE on a token grid, each `[h*w, dh/2]`.
/// The first `dh/4` channel pairs rotate with the row index, the rest with
/// the column index.
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTables {
    pub fn new(h: usize, w: usize, dh: usize) -> Result<Self> {
        if dh == 0 || dh % 4 != 0 {
            return Err(Error::dim(format!(
                "axial RoPE needs a head dimension divisible by 4, got {dh}"
            )));
        }
        let half = dh / 2;
        let per_axis = half / 2;
        let freq: Vec<f64> = (0..per_axis)
            .map(|k| ROPE_BASE.powf(-(2.0 * k as f64) / half as f64))
            .collect();
        let n = h * w;
        let mut cos = vec![0.0; n * half];
        let mut sin = vec![0.0; n * half];
        for t in 0..n {
            let (r, c) = ((t / w) as f64, (t % w) as f64);
            for p in 0..half {
                let angle = if p < per_axis {
                    r * freq[p]
                } else {
                    c * freq[p - per_axis]
                };
                cos[t * half + p] = angle.cos();
                sin[t * half + p] = angle.sin();
            }
        }
        Ok(RopeTables { cos, sin })
    }

    /// Prepends `specials` unrotated rows.
    pub fn with_specials(&self, specials: usize, dh: usize) -> RopeTables {
        let half = dh / 2;
        let mut cos = vec![1.0; specials * half];
        let mut sin = vec![0.0; specials * half];
        cos.extend_from_slice(&self.cos);
        sin.extend_from_slice(&self.sin);
        RopeTables { cos, sin }
    }
}

/// Applies axial RoPE to `[heads, h*w, dh]` queries or keys.
pub fn rope_rotate<T: Float>(x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != grid.0 * grid.1 {
        return Err(Error::dim(format!(
            "rope input {:?} does not match grid {}x{}",
            shape, grid.0, grid.1
        )));
    }
    let dh = shape[2];
    let tables = RopeTables::new(grid.0, grid.1, dh)?;
    let tape = crate::tensor::Tape::new();
    let cos: Vec<T> = tables.cos.iter().map(|&v| T::of(v)).collect();
    let sin: Vec<T> = tables.sin.iter().map(|&v| T::of(v)).collect();
    Ok(tape.constant(x).rope(&cos, &sin)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Pair-loop oracle written independently of `AlibiBias::build`: it takes
    /// the maximum over all pairs instead of using the per-axis closed form.
    fn oracle(h: usize, w: usize, wrap: bool) -> Vec<f64> {
        let n = h * w;
        let mut raw = vec![0.0; n * n];
        let mut max: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (mut dr, mut dc) = (
                    (i / w) as f64 - (j / w) as f64,
                    (i % w) as f64 - (j % w) as f64,
                );
                dr = dr.abs();
                dc = dc.abs();
                if wrap {
                    dr = dr.min(h as f64 - dr);
                    dc = dc.min(w as f64 - dc);
                }
                raw[i * n + j] = (dr * dr + dc * dc).sqrt();
                max = max.max(raw[i * n + j]);
            }
        }
        if max > 0.0 {
            raw.iter_mut().for_each(|v| *v /= max);
        }
        raw
    }

    #[test]
    fn single_token_is_zero() {
        assert_eq!(AlibiBias::build(1, 1, true).unwrap().dist(), &[0.0]);
    }

    #[test]
    fn zero_grid_is_dimension_error() {
        assert!(matches!(AlibiBias::build(0, 3, true), Err(Error::Dimension(_))));
    }

    #[test]
    fn two_by_two_wrap() {
        let b = AlibiBias::build(2, 2, true).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.get(0, 1) - s).abs() < 1e-12);
        assert!((b.get(0, 2) - s).abs() < 1e-12);
        assert!((b.get(0, 3) - 1.0).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(b.get(i, i), 0.0);
        }
    }

    #[test]
    fn three_by_three_wrap_neighbours_are_equidistant() {
        let b = AlibiBias::build(3, 3, true).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.get(0, 1) - s).abs() < 1e-12);
        assert!((b.get(0, 2) - s).abs() < 1e-12);
        let max = b.dist().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn matches_pair_loop_oracle() {
        for h in 1..=8 {
            for w in 1..=8 {
                for wrap in [true, false] {
                    let b = AlibiBias::build(h, w, wrap).unwrap();
                    let o = oracle(h, w, wrap);
                    for (x, y) in b.dist().iter().zip(&o) {
                        assert!((x - y).abs() < 1e-12, "{h}x{w} wrap={wrap}");
                    }
                }
            }
        }
    }

    #[test]
    fn wrap_is_toroidally_invariant_and_plain_is_not() {
        let (h, w) = (5, 6);
        let n = h * w;
        let shift = |t: usize, dr: usize, dc: usize| ((t / w + dr) % h) * w + (t % w + dc) % w;
        let wrapped = AlibiBias::build(h, w, true).unwrap();
        let plain = AlibiBias::build(h, w, false).unwrap();
        let mut plain_differs = false;
        for (dr, dc) in [(1, 0), (0, 2), (3, 5)] {
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = (shift(i, dr, dc), shift(j, dr, dc));
                    assert_eq!(wrapped.get(si, sj), wrapped.get(i, j));
                    plain_differs |= plain.get(si, sj) != plain.get(i, j);
                }
            }
        }
        assert!(plain_differs);
    }

    #[test]
    fn logit_offset_examples() {
        let b = AlibiBias::build(2, 2, true).unwrap();
        assert!(b.logit_offset(0.0).iter().all(|&v| v == 0.0));
        let row: Vec<f64> = b.logit_offset(1.0)[..4].to_vec();
        for (g, e) in row.iter().zip([0.0, -0.70711, -0.70711, -1.0]) {
            assert!((g - e).abs() < 1e-5);
        }
        let attn = Tensor::<f64>::new(&[4], row).unwrap().softmax_rows().unwrap();
        for (g, e) in attn.data().iter().zip([0.42481, 0.20946, 0.20946, 0.15628]) {
            assert!((g - e).abs() < 1e-5);
        }
    }

    #[test]
    fn specials_get_zero_offsets() {
        let b = AlibiBias::build(2, 2, true).unwrap();
        let full = AlibiBias::with_specials(b.dist(), 4, 1);
        assert_eq!(full.len(), 25);
        assert!(full[..5].iter().all(|&v| v == 0.0));
        assert!((0..5).all(|i| full[i * 5] == 0.0));
        assert_eq!(full[6 + 3], b.get(0, 3));
    }

    #[test]
    fn jitter_examples() {
        let b = AlibiBias::build(2, 2, true).unwrap();
        let same = jitter_alibi(&b, 0.0, 7, 3).unwrap();
        assert!(same.iter().all(|d| d == b.dist()));

        let j1 = jitter_alibi(&b, 0.1, 1, 1).unwrap();
        let j2 = jitter_alibi(&b, 0.1, 2, 1).unwrap();
        let diff = j1[0].iter().zip(&j2[0]).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);

        // 625 layers x 16 entries = 10^4 noise draws; their mean should lie
        // within 3 standard errors of zero.
        let sigma = 0.05;
        let many = jitter_alibi(&b, sigma, 3, 625).unwrap();
        let mut total = 0.0;
        for layer in &many {
            for (v, d) in layer.iter().zip(b.dist()) {
                total += v - d;
            }
        }
        let mean = total / 10_000.0;
        assert!(mean.abs() < 3.0 * sigma / 100.0, "mean deviation {mean}");
        assert!(jitter_alibi(&b, -1.0, 0, 1).is_err());
    }

    #[test]
    fn sinusoidal_examples() {
        let pe = sinusoidal_pe(32, 32, 16).unwrap();
        assert_eq!(pe.data()[0], 0.0);
        let d = 16;
        let n = 32 * 32;
        let rows: Vec<&[f64]> = pe.data().chunks(d).collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let gap: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min_gap = min_gap.min(gap);
            }
        }
        assert!(min_gap > 1e-6, "closest pair of encodings: {min_gap}");
        // depends only on position: a sub-grid agrees with the large grid
        let small = sinusoidal_pe(4, 32, 16).unwrap();
        assert_eq!(small.data(), &pe.data()[..4 * 32 * 16]);
        assert!(sinusoidal_pe(2, 2, 6).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let pe = learned_pe_init::<f64>(3, 4, 8, 5);
        assert_eq!(interpolate_pe(&pe, (3, 4), (3, 4)).unwrap(), pe);

        let constant = Tensor::<f64>::full(&[6, 2], 0.7);
        let up = interpolate_pe(&constant, (2, 3), (5, 7)).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let t = Tensor::<f64>::new(&[4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = interpolate_pe(&t, (2, 2), (3, 3)).unwrap();
        assert!((up.data()[4] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_matrix_agrees_with_resampling() {
        let pe = learned_pe_init::<f64>(3, 5, 4, 2);
        let direct = interpolate_pe(&pe, (3, 5), (7, 4)).unwrap();
        let m = Tensor::new(&[28, 15], interpolation_matrix((3, 5), (7, 4)).unwrap()).unwrap();
        let via = m.matmul(&pe).unwrap();
        assert!(direct.max_abs_diff(&via).unwrap() < 1e-12);
    }

    #[test]
    fn learned_init_statistics() {
        let pe = learned_pe_init::<f64>(16, 16, 64, 1);
        let n = pe.numel() as f64;
        let mean = pe.data().iter().sum::<f64>() / n;
        let var = pe.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.02).abs() < 1e-3);
    }

    #[test]
    fn rope_zero_in_zero_out_and_norm_preserving() {
        let zeros = Tensor::<f64>::zeros(&[2, 6, 8]);
        assert!(rope_rotate(&zeros, (2, 3)).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 6, 8], 1.0, &mut rng);
        let y = rope_rotate(&x, (2, 3)).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_offset() {
        let (w, dh) = (12, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
        // place q at column a and k at column b on a 1 x w line
        let score = |a: usize, b: usize| {
            let mut qs = vec![0.0; w * dh];
            let mut ks = vec![0.0; w * dh];
            qs[a * dh..(a + 1) * dh].copy_from_slice(&q);
            ks[b * dh..(b + 1) * dh].copy_from_slice(&k);
            let qr = rope_rotate(&Tensor::new(&[1, w, dh], qs).unwrap(), (1, w)).unwrap();
            let kr = rope_rotate(&Tensor::new(&[1, w, dh], ks).unwrap(), (1, w)).unwrap();
            let qa = &qr.data()[a * dh..(a + 1) * dh];
            let kb = &kr.data()[b * dh..(b + 1) * dh];
            qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>()
        };
        for (a, b) in [(0, 2), (1, 5), (4, 4), (7, 2)] {
            assert!((score(a, b) - score(a + 3, b + 3)).abs() < 1e-10);
        }
    }
}
