//! Separable 2D filtering on single-channel `[h, w]` planes with half-sample
//! symmetric reflection at the borders (`... b a | a b c ... | c b ...`).

/// Maps any integer index into `0..n` by symmetric reflection.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalised Gaussian taps for `sigma`, truncated at `ceil(4 sigma)`.
/// `sigma == 0` yields the unit impulse.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Correlates every row with `taps` (odd length, centred).
pub fn filter_rows(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * row[reflect(x as isize + t as isize - r, w)];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Correlates every column with `taps`.
pub fn filter_cols(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, &k) in taps.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - r, h);
            let srow = &src[sy * w..(sy + 1) * w];
            let orow = &mut out[y * w..(y + 1) * w];
            for (o, &v) in orow.iter_mut().zip(srow) {
                *o += k * v;
            }
        }
    }
    out
}

pub fn separable(src: &[f64], h: usize, w: usize, row_taps: &[f64], col_taps: &[f64]) -> Vec<f64> {
    filter_cols(&filter_rows(src, h, w, row_taps), h, w, col_taps)
}

pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    separable(src, h, w, &k, &k)
}

/// Correlates with an arbitrary odd-sized square kernel (row-major).
pub fn correlate2d(src: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..size * size)
        .filter(|&i| kernel[i] != 0.0)
        .map(|i| ((i / size) as isize - r, (i % size) as isize - r, kernel[i]))
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for &(dy, dx, k) in &taps {
                acc += k * src[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
            }
            out[y * w + x] = acc;
        }
    }
    out
}
