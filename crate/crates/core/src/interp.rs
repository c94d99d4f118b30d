//! Bilinear resampling of channel-last grids.
//!
//! Uses the half-pixel convention: output cell `p` of an axis resized from
//! `n_in` to `n_out` samples the source at `(p + 0.5) * n_in / n_out - 0.5`,
//! clamped to the valid range. Same-size resampling is therefore the identity.

use crate::error::{Error, Result};

/// Source coordinate of output cell `p`.
pub fn source_coord(p: usize, n_in: usize, n_out: usize) -> f64 {
    (p as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Samples `grid` (`[h, w, c]`, row-major) at continuous coordinates,
/// writing `c` values into `out`. Coordinates are clamped to the grid.
pub fn sample(grid: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, out: &mut [f64]) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |r: usize, q: usize, k: usize| grid[(r * w + q) * c + k];
    for (k, o) in out.iter_mut().enumerate().take(c) {
        let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x1, k) * fx;
        let bot = at(y1, x0, k) * (1.0 - fx) + at(y1, x1, k) * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
}

/// Resizes a `[h, w, c]` grid to `[nh, nw, c]`.
pub fn resize(grid: &[f64], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || nh == 0 || nw == 0 || c == 0 {
        return Err(Error::dim(format!(
            "cannot resize a {h}x{w}x{c} grid to {nh}x{nw}"
        )));
    }
    if grid.len() != h * w * c {
        return Err(Error::dim(format!(
            "grid holds {} values, expected {}x{}x{}",
            grid.len(),
            h,
            w,
            c
        )));
    }
    if (h, w) == (nh, nw) {
        return Ok(grid.to_vec());
    }
    let mut out = vec![0.0; nh * nw * c];
    for r in 0..nh {
        let y = source_coord(r, h, nh);
        for q in 0..nw {
            let x = source_coord(q, w, nw);
            let base = (r * nw + q) * c;
            sample(grid, h, w, c, y, x, &mut out[base..base + c]);
        }
    }
    Ok(out)
}
