//! Per-layer patch-token feature grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch-token features of one image at several layers. Each grid is
/// row-major `[h, w, channels]`; special (register) tokens are kept apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStack {
    pub image_id: String,
    pub grid: (usize, usize),
    pub channels: usize,
    /// Model layer index of each stored grid.
    pub layers: Vec<usize>,
    pub grids: Vec<Vec<f32>>,
    pub specials: Vec<Vec<f32>>,
}

impl FeatureStack {
    pub fn new(image_id: impl Into<String>, grid: (usize, usize), channels: usize, layers: Vec<usize>, grids: Vec<Vec<f32>>) -> Result<Self> {
        let n = grid.0 * grid.1 * channels;
        if layers.len() != grids.len() || grids.iter().any(|g| g.len() != n) {
            return Err(Error::dim(format!(
                "feature grids do not match {}x{}x{} over {} layers",
                grid.0,
                grid.1,
                channels,
                layers.len()
            )));
        }
        Ok(FeatureStack {
            image_id: image_id.into(),
            grid,
            channels,
            layers,
            grids,
            specials: Vec::new(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn n_layers(&self) -> usize {
        self.grids.len()
    }

    /// Grid of the last stored layer.
    pub fn last(&self) -> &[f32] {
        self.grids.last().map(|g| g.as_slice()).unwrap_or(&[])
    }

    pub fn token<'a>(&self, grid: &'a [f32], t: usize) -> &'a [f32] {
        &grid[t * self.channels..(t + 1) * self.channels]
    }

    /// The grid of model layer `layer`, if collected.
    pub fn layer(&self, layer: usize) -> Option<&[f32]> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.grids[i].as_slice())
    }

    /// Single-layer stack holding grid position `i`.
    pub fn select(&self, i: usize) -> FeatureStack {
        FeatureStack {
            image_id: self.image_id.clone(),
            grid: self.grid,
            channels: self.channels,
            layers: vec![self.layers[i]],
            grids: vec![self.grids[i].clone()],
            specials: self.specials.get(i).cloned().into_iter().collect(),
        }
    }

    fn remap(&self, grid: (usize, usize), src: impl Fn(usize, usize) -> (usize, usize)) -> FeatureStack {
        let c = self.channels;
        let w_in = self.grid.1;
        let grids = self
            .grids
            .iter()
            .map(|g| {
                let mut out = Vec::with_capacity(g.len());
                for r in 0..grid.0 {
                    for q in 0..grid.1 {
                        let (sr, sq) = src(r, q);
                        let t = sr * w_in + sq;
                        out.extend_from_slice(&g[t * c..(t + 1) * c]);
                    }
                }
                out
            })
            .collect();
        FeatureStack {
            grid,
            grids,
            ..self.clone()
        }
    }

    /// Toroidal token shift: output token `(r, c)` is input `(r - dr, c - dc)`.
    pub fn roll(&self, dr: isize, dc: isize) -> FeatureStack {
        let (h, w) = (self.grid.0 as isize, self.grid.1 as isize);
        self.remap(self.grid, |r, c| {
            (
                (r as isize - dr).rem_euclid(h) as usize,
                (c as isize - dc).rem_euclid(w) as usize,
            )
        })
    }

    pub fn flip_ud(&self) -> FeatureStack {
        let h = self.grid.0;
        self.remap(self.grid, |r, c| (h - 1 - r, c))
    }

    /// Counter-clockwise quarter turn of the token grid.
    pub fn rot90(&self) -> FeatureStack {
        let w = self.grid.1;
        self.remap((self.grid.1, self.grid.0), |r, c| (c, w - 1 - r))
    }

    /// Inverse of [`rot90`](Self::rot90).
    pub fn rot270(&self) -> FeatureStack {
        self.rot90().rot90().rot90()
    }

    pub fn max_abs_diff(&self, other: &FeatureStack) -> Result<f64> {
        if self.grid != other.grid || self.channels != other.channels || self.layers != other.layers {
            return Err(Error::dim("feature stacks have different layouts"));
        }
        Ok(self
            .grids
            .iter()
            .zip(&other.grids)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()))
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> FeatureStack {
        let grid: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32).collect();
        FeatureStack::new("a", (2, 3), 2, vec![0], vec![grid]).unwrap()
    }

    #[test]
    fn roll_and_rotation_round_trips() {
        let s = stack();
        assert_eq!(s.roll(1, 2).roll(-1, -2), s);
        assert_eq!(s.roll(2, 3), s);
        assert_eq!(s.rot90().rot270(), s);
        assert_eq!(s.rot90().grid, (3, 2));
        assert_eq!(s.flip_ud().flip_ud(), s);
    }

    #[test]
    fn roll_moves_tokens() {
        let s = stack();
        let r = s.roll(0, 1);
        // token (0,1) now holds what was token (0,0)
        assert_eq!(r.token(&r.grids[0], 1), s.token(&s.grids[0], 0));
    }

    #[test]
    fn mismatched_grids_rejected() {
        assert!(FeatureStack::new("a", (2, 2), 3, vec![0], vec![vec![0.0; 5]]).is_err());
    }
}
