//! Linear probes from patch features onto ramp targets, scored by holdout R².

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::synth::{self, derive_seed};

/// Ridge strength used when plain least squares is underdetermined.
pub const AUTO_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampKind {
    LeftRight,
    UpDown,
    Diagonal,
    Radial,
    XyJoint,
    RandomNoise,
}

impl RampKind {
    pub const ALL: [RampKind; 6] = [
        RampKind::LeftRight,
        RampKind::UpDown,
        RampKind::Diagonal,
        RampKind::Radial,
        RampKind::XyJoint,
        RampKind::RandomNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RampKind::LeftRight => "left_right",
            RampKind::UpDown => "up_down",
            RampKind::Diagonal => "diagonal",
            RampKind::Radial => "radial",
            RampKind::XyJoint => "xy_joint",
            RampKind::RandomNoise => "random_noise",
        }
    }
}

/// Per-token targets, row-major `[n_tokens, columns]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RampTarget {
    pub kind: RampKind,
    pub grid: (usize, usize),
    pub columns: usize,
    pub values: Vec<f64>,
}

impl RampTarget {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(self.columns).copied().collect()
    }
}

pub fn make_ramp(kind: RampKind, h: usize, w: usize, seed: u64) -> Result<RampTarget> {
    if h == 0 || w == 0 {
        return Err(Error::dim("ramp on an empty grid"));
    }
    let deterministic = kind != RampKind::RandomNoise;
    let degenerate = match kind {
        RampKind::LeftRight => w < 2,
        RampKind::UpDown => h < 2,
        RampKind::XyJoint => w < 2 || h < 2,
        _ => h * w < 2,
    };
    if deterministic && degenerate {
        return Err(Error::Validation(format!(
            "{} ramp on a {h}x{w} grid has no variance",
            kind.name()
        )));
    }
    let n = h * w;
    let col = |j: usize| j as f64 / (w - 1) as f64;
    let row = |i: usize| i as f64 / (h - 1) as f64;
    let (columns, values) = match kind {
        RampKind::LeftRight => (1, (0..n).map(|t| col(t % w)).collect()),
        RampKind::UpDown => (1, (0..n).map(|t| row(t / w)).collect()),
        RampKind::Diagonal => (
            1,
            (0..n)
                .map(|t| (t / w + t % w) as f64 / ((h - 1) + (w - 1)) as f64)
                .collect(),
        ),
        RampKind::Radial => {
            let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
            let dist = |t: usize| ((t / w) as f64 - cy).hypot((t % w) as f64 - cx);
            let max = cy.hypot(cx);
            (1, (0..n).map(|t| dist(t) / max).collect())
        }
        RampKind::XyJoint => (2, (0..n).flat_map(|t| [col(t % w), row(t / w)]).collect()),
        RampKind::RandomNoise => {
            let mut rng = synth::rng(seed);
            (1, (0..n).map(|_| rng.random::<f64>()).collect())
        }
    };
    Ok(RampTarget {
        kind,
        grid: (h, w),
        columns,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Grid,
    GridHoldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub sample_frac: f64,
    pub repeats: usize,
    pub strategy: Strategy,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            sample_frac: 0.025,
            repeats: 10,
            strategy: Strategy::Random,
            ridge: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_frac > 0.0 && self.sample_frac < 1.0) {
            return Err(Error::Validation(format!(
                "sample_frac must lie in (0, 1), got {}",
                self.sample_frac
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Validation("repeats must be at least 1".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Validation("ridge must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_train(&self, n_tokens: usize) -> usize {
        ((self.sample_frac * n_tokens as f64).ceil() as usize).clamp(1, n_tokens.saturating_sub(1).max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Evenly spaced positions `floor((i + 0.5) * n / k)`.
fn lattice_axis(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| ((2 * i + 1) * n) / (2 * k)).collect()
}

pub fn sample_split(grid: (usize, usize), cfg: &ProbeConfig, seed: u64) -> Result<Split> {
    cfg.validate()?;
    let (h, w) = grid;
    let n = h * w;
    if n < 2 {
        return Err(Error::Validation("cannot split fewer than two tokens".into()));
    }
    let k = cfg.n_train(n);
    let mut rng = synth::rng(seed);
    let mut in_train = vec![false; n];
    match cfg.strategy {
        Strategy::Random => {
            for t in index::sample(&mut rng, n, k) {
                in_train[t] = true;
            }
        }
        Strategy::Grid | Strategy::GridHoldout => {
            let block = if cfg.strategy == Strategy::GridHoldout {
                let (bh, bw) = (h.div_ceil(3), w.div_ceil(3));
                let top = rng.random_range(0..=h - bh);
                let left = rng.random_range(0..=w - bw);
                Some((top, left, bh, bw))
            } else {
                None
            };
            let inside = |r: usize, c: usize| {
                block.is_some_and(|(t, l, bh, bw)| r >= t && r < t + bh && c >= l && c < l + bw)
            };
            // grow the lattice until enough points fall outside the block
            let aspect = h as f64 / w as f64;
            let mut want = k;
            loop {
                let gr = ((want as f64 * aspect).sqrt().round() as usize).clamp(1, h);
                let gc = want.div_ceil(gr).clamp(1, w);
                let mut count = 0;
                in_train.iter_mut().for_each(|v| *v = false);
                for &r in &lattice_axis(h, gr) {
                    for &c in &lattice_axis(w, gc) {
                        if !inside(r, c) {
                            in_train[r * w + c] = true;
                            count += 1;
                        }
                    }
                }
                if count >= k || (gr == h && gc == w) {
                    break;
                }
                want += 1;
            }
        }
    }
    let train: Vec<usize> = (0..n).filter(|&t| in_train[t]).collect();
    let holdout: Vec<usize> = (0..n).filter(|&t| !in_train[t]).collect();
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::Validation(format!(
            "split of a {h}x{w} grid left an empty side"
        )));
    }
    Ok(Split { train, holdout })
}

/// Least-squares fit with an unpenalised intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    /// `[channels + 1, targets]`; the last row is the intercept.
    pub weights: DMatrix<f64>,
    pub lambda: f64,
    pub auto_ridge: bool,
}

impl LinearFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.weights.nrows() - 1;
        let mut out = x * self.weights.rows(0, c);
        for mut row in out.row_iter_mut() {
            row += self.weights.row(c);
        }
        out
    }
}

/// Minimises `|Xw + b - y|² + λ|w|²` through centred normal equations in
/// fp64. Plain least squares that is underdetermined or numerically
/// singular falls back to `λ = 1e-6` and sets `auto_ridge`.
pub fn fit_linear(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<LinearFit> {
    let (n, c) = x.shape();
    if y.nrows() != n || n == 0 {
        return Err(Error::dim(format!(
            "probe design has {n} rows but targets have {}",
            y.nrows()
        )));
    }
    let xm = x.row_mean();
    let ym = y.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &xm;
    }
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= &ym;
    }
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * &yc;
    let solve = |lam: f64| -> Option<DMatrix<f64>> {
        let mut a = gram.clone();
        for i in 0..c {
            a[(i, i)] += lam;
        }
        let chol = a.cholesky()?;
        let l = chol.l();
        let diag: Vec<f64> = (0..c).map(|i| l[(i, i)] * l[(i, i)]).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if c > 0 && (max == 0.0 || min / max < 1e-13) {
            return None;
        }
        Some(chol.solve(&rhs))
    };
    let (w, lam, auto) = match (lambda > 0.0, n > c) {
        (true, _) => (solve(lambda), lambda, false),
        (false, true) => match solve(0.0) {
            Some(w) => (Some(w), 0.0, false),
            None => (solve(AUTO_RIDGE), AUTO_RIDGE, true),
        },
        (false, false) => (solve(AUTO_RIDGE), AUTO_RIDGE, true),
    };
    let w = match w {
        Some(w) => w,
        // Zero-variance design: every slope is zero and the intercept
        // carries the mean.
        None if gram.iter().all(|&v| v == 0.0) => DMatrix::zeros(c, y.ncols()),
        None => {
            return Err(Error::Numeric(format!(
                "normal equations singular even with ridge {lam}"
            )))
        }
    };
    let intercept = &ym - &xm * &w;
    let mut weights = DMatrix::zeros(c + 1, y.ncols());
    weights.rows_mut(0, c).copy_from(&w);
    weights.row_mut(c).copy_from(&intercept);
    Ok(LinearFit {
        weights,
        lambda: lam,
        auto_ridge: auto,
    })
}

/// `1 - SS_res / SS_tot`, with `SS_tot` about the mean of `truth`.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::dim("r2 needs equal-length non-empty inputs"));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Numeric("target has zero variance on the scored tokens".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn gather(grid: &[f32], channels: usize, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| grid[rows[i] * channels + cols[j]] as f64)
}

fn gather_target(t: &RampTarget, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), t.columns, |i, k| t.values[rows[i] * t.columns + k])
}

/// Holdout R² per target column of one fit on `cols`.
fn score_split(grid: &[f32], channels: usize, cols: &[usize], target: &RampTarget, split: &Split, ridge: f64) -> Result<(Vec<f64>, bool)> {
    let xt = gather(grid, channels, &split.train, cols);
    let yt = gather_target(target, &split.train);
    let fit = fit_linear(&xt, &yt, ridge)?;
    let xh = gather(grid, channels, &split.holdout, cols);
    let pred = fit.predict(&xh);
    let mut out = Vec::with_capacity(target.columns);
    for k in 0..target.columns {
        let truth: Vec<f64> = split.holdout.iter().map(|&t| target.values[t * target.columns + k]).collect();
        let p: Vec<f64> = pred.column(k).iter().copied().collect();
        out.push(r2(&p, &truth)?);
    }
    Ok((out, fit.auto_ridge))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Holdout R² of one image's grid, averaged over repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageProbe {
    pub per_channel: Vec<f64>,
    /// Mean over target columns of the full-stack holdout R².
    pub full: f64,
    /// Per target column full-stack holdout R².
    pub full_columns: Vec<f64>,
    pub repeat_full: Vec<f64>,
    pub auto_ridge: bool,
}

/// Probes one layer grid (`[n, channels]`) of one image. `image_key`
/// selects the per-image split seeds.
pub fn probe_grid(
    grid: &[f32],
    grid_shape: (usize, usize),
    channels: usize,
    target: &RampTarget,
    cfg: &ProbeConfig,
    image_key: u64,
    per_channel: bool,
) -> Result<ImageProbe> {
    cfg.validate()?;
    if target.grid != grid_shape || grid.len() != grid_shape.0 * grid_shape.1 * channels {
        return Err(Error::dim(format!(
            "target grid {:?} does not match features on {:?}",
            target.grid, grid_shape
        )));
    }
    let all: Vec<usize> = (0..channels).collect();
    let mut chan = vec![0.0; if per_channel { channels } else { 0 }];
    let mut cols_acc = vec![0.0; target.columns];
    let mut repeat_full = Vec::with_capacity(cfg.repeats);
    let mut auto = false;
    for rep in 0..cfg.repeats {
        let split = sample_split(grid_shape, cfg, derive_seed(cfg.seed, &[image_key, rep as u64]))?;
        let (cols, a) = score_split(grid, channels, &all, target, &split, cfg.ridge)?;
        auto |= a;
        for (acc, v) in cols_acc.iter_mut().zip(&cols) {
            *acc += v;
        }
        repeat_full.push(mean(&cols));
        for (c, acc) in chan.iter_mut().enumerate() {
            let (v, _) = score_split(grid, channels, &[c], target, &split, cfg.ridge)?;
            *acc += mean(&v);
        }
    }
    let r = cfg.repeats as f64;
    let full_columns: Vec<f64> = cols_acc.iter().map(|v| v / r).collect();
    Ok(ImageProbe {
        per_channel: chan.iter().map(|v| v / r).collect(),
        full: mean(&full_columns),
        full_columns,
        repeat_full,
        auto_ridge: auto,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub ramp: RampKind,
    pub layer: usize,
    pub image_ids: Vec<String>,
    pub per_channel_r2: Vec<f64>,
    pub per_channel_std: Vec<f64>,
    pub full_stack_r2: f64,
    pub full_stack_std: f64,
    pub per_image_full: Vec<f64>,
    pub auto_ridge: bool,
}

fn image_key(stack: &FeatureStack, i: usize) -> u64 {
    derive_seed(synth::hash_id(&stack.image_id), &[i as u64])
}

/// Per-channel and full-stack probes of layer position `layer_pos` of every
/// stack; repeats are averaged within an image, then images are averaged.
pub fn probe_stacks(stacks: &[FeatureStack], layer_pos: usize, ramp: RampKind, cfg: &ProbeConfig, per_channel: bool) -> Result<ProbeReport> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Contract("probe needs at least one feature stack".into()))?;
    let c = first.channels;
    let mut chans: Vec<Vec<f64>> = Vec::new();
    let mut fulls = Vec::new();
    let mut auto = false;
    let mut ids = Vec::new();
    for (i, s) in stacks.iter().enumerate() {
        if s.channels != c {
            return Err(Error::dim("stacks with different channel counts"));
        }
        let grid = s
            .grids
            .get(layer_pos)
            .ok_or_else(|| Error::Contract(format!("stack {} has no layer position {layer_pos}", s.image_id)))?;
        let target = make_ramp(ramp, s.grid.0, s.grid.1, derive_seed(cfg.seed, &[image_key(s, i), 0xA11]))?;
        let p = probe_grid(grid, s.grid, c, &target, cfg, image_key(s, i), per_channel)?;
        auto |= p.auto_ridge;
        fulls.push(p.full);
        chans.push(p.per_channel);
        ids.push(s.image_id.clone());
    }
    let (per_channel_r2, per_channel_std) = if per_channel {
        (0..c)
            .map(|k| {
                let v: Vec<f64> = chans.iter().map(|ch| ch[k]).collect();
                (mean(&v), std(&v))
            })
            .unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ProbeReport {
        ramp,
        layer: first.layers[layer_pos],
        image_ids: ids,
        per_channel_r2,
        per_channel_std,
        full_stack_r2: mean(&fulls),
        full_stack_std: std(&fulls),
        per_image_full: fulls,
        auto_ridge: auto,
    })
}

/// Mean of the two holdout R² values of one joint regression onto the
/// normalised `(x, y)` token coordinates, averaged over repeats and images.
pub fn joint_xy_score(stacks: &[FeatureStack], layer_pos: usize, cfg: &ProbeConfig) -> Result<f64> {
    Ok(probe_stacks(stacks, layer_pos, RampKind::XyJoint, cfg, false)?.full_stack_r2)
}

/// `[layers, channels]` matrix of per-channel holdout R².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub model_id: String,
    pub ramp: RampKind,
    pub layers: Vec<usize>,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Fingerprint {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(layer position, channel, value)` of the largest entry.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let (i, v) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        (i / self.channels, i % self.channels, v)
    }
}

pub fn fingerprint(model_id: &str, stacks: &[FeatureStack], ramp: RampKind, cfg: &ProbeConfig) -> Result<Fingerprint> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Contract("fingerprint needs at least one feature stack".into()))?;
    let mut values = Vec::with_capacity(first.n_layers() * first.channels);
    for pos in 0..first.n_layers() {
        values.extend(probe_stacks(stacks, pos, ramp, cfg, true)?.per_channel_r2);
    }
    Ok(Fingerprint {
        model_id: model_id.to_string(),
        ramp,
        layers: first.layers.clone(),
        channels: first.channels,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_examples() {
        let lr = make_ramp(RampKind::LeftRight, 1, 4, 0).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (g, w) in lr.values.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let rad = make_ramp(RampKind::Radial, 3, 3, 0).unwrap();
        assert_eq!(rad.values[4], 0.0);
        assert!((rad.values[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((rad.values[0] - 1.0).abs() < 1e-12);
        let dg = make_ramp(RampKind::Diagonal, 2, 2, 0).unwrap();
        assert_eq!(dg.values, vec![0.0, 0.5, 0.5, 1.0]);
        assert!(make_ramp(RampKind::LeftRight, 1, 1, 0).is_err());
        assert_eq!(
            make_ramp(RampKind::RandomNoise, 4, 4, 3).unwrap(),
            make_ramp(RampKind::RandomNoise, 4, 4, 3).unwrap()
        );
    }

    #[test]
    fn seven_train_tokens_on_sixteen_grid() {
        let cfg = ProbeConfig::default();
        let s = sample_split((16, 16), &cfg, 1).unwrap();
        assert_eq!(s.train.len(), 7);
        assert_eq!(s.train.len() + s.holdout.len(), 256);
        assert_eq!(s, sample_split((16, 16), &cfg, 1).unwrap());
    }

    #[test]
    fn r2_examples() {
        assert_eq!(r2(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(r2(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(r2(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -3.0);
    }

    #[test]
    fn exact_channel_recovery() {
        let n = 30;
        let mut rng = synth::rng(2);
        let x = DMatrix::from_fn(n, 6, |_, _| rng.random::<f64>());
        let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 3)]);
        let fit = fit_linear(&x, &y, 0.0).unwrap();
        for c in 0..6 {
            let want = if c == 3 { 1.0 } else { 0.0 };
            assert!((fit.weights[(c, 0)] - want).abs() < 1e-8);
        }
        let resid = (fit.predict(&x) - &y).abs().max();
        assert!(resid < 1e-10);
        assert!(!fit.auto_ridge);
    }

    #[test]
    fn constant_target_and_ridge_limit() {
        let mut rng = synth::rng(3);
        let x = DMatrix::from_fn(20, 4, |_, _| rng.random::<f64>());
        let y = DMatrix::from_element(20, 1, 0.7);
        let fit = fit_linear(&x, &y, 0.0).unwrap();
        assert!(fit.weights.rows(0, 4).abs().max() < 1e-10);
        assert!((fit.weights[(4, 0)] - 0.7).abs() < 1e-10);

        let y = DMatrix::from_fn(20, 1, |i, _| x[(i, 0)] * 3.0);
        let fit = fit_linear(&x, &y, 1e12).unwrap();
        assert!(fit.weights.rows(0, 4).abs().max() < 1e-9);
    }

    #[test]
    fn underdetermined_fit_switches_to_ridge() {
        let mut rng = synth::rng(4);
        let x = DMatrix::from_fn(5, 10, |_, _| rng.random::<f64>());
        let y = DMatrix::from_fn(5, 1, |_, _| rng.random::<f64>());
        let fit = fit_linear(&x, &y, 0.0).unwrap();
        assert!(fit.auto_ridge);
        assert_eq!(fit.lambda, AUTO_RIDGE);

        let dup = DMatrix::from_fn(20, 2, |i, _| i as f64);
        let y = DMatrix::from_fn(20, 1, |i, _| i as f64);
        assert!(fit_linear(&dup, &y, 0.0).unwrap().auto_ridge);
    }
}
