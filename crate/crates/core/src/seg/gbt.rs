//! Multiclass gradient-boosted regression trees with a softmax objective.
//!
//! Each round fits one tree per class on the softmax gradient `p - y` and
//! diagonal hessian `p (1 - p)`, using histogram split finding over at most
//! `max_bins` quantile thresholds per feature and L2-regularised Newton leaf
//! values.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{self, derive_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: 100,
            max_depth: 6,
            learning_rate: 0.3,
            subsample: 1.0,
            lambda: 1.0,
            min_child_weight: 1.0,
            max_bins: 64,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Contract("n_trees must be at least 1".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Contract(format!("subsample {} must be in (0, 1]", self.subsample)));
        }
        if self.max_bins < 2 || self.max_bins > 256 {
            return Err(Error::Contract(format!("max_bins {} must be in 2..=256", self.max_bins)));
        }
        if !(self.learning_rate > 0.0) || self.lambda < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::Contract("learning_rate must be positive, lambda and min_child_weight non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    /// `x[feature] <= threshold` goes to `left`.
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn eval(&self, x: &[f32]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gbt {
    pub classes: usize,
    pub n_features: usize,
    pub params: GbtParams,
    /// `rounds[r][k]` is the tree for class `k` in round `r`.
    rounds: Vec<Vec<Tree>>,
}

struct Binned<'a> {
    thresholds: &'a [Vec<f32>],
    /// Column-major bin indices `[feature][row]`.
    bins: &'a [Vec<u8>],
    grad: &'a [f64],
    hess: &'a [f64],
}

fn build_thresholds(values: &mut [f32], max_bins: usize) -> Vec<f32> {
    values.sort_by(f32::total_cmp);
    let mut uniq = values.to_vec();
    uniq.dedup();
    let mut t: Vec<f32> = if uniq.len() <= max_bins {
        uniq.windows(2).map(|p| ((p[0] as f64 + p[1] as f64) / 2.0) as f32).collect()
    } else {
        (1..max_bins).map(|q| values[q * values.len() / max_bins]).collect()
    };
    t.dedup();
    t
}

fn bin_of(thresholds: &[f32], x: f32) -> u8 {
    thresholds.partition_point(|&t| t < x) as u8
}

impl Binned<'_> {
    fn grow(&self, rows: &mut [usize], depth: usize, p: &GbtParams, nodes: &mut Vec<Node>) -> usize {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + self.grad[r], h + self.hess[r]));
        let me = nodes.len();
        nodes.push(Node::Leaf(-g / (h + p.lambda) * p.learning_rate));
        if depth >= p.max_depth || h < 2.0 * p.min_child_weight {
            return me;
        }
        let parent = g * g / (h + p.lambda);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, th) in self.thresholds.iter().enumerate() {
            if th.is_empty() {
                continue;
            }
            let mut hg = vec![0.0; th.len() + 1];
            let mut hh = vec![0.0; th.len() + 1];
            for &r in rows.iter() {
                let b = self.bins[f][r] as usize;
                hg[b] += self.grad[r];
                hh[b] += self.hess[r];
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            for b in 0..th.len() {
                gl += hg[b];
                hl += hh[b];
                let (gr, hr) = (g - gl, h - hl);
                if hl < p.min_child_weight || hr < p.min_child_weight {
                    continue;
                }
                let gain = gl * gl / (hl + p.lambda) + gr * gr / (hr + p.lambda) - parent;
                if gain > 1e-12 && best.map_or(true, |(bg, _, _)| gain > bg) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else {
            return me;
        };
        let split = partition_rows(rows, |&r| self.bins[f][r] as usize <= b);
        let (lrows, rrows) = rows.split_at_mut(split);
        let left = self.grow(lrows, depth + 1, p, nodes);
        let right = self.grow(rrows, depth + 1, p, nodes);
        nodes[me] = Node::Split {
            feature: f,
            threshold: self.thresholds[f][b],
            left,
            right,
        };
        me
    }
}

/// Stable in-place partition; returns the number of rows satisfying `pred`.
fn partition_rows(rows: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = rows.iter().partition(|r| pred(r));
    let n = yes.len();
    rows[..n].copy_from_slice(&yes);
    rows[n..].copy_from_slice(&no);
    n
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Gbt {
    /// Fits on `x` (row-major `[n, n_features]`) with labels in `0..classes`.
    pub fn fit(x: &[f32], n_features: usize, y: &[usize], classes: usize, params: &GbtParams) -> Result<Gbt> {
        params.validate()?;
        let n = y.len();
        if n == 0 || x.len() != n * n_features {
            return Err(Error::dim(format!("{} feature values for {n} rows of {n_features}", x.len())));
        }
        if classes < 2 {
            return Err(Error::Contract("need at least two classes".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Contract(format!("label {bad} outside 0..{classes}")));
        }
        for k in 0..classes {
            if !y.contains(&k) {
                return Err(Error::Validation(format!("class {k} has no labeled samples")));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite training feature".into()));
        }
        let mut thresholds = Vec::with_capacity(n_features);
        let mut bins = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let col: Vec<f32> = (0..n).map(|r| x[r * n_features + f]).collect();
            let th = build_thresholds(&mut col.clone(), params.max_bins);
            bins.push(col.iter().map(|&v| bin_of(&th, v)).collect());
            thresholds.push(th);
        }
        let mut scores = vec![0.0; n * classes];
        let mut rounds = Vec::with_capacity(params.n_trees);
        let mut grad = vec![vec![0.0; n]; classes];
        let mut hess = vec![vec![0.0; n]; classes];
        for round in 0..params.n_trees {
            for r in 0..n {
                let p = softmax(&scores[r * classes..(r + 1) * classes]);
                for k in 0..classes {
                    let target = if y[r] == k { 1.0 } else { 0.0 };
                    grad[k][r] = p[k] - target;
                    hess[k][r] = (p[k] * (1.0 - p[k])).max(1e-16);
                }
            }
            let rows: Vec<usize> = if params.subsample < 1.0 {
                let m = ((n as f64 * params.subsample).ceil() as usize).max(1);
                let mut rng = synth::rng(derive_seed(params.seed, &[round as u64]));
                let mut s = sample(&mut rng, n, m).into_vec();
                s.sort_unstable();
                s
            } else {
                (0..n).collect()
            };
            let trees: Vec<Tree> = (0..classes)
                .map(|k| {
                    let b = Binned {
                        thresholds: &thresholds,
                        bins: &bins,
                        grad: &grad[k],
                        hess: &hess[k],
                    };
                    let mut nodes = Vec::new();
                    let mut rs = rows.clone();
                    b.grow(&mut rs, 0, params, &mut nodes);
                    Tree { nodes }
                })
                .collect();
            for r in 0..n {
                let row = &x[r * n_features..(r + 1) * n_features];
                for (k, t) in trees.iter().enumerate() {
                    scores[r * classes + k] += t.eval(row);
                }
            }
            rounds.push(trees);
        }
        Ok(Gbt {
            classes,
            n_features,
            params: params.clone(),
            rounds,
        })
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        let mut s = vec![0.0; self.classes];
        for trees in &self.rounds {
            for (k, t) in trees.iter().enumerate() {
                s[k] += t.eval(x);
            }
        }
        s
    }

    pub fn predict_proba(&self, x: &[f32]) -> Vec<f64> {
        softmax(&self.scores(x))
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for k in 1..s.len() {
            if s[k] > s[best] {
                best = k;
            }
        }
        best
    }

    pub fn predict_rows(&self, x: &[f32]) -> Vec<usize> {
        x.chunks(self.n_features).map(|r| self.predict(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn threshold_split_is_learned_exactly() {
        let mut rng = synth::rng(1);
        let n = 200;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f32 = rng.random();
            let noise: f32 = rng.random();
            x.extend_from_slice(&[noise, a]);
            y.push(usize::from(a > 0.37));
        }
        let m = Gbt::fit(&x, 2, &y, 2, &GbtParams::default()).unwrap();
        assert_eq!(m.predict_rows(&x), y);
    }

    #[test]
    fn memorizes_three_classes_and_is_deterministic() {
        let mut rng = synth::rng(2);
        let n = 150;
        let x: Vec<f32> = (0..n * 4).map(|_| rng.random()).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let p = GbtParams {
            n_trees: 60,
            min_child_weight: 0.0,
            ..GbtParams::default()
        };
        let m = Gbt::fit(&x, 4, &y, 3, &p).unwrap();
        let acc = m.predict_rows(&x).iter().zip(&y).filter(|(a, b)| a == b).count();
        assert!(acc >= n * 95 / 100, "{acc}");
        let again = Gbt::fit(&x, 4, &y, 3, &p).unwrap();
        assert_eq!(m, again);
        let sub = GbtParams { subsample: 0.5, seed: 4, ..p.clone() };
        assert_eq!(Gbt::fit(&x, 4, &y, 3, &sub).unwrap(), Gbt::fit(&x, 4, &y, 3, &sub).unwrap());
    }

    #[test]
    fn missing_class_is_rejected() {
        let x = vec![0.0f32, 1.0, 2.0];
        assert!(matches!(Gbt::fit(&x, 1, &[0, 0, 0], 2, &GbtParams::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let x = vec![0.5f32; 4];
        // Identical rows with balanced labels: every tree is a single leaf and
        // the two class scores stay equal.
        let m = Gbt::fit(&x, 1, &[0, 1, 0, 1], 2, &GbtParams::default()).unwrap();
        assert_eq!(m.predict(&[0.5]), 0);
    }
}
