//! Segmenter assembly and the scribble-round benchmark.

use serde::{Deserialize, Serialize};

use super::gbt::{Gbt, GbtParams};
use super::{classical_bank, deep_bank, miou_detailed, synth_scribbles, FeatureBank, ScribbleSet, DEEP_DIMS};
use crate::analysis::MaskPredictor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::SegSample;
use crate::vit::ViTModel;

/// A fitted classifier plus the recipe for building its feature bank.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub classifier: Gbt,
    pub classes: usize,
    /// Optional deep features: channel prefix and model.
    pub deep: Option<(String, ViTModel<f32>)>,
    pub deep_dims: usize,
}

pub fn build_bank(image: &Image, id: &str, deep: Option<(&str, &ViTModel<f32>)>, deep_dims: usize) -> Result<FeatureBank> {
    let classical = classical_bank(image, id)?;
    match deep {
        Some((prefix, model)) => classical.concat(&deep_bank(model, image, id, deep_dims, prefix)?),
        None => Ok(classical),
    }
}

/// Gathers labeled pixels of every bank; labels become `0..classes`.
fn training_rows(banks: &[FeatureBank], scribbles: &[ScribbleSet], classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    if banks.len() != scribbles.len() {
        return Err(Error::Contract(format!("{} banks for {} scribble sets", banks.len(), scribbles.len())));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (b, s) in banks.iter().zip(scribbles) {
        if (b.height, b.width) != (s.height, s.width) {
            return Err(Error::dim(format!("scribbles for {} do not match its {}x{} bank", s.image_id, b.height, b.width)));
        }
        for (i, l) in s.labeled() {
            if l as usize > classes {
                return Err(Error::Validation(format!("label {l} in {} exceeds {classes} classes", s.image_id)));
            }
            x.extend_from_slice(b.pixel(i));
            y.push(l as usize - 1);
        }
    }
    Ok((x, y))
}

pub fn fit_segmenter(banks: &[FeatureBank], scribbles: &[ScribbleSet], classes: usize, params: &GbtParams) -> Result<Gbt> {
    let f = banks
        .first()
        .map(|b| b.n_features())
        .ok_or_else(|| Error::Contract("no training banks".into()))?;
    if banks.iter().any(|b| b.names != banks[0].names) {
        return Err(Error::Validation("training banks have different channels".into()));
    }
    let (x, y) = training_rows(banks, scribbles, classes)?;
    let present: Vec<usize> = (0..classes).filter(|k| y.contains(k)).map(|k| k + 1).collect();
    if present.len() < classes {
        let missing: Vec<usize> = (1..=classes).filter(|k| !present.contains(k)).collect();
        return Err(Error::Validation(format!(
            "scribbles miss classes {missing:?} of 1..={classes}; labeled classes are {present:?}"
        )));
    }
    Gbt::fit(&x, f, &y, classes, params)
}

/// Per-pixel labels in `1..=classes`.
pub fn predict_map(classifier: &Gbt, bank: &FeatureBank) -> Result<Vec<u8>> {
    if bank.n_features() != classifier.n_features {
        return Err(Error::dim(format!(
            "classifier expects {} features, bank of {} has {}",
            classifier.n_features,
            bank.image_id,
            bank.n_features()
        )));
    }
    Ok(classifier.predict_rows(&bank.data).into_iter().map(|k| k as u8 + 1).collect())
}

impl Segmenter {
    pub fn bank(&self, image: &Image, id: &str) -> Result<FeatureBank> {
        build_bank(image, id, self.deep.as_ref().map(|(p, m)| (p.as_str(), m)), self.deep_dims)
    }

    pub fn segment(&self, image: &Image, id: &str) -> Result<Vec<u8>> {
        predict_map(&self.classifier, &self.bank(image, id)?)
    }
}

impl MaskPredictor for Segmenter {
    fn predict(&self, image: &Image) -> Result<Vec<u8>> {
        self.segment(image, "probe")
    }

    fn miou(&self, pred: &[u8], truth: &[u8]) -> f64 {
        miou_detailed(pred, truth, self.classes).map(|m| m.value).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub rounds: usize,
    pub scribble_len: usize,
    pub deep_dims: usize,
    pub gbt: GbtParams,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            rounds: 5,
            scribble_len: 20,
            deep_dims: DEEP_DIMS,
            gbt: GbtParams::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub configs: Vec<String>,
    /// `curves[config][round - 1]`: mean test mIoU.
    pub curves: Vec<Vec<f64>>,
    /// Scribbles accumulated by each round over the training set.
    pub scribbles_per_round: Vec<usize>,
    /// Test predictions where some class was absent from both prediction
    /// and truth (scored as IoU 1).
    pub absent_class_cases: usize,
    pub gbt: GbtParams,
}

impl BenchResult {
    pub fn curve(&self, config: &str) -> Option<&[f64]> {
        self.configs.iter().position(|c| c == config).map(|i| self.curves[i].as_slice())
    }
}

/// For each round `1..=rounds`, trains every feature configuration on the
/// scribbles accumulated so far and scores mIoU on the untouched test set.
/// Configurations are classical-only and classical plus each deep model.
pub fn scribble_rounds_bench(
    train: &[SegSample],
    test: &[SegSample],
    deep: &[(&str, &ViTModel<f32>)],
    classes: usize,
    cfg: &BenchConfig,
) -> Result<BenchResult> {
    if train.is_empty() || test.is_empty() || cfg.rounds == 0 {
        return Err(Error::Contract("benchmark needs train and test images and at least one round".into()));
    }
    let classical = |set: &[SegSample]| {
        set.iter()
            .map(|s| classical_bank(&s.image, &s.id))
            .collect::<Result<Vec<_>>>()
    };
    let (train_c, test_c) = (classical(train)?, classical(test)?);
    let mut configs = vec!["classical".to_string()];
    let mut train_banks = vec![train_c.clone()];
    let mut test_banks = vec![test_c.clone()];
    for &(name, model) in deep {
        let add = |set: &[SegSample], base: &[FeatureBank]| {
            set.iter()
                .zip(base)
                .map(|(s, b)| b.concat(&deep_bank(model, &s.image, &s.id, cfg.deep_dims, name)?))
                .collect::<Result<Vec<_>>>()
        };
        train_banks.push(add(train, &train_c)?);
        test_banks.push(add(test, &test_c)?);
        configs.push(format!("classical+{name}"));
    }
    let mut curves = vec![Vec::with_capacity(cfg.rounds); configs.len()];
    let mut scribbles_per_round = Vec::with_capacity(cfg.rounds);
    let mut absent_class_cases = 0;
    for round in 1..=cfg.rounds {
        let scribbles = train
            .iter()
            .map(|s| synth_scribbles(&s.id, &s.mask, s.image.height, s.image.width, classes, round, cfg.scribble_len, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        scribbles_per_round.push(scribbles.iter().map(|s| s.scribbles.len()).sum());
        for (ci, (tb, eb)) in train_banks.iter().zip(&test_banks).enumerate() {
            let model = fit_segmenter(tb, &scribbles, classes, &cfg.gbt)?;
            let mut total = 0.0;
            for (bank, s) in eb.iter().zip(test) {
                let m = miou_detailed(&predict_map(&model, bank)?, &s.mask, classes)?;
                if !m.absent.is_empty() {
                    absent_class_cases += 1;
                }
                total += m.value;
            }
            let score = total / test.len() as f64;
            log::info!("round {round} {}: mIoU {score:.4}", configs[ci]);
            curves[ci].push(score);
        }
    }
    Ok(BenchResult {
        configs,
        curves,
        scribbles_per_round,
        absent_class_cases,
        gbt: cfg.gbt.clone(),
    })
}
