//! Scribble segmentation and its benchmark.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use dinolens::distill::load_image_dir;
use dinolens::seg::{
    build_bank, fit_segmenter, load_labels, miou, overlay, predict_map, save_labels, scribble_rounds_bench, BenchConfig, GbtParams, ScribbleSet, DEEP_DIMS,
};
use dinolens::synth::{seg_benchmark, SEG_CLASSES};
use dinolens::vit::ViTModel;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::inputs;
use crate::run::{input_ref, num, Run};

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Training images.
    #[arg(long)]
    pub train: PathBuf,
    /// Scribble label PNGs named like the training images; 0 is unlabeled.
    #[arg(long)]
    pub labels: PathBuf,
    /// Images to segment.
    #[arg(long)]
    pub targets: PathBuf,
    /// Optional ground-truth label PNGs for the targets.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Model whose features are added to the classical bank.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    /// Number of classes; unset means the largest scribble label.
    pub classes: Option<usize>,
    pub deep_dims: usize,
    pub gbt: GbtParams,
    pub overlay_alpha: f32,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            classes: None,
            deep_dims: DEEP_DIMS,
            gbt: GbtParams::default(),
            overlay_alpha: 0.45,
        }
    }
}

#[derive(Serialize)]
struct SegmentSummary {
    classes: usize,
    features: Vec<String>,
    labeled_pixels: BTreeMap<u8, usize>,
    targets: Vec<String>,
}

pub fn segment(ctx: &Ctx, args: &SegmentArgs) -> Result<Run> {
    let p: SegmentParams = ctx.params()?;
    let mut refs = vec![
        input_ref("train", &args.train)?,
        input_ref("labels", &args.labels)?,
        input_ref("targets", &args.targets)?,
    ];
    if let Some(t) = &args.truth {
        refs.push(input_ref("truth", t)?);
    }
    if let Some(m) = &args.model {
        refs.push(input_ref("model", m)?);
    }
    let model: Option<ViTModel<f32>> = args.model.as_deref().map(inputs::model).transpose()?;
    let channels = model.as_ref().map_or(1, |m| m.config.channels);
    let deep = model.as_ref().map(|m| ("deep", m));
    let train = load_image_dir(&args.train, channels)?;
    if train.is_empty() {
        bail!("no training images in {}", args.train.display());
    }
    let mut sets = Vec::new();
    for (id, img) in &train {
        let path = args.labels.join(format!("{id}.png"));
        let (h, w, labels) = load_labels(&path).with_context(|| format!("scribbles for {id}"))?;
        if (h, w) != (img.height, img.width) {
            bail!("scribbles for {id} are {h}x{w}, image is {}x{}", img.height, img.width);
        }
        sets.push(ScribbleSet {
            image_id: id.clone(),
            height: h,
            width: w,
            labels,
            round: 1,
            provenance: path.display().to_string(),
            scribbles: Vec::new(),
        });
    }
    let mut counts = BTreeMap::new();
    for s in &sets {
        for (_, l) in s.labeled() {
            *counts.entry(l).or_insert(0usize) += 1;
        }
    }
    let classes = match p.classes {
        Some(k) => k,
        None => *counts.keys().last().ok_or_else(|| anyhow!("scribbles contain no labeled pixels"))? as usize,
    };
    let run = ctx.start("segment", &p, refs)?;
    let banks = train
        .iter()
        .map(|(id, img)| build_bank(img, id, deep, p.deep_dims))
        .collect::<Result<Vec<_>, _>>()?;
    let classifier = fit_segmenter(&banks, &sets, classes, &p.gbt)?;
    let targets = load_image_dir(&args.targets, channels)?;
    let mut scores = Vec::new();
    for (id, img) in &targets {
        let pred = predict_map(&classifier, &build_bank(img, id, deep, p.deep_dims)?)?;
        save_labels(&run.path(&format!("{id}_labels.png")), img.height, img.width, &pred)?;
        run.png(&format!("{id}_overlay.png"), &overlay(img, &pred, p.overlay_alpha))?;
        if let Some(dir) = &args.truth {
            let (_, _, truth) = load_labels(&dir.join(format!("{id}.png")))?;
            scores.push(vec![id.clone(), num(miou(&pred, &truth, classes)?)]);
        }
    }
    if args.truth.is_some() {
        run.csv("miou.csv", &["image", "miou"], scores)?;
    }
    run.json(
        "segment.json",
        &SegmentSummary {
            classes,
            features: banks[0].names.clone(),
            labeled_pixels: counts,
            targets: targets.into_iter().map(|(id, _)| id).collect(),
        },
    )?;
    Ok(run)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Deep feature source as NAME=CHECKPOINT; repeatable.
    #[arg(long = "deep", value_name = "NAME=PATH")]
    pub deep: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchParams {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub bench: BenchConfig,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            seed: 0,
            train: 5,
            test: 17,
            size: 128,
            bench: BenchConfig::default(),
        }
    }
}

pub fn bench_seg(ctx: &Ctx, args: &BenchArgs) -> Result<Run> {
    let p: BenchParams = ctx.params()?;
    let mut refs = Vec::new();
    let mut models = Vec::new();
    for spec in &args.deep {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--deep expects NAME=PATH, got `{spec}`"))?;
        let path = PathBuf::from(path);
        refs.push(input_ref(name, &path)?);
        models.push((name.to_string(), inputs::model(&path)?));
    }
    let run = ctx.start("bench-seg", &p, refs)?;
    let (train, test) = seg_benchmark(p.train, p.test, p.size, p.seed);
    let deep: Vec<(&str, &ViTModel<f32>)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let result = scribble_rounds_bench(&train, &test, &deep, SEG_CLASSES, &p.bench)?;
    run.csv(
        "bench.csv",
        &["config", "round", "miou"],
        result
            .configs
            .iter()
            .zip(&result.curves)
            .flat_map(|(c, curve)| curve.iter().enumerate().map(|(r, &v)| vec![c.clone(), (r + 1).to_string(), num(v)]).collect::<Vec<_>>()),
    )?;
    run.json("bench.json", &result)?;
    Ok(run)
}
