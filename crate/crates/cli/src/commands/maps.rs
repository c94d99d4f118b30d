//! Feature maps: PCA, clustering, similarity, diagnostics and robustness.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use dinolens::analysis::{
    cosine_map, equivariance_report, kmeans as kmeans_of, pca_fit, pca_rgb, pca_rgb_shared, resolution_sweep, token_std, zero_input_diagnostic, KMeansConfig,
    Transform, DIAG_SIGMAS,
};
use dinolens::image::Image;
use dinolens::probe::{probe_stacks, ProbeConfig, RampKind};
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::inputs::{self, ImageParams, Layers, SourceArgs};
use crate::render::{heatmap, label_map, upscale};
use crate::run::{input_ref, num, Run};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaParams {
    pub seed: u64,
    pub layer: Option<usize>,
    pub components: usize,
    pub standardize: bool,
    /// One basis and colour range for all images instead of one per image.
    pub shared: bool,
    pub images: ImageParams,
    pub scale: usize,
}

impl Default for PcaParams {
    fn default() -> Self {
        PcaParams {
            seed: 0,
            layer: None,
            components: 3,
            standardize: false,
            shared: true,
            images: ImageParams::default(),
            scale: 8,
        }
    }
}

#[derive(Serialize)]
struct PcaSummary {
    image_id: String,
    explained: Vec<f64>,
}

pub fn pca(ctx: &Ctx, src: &SourceArgs) -> Result<Run> {
    let p: PcaParams = ctx.params()?;
    if p.components < 3 {
        bail!("components must be at least 3 for an RGB rendering");
    }
    let run = ctx.start("pca", &p, src.refs()?)?;
    let stacks = inputs::stacks(src, &p.images, p.seed, Layers::One(p.layer))?;
    let pos = inputs::layer_pos(&stacks[0], p.layer)?;
    let mut summary = Vec::new();
    if p.shared {
        let model = pca_fit(&stacks, pos, p.components, p.standardize, None)?;
        for (s, img) in stacks.iter().zip(pca_rgb_shared(&stacks, pos, &model)?) {
            run.png(&format!("pca_{}.png", s.image_id), &upscale(&img, p.scale))?;
        }
        summary.push(PcaSummary {
            image_id: "*".into(),
            explained: model.explained,
        });
    } else {
        for s in &stacks {
            let model = pca_fit(std::slice::from_ref(s), pos, p.components, p.standardize, None)?;
            run.png(&format!("pca_{}.png", s.image_id), &upscale(&pca_rgb(s, pos, &model)?, p.scale))?;
            summary.push(PcaSummary {
                image_id: s.image_id.clone(),
                explained: model.explained,
            });
        }
    }
    run.json("pca.json", &summary)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub seed: u64,
    pub layer: Option<usize>,
    pub k: usize,
    pub kmeans: KMeansConfig,
    pub images: ImageParams,
    pub scale: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            seed: 0,
            layer: None,
            k: 4,
            kmeans: KMeansConfig::default(),
            images: ImageParams::default(),
            scale: 8,
        }
    }
}

#[derive(Serialize)]
struct KMeansSummary {
    image_id: String,
    inertia: f64,
    best_init: usize,
    init_inertias: Vec<f64>,
}

pub fn kmeans(ctx: &Ctx, src: &SourceArgs) -> Result<Run> {
    let p: KMeansParams = ctx.params()?;
    let run = ctx.start("kmeans", &p, src.refs()?)?;
    let stacks = inputs::stacks(src, &p.images, p.seed, Layers::One(p.layer))?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for s in &stacks {
        let pos = inputs::layer_pos(s, p.layer)?;
        let r = kmeans_of(s, pos, p.k, &p.kmeans)?;
        let (h, w) = s.grid;
        for (t, &l) in r.labels.iter().enumerate() {
            rows.push(vec![s.image_id.clone(), (t / w).to_string(), (t % w).to_string(), l.to_string()]);
        }
        run.png(&format!("kmeans_{}.png", s.image_id), &upscale(&label_map(&r.labels, h, w, p.k), p.scale))?;
        summary.push(KMeansSummary {
            image_id: s.image_id.clone(),
            inertia: r.inertia,
            best_init: r.best_init,
            init_inertias: r.init_inertias,
        });
    }
    run.csv("kmeans_labels.csv", &["image", "row", "col", "label"], rows)?;
    run.json("kmeans.json", &summary)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityParams {
    pub seed: u64,
    pub layer: Option<usize>,
    /// Query token `(row, col)`; unset means the centre token.
    pub query: Option<(usize, usize)>,
    pub images: ImageParams,
    pub scale: usize,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams {
            seed: 0,
            layer: None,
            query: None,
            images: ImageParams::default(),
            scale: 8,
        }
    }
}

pub fn similarity(ctx: &Ctx, src: &SourceArgs) -> Result<Run> {
    let p: SimilarityParams = ctx.params()?;
    let run = ctx.start("similarity", &p, src.refs()?)?;
    let stacks = inputs::stacks(src, &p.images, p.seed, Layers::One(p.layer))?;
    let mut rows = Vec::new();
    for s in &stacks {
        let (h, w) = s.grid;
        let (qr, qc) = p.query.unwrap_or((h / 2, w / 2));
        if qr >= h || qc >= w {
            bail!("query ({qr}, {qc}) outside the {h}x{w} grid of {}", s.image_id);
        }
        let m = cosine_map(s, inputs::layer_pos(s, p.layer)?, qr * w + qc)?;
        for (t, &v) in m.values.iter().enumerate() {
            rows.push(vec![s.image_id.clone(), (t / w).to_string(), (t % w).to_string(), num(v)]);
        }
        run.png(&format!("similarity_{}.png", s.image_id), &upscale(&heatmap(&m.values, h, w, -1.0, 1.0), p.scale))?;
    }
    run.csv("similarity.csv", &["image", "row", "col", "cosine"], rows)?;
    Ok(run)
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// VITW1 checkpoint.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagParams {
    pub sigmas: Vec<f64>,
    /// Jitter seeds, one forward pass each.
    pub jitter_seeds: Vec<u64>,
    pub size: usize,
    pub components: usize,
    pub scale: usize,
}

impl Default for DiagParams {
    fn default() -> Self {
        DiagParams {
            sigmas: DIAG_SIGMAS.to_vec(),
            jitter_seeds: vec![0, 1, 2],
            size: 64,
            components: 3,
            scale: 8,
        }
    }
}

pub fn diag_zero(ctx: &Ctx, args: &ModelArgs) -> Result<Run> {
    let p: DiagParams = ctx.params()?;
    let model = inputs::model(&args.model)?;
    let run = ctx.start("diag-zero", &p, vec![input_ref("model", &args.model)?])?;
    let report = zero_input_diagnostic(&model, &p.sigmas, &p.jitter_seeds, p.size)?;
    run.csv(
        "diag_zero.csv",
        &["input", "sigma", "seed", "token_std"],
        report
            .rows
            .iter()
            .map(|r| vec![r.input.clone(), num(r.sigma), r.seed.to_string(), num(r.token_std)]),
    )?;
    for s in &report.stacks {
        // Constant maps have no principal directions worth drawing.
        if token_std(s.last(), s.channels) > 0.0 {
            let m = pca_fit(std::slice::from_ref(s), 0, p.components, false, None)?;
            run.png(&format!("pca_{}.png", s.image_id), &upscale(&pca_rgb(s, 0, &m)?, p.scale))?;
        }
    }
    run.json("diag_zero.json", &report.rows)?;
    Ok(run)
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image to sweep (default: one synthetic image).
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepParams {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub probe: ProbeConfig,
    pub components: usize,
    pub scale: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            seed: 0,
            sizes: vec![64, 96, 128, 192, 256],
            probe: ProbeConfig::default(),
            components: 3,
            scale: 4,
        }
    }
}

#[derive(Serialize)]
struct SweepRow {
    size: usize,
    grid: (usize, usize),
    token_std: f64,
    joint_xy: f64,
}

pub fn sweep(ctx: &Ctx, args: &SweepArgs) -> Result<Run> {
    let p: SweepParams = ctx.params()?;
    let model = inputs::model(&args.model)?;
    let mut refs = vec![input_ref("model", &args.model)?];
    if let Some(i) = &args.image {
        refs.push(input_ref("image", i)?);
    }
    let run = ctx.start("sweep", &p, refs)?;
    let top = p.sizes.iter().copied().max().unwrap_or(0);
    let (id, image) = match &args.image {
        Some(path) => (
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            Image::load(path)?.with_channels(model.config.channels)?,
        ),
        None => inputs::images(None, &ImageParams { count: 1, size: top }, model.config.channels, p.seed)?.remove(0),
    };
    let stacks = resolution_sweep(&model, &image, &id, &p.sizes)?;
    let mut rows = Vec::new();
    for (&size, s) in p.sizes.iter().zip(&stacks) {
        let pm = pca_fit(std::slice::from_ref(s), 0, p.components, false, None)?;
        run.png(&format!("pca_{size}.png"), &upscale(&pca_rgb(s, 0, &pm)?, p.scale))?;
        rows.push(SweepRow {
            size,
            grid: s.grid,
            token_std: token_std(s.last(), s.channels),
            joint_xy: probe_stacks(std::slice::from_ref(s), 0, RampKind::XyJoint, &p.probe, false)?.full_stack_r2,
        });
    }
    run.csv(
        "sweep.csv",
        &["size", "grid_h", "grid_w", "token_std", "joint_xy"],
        rows.iter()
            .map(|r| vec![r.size.to_string(), r.grid.0.to_string(), r.grid.1.to_string(), num(r.token_std), num(r.joint_xy)]),
    )?;
    run.json("sweep.json", &rows)?;
    Ok(run)
}

#[derive(Args, Debug)]
pub struct EquivarianceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image directory (default: synthetic images).
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivarianceParams {
    pub seed: u64,
    pub transforms: Vec<Transform>,
    pub images: ImageParams,
}

impl Default for EquivarianceParams {
    fn default() -> Self {
        EquivarianceParams {
            seed: 0,
            transforms: Transform::standard(),
            images: ImageParams { count: 4, size: 128 },
        }
    }
}

pub fn equivariance(ctx: &Ctx, args: &EquivarianceArgs) -> Result<Run> {
    let p: EquivarianceParams = ctx.params()?;
    let model = inputs::model(&args.model)?;
    let mut refs = vec![input_ref("model", &args.model)?];
    if let Some(i) = &args.images {
        refs.push(input_ref("images", i)?);
    }
    let run = ctx.start("equivariance", &p, refs)?;
    let images = inputs::images(args.images.as_deref(), &p.images, model.config.channels, p.seed)?;
    let report = equivariance_report(&model, &images, &p.transforms, None)?;
    run.csv(
        "equivariance.csv",
        &["transform", "discrepancy"],
        report.rows.iter().map(|r| vec![r.transform.clone(), num(r.discrepancy)]),
    )?;
    run.json("equivariance.json", &report)?;
    Ok(run)
}
