//! Loading models, images and feature stacks named on the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use dinolens::distill::{dataset_pipeline, load_image_dir, probe_images};
use dinolens::features::FeatureStack;
use dinolens::image::Image;
use dinolens::vit::{load_checkpoint, ForwardOptions, ViTModel};
use dinolens::feat1;
use serde::{Deserialize, Serialize};

use crate::run::{input_ref, InputRef};

/// Synthetic probe images used when no image directory is given; with a
/// directory, `size` is the centre-crop target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageParams {
    pub count: usize,
    pub size: usize,
}

impl Default for ImageParams {
    fn default() -> Self {
        ImageParams { count: 10, size: 128 }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct SourceArgs {
    /// VITW1 checkpoint to extract features with.
    #[arg(long, conflicts_with = "features")]
    pub model: Option<PathBuf>,
    /// Directory of precomputed `.feat1` files.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Image directory (default: synthetic images).
    #[arg(long, conflicts_with = "features")]
    pub images: Option<PathBuf>,
}

impl SourceArgs {
    pub fn refs(&self) -> Result<Vec<InputRef>> {
        let mut out = Vec::new();
        if let Some(p) = &self.model {
            out.push(input_ref("model", p)?);
        }
        if let Some(p) = &self.features {
            out.push(input_ref("features", p)?);
        }
        if let Some(p) = &self.images {
            out.push(input_ref("images", p)?);
        }
        if out.is_empty() {
            bail!("give --model or --features");
        }
        Ok(out)
    }
}

pub fn model(path: &Path) -> Result<ViTModel<f32>> {
    load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn images(dir: Option<&Path>, p: &ImageParams, channels: usize, seed: u64) -> Result<Vec<(String, Image)>> {
    match dir {
        Some(d) => {
            let imgs = load_image_dir(d, channels)?;
            if imgs.is_empty() {
                bail!("no images in {}", d.display());
            }
            Ok(dataset_pipeline(&imgs, p.size)?)
        }
        None => {
            if p.count == 0 {
                bail!("images.count must be positive");
            }
            Ok(probe_images(p.count, p.size, channels, seed))
        }
    }
}

/// All `.feat1` files of `dir` in file-name order.
pub fn feature_dir(dir: &Path) -> Result<Vec<FeatureStack>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "feat1"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .feat1 files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| feat1::read(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

/// Which model layers to extract.
#[derive(Clone, Copy, Debug)]
pub enum Layers {
    /// One layer index; `None` is the normed output.
    One(Option<usize>),
    All,
}

/// Feature stacks from a model run over images or from a FEAT1 directory.
pub fn stacks(src: &SourceArgs, p: &ImageParams, seed: u64, layers: Layers) -> Result<Vec<FeatureStack>> {
    if let Some(dir) = &src.features {
        return feature_dir(dir);
    }
    let path = src.model.as_ref().context("give --model or --features")?;
    let m = model(path)?;
    let opts = match layers {
        Layers::All => ForwardOptions::all_layers(m.config.layers),
        Layers::One(l) => ForwardOptions {
            collect: vec![l.unwrap_or(m.config.layers)],
            jitter: None,
        },
    };
    let imgs = images(src.images.as_deref(), p, m.config.channels, seed)?;
    imgs.iter()
        .map(|(id, img)| Ok(m.forward_features(img, id, &opts)?))
        .collect()
}

/// Position of model layer `layer` in the stack (`None`: last stored).
pub fn layer_pos(stack: &FeatureStack, layer: Option<usize>) -> Result<usize> {
    match layer {
        None => Ok(stack.n_layers() - 1),
        Some(l) => match stack.layers.iter().position(|&x| x == l) {
            Some(p) => Ok(p),
            None => bail!("layer {l} not in {} (has {:?})", stack.image_id, stack.layers),
        },
    }
}
