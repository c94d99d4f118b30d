//! Linear probes and fingerprints.

use anyhow::Result;
use dinolens::probe::{fingerprint as fingerprint_of, probe_stacks, ProbeConfig, RampKind};
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::inputs::{self, ImageParams, Layers, SourceArgs};
use crate::render::{heatmap, upscale};
use crate::run::{num, Run};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    pub seed: u64,
    pub ramp: RampKind,
    /// Model layer index; unset means the normed output.
    pub layer: Option<usize>,
    pub per_channel: bool,
    pub probe: ProbeConfig,
    pub images: ImageParams,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            seed: 0,
            ramp: RampKind::XyJoint,
            layer: None,
            per_channel: true,
            probe: ProbeConfig::default(),
            images: ImageParams::default(),
        }
    }
}

pub fn probe(ctx: &Ctx, src: &SourceArgs) -> Result<Run> {
    let p: ProbeParams = ctx.params()?;
    let run = ctx.start("probe", &p, src.refs()?)?;
    let stacks = inputs::stacks(src, &p.images, p.seed, Layers::One(p.layer))?;
    let pos = inputs::layer_pos(&stacks[0], p.layer)?;
    let report = probe_stacks(&stacks, pos, p.ramp, &p.probe, p.per_channel)?;
    log::info!("full-stack {} R2 {:.4}", p.ramp.name(), report.full_stack_r2);
    run.csv(
        "per_channel.csv",
        &["channel", "r2", "std"],
        report
            .per_channel_r2
            .iter()
            .zip(&report.per_channel_std)
            .enumerate()
            .map(|(c, (r, s))| vec![c.to_string(), num(*r), num(*s)]),
    )?;
    run.json("report.json", &report)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerprintParams {
    pub seed: u64,
    pub ramp: RampKind,
    pub probe: ProbeConfig,
    pub images: ImageParams,
    /// Pixels per heatmap cell.
    pub scale: usize,
}

impl Default for FingerprintParams {
    fn default() -> Self {
        FingerprintParams {
            seed: 0,
            ramp: RampKind::LeftRight,
            probe: ProbeConfig::default(),
            images: ImageParams::default(),
            scale: 8,
        }
    }
}

pub fn fingerprint(ctx: &Ctx, src: &SourceArgs) -> Result<Run> {
    let p: FingerprintParams = ctx.params()?;
    let run = ctx.start("fingerprint", &p, src.refs()?)?;
    let stacks = inputs::stacks(src, &p.images, p.seed, Layers::All)?;
    let id = src
        .model
        .as_ref()
        .or(src.features.as_ref())
        .map(|m| m.display().to_string())
        .unwrap_or_default();
    let fp = fingerprint_of(&id, &stacks, p.ramp, &p.probe)?;
    let (l, c, v) = fp.argmax();
    log::info!("max {} R2 {v:.4} at layer {} channel {c}", p.ramp.name(), fp.layers[l]);
    run.csv(
        "fingerprint.csv",
        &["layer", "channel", "r2"],
        fp.layers
            .iter()
            .enumerate()
            .flat_map(|(i, &layer)| fp.row(i).iter().enumerate().map(move |(c, &v)| vec![layer.to_string(), c.to_string(), num(v)]).collect::<Vec<_>>()),
    )?;
    let map = heatmap(&fp.values, fp.layers.len(), fp.channels, 0.0, 1.0);
    run.png("fingerprint.png", &upscale(&map, p.scale))?;
    run.json("fingerprint.json", &fp)?;
    Ok(run)
}
