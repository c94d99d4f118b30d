//! Teacher synthesis, distillation and ALiBi export.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use dinolens::distill::{
    blank_activation_ratio, distill_with_hook, final_stacks, heldout_cosine, identify_blank_channels, rank_positional_channels, synth_biased_teacher,
    DistillConfig, TeacherConfig, TeacherSource,
};
use dinolens::pos_encoding::{AlibiBias, PeKind};
use dinolens::probe::{joint_xy_score, ProbeConfig};
use dinolens::synth::{derive_seed, homogeneous_set};
use dinolens::vit::{save_checkpoint, ViTConfig, ViTModel};
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::inputs::{self, ImageParams};
use crate::run::{input_ref, num, Run};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherParams {
    pub seed: u64,
    pub teacher: TeacherConfig,
    pub probe: ProbeConfig,
}

#[derive(Serialize)]
struct TeacherSummary {
    joint_xy: f64,
    attempts: usize,
    planted_channels: Vec<usize>,
    n_params: usize,
}

pub fn teacher(ctx: &Ctx) -> Result<Run> {
    let p: TeacherParams = ctx.params()?;
    let run = ctx.start("teacher", &p, Vec::new())?;
    let t = synth_biased_teacher(p.seed, &p.teacher, &p.probe)?;
    save_checkpoint(&t.model, &run.path("teacher.vitw"))?;
    run.json(
        "teacher.json",
        &TeacherSummary {
            joint_xy: t.joint_xy,
            attempts: t.attempts,
            planted_channels: t.planted,
            n_params: t.model.n_weights(),
        },
    )?;
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Teacher weights with the positional encoding swapped.
    Teacher,
    /// Fresh weights from `student_vit`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillParams {
    pub seed: u64,
    pub student_init: StudentInit,
    pub student_pe: PeKind,
    /// Architecture of a randomly initialised student.
    pub student_vit: ViTConfig,
    pub distill: DistillConfig,
    /// Synthetic training set used when no image directory is given.
    pub data: ImageParams,
    /// Held-out images for blank-channel ranking and evaluation.
    pub heldout: ImageParams,
    pub probe: ProbeConfig,
}

impl Default for DistillParams {
    fn default() -> Self {
        DistillParams {
            seed: 0,
            student_init: StudentInit::Teacher,
            student_pe: PeKind::alibi(),
            student_vit: ViTConfig::default(),
            distill: DistillConfig::default(),
            data: ImageParams { count: 200, size: 128 },
            heldout: ImageParams::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub teacher: Option<PathBuf>,
    /// Directory of precomputed teacher FEAT1 embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Training image directory (default: synthetic textures).
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Serialize)]
struct Heldout {
    cosine: f64,
    blank_activation_ratio: f64,
    teacher_joint_xy: f64,
    student_joint_xy: f64,
}

#[derive(Serialize)]
struct DistillSummary {
    blank_channels: Vec<usize>,
    zero_norm_targets: usize,
    final_loss: Option<f64>,
    slope_log: Vec<Vec<f64>>,
    stage_checkpoints: Vec<String>,
    heldout: Option<Heldout>,
}

pub fn distill(ctx: &Ctx, args: &DistillArgs) -> Result<Run> {
    let p: DistillParams = ctx.params()?;
    let mut refs = Vec::new();
    if let Some(t) = &args.teacher {
        refs.push(input_ref("teacher", t)?);
    }
    if let Some(e) = &args.embeddings {
        refs.push(input_ref("embeddings", e)?);
    }
    if let Some(i) = &args.images {
        refs.push(input_ref("images", i)?);
    }
    let teacher = args.teacher.as_deref().map(inputs::model).transpose()?;
    let mut student: ViTModel<f32> = match (p.student_init, &teacher) {
        (StudentInit::Teacher, Some(t)) => t.with_pe(p.student_pe),
        (StudentInit::Teacher, None) => bail!("student_init = teacher needs --teacher"),
        (StudentInit::Random, _) => ViTModel::random(p.student_vit.clone().with_pe(p.student_pe), derive_seed(p.seed, &[0]))?,
    };
    let channels = student.config.channels;
    let run = ctx.start("distill", &p, refs)?;

    let data = match &args.images {
        Some(_) => inputs::images(args.images.as_deref(), &p.data, channels, 0)?,
        None => homogeneous_set(p.data.count, p.data.size, channels, derive_seed(p.seed, &[1])),
    };
    let heldout = inputs::images(None, &p.heldout, channels, derive_seed(p.seed, &[2]))?;
    let blank = match (&p.distill.blank_channels, &teacher, &args.embeddings) {
        (Some(b), _, _) => b.clone(),
        (None, Some(t), _) => identify_blank_channels(t, &heldout, p.distill.blank_k, &p.probe)?,
        (None, None, Some(dir)) => {
            let staged = dir.join(p.distill.high.image_size.to_string());
            let stacks = inputs::feature_dir(if staged.is_dir() { &staged } else { dir })?;
            let pos = stacks[0].n_layers() - 1;
            rank_positional_channels(&stacks, pos, p.distill.blank_k, &p.probe)?
        }
        (None, None, None) => bail!("give --teacher or --embeddings"),
    };
    log::info!("blanking channels {blank:?}");

    let source = match (&teacher, &args.embeddings) {
        (Some(t), _) => TeacherSource::Model(t.clone()),
        (None, Some(dir)) => TeacherSource::Embeddings(dir.clone()),
        (None, None) => unreachable!("checked above"),
    };
    let mut stages = Vec::new();
    let outcome = distill_with_hook(&mut student, &source, &data, &blank, &p.distill, &mut |stage, m| {
        let name = format!("student_{stage}.vitw");
        save_checkpoint(m, &run.path(&name))?;
        stages.push(name);
        Ok(())
    })
    .context("distillation failed")?;
    save_checkpoint(&student, &run.path("student.vitw"))?;
    run.csv(
        "loss_curve.csv",
        &["stage", "epoch", "mean_loss"],
        outcome
            .loss_curve
            .iter()
            .map(|e| vec![e.stage.clone(), e.epoch.to_string(), num(e.mean_loss)]),
    )?;
    let heldout_report = match &teacher {
        Some(t) => {
            let s = final_stacks(&student, &heldout)?;
            let ts = final_stacks(t, &heldout)?;
            Some(Heldout {
                cosine: heldout_cosine(&student, t, &heldout, &blank)?,
                blank_activation_ratio: blank_activation_ratio(&s, &blank),
                teacher_joint_xy: joint_xy_score(&ts, 0, &p.probe)?,
                student_joint_xy: joint_xy_score(&s, 0, &p.probe)?,
            })
        }
        None => None,
    };
    run.json(
        "metadata.json",
        &DistillSummary {
            blank_channels: blank,
            zero_norm_targets: outcome.zero_norm_targets,
            final_loss: outcome.loss_curve.last().map(|e| e.mean_loss),
            slope_log: outcome.slope_log,
            stage_checkpoints: stages,
            heldout: heldout_report,
        },
    )?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlibiParams {
    pub height: usize,
    pub width: usize,
    pub wrap: bool,
}

impl Default for AlibiParams {
    fn default() -> Self {
        AlibiParams { height: 2, width: 2, wrap: true }
    }
}

pub fn export_alibi(ctx: &Ctx) -> Result<Run> {
    let p: AlibiParams = ctx.params()?;
    let bias = AlibiBias::build(p.height, p.width, p.wrap)?;
    let run = ctx.start("export-alibi", &p, Vec::new())?;
    let n = bias.n_tokens();
    let header: Vec<String> = std::iter::once("token".to_string()).chain((0..n).map(|j| j.to_string())).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    run.csv(
        "alibi.csv",
        &header,
        (0..n).map(|i| std::iter::once(i.to_string()).chain((0..n).map(|j| num(bias.get(i, j)))).collect()),
    )?;
    Ok(run)
}
