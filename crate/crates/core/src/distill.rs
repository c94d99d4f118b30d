//! Teacher-to-student feature distillation under a per-token cosine loss,
//! with channel blanking and a low-then-high resolution schedule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feat1;
use crate::features::FeatureStack;
use crate::image::Image;
use crate::pos_encoding::PeKind;
use crate::probe::{self, ProbeConfig, RampKind};
use crate::synth::{self, derive_seed};
use crate::tensor::{AdamW, AdamWConfig, Float, Tape, Tensor, Var};
use crate::vit::{ForwardOptions, ViTConfig, ViTModel};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub image_size: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub low: StageConfig,
    pub high: StageConfig,
    pub weight_decay: f64,
    /// Explicit blank set; when absent the `blank_k` most positional teacher
    /// channels are blanked.
    pub blank_channels: Option<Vec<usize>>,
    pub blank_k: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            low: StageConfig {
                image_size: 64,
                lr: 1e-4,
                batch_size: 32,
                epochs: 5,
            },
            high: StageConfig {
                image_size: 128,
                lr: 1e-5,
                batch_size: 8,
                epochs: 2,
            },
            weight_decay: 0.01,
            blank_channels: None,
            blank_k: 4,
            seed: 0,
        }
    }
}

/// Settings of the desk-scale positionally biased teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub vit: ViTConfig,
    /// Peak-to-peak size of each planted coordinate ramp in the learned table.
    pub ramp_amplitude: f64,
    /// Standard deviation of the noise filling the rest of the table.
    pub table_noise: f64,
    pub planted_channels: usize,
    pub min_joint_xy: f64,
    pub probe_images: usize,
    pub probe_size: usize,
    pub max_attempts: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            vit: ViTConfig {
                pe: PeKind::Learned,
                native_grid: (16, 16),
                ..ViTConfig::default()
            },
            ramp_amplitude: 6.0,
            table_noise: 0.02,
            planted_channels: 4,
            min_joint_xy: 0.5,
            probe_images: 10,
            probe_size: 128,
            max_attempts: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthTeacher {
    pub model: ViTModel<f32>,
    pub joint_xy: f64,
    pub attempts: usize,
    pub planted: Vec<usize>,
}

/// Learned table whose `planted` channels hold centred coordinate ramps
/// (x, y, x+y, x-y, cycling) and whose other channels are small noise.
pub fn biased_table(grid: (usize, usize), dim: usize, planted: &[usize], amplitude: f64, noise: f64, seed: u64) -> Tensor<f32> {
    let mut rng = synth::rng(seed);
    let mut t = Tensor::<f32>::randn(&[grid.0 * grid.1, dim], noise, &mut rng);
    let (h, w) = grid;
    let data = t.data_mut();
    for (k, &c) in planted.iter().enumerate() {
        for tok in 0..h * w {
            let x = (tok % w) as f64 / (w.max(2) - 1) as f64 - 0.5;
            let y = (tok / w) as f64 / (h.max(2) - 1) as f64 - 0.5;
            let v = match k % 4 {
                0 => x,
                1 => y,
                2 => (x + y) / 2.0,
                _ => (x - y) / 2.0,
            };
            data[tok * dim + c] += (amplitude * v) as f32;
        }
    }
    t
}

/// Images used to score positional bias: noise and textures alternating.
pub fn probe_images(count: usize, size: usize, channels: usize, seed: u64) -> Vec<(String, Image)> {
    let mut out = synth::noise_set(count.div_ceil(2), size, channels, derive_seed(seed, &[1]));
    out.extend(synth::homogeneous_set(count / 2, size, channels, derive_seed(seed, &[2])));
    out.truncate(count);
    // Both sets start at index 0 and textures include a noise kind, so ids
    // are made unique by position.
    out.into_iter()
        .enumerate()
        .map(|(j, (id, img))| (format!("p{j:02}-{id}"), img))
        .collect()
}

pub fn final_stacks<T: Float>(model: &ViTModel<T>, images: &[(String, Image)]) -> Result<Vec<FeatureStack>> {
    images
        .par_iter()
        .map(|(id, img)| model.forward_features(img, id, &ForwardOptions::default()))
        .collect()
}

pub fn all_layer_stacks<T: Float>(model: &ViTModel<T>, images: &[(String, Image)]) -> Result<Vec<FeatureStack>> {
    let opts = ForwardOptions::all_layers(model.config.layers);
    images
        .par_iter()
        .map(|(id, img)| model.forward_features(img, id, &opts))
        .collect()
}

/// A frozen learned-PE teacher whose final features are strongly
/// positional. Candidates are re-drawn from derived seeds until the joint
/// `(x, y)` score on noise and texture images reaches `min_joint_xy`.
pub fn synth_biased_teacher(seed: u64, cfg: &TeacherConfig, probe_cfg: &ProbeConfig) -> Result<SynthTeacher> {
    if cfg.vit.pe != PeKind::Learned {
        return Err(Error::Contract("the biased teacher uses a learned table".into()));
    }
    let images = probe_images(cfg.probe_images, cfg.probe_size, cfg.vit.channels, derive_seed(seed, &[0x7E]));
    let mut best = f64::NEG_INFINITY;
    for attempt in 0..cfg.max_attempts {
        let s = derive_seed(seed, &[attempt as u64]);
        let mut model = ViTModel::<f32>::random(cfg.vit.clone(), s)?;
        let mut rng = synth::rng(derive_seed(s, &[1]));
        let mut planted: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.vit.dim, cfg.planted_channels.min(cfg.vit.dim)).into_vec();
        let table = biased_table(cfg.vit.native_grid, cfg.vit.dim, &planted, cfg.ramp_amplitude, cfg.table_noise, derive_seed(s, &[2]));
        model.set_pos_embed(table)?;
        let stacks = final_stacks(&model, &images)?;
        let score = probe::joint_xy_score(&stacks, 0, probe_cfg)?;
        log::info!("teacher attempt {attempt}: joint xy {score:.3}");
        if score >= cfg.min_joint_xy {
            planted.sort_unstable();
            return Ok(SynthTeacher {
                model,
                joint_xy: score,
                attempts: attempt + 1,
                planted,
            });
        }
        best = best.max(score);
    }
    Err(Error::Validation(format!(
        "no teacher reached joint xy {} in {} attempts (best {best:.3})",
        cfg.min_joint_xy, cfg.max_attempts
    )))
}

/// The `k` channels with the highest mean per-channel joint `(x, y)` R²,
/// ties to the lower index, returned in ascending order.
pub fn rank_positional_channels(stacks: &[FeatureStack], layer_pos: usize, k: usize, cfg: &ProbeConfig) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let report = probe::probe_stacks(stacks, layer_pos, RampKind::XyJoint, cfg, true)?;
    let mut order: Vec<usize> = (0..report.per_channel_r2.len()).collect();
    order.sort_by(|&a, &b| report.per_channel_r2[b].total_cmp(&report.per_channel_r2[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    Ok(top)
}

pub fn identify_blank_channels<T: Float>(teacher: &ViTModel<T>, images: &[(String, Image)], k: usize, cfg: &ProbeConfig) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let stacks = final_stacks(teacher, images)?;
    rank_positional_channels(&stacks, 0, k, cfg)
}

/// Copy of `target` (`[n, c]`) with the blank channels set to zero.
pub fn blank_target<T: Float>(target: &[T], channels: usize, blank: &[usize]) -> Vec<T> {
    let mut out = target.to_vec();
    for row in out.chunks_mut(channels) {
        for &b in blank {
            row[b] = T::zero();
        }
    }
    out
}

/// `mean(1 - cos)` over tokens of `student` (`[n, c]`) against the blanked
/// teacher target. Returns the loss and the number of zero-norm target
/// tokens, which contribute a loss of 1.
pub fn cosine_loss<'t, T: Float>(student: Var<'t, T>, tape: &'t Tape<T>, teacher: &[T], blank: &[usize]) -> Result<(Var<'t, T>, usize)> {
    let shape = student.shape();
    if shape.len() != 2 || teacher.len() != shape[0] * shape[1] {
        return Err(Error::dim(format!(
            "student features {:?} do not match {} teacher values",
            shape,
            teacher.len()
        )));
    }
    let c = shape[1];
    if let Some(&b) = blank.iter().find(|&&b| b >= c) {
        return Err(Error::Contract(format!("blank channel {b} out of range for {c} channels")));
    }
    let target = blank_target(teacher, c, blank);
    let flagged = target.chunks(c).filter(|row| row.iter().all(|&v| v == T::zero())).count();
    let t = tape.constant_from(&shape, target)?;
    let cos = student.cosine_rows(&t, COSINE_EPS)?;
    let loss = cos.mean().scale(-T::one()).add(&tape.constant(&Tensor::scalar(T::one())))?;
    Ok((loss, flagged))
}

/// Non-differentiable per-token cosine similarities, restricted to the
/// channels outside `blank`.
pub fn token_cosines(student: &[f32], teacher: &[f32], channels: usize, blank: &[usize]) -> Vec<f64> {
    let keep: Vec<usize> = (0..channels).filter(|c| !blank.contains(c)).collect();
    student
        .chunks(channels)
        .zip(teacher.chunks(channels))
        .map(|(s, t)| {
            let (mut dot, mut ns, mut nt) = (0.0, 0.0, 0.0);
            for &c in &keep {
                let (a, b) = (s[c] as f64, t[c] as f64);
                dot += a * b;
                ns += a * a;
                nt += b * b;
            }
            dot / (ns.sqrt() * nt.sqrt() + COSINE_EPS)
        })
        .collect()
}

pub enum TeacherSource {
    Model(ViTModel<f32>),
    /// Directory of FEAT1 files named `<image id>.feat1`, optionally in a
    /// `<image size>/` subdirectory per stage.
    Embeddings(PathBuf),
}

impl TeacherSource {
    fn target(&self, id: &str, image: &Image, size: usize) -> Result<FeatureStack> {
        match self {
            TeacherSource::Model(m) => m.forward_features(image, id, &ForwardOptions::default()),
            TeacherSource::Embeddings(dir) => {
                let staged = dir.join(size.to_string()).join(format!("{id}.feat1"));
                let path = if staged.exists() { staged } else { dir.join(format!("{id}.feat1")) };
                let stack = feat1::read(&path)?;
                Ok(stack.select(stack.n_layers() - 1))
            }
        }
    }
}

/// Shortest-side resize and centre crop of every image to `target`.
pub fn dataset_pipeline(images: &[(String, Image)], target: usize) -> Result<Vec<(String, Image)>> {
    images
        .iter()
        .map(|(id, img)| Ok((id.clone(), img.resize_center_crop(target)?)))
        .collect()
}

/// Image files of `dir` in file-name order, converted to `channels`.
pub fn load_image_dir(dir: &Path, channels: usize) -> Result<Vec<(String, Image)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "pgm" | "ppm" | "tif" | "tiff" | "bmp"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, Image::load(p)?.with_channels(channels)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillOutcome {
    pub loss_curve: Vec<EpochLoss>,
    pub blank_channels: Vec<usize>,
    /// Slope values after every epoch (only when slopes are trainable).
    pub slope_log: Vec<Vec<f64>>,
    pub zero_norm_targets: usize,
}

struct Item {
    loss: f64,
    flagged: usize,
    grads: Vec<Option<Vec<f32>>>,
}

fn item_grads(student: &ViTModel<f32>, trainable: &[usize], image: &Image, target: &[f32], blank: &[usize]) -> Result<Item> {
    let tape = Tape::new();
    let vars = student.bind(&tape, true);
    let out = student.forward_tape(&tape, &vars, image, &ForwardOptions::default())?;
    let (loss, flagged) = cosine_loss(out.grids[0], &tape, target, blank)?;
    loss.backward()?;
    Ok(Item {
        loss: loss.item() as f64,
        flagged,
        grads: trainable.iter().map(|&i| vars[i].grad().map(|g| g.into_data())).collect(),
    })
}

/// Trains `student` to match the teacher's final features: a low-resolution
/// stage, then a high-resolution stage, each with AdamW at a constant rate.
pub fn distill(student: &mut ViTModel<f32>, teacher: &TeacherSource, dataset: &[(String, Image)], blank: &[usize], cfg: &DistillConfig) -> Result<DistillOutcome> {
    distill_with_hook(student, teacher, dataset, blank, cfg, &mut |_, _| Ok(()))
}

/// [`distill`] calling `on_stage_end(stage name, student)` after each stage
/// that ran.
pub fn distill_with_hook(
    student: &mut ViTModel<f32>,
    teacher: &TeacherSource,
    dataset: &[(String, Image)],
    blank: &[usize],
    cfg: &DistillConfig,
    on_stage_end: &mut dyn FnMut(&str, &ViTModel<f32>) -> Result<()>,
) -> Result<DistillOutcome> {
    if !matches!(student.config.pe, PeKind::Alibi2d { .. } | PeKind::NoPe) {
        return Err(Error::Contract(format!(
            "students use ALiBi or no positional encoding, not {}",
            student.config.pe.name()
        )));
    }
    if let Some(&b) = blank.iter().find(|&&b| b >= student.config.dim) {
        return Err(Error::Contract(format!("blank channel {b} exceeds the feature width")));
    }
    let mut outcome = DistillOutcome {
        blank_channels: blank.to_vec(),
        ..DistillOutcome::default()
    };
    let trainable = student.trainable_indices();
    let mut opt = AdamW::<f32>::new(AdamWConfig {
        lr: cfg.low.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    for (si, (name, stage)) in [("low", &cfg.low), ("high", &cfg.high)].into_iter().enumerate() {
        if stage.epochs == 0 {
            continue;
        }
        if stage.batch_size == 0 {
            return Err(Error::Validation(format!("{name} stage batch size is zero")));
        }
        let images = dataset_pipeline(dataset, stage.image_size)?;
        let s = student.config.patch_size;
        let grid = (stage.image_size / s, stage.image_size / s);
        let targets: Vec<Vec<f32>> = images
            .par_iter()
            .map(|(id, img)| {
                let t = teacher.target(id, img, stage.image_size)?;
                if t.grid != grid || t.channels != student.config.dim {
                    return Err(Error::dim(format!(
                        "teacher embedding for {id} is {}x{}x{}, student produces {}x{}x{}",
                        t.grid.0, t.grid.1, t.channels, grid.0, grid.1, student.config.dim
                    )));
                }
                Ok(t.grids.into_iter().next_back().unwrap_or_default())
            })
            .collect::<Result<_>>()?;
        opt.set_lr(stage.lr);
        for epoch in 0..stage.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.shuffle(&mut synth::rng(derive_seed(cfg.seed, &[si as u64, epoch as u64])));
            let mut total = 0.0;
            for batch in order.chunks(stage.batch_size) {
                let items: Vec<Item> = batch
                    .par_iter()
                    .map(|&i| item_grads(student, &trainable, &images[i].1, &targets[i], blank))
                    .collect::<Result<_>>()?;
                student.zero_grad();
                let scale = 1.0 / items.len() as f32;
                for (slot, &pi) in trainable.iter().enumerate() {
                    let mut acc = vec![0.0f32; student.params()[pi].numel()];
                    for it in &items {
                        if let Some(g) = &it.grads[slot] {
                            for (a, v) in acc.iter_mut().zip(g) {
                                *a += v * scale;
                            }
                        }
                    }
                    student.params_mut()[pi].accumulate_grad(&acc)?;
                }
                for it in &items {
                    total += it.loss;
                    if epoch == 0 {
                        outcome.zero_norm_targets += it.flagged;
                    }
                }
                let mut params: Vec<&mut Tensor<f32>> = student
                    .params_mut()
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| trainable.contains(i))
                    .map(|(_, p)| p)
                    .collect();
                opt.step(&mut params)?;
            }
            let mean_loss = total / images.len() as f64;
            log::info!("{name} epoch {epoch}: loss {mean_loss:.5}");
            outcome.loss_curve.push(EpochLoss {
                stage: name.to_string(),
                epoch,
                mean_loss,
            });
            if student.slopes_trainable() {
                outcome.slope_log.push(student.slopes().iter().map(|&v| v as f64).collect());
            }
        }
        student.zero_grad();
        on_stage_end(name, student)?;
    }
    student.zero_grad();
    Ok(outcome)
}

/// Mean per-token cosine similarity between student and teacher final
/// features outside the blank set, over `images`.
pub fn heldout_cosine(student: &ViTModel<f32>, teacher: &ViTModel<f32>, images: &[(String, Image)], blank: &[usize]) -> Result<f64> {
    let s = final_stacks(student, images)?;
    let t = final_stacks(teacher, images)?;
    let mut all = Vec::new();
    for (a, b) in s.iter().zip(&t) {
        all.extend(token_cosines(a.last(), b.last(), a.channels, blank));
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

/// Mean absolute activation on the blank channels divided by that on the
/// remaining channels.
pub fn blank_activation_ratio(stacks: &[FeatureStack], blank: &[usize]) -> f64 {
    let (mut on, mut off, mut n_on, mut n_off) = (0.0, 0.0, 0usize, 0usize);
    for s in stacks {
        for row in s.last().chunks(s.channels) {
            for (c, &v) in row.iter().enumerate() {
                if blank.contains(&c) {
                    on += v.abs() as f64;
                    n_on += 1;
                } else {
                    off += v.abs() as f64;
                    n_off += 1;
                }
            }
        }
    }
    (on / n_on.max(1) as f64) / (off / n_off.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_loss_examples() {
        let tape = Tape::<f64>::new();
        let t = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let same = tape.constant_from(&[2, 3], t.clone()).unwrap();
        let (l, _) = cosine_loss(same, &tape, &t, &[]).unwrap();
        assert!(l.item().abs() < 1e-8);

        let neg = tape.constant_from(&[2, 3], t.iter().map(|v| -v).collect()).unwrap();
        let (l, _) = cosine_loss(neg, &tape, &t, &[]).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-8);

        let a = tape.constant_from(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (l, _) = cosine_loss(a, &tape, &[0.0, 1.0], &[]).unwrap();
        assert!((l.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blanked_target_tokens_are_flagged() {
        let tape = Tape::<f64>::new();
        let s = tape.constant_from(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (l, flagged) = cosine_loss(s, &tape, &[3.0, 0.0, 0.0, 2.0], &[0]).unwrap();
        assert_eq!(flagged, 1);
        // token 0 target is zero (loss 1), token 1 is [0, 2] (cos 1/sqrt 2)
        let want = 1.0 - (0.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0;
        assert!((l.item() - want).abs() < 1e-8);
        assert!(cosine_loss(s, &tape, &[0.0; 4], &[5]).is_err());
    }

    #[test]
    fn planted_channels_are_identified() {
        let (h, w, c) = (16, 16, 12);
        let mut rng = synth::rng(5);
        let stacks: Vec<FeatureStack> = (0..3)
            .map(|i| {
                let mut g = Tensor::<f32>::randn(&[h * w, c], 1.0, &mut rng).into_data();
                for t in 0..h * w {
                    g[t * c + 2] = (t % w) as f32;
                    g[t * c + 9] = (t / w) as f32;
                }
                FeatureStack::new(format!("p{i}"), (h, w), c, vec![0], vec![g]).unwrap()
            })
            .collect();
        let cfg = ProbeConfig::default();
        assert_eq!(rank_positional_channels(&stacks, 0, 2, &cfg).unwrap(), vec![2, 9]);
        assert!(rank_positional_channels(&stacks, 0, 0, &cfg).unwrap().is_empty());
    }
}
