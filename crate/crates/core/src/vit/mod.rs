//! Toy vision transformer: patch projection, optional additive positional
//! table, pre-norm attention blocks with optional ALiBi offsets or RoPE, and
//! a final layernorm. Parameters live in one flat list in checkpoint order.

mod checkpoint;
mod forward;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pos_encoding::{learned_pe_init, PeKind};
use crate::synth;
use crate::tensor::{Float, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use forward::{patchify, ForwardOptions, ForwardOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub pe: PeKind,
    pub num_registers: usize,
    pub channels: usize,
    /// Token grid the learned table is stored at.
    pub native_grid: (usize, usize),
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            patch_size: 8,
            dim: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            pe: PeKind::alibi(),
            num_registers: 0,
            channels: 1,
            native_grid: (8, 8),
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn with_pe(mut self, pe: PeKind) -> Self {
        self.pe = pe;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.dim == 0 || self.heads == 0 || self.channels == 0 {
            return Err(Error::dim("patch size, dim, heads and channels must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::dim(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if matches!(self.pe, PeKind::Rope2d) && self.head_dim() % 4 != 0 {
            return Err(Error::dim("2D RoPE needs a head dimension divisible by 4"));
        }
        if matches!(self.pe, PeKind::Sinusoidal) && self.dim % 4 != 0 {
            return Err(Error::dim("sinusoidal encoding needs dim divisible by 4"));
        }
        if self.num_registers > 4 {
            return Err(Error::Validation(format!(
                "at most 4 register tokens are supported, got {}",
                self.num_registers
            )));
        }
        if self.native_grid.0 == 0 || self.native_grid.1 == 0 {
            return Err(Error::dim("native grid must be non-empty"));
        }
        Ok(())
    }

    /// Number of parameter tensors.
    pub fn n_params(&self) -> usize {
        HEAD + PER_BLOCK * self.layers + 2
    }
}

const HEAD: usize = 5;
const PER_BLOCK: usize = 12;

pub(crate) mod idx {
    pub const PATCH_W: usize = 0;
    pub const PATCH_B: usize = 1;
    pub const POS: usize = 2;
    pub const REGISTERS: usize = 3;
    pub const SLOPES: usize = 4;
    pub const NORM1_G: usize = 0;
    pub const NORM1_B: usize = 1;
    pub const QKV_W: usize = 2;
    pub const QKV_B: usize = 3;
    pub const PROJ_W: usize = 4;
    pub const PROJ_B: usize = 5;
    pub const NORM2_G: usize = 6;
    pub const NORM2_B: usize = 7;
    pub const FC1_W: usize = 8;
    pub const FC1_B: usize = 9;
    pub const FC2_W: usize = 10;
    pub const FC2_B: usize = 11;
}

const BLOCK_NAMES: [&str; PER_BLOCK] = [
    "norm1.gain",
    "norm1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.gain",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// Names and shapes of every parameter tensor, in checkpoint order.
pub fn param_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let (d, s, c) = (cfg.dim, cfg.patch_size, cfg.channels);
    let hidden = cfg.hidden();
    let mut out = vec![
        ("patch.weight".to_string(), vec![c * s * s, d]),
        ("patch.bias".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.native_grid.0 * cfg.native_grid.1, d]),
        ("registers".to_string(), vec![cfg.num_registers, d]),
        ("alibi.slopes".to_string(), vec![cfg.heads]),
    ];
    for l in 0..cfg.layers {
        let shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, hidden],
            vec![hidden],
            vec![hidden, d],
            vec![d],
        ];
        for (name, shape) in BLOCK_NAMES.iter().zip(shapes) {
            out.push((format!("blocks.{l}.{name}"), shape));
        }
    }
    out.push(("norm.gain".to_string(), vec![d]));
    out.push(("norm.bias".to_string(), vec![d]));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<T: Float = f32> {
    pub config: ViTConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Float> ViTModel<T> {
    /// Builds a model from tensors in checkpoint order.
    pub fn from_params(config: ViTConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        let model = ViTModel { config, params };
        model.check_frozen_pe()?;
        Ok(model)
    }

    /// Random weights: linear maps `N(0, 1/fan_in)`, small random biases and
    /// norm parameters, `N(0, 0.02²)` learned table and registers, unit slopes.
    pub fn random(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = synth::rng(seed);
        let layout = param_layout(&config);
        let mut params = Vec::with_capacity(layout.len());
        for (i, (name, shape)) in layout.iter().enumerate() {
            let t = if i == idx::POS {
                if config.pe == PeKind::Learned {
                    learned_pe_init(config.native_grid.0, config.native_grid.1, config.dim, rng.random())
                } else {
                    Tensor::zeros(shape)
                }
            } else if i == idx::SLOPES {
                Tensor::ones(shape)
            } else if i == idx::REGISTERS {
                Tensor::randn(shape, 0.02, &mut rng)
            } else if name.ends_with(".weight") {
                Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            } else if name.ends_with(".gain") {
                Tensor::randn(shape, 0.05, &mut rng).map(|v| v + T::one())
            } else {
                Tensor::randn(shape, 0.02, &mut rng)
            };
            params.push(t);
        }
        Ok(ViTModel { config, params })
    }

    fn check_frozen_pe(&self) -> Result<()> {
        if self.config.pe != PeKind::Learned && self.params[idx::POS].data().iter().any(|&v| v != T::zero()) {
            return Err(Error::Validation(format!(
                "{} model must carry an all-zero learned table",
                self.config.pe.name()
            )));
        }
        if !self.slopes_trainable() && self.params[idx::SLOPES].data().iter().any(|&v| v != T::one()) {
            return Err(Error::Validation("fixed ALiBi slopes must all be 1".into()));
        }
        Ok(())
    }

    pub fn slopes_trainable(&self) -> bool {
        matches!(
            self.config.pe,
            PeKind::Alibi2d {
                trainable_slopes: true,
                ..
            }
        )
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        param_layout(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_names()
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn pos_embed(&self) -> &Tensor<T> {
        &self.params[idx::POS]
    }

    /// Replaces the learned table (learned-PE models only).
    pub fn set_pos_embed(&mut self, pe: Tensor<T>) -> Result<()> {
        if self.config.pe != PeKind::Learned {
            return Err(Error::Contract("only learned-PE models have a trainable table".into()));
        }
        if pe.shape() != self.params[idx::POS].shape() {
            return Err(Error::dim("replacement table has the wrong shape"));
        }
        self.params[idx::POS] = pe;
        Ok(())
    }

    pub fn slopes(&self) -> &[T] {
        self.params[idx::SLOPES].data()
    }

    /// Whether parameter `i` is updated by training.
    pub fn is_trainable(&self, i: usize) -> bool {
        match i {
            idx::POS => self.config.pe == PeKind::Learned,
            idx::SLOPES => self.slopes_trainable(),
            idx::REGISTERS => self.config.num_registers > 0,
            _ => true,
        }
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.is_trainable(i)).collect()
    }

    pub fn n_weights(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ViTModel<U> {
        ViTModel {
            config: self.config.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// A copy with a different positional scheme. The learned table is
    /// zeroed unless the target scheme is `Learned`; slopes reset to 1.
    pub fn with_pe(&self, pe: PeKind) -> ViTModel<T> {
        let mut out = self.clone();
        out.config.pe = pe;
        if pe != PeKind::Learned {
            out.params[idx::POS] = Tensor::zeros(self.params[idx::POS].shape());
        }
        out.params[idx::SLOPES] = Tensor::ones(&[self.config.heads]);
        out
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_match() {
        let cfg = ViTConfig::default();
        assert_eq!(param_layout(&cfg).len(), cfg.n_params());
        let m = ViTModel::<f32>::random(cfg, 0).unwrap();
        assert_eq!(m.params().len(), m.config.n_params());
    }

    #[test]
    fn alibi_model_has_zero_table_and_excludes_it() {
        let m = ViTModel::<f32>::random(ViTConfig::default(), 1).unwrap();
        assert!(m.pos_embed().data().iter().all(|&v| v == 0.0));
        assert!(!m.trainable_indices().contains(&idx::POS));
        assert!(!m.trainable_indices().contains(&idx::SLOPES));
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = ViTConfig {
            dim: 30,
            ..ViTConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Dimension(_))));
        let cfg = ViTConfig {
            num_registers: 5,
            ..ViTConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nonzero_table_rejected_for_alibi() {
        let m = ViTModel::<f32>::random(ViTConfig::default().with_pe(PeKind::Learned), 2).unwrap();
        let params = m.params().to_vec();
        assert!(ViTModel::from_params(ViTConfig::default(), params).is_err());
    }
}
