use super::{idx, ViTModel, HEAD, PER_BLOCK};
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::image::Image;
use crate::pos_encoding::{interpolation_matrix, jitter_alibi, sinusoidal_pe, AlibiBias, PeKind, RopeTables};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Layers to return: `0..L` are block outputs, `L` is the normed output.
    /// Empty means the final layer only.
    pub collect: Vec<usize>,
    /// Test-time noise `(sigma, seed)` on the ALiBi distance matrix.
    pub jitter: Option<(f64, u64)>,
}

impl ForwardOptions {
    pub fn all_layers(layers: usize) -> Self {
        ForwardOptions {
            collect: (0..=layers).collect(),
            jitter: None,
        }
    }
}

/// Forward-pass outputs as tape variables, patch tokens only.
pub struct ForwardOutput<'t, T: Float> {
    pub grid: (usize, usize),
    pub layers: Vec<usize>,
    pub grids: Vec<Var<'t, T>>,
    pub specials: Vec<Var<'t, T>>,
}

/// Splits a `[C, H, W]` image into raster-ordered `s x s` patches, each
/// flattened channel-major, after mapping values through `(v - 0.5) / 0.5`.
pub fn patchify<T: Float>(image: &Image, s: usize) -> Result<Tensor<T>> {
    if s == 0 || image.height % s != 0 || image.width % s != 0 || image.height == 0 || image.width == 0 {
        return Err(Error::dim(format!(
            "{}x{} image is not divisible into {s}-px patches",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / s, image.width / s);
    let feat = image.channels * s * s;
    let mut out = Vec::with_capacity(gh * gw * feat);
    for r in 0..gh {
        for c in 0..gw {
            for ch in 0..image.channels {
                for dy in 0..s {
                    for dx in 0..s {
                        let v = image.get(ch, r * s + dy, c * s + dx) as f64;
                        out.push(T::of((v - 0.5) / 0.5));
                    }
                }
            }
        }
    }
    Tensor::new(&[gh * gw, feat], out)
}

impl<T: Float> ViTModel<T> {
    /// Registers every parameter on `tape`; trainable ones become gradient
    /// leaves when `train` is set, everything else is a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, train: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if train && self.is_trainable(i) {
                    tape.param(p)
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        vars: &[Var<'t, T>],
        image: &Image,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'t, T>> {
        let cfg = &self.config;
        if image.channels != cfg.channels {
            return Err(Error::dim(format!(
                "model expects {} channels, image has {}",
                cfg.channels, image.channels
            )));
        }
        let s = cfg.patch_size;
        let patches = patchify::<T>(image, s)?;
        let grid = (image.height / s, image.width / s);
        let n = grid.0 * grid.1;
        let last = cfg.layers;
        let collect: Vec<usize> = if opts.collect.is_empty() {
            vec![last]
        } else {
            let mut c = opts.collect.clone();
            c.sort_unstable();
            c.dedup();
            if let Some(&bad) = c.iter().find(|&&l| l > last) {
                return Err(Error::Contract(format!(
                    "layer {bad} requested from a {last}-block model"
                )));
            }
            c
        };

        let mut x = tape.constant(&patches).matmul(&vars[idx::PATCH_W])?.add_bias(&vars[idx::PATCH_B])?;
        match cfg.pe {
            PeKind::Learned => {
                let pos = vars[idx::POS];
                let pe = if grid == cfg.native_grid {
                    pos
                } else {
                    let m = interpolation_matrix(cfg.native_grid, grid)?;
                    let nf = cfg.native_grid.0 * cfg.native_grid.1;
                    tape.constant_from(&[n, nf], m.into_iter().map(T::of).collect())?
                        .matmul(&pos)?
                };
                x = x.add(&pe)?;
            }
            PeKind::Sinusoidal => {
                let pe = sinusoidal_pe(grid.0, grid.1, cfg.dim)?.cast::<T>();
                x = x.add(&tape.constant(&pe))?;
            }
            _ => {}
        }
        let r = cfg.num_registers;
        if r > 0 {
            x = Var::concat_rows(&[vars[idx::REGISTERS], x])?;
        }
        let t_all = r + n;

        let dists: Option<Vec<Vec<T>>> = match cfg.pe {
            PeKind::Alibi2d { wrap, .. } => {
                let bias = AlibiBias::build(grid.0, grid.1, wrap)?;
                let per_layer = match opts.jitter {
                    Some((sigma, seed)) => jitter_alibi(&bias, sigma, seed, cfg.layers)?,
                    None => vec![bias.dist().to_vec(); cfg.layers],
                };
                Some(
                    per_layer
                        .iter()
                        .map(|d| AlibiBias::with_specials(d, n, r).into_iter().map(T::of).collect())
                        .collect(),
                )
            }
            _ => None,
        };
        let rope: Option<(Vec<T>, Vec<T>)> = match cfg.pe {
            PeKind::Rope2d => {
                let tables = RopeTables::new(grid.0, grid.1, cfg.head_dim())?.with_specials(r, cfg.head_dim());
                Some((
                    tables.cos.into_iter().map(T::of).collect(),
                    tables.sin.into_iter().map(T::of).collect(),
                ))
            }
            _ => None,
        };

        let mut out = ForwardOutput {
            grid,
            layers: Vec::new(),
            grids: Vec::new(),
            specials: Vec::new(),
        };
        let keep = |l: usize, x: Var<'t, T>, out: &mut ForwardOutput<'t, T>| -> Result<()> {
            if collect.contains(&l) {
                out.layers.push(l);
                out.grids.push(x.slice_rows(r, n)?);
                if r > 0 {
                    out.specials.push(x.slice_rows(0, r)?);
                }
            }
            Ok(())
        };
        for l in 0..cfg.layers {
            let b = &vars[HEAD + PER_BLOCK * l..HEAD + PER_BLOCK * (l + 1)];
            let dist = dists.as_ref().map(|d| d[l].as_slice());
            x = self.block(b, vars[idx::SLOPES], x, t_all, dist, rope.as_ref())?;
            keep(l, x, &mut out)?;
        }
        let tail = HEAD + PER_BLOCK * cfg.layers;
        let y = x.layernorm(&vars[tail], &vars[tail + 1], cfg.ln_eps)?;
        keep(last, y, &mut out)?;
        Ok(out)
    }

    fn block<'t>(
        &self,
        b: &[Var<'t, T>],
        slopes: Var<'t, T>,
        x: Var<'t, T>,
        t_all: usize,
        dist: Option<&[T]>,
        rope: Option<&(Vec<T>, Vec<T>)>,
    ) -> Result<Var<'t, T>> {
        use super::idx::*;
        let cfg = &self.config;
        let (d, h) = (cfg.dim, cfg.heads);
        let dh = d / h;
        let eps = cfg.ln_eps;

        let hn = x.layernorm(&b[NORM1_G], &b[NORM1_B], eps)?;
        let qkv = hn
            .matmul(&b[QKV_W])?
            .add_bias(&b[QKV_B])?
            .reshape(&[t_all, 3, h, dh])?
            .permute(&[1, 2, 0, 3])?;
        let part = |i: usize| -> Result<Var<'t, T>> { qkv.slice_rows(i, 1)?.reshape(&[h, t_all, dh]) };
        let (mut q, mut k, v) = (part(0)?, part(1)?, part(2)?);
        if let Some((cos, sin)) = rope {
            q = q.rope(cos, sin)?;
            k = k.rope(cos, sin)?;
        }
        let mut scores = q
            .matmul(&k.transpose_last2()?)?
            .scale(T::of(1.0 / (dh as f64).sqrt()));
        if let Some(dist) = dist {
            scores = scores.add(&slopes.head_bias(dist, t_all)?)?;
        }
        let attn = scores.softmax_rows()?;
        let o = attn
            .matmul(&v)?
            .permute(&[1, 0, 2])?
            .reshape(&[t_all, d])?
            .matmul(&b[PROJ_W])?
            .add_bias(&b[PROJ_B])?;
        let x = x.add(&o)?;

        let hn = x.layernorm(&b[NORM2_G], &b[NORM2_B], eps)?;
        let m = hn
            .matmul(&b[FC1_W])?
            .add_bias(&b[FC1_B])?
            .gelu()
            .matmul(&b[FC2_W])?
            .add_bias(&b[FC2_B])?;
        x.add(&m)
    }

    /// Inference returning `[N, d]` tensors per collected layer.
    pub fn forward_grids(&self, image: &Image, opts: &ForwardOptions) -> Result<(Vec<usize>, (usize, usize), Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = self.forward_tape(&tape, &vars, image, opts)?;
        Ok((
            out.layers,
            out.grid,
            out.grids.iter().map(|v| v.value()).collect(),
            out.specials.iter().map(|v| v.value()).collect(),
        ))
    }

    pub fn forward_features(&self, image: &Image, image_id: &str, opts: &ForwardOptions) -> Result<FeatureStack> {
        let (layers, grid, grids, specials) = self.forward_grids(image, opts)?;
        let to32 = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>();
        let mut stack = FeatureStack::new(image_id, grid, self.config.dim, layers, grids.iter().map(to32).collect())?;
        stack.specials = specials.iter().map(to32).collect();
        Ok(stack)
    }

    /// `max |roll⁻¹(F(roll(img))) − F(img)|` over patch tokens of every
    /// layer, for a pixel shift that must be a multiple of the patch size.
    pub fn toroidal_shift_check(&self, image: &Image, shift: (usize, usize)) -> Result<f64> {
        let s = self.config.patch_size;
        if shift.0 % s != 0 || shift.1 % s != 0 {
            return Err(Error::dim(format!(
                "shift {shift:?} is not a multiple of the {s}-px patch"
            )));
        }
        let opts = ForwardOptions::all_layers(self.config.layers);
        let (_, grid, base, _) = self.forward_grids(image, &opts)?;
        let rolled = image.roll(shift.0 as isize, shift.1 as isize);
        let (_, _, moved, _) = self.forward_grids(&rolled, &opts)?;
        let (dr, dc) = (shift.0 / s % grid.0, shift.1 / s % grid.1);
        let d = self.config.dim;
        let mut worst = 0.0f64;
        for (b, m) in base.iter().zip(&moved) {
            for r in 0..grid.0 {
                for c in 0..grid.1 {
                    let t = r * grid.1 + c;
                    let tm = ((r + dr) % grid.0) * grid.1 + (c + dc) % grid.1;
                    for k in 0..d {
                        let diff = (b.data()[t * d + k] - m.data()[tm * d + k]).as_f64().abs();
                        worst = worst.max(diff);
                    }
                }
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::vit::ViTConfig;

    fn small(pe: PeKind) -> ViTConfig {
        ViTConfig {
            dim: 16,
            heads: 2,
            layers: 2,
            pe,
            native_grid: (4, 4),
            ..ViTConfig::default()
        }
    }

    #[test]
    fn patchify_counts() {
        let img = Image::filled(1, 32, 32, 0.3);
        assert_eq!(patchify::<f32>(&img, 8).unwrap().shape(), &[16, 64]);
        let img = Image::filled(3, 224, 224, 0.3);
        assert_eq!(patchify::<f32>(&img, 14).unwrap().shape()[0], 256);
        assert!(matches!(patchify::<f32>(&Image::filled(1, 30, 32, 0.0), 8), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let p = patchify::<f64>(&Image::filled(1, 24, 16, 0.7), 8).unwrap();
        let rows: Vec<&[f64]> = p.data().chunks(64).collect();
        assert!(rows.iter().all(|r| *r == rows[0]));
    }

    #[test]
    fn zero_weights_make_blocks_identity() {
        let cfg = small(PeKind::NoPe);
        let mut m = ViTModel::<f64>::random(cfg, 3).unwrap();
        let names = m.param_names();
        for (p, name) in m.params_mut().iter_mut().zip(names) {
            if name.starts_with("blocks.") {
                *p = Tensor::zeros(p.shape());
            }
        }
        let img = synth::texture(synth::TextureKind::Noise, 32, 1, 1);
        let opts = ForwardOptions { collect: vec![0, 1], jitter: None };
        let (_, _, grids, _) = m.forward_grids(&img, &opts).unwrap();
        let tape = Tape::new();
        let vars = m.bind(&tape, false);
        let embed = tape.constant(&patchify(&img, 8).unwrap()).matmul(&vars[idx::PATCH_W]).unwrap().add_bias(&vars[idx::PATCH_B]).unwrap().value();
        assert_eq!(grids[0], embed);
        assert_eq!(grids[1], embed);
    }

    #[test]
    fn default_collect_is_final_layer() {
        let m = ViTModel::<f32>::random(small(PeKind::alibi()), 0).unwrap();
        let img = Image::filled(1, 32, 32, 0.5);
        let st = m.forward_features(&img, "x", &ForwardOptions::default()).unwrap();
        assert_eq!(st.layers, vec![2]);
        assert_eq!(st.grid, (4, 4));
    }

    #[test]
    fn registers_stay_out_of_grids() {
        let cfg = ViTConfig {
            num_registers: 2,
            ..small(PeKind::alibi())
        };
        let m = ViTModel::<f32>::random(cfg, 0).unwrap();
        let img = synth::texture(synth::TextureKind::Noise, 32, 1, 4);
        let st = m.forward_features(&img, "x", &ForwardOptions::all_layers(2)).unwrap();
        assert!(st.grids.iter().all(|g| g.len() == 16 * 16));
        assert!(st.specials.iter().all(|g| g.len() == 2 * 16));
        // registers are not positional, so the ALiBi model stays equivariant
        assert!(m.toroidal_shift_check(&img, (8, 16)).unwrap() < 1e-5);
    }

    #[test]
    fn shift_checks_trivial_cases() {
        let m = ViTModel::<f64>::random(small(PeKind::Learned), 0).unwrap();
        let img = synth::texture(synth::TextureKind::Noise, 32, 1, 4);
        assert_eq!(m.toroidal_shift_check(&img, (0, 0)).unwrap(), 0.0);
        assert_eq!(m.toroidal_shift_check(&img, (32, 32)).unwrap(), 0.0);
        assert!(m.toroidal_shift_check(&img, (8, 16)).unwrap() > 1e-3);
        assert!(m.toroidal_shift_check(&img, (3, 0)).is_err());
    }

    #[test]
    fn uniform_attention_averages_values() {
        // zero query/key weights and biases give a uniform attention matrix
        let cfg = small(PeKind::NoPe);
        let m = ViTModel::<f64>::random(cfg.clone(), 5).unwrap();
        let tape = Tape::new();
        let mut vars = m.bind(&tape, false);
        let mut w = m.params()[HEAD + idx::QKV_W].clone();
        let mut bq = m.params()[HEAD + idx::QKV_B].clone();
        let d = cfg.dim;
        for row in w.data_mut().chunks_mut(3 * d) {
            row[..2 * d].iter_mut().for_each(|v| *v = 0.0);
        }
        bq.data_mut()[..2 * d].iter_mut().for_each(|v| *v = 0.0);
        vars[HEAD + idx::QKV_W] = tape.constant(&w);
        vars[HEAD + idx::QKV_B] = tape.constant(&bq);
        let x = tape.constant(&Tensor::randn(&[5, d], 1.0, &mut synth::rng(1)));
        let out = m.block(&vars[HEAD..HEAD + PER_BLOCK], vars[idx::SLOPES], x, 5, None, None).unwrap();
        // rebuild the expected output with the attention replaced by a mean
        let hn = x.layernorm(&vars[HEAD + idx::NORM1_G], &vars[HEAD + idx::NORM1_B], cfg.ln_eps).unwrap();
        let vproj = hn.matmul(&vars[HEAD + idx::QKV_W]).unwrap().add_bias(&vars[HEAD + idx::QKV_B]).unwrap().value();
        let mut mean_v = vec![0.0; d];
        for t in 0..5 {
            for k in 0..d {
                mean_v[k] += vproj.data()[t * 3 * d + 2 * d + k] / 5.0;
            }
        }
        let o = tape.constant(&Tensor::new(&[5, d], mean_v.repeat(5)).unwrap());
        let o = o.matmul(&vars[HEAD + idx::PROJ_W]).unwrap().add_bias(&vars[HEAD + idx::PROJ_B]).unwrap();
        let x1 = x.add(&o).unwrap();
        let hn2 = x1.layernorm(&vars[HEAD + idx::NORM2_G], &vars[HEAD + idx::NORM2_B], cfg.ln_eps).unwrap();
        let mlp = hn2
            .matmul(&vars[HEAD + idx::FC1_W]).unwrap()
            .add_bias(&vars[HEAD + idx::FC1_B]).unwrap()
            .gelu()
            .matmul(&vars[HEAD + idx::FC2_W]).unwrap()
            .add_bias(&vars[HEAD + idx::FC2_B]).unwrap();
        let expected = x1.add(&mlp).unwrap().value();
        assert!(out.value().max_abs_diff(&expected).unwrap() < 1e-12);
    }
}
