//! `VITW1` checkpoints: the magic, a fixed little-endian config block, then
//! every parameter as `(name, dims, f32 data)` in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use super::{param_layout, ViTConfig, ViTModel};
use crate::error::{Error, Result};
use crate::pos_encoding::PeKind;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 5] = b"VITW1";

fn pe_code(pe: PeKind) -> [u8; 3] {
    match pe {
        PeKind::Learned => [0, 0, 0],
        PeKind::Sinusoidal => [1, 0, 0],
        PeKind::NoPe => [2, 0, 0],
        PeKind::Rope2d => [3, 0, 0],
        PeKind::Alibi2d { wrap, trainable_slopes } => [4, wrap as u8, trainable_slopes as u8],
    }
}

fn pe_from_code(c: [u8; 3], offset: u64) -> Result<PeKind> {
    Ok(match c[0] {
        0 => PeKind::Learned,
        1 => PeKind::Sinusoidal,
        2 => PeKind::NoPe,
        3 => PeKind::Rope2d,
        4 => PeKind::Alibi2d {
            wrap: c[1] != 0,
            trainable_slopes: c[2] != 0,
        },
        k => {
            return Err(Error::Format {
                offset,
                message: format!("unknown positional scheme code {k}"),
            })
        }
    })
}

pub fn write_checkpoint<T: Float>(model: &ViTModel<T>, w: &mut impl Write) -> std::io::Result<()> {
    let c = &model.config;
    w.write_all(MAGIC)?;
    for v in [
        c.patch_size,
        c.dim,
        c.heads,
        c.layers,
        c.mlp_ratio,
        c.num_registers,
        c.channels,
        c.native_grid.0,
        c.native_grid.1,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&pe_code(c.pe))?;
    w.write_all(&[0])?;
    w.write_all(&c.ln_eps.to_le_bytes())?;
    let names = model.param_names();
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    for (name, p) in names.iter().zip(model.params()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.rank() as u32).to_le_bytes())?;
        for &d in p.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {} bytes, {} remain",
                    n,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_checkpoint<T: Float>(r: &mut impl Read) -> Result<ViTModel<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(5, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing VITW1 magic".into(),
        });
    }
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = cur.u32("config")?;
    }
    let code_at = cur.pos as u64;
    let code: [u8; 3] = cur.take(3, "config")?.try_into().expect("3 bytes");
    cur.take(1, "config")?;
    let ln_eps = f64::from_le_bytes(cur.take(8, "config")?.try_into().expect("8 bytes"));
    let config = ViTConfig {
        patch_size: f[0],
        dim: f[1],
        heads: f[2],
        layers: f[3],
        mlp_ratio: f[4],
        num_registers: f[5],
        channels: f[6],
        native_grid: (f[7], f[8]),
        pe: pe_from_code(code, code_at)?,
        ln_eps,
    };
    config.validate()?;
    let layout = param_layout(&config);
    let count_at = cur.pos as u64;
    let count = cur.u32("array count")?;
    if count != layout.len() {
        return Err(Error::Format {
            offset: count_at,
            message: format!("config implies {} arrays, header says {count}", layout.len()),
        });
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let at = cur.pos as u64;
        let len = cur.u32("name length")?;
        let got = cur.take(len, "name")?;
        if got != name.as_bytes() {
            return Err(Error::Format {
                offset: at,
                message: format!("expected array {name}, found {}", String::from_utf8_lossy(got)),
            });
        }
        let ndim = cur.u32("rank")?;
        let dims: Vec<usize> = (0..ndim).map(|_| cur.u32("dims")).collect::<Result<_>>()?;
        if &dims != shape {
            return Err(Error::Format {
                offset: at,
                message: format!("array {name} has dims {dims:?}, expected {shape:?}"),
            });
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 4, name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        params.push(Tensor::new(&dims, data)?);
    }
    if cur.pos != buf.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }
    ViTModel::from_params(config, params)
}

pub fn save_checkpoint<T: Float>(model: &ViTModel<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_checkpoint(model, &mut f).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<ViTModel<T>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
