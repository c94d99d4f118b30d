//! `FEAT1` embedding files: a 26-byte little-endian header followed by fp32
//! features in layer, row, column, channel order.
//!
//! ```text
//! 0   6  magic "FEAT1\0"
//! 6   1  version (1)
//! 7   1  dtype (0 = fp32)
//! 8   2  reserved (0)
//! 10  4  layers
//! 14  4  h_t
//! 18  4  w_t
//! 22  4  channels
//! 26  .. payload
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureStack;

pub const MAGIC: &[u8; 6] = b"FEAT1\0";
pub const HEADER_LEN: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Feat1Header {
    pub layers: u32,
    pub h_t: u32,
    pub w_t: u32,
    pub channels: u32,
}

impl Feat1Header {
    pub fn payload_len(&self) -> u64 {
        self.layers as u64 * self.h_t as u64 * self.w_t as u64 * self.channels as u64 * 4
    }
}

pub fn encode(stack: &FeatureStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + stack.grids.len() * stack.n_tokens() * stack.channels * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0, 0, 0]);
    for v in [stack.grids.len(), stack.grid.0, stack.grid.1, stack.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for g in &stack.grids {
        for v in g {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn decode_header(buf: &[u8]) -> Result<Feat1Header> {
    if buf.len() < HEADER_LEN {
        return Err(format_err(
            buf.len() as u64,
            format!("header needs {HEADER_LEN} bytes, file has {}", buf.len()),
        ));
    }
    if &buf[..6] != MAGIC {
        return Err(format_err(0, "missing FEAT1 magic"));
    }
    if buf[6] != 1 {
        return Err(format_err(6, format!("unsupported version {}", buf[6])));
    }
    if buf[7] != 0 {
        return Err(format_err(7, format!("unsupported dtype {}", buf[7])));
    }
    if buf[8..10] != [0, 0] {
        return Err(format_err(8, "reserved bytes must be zero"));
    }
    let u = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    let h = Feat1Header {
        layers: u(10),
        h_t: u(14),
        w_t: u(18),
        channels: u(22),
    };
    if h.layers == 0 {
        return Err(Error::Validation("FEAT1 header declares zero layers".into()));
    }
    if h.h_t == 0 || h.w_t == 0 || h.channels == 0 {
        return Err(Error::Validation(format!(
            "FEAT1 header declares an empty grid {}x{}x{}",
            h.h_t, h.w_t, h.channels
        )));
    }
    Ok(h)
}

/// Parses a complete file; layer indices are numbered `0..layers`.
pub fn decode(buf: &[u8], image_id: &str) -> Result<FeatureStack> {
    let h = decode_header(buf)?;
    let expected = HEADER_LEN as u64 + h.payload_len();
    if buf.len() as u64 != expected {
        return Err(format_err(
            buf.len().min(expected as usize) as u64,
            format!("expected {expected} bytes for the declared shape, found {}", buf.len()),
        ));
    }
    let per = h.h_t as usize * h.w_t as usize * h.channels as usize;
    let grids = buf[HEADER_LEN..]
        .chunks_exact(per * 4)
        .map(|layer| {
            layer
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect()
        })
        .collect();
    FeatureStack::new(
        image_id,
        (h.h_t as usize, h.w_t as usize),
        h.channels as usize,
        (0..h.layers as usize).collect(),
        grids,
    )
}

pub fn write(stack: &FeatureStack, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(stack)).map_err(|e| Error::io(path, e))
}

/// Reads `path`; the image id is the file stem.
pub fn read(path: &Path) -> Result<FeatureStack> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode(&buf, &id)
}
