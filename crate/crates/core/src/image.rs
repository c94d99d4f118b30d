//! Planar float images and the geometric operations used by the pipelines.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::interp;

/// A `[channels, height, width]` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "image buffer holds {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn gray_from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Image {
            channels: 1,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.data[(ch * self.height + r) * self.width + c]
    }

    fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut data = Vec::with_capacity(self.channels * height * width);
        for ch in 0..self.channels {
            for r in 0..height {
                for c in 0..width {
                    let (sr, sc) = src(r, c);
                    data.push(self.get(ch, sr, sc));
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Toroidal shift: output pixel `(r, c)` is input `(r - dr, c - dc)`.
    pub fn roll(&self, dr: isize, dc: isize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        self.remap(self.height, self.width, |r, c| {
            (
                (r as isize - dr).rem_euclid(h) as usize,
                (c as isize - dc).rem_euclid(w) as usize,
            )
        })
    }

    pub fn flip_ud(&self) -> Image {
        let h = self.height;
        self.remap(h, self.width, |r, c| (h - 1 - r, c))
    }

    /// Counter-clockwise quarter turn.
    pub fn rot90(&self) -> Image {
        let w = self.width;
        self.remap(w, self.height, |r, c| (c, w - 1 - r))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dim(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(self.remap(height, width, |r, c| (top + r, left + c)))
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        let mut data = Vec::with_capacity(self.channels * height * width);
        for ch in 0..self.channels {
            let src: Vec<f64> = self.plane(ch).iter().map(|&v| v as f64).collect();
            let out = interp::resize(&src, self.height, self.width, 1, height, width)?;
            data.extend(out.into_iter().map(|v| v as f32));
        }
        Image::new(self.channels, height, width, data)
    }

    /// Shortest-side bilinear resize to `target` followed by a centre crop to
    /// `target x target`.
    pub fn resize_center_crop(&self, target: usize) -> Result<Image> {
        if target == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::dim("resize-crop needs a non-empty image and target"));
        }
        let short = self.height.min(self.width);
        let (h, w) = if short == target {
            (self.height, self.width)
        } else {
            let scale = target as f64 / short as f64;
            let scaled = |n: usize| {
                if n == short {
                    target
                } else {
                    ((n as f64 * scale).round() as usize).max(target)
                }
            };
            (scaled(self.height), scaled(self.width))
        };
        let resized = if (h, w) == (self.height, self.width) {
            self.clone()
        } else {
            self.resize_bilinear(h, w)?
        };
        resized.crop((h - target) / 2, (w - target) / 2, target, target)
    }

    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| (0..self.channels).map(|ch| self.data[ch * n + i]).sum::<f32>() / self.channels as f32)
            .collect();
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (_, 1) => Ok(self.to_gray()),
            (1, c) => Ok(Image {
                channels: c,
                height: self.height,
                width: self.width,
                data: self.data.repeat(c),
            }),
            (a, b) => Err(Error::dim(format!("cannot convert {a}-channel image to {b} channels"))),
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        if img.color().channel_count() == 1 {
            let g = img.to_luma32f();
            let (w, h) = g.dimensions();
            Image::new(1, h as usize, w as usize, g.into_raw())
        } else {
            let rgb = img.to_rgb32f();
            let (w, h) = rgb.dimensions();
            let (h, w) = (h as usize, w as usize);
            let raw = rgb.into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    data[ch * h * w + i] = raw[i * 3 + ch];
                }
            }
            Image::new(3, h, w, data)
        }
    }

    /// Writes an 8-bit PNG (or PGM/PPM by extension), clamping to `[0, 1]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let n = self.height * self.width;
        let res = if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::from_fn(w, h, |x, y| Luma([q(self.data[y as usize * self.width + x as usize])]));
            buf.save(path)
        } else {
            let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                let i = y as usize * self.width + x as usize;
                let at = |ch: usize| q(self.data[(ch.min(self.channels - 1)) * n + i]);
                Rgb([at(0), at(1), at(2)])
            });
            buf.save(path)
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
