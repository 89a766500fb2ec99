//! 8-bit images, PNG I/O, and the mapping into the network's value range.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit image, row-major, `channels` values per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Image(format!(
                "{}x{}x{} image needs {} bytes, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Decodes any PNG and converts it to `channels` (1 = luma, 3 = RGB).
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let reader = ::image::ImageReader::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .with_guessed_format()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let decoded = reader.decode().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let data = match channels {
            1 => decoded.into_luma8().into_raw(),
            3 => decoded.into_rgb8().into_raw(),
            c => return Err(Error::Image(format!("unsupported channel count {c}"))),
        };
        Image::new(w, h, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 { ::image::ExtendedColorType::L8 } else { ::image::ExtendedColorType::Rgb8 };
        ::image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Area-average resampling to `width x height`, ignoring aspect ratio.
    /// Each output pixel is the overlap-weighted mean of the source pixels its
    /// footprint covers, rounded half to even.
    pub fn resize_area(&self, width: usize, height: usize) -> Image {
        let xs = footprints(self.width, width);
        let ys = footprints(self.height, height);
        let norm = (self.width * self.height) as f64 / (width * height) as f64;
        let mut data = Vec::with_capacity(width * height * self.channels);
        for yrow in &ys {
            for xcol in &xs {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for &(sy, wy) in yrow {
                        for &(sx, wx) in xcol {
                            acc += wy * wx * self.get(sx, sy, c) as f64;
                        }
                    }
                    data.push(to_u8(acc / norm));
                }
            }
        }
        Image { width, height, channels: self.channels, data }
    }

    /// `[C, H, W]` tensor in the network range.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, ch) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[ch, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            scale_to_network(self.data[rest * ch + c])
        })
    }

    /// Inverse of [`Image::to_tensor`], clamping and rounding each value.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let [ch, h, w] = match t.shape() {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::ShapeMismatch { op: "image from tensor", left: s.to_vec(), right: vec![3, 0, 0] }),
        };
        let mut data = vec![0u8; ch * h * w];
        for (i, &v) in t.data().iter().enumerate() {
            let (c, rest) = (i / (h * w), i % (h * w));
            data[rest * ch + c] = unscale(v);
        }
        Image::new(w, h, ch, data)
    }
}

/// Source pixels (index, overlap length in source units) covered by each of
/// `dst` equal-width bins spanning `src` pixels.
fn footprints(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..dst)
        .map(|o| {
            // Work in units of 1/dst source pixels so the bounds stay integral.
            let (lo, hi) = (o * src, (o + 1) * src);
            let mut cover = Vec::new();
            for s in lo / dst..hi.div_ceil(dst) {
                let overlap = hi.min((s + 1) * dst) - lo.max(s * dst);
                if overlap > 0 {
                    cover.push((s, overlap as f64 / dst as f64));
                }
            }
            cover
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round_ties_even() as u8
}

/// `v / 255 * 1.8 - 0.9`, mapping `[0, 255]` onto `[-0.9, 0.9]`.
pub fn scale_to_network(v: u8) -> f64 {
    v as f64 / 255.0 * 1.8 - 0.9
}

pub fn unscale(x: f64) -> u8 {
    to_u8((x + 0.9) / 1.8 * 255.0)
}
