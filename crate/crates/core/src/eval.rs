//! Patchwise SSIM, PSNR, and rate-distortion sweeps.

use crate::error::{Error, Result};
use crate::image::Image;

/// SSIM tile side.
pub const SSIM_TILE: usize = 8;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// SSIM over the whole window with uniform weights and biased (1/N)
/// statistics. No smoothing.
pub fn ssim_patch(a: &[f64], b: &[f64], dynamic_range: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch { op: "ssim_patch", left: vec![a.len()], right: vec![b.len()] });
    }
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mu_a, y - mu_b);
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let c1 = (K1 * dynamic_range).powi(2);
    let c2 = (K2 * dynamic_range).powi(2);
    Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsimReport {
    /// Raw score per (tile, channel), tiles row-major, channels innermost.
    pub raw: Vec<f64>,
    /// `raw` clamped to `[0, 1]`.
    pub scores: Vec<f64>,
    /// Arithmetic mean of `scores`.
    pub mean: f64,
    /// Tile grid as (columns, rows).
    pub grid: (usize, usize),
    pub channels: usize,
}

fn check_same_dims(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    let dims = |i: &Image| vec![i.height(), i.width(), i.channels()];
    if dims(a) != dims(b) {
        return Err(Error::ShapeMismatch { op, left: dims(a), right: dims(b) });
    }
    Ok(())
}

/// Mean SSIM over non-overlapping 8x8 tiles and channels, on 8-bit values.
pub fn ssim_image(a: &Image, b: &Image) -> Result<SsimReport> {
    check_same_dims(a, b, "ssim_image")?;
    if !a.width().is_multiple_of(SSIM_TILE) || !a.height().is_multiple_of(SSIM_TILE) || a.width() == 0 || a.height() == 0 {
        return Err(Error::InvalidShape(format!(
            "{}x{} image is not divisible into {SSIM_TILE}x{SSIM_TILE} tiles",
            a.width(),
            a.height()
        )));
    }
    let (cols, rows) = (a.width() / SSIM_TILE, a.height() / SSIM_TILE);
    let mut raw = Vec::with_capacity(cols * rows * a.channels());
    let mut ta = vec![0.0; SSIM_TILE * SSIM_TILE];
    let mut tb = ta.clone();
    for ty in 0..rows {
        for tx in 0..cols {
            for c in 0..a.channels() {
                for y in 0..SSIM_TILE {
                    for x in 0..SSIM_TILE {
                        let (px, py) = (tx * SSIM_TILE + x, ty * SSIM_TILE + y);
                        ta[y * SSIM_TILE + x] = a.get(px, py, c) as f64;
                        tb[y * SSIM_TILE + x] = b.get(px, py, c) as f64;
                    }
                }
                raw.push(ssim_patch(&ta, &tb, 255.0)?);
            }
        }
    }
    let scores: Vec<f64> = raw.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SsimReport { raw, scores, mean, grid: (cols, rows), channels: a.channels() })
}

/// `10 log10(peak^2 / MSE)` over all values; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same_dims(a, b, "psnr")?;
    if a.data().is_empty() {
        return Err(Error::InvalidArgument("psnr of an empty image".into()));
    }
    let sse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.data().len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// A codec that can be swept over iteration counts.
pub trait RoundTrip {
    /// Encodes with `iterations` per patch and decodes; returns the payload
    /// size in bytes and the decoded image.
    fn round_trip(&self, img: &Image, iterations: usize) -> Result<(usize, Image)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub iterations: usize,
    /// Payload bits per pixel, averaged over the set.
    pub bpp: f64,
    pub mean_ssim: f64,
}

/// One point per iteration count, sorted by bpp.
pub fn rd_curve<C: RoundTrip + ?Sized>(codec: &C, images: &[Image], iterations: &[usize]) -> Result<Vec<RdPoint>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("rate-distortion sweep needs at least one image".into()));
    }
    let mut points = Vec::with_capacity(iterations.len());
    for &n in iterations {
        let (mut bits, mut pixels, mut ssim) = (0usize, 0usize, 0.0);
        for img in images {
            let (bytes, decoded) = codec.round_trip(img, n)?;
            bits += bytes * 8;
            pixels += img.width() * img.height();
            ssim += ssim_image(img, &decoded)?.mean;
        }
        points.push(RdPoint { iterations: n, bpp: bits as f64 / pixels as f64, mean_ssim: ssim / images.len() as f64 });
    }
    points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(a.iterations.cmp(&b.iterations)));
    Ok(points)
}

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from("iterations,bpp,mean_ssim\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.iterations, p.bpp, p.mean_ssim));
    }
    out
}
