//! Image-level encoding and the NNTC bitstream.
//!
//! Wire layout, all multi-byte integers little-endian:
//!
//! ```text
//! "NNTC" | version u8 | fingerprint u64 | width u16 | height u16 | patch u8
//! bits_per_iteration u16 | mode u8 | mode 0: count u8 | mode 1: count u8 per patch
//! payload: per patch (row-major), per iteration, MSB-first, +1 -> 1, -1 -> 0,
//!          zero-padded to a byte boundary at the end of each patch
//! ```

use crate::architectures::ResidualChainModel;
use crate::binarizer::Mode;
use crate::error::{BitstreamError, Error, Result};
use crate::eval::{psnr, ssim_image, RoundTrip};
use crate::image::Image;
use crate::tensor::Tensor;
use crate::trainer::{extract_patches, stack, stitch};

pub const MAGIC: &[u8; 4] = b"NNTC";
pub const FORMAT_VERSION: u8 = 1;
/// Fixed part of the header, before the iteration counts.
const FIXED_HEADER: usize = 4 + 1 + 8 + 2 + 2 + 1 + 2 + 1;
/// Patches run through the model together. Rows never interact, so this
/// only bounds memory.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Allocation {
    /// Every patch uses the same iteration count.
    Uniform(u8),
    /// One count per patch, row-major.
    Dynamic(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub fingerprint: u64,
    pub width: u16,
    pub height: u16,
    pub patch_size: u8,
    pub bits_per_iteration: u16,
    pub allocation: Allocation,
}

impl BitstreamHeader {
    pub fn grid(&self) -> (usize, usize) {
        let p = self.patch_size.max(1) as usize;
        (self.width as usize / p, self.height as usize / p)
    }

    pub fn patch_count(&self) -> usize {
        let (c, r) = self.grid();
        c * r
    }

    pub fn iterations(&self, patch: usize) -> usize {
        match &self.allocation {
            Allocation::Uniform(n) => *n as usize,
            Allocation::Dynamic(counts) => counts[patch] as usize,
        }
    }

    pub fn max_count(&self) -> usize {
        match &self.allocation {
            Allocation::Uniform(n) => *n as usize,
            Allocation::Dynamic(counts) => counts.iter().copied().max().unwrap_or(0) as usize,
        }
    }

    pub fn patch_bytes(&self, patch: usize) -> usize {
        (self.iterations(patch) * self.bits_per_iteration as usize).div_ceil(8)
    }

    pub fn payload_len(&self) -> usize {
        (0..self.patch_count()).map(|p| self.patch_bytes(p)).sum()
    }

    fn validate(&self) -> std::result::Result<(), BitstreamError> {
        let bad = |m: String| Err(BitstreamError::MalformedHeader(m));
        let p = self.patch_size as usize;
        if p == 0 || self.width == 0 || self.height == 0 {
            return bad("zero patch size or image dimension".into());
        }
        if !(self.width as usize).is_multiple_of(p) || !(self.height as usize).is_multiple_of(p) {
            return bad(format!("{}x{} image not divisible by patch size {p}", self.width, self.height));
        }
        if self.bits_per_iteration == 0 {
            return bad("zero bits per iteration".into());
        }
        match &self.allocation {
            Allocation::Uniform(0) => return bad("zero iteration count".into()),
            Allocation::Uniform(_) => {}
            Allocation::Dynamic(counts) => {
                if counts.len() != self.patch_count() {
                    return bad(format!("{} counts for {} patches", counts.len(), self.patch_count()));
                }
                if let Some(p) = counts.iter().position(|&c| c == 0) {
                    return bad(format!("zero iteration count for patch {p}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    header: BitstreamHeader,
    payload: Vec<u8>,
}

fn pack(bits: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b > 0.0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

impl Bitstream {
    /// Assembles a stream from each patch's bit sequence (iterations
    /// concatenated, values ±1).
    pub fn from_patch_bits(header: BitstreamHeader, patches: &[Vec<f64>]) -> Result<Self> {
        header.validate()?;
        if patches.len() != header.patch_count() {
            return Err(Error::InvalidArgument(format!(
                "{} patch bit vectors for {} patches",
                patches.len(),
                header.patch_count()
            )));
        }
        let mut payload = Vec::with_capacity(header.payload_len());
        for (p, bits) in patches.iter().enumerate() {
            let expected = header.iterations(p) * header.bits_per_iteration as usize;
            if bits.len() != expected {
                return Err(Error::InvalidArgument(format!("patch {p} has {} bits, header implies {expected}", bits.len())));
            }
            payload.extend(pack(bits));
        }
        Ok(Bitstream { header, payload })
    }

    pub fn header(&self) -> &BitstreamHeader {
        &self.header
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    fn patch_offset(&self, patch: usize) -> usize {
        (0..patch).map(|p| self.header.patch_bytes(p)).sum()
    }

    /// The ±1 bits of one patch, iterations concatenated.
    pub fn patch_bits(&self, patch: usize) -> Vec<f64> {
        let start = self.patch_offset(patch);
        let n = self.header.iterations(patch) * self.header.bits_per_iteration as usize;
        (0..n).map(|i| if self.payload[start + i / 8] & (0x80 >> (i % 8)) != 0 { 1.0 } else { -1.0 }).collect()
    }

    /// The stream cut to at most `t` iterations per patch.
    pub fn truncated(&self, t: usize) -> Result<Bitstream> {
        if t == 0 || t > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("cannot truncate to {t} iterations")));
        }
        let allocation = match &self.header.allocation {
            Allocation::Uniform(n) => Allocation::Uniform((*n as usize).min(t) as u8),
            Allocation::Dynamic(c) => Allocation::Dynamic(c.iter().map(|&n| (n as usize).min(t) as u8).collect()),
        };
        let header = BitstreamHeader { allocation, ..self.header.clone() };
        let bits_per = self.header.bits_per_iteration as usize;
        let patches: Vec<Vec<f64>> = (0..header.patch_count())
            .map(|p| {
                let mut b = self.patch_bits(p);
                b.truncate(header.iterations(p) * bits_per);
                b
            })
            .collect();
        Bitstream::from_patch_bits(header, &patches)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(FIXED_HEADER + h.patch_count() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&h.fingerprint.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(h.patch_size);
        out.extend_from_slice(&h.bits_per_iteration.to_le_bytes());
        match &h.allocation {
            Allocation::Uniform(n) => {
                out.push(0);
                out.push(*n);
            }
            Allocation::Dynamic(counts) => {
                out.push(1);
                out.extend_from_slice(counts);
            }
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Bitstream> {
        Ok(parse(buf)?)
    }
}

fn parse(buf: &[u8]) -> std::result::Result<Bitstream, BitstreamError> {
    let n = buf.len().min(4);
    if buf[..n] != MAGIC[..n] {
        return Err(BitstreamError::BadMagic);
    }
    let truncated = || BitstreamError::MalformedHeader("truncated header".into());
    if buf.len() < 5 {
        return Err(truncated());
    }
    if buf[4] != FORMAT_VERSION {
        return Err(BitstreamError::UnknownVersion(buf[4]));
    }
    if buf.len() < FIXED_HEADER {
        return Err(truncated());
    }
    let u16_at = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
    let fingerprint = u64::from_le_bytes(buf[5..13].try_into().unwrap());
    let (width, height) = (u16_at(13), u16_at(15));
    let patch_size = buf[17];
    let bits_per_iteration = u16_at(18);
    let mut pos = FIXED_HEADER;
    let mut header =
        BitstreamHeader { fingerprint, width, height, patch_size, bits_per_iteration, allocation: Allocation::Uniform(0) };
    header.allocation = match buf[20] {
        0 => {
            let n = *buf.get(pos).ok_or_else(truncated)?;
            pos += 1;
            Allocation::Uniform(n)
        }
        1 => {
            if patch_size == 0 || width % patch_size as u16 != 0 || height % patch_size as u16 != 0 {
                return Err(BitstreamError::MalformedHeader(format!(
                    "{width}x{height} image not divisible by patch size {patch_size}"
                )));
            }
            let count = header.patch_count();
            let counts = buf.get(pos..pos + count).ok_or_else(truncated)?.to_vec();
            pos += count;
            Allocation::Dynamic(counts)
        }
        m => return Err(BitstreamError::MalformedHeader(format!("unknown allocation mode {m}"))),
    };
    header.validate()?;
    let mut payload = Vec::with_capacity(header.payload_len());
    let bits_per = bits_per_iteration as usize;
    for p in 0..header.patch_count() {
        let len = header.patch_bytes(p);
        let bytes = buf.get(pos..pos + len).ok_or(BitstreamError::ShortPayload { patch: p })?;
        let used = header.iterations(p) * bits_per;
        let spare = len * 8 - used;
        if spare > 0 && bytes[len - 1] & ((1u8 << spare) - 1) != 0 {
            return Err(BitstreamError::NonZeroPadding { patch: p });
        }
        payload.extend_from_slice(bytes);
        pos += len;
    }
    if pos != buf.len() {
        return Err(BitstreamError::TrailingBytes(buf.len() - pos));
    }
    Ok(Bitstream { header, payload })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
}

/// Per-patch stopping rule for dynamic allocation. A threshold of `+inf` is
/// never met, so every patch runs to `max_iterations`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityTarget {
    pub metric: Metric,
    pub threshold: f64,
    pub min_iterations: usize,
    pub max_iterations: usize,
}

impl QualityTarget {
    fn met(&self, score: f64) -> bool {
        self.threshold < f64::INFINITY && score >= self.threshold
    }
}

/// Encoder output together with the encoder-side 8-bit reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub stream: Bitstream,
    pub reconstruction: Image,
}

/// Inference-mode chain over every patch: per-iteration bit planes and
/// reconstructions, each indexed `[t][patch]`.
struct PatchRuns {
    bits: Vec<Vec<Vec<f64>>>,
    recon: Vec<Vec<Tensor>>,
}

fn check_image(model: &ResidualChainModel, img: &Image) -> Result<Vec<Tensor>> {
    let cfg = model.config();
    if img.channels() != cfg.channels {
        return Err(Error::InvalidArgument(format!("image has {} channels, model expects {}", img.channels(), cfg.channels)));
    }
    if img.width() > u16::MAX as usize || img.height() > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("{}x{} image too large for the stream header", img.width(), img.height())));
    }
    extract_patches(&img.to_tensor(), cfg.patch_size)
}

fn split_rows(t: &Tensor) -> Vec<Tensor> {
    let rows = t.shape()[0];
    let inner: Vec<usize> = t.shape()[1..].to_vec();
    let n = t.len() / rows.max(1);
    (0..rows).map(|r| Tensor::new(inner.clone(), t.data()[r * n..(r + 1) * n].to_vec()).expect("row slice")).collect()
}

fn run_patches(model: &ResidualChainModel, patches: &[Tensor], n: usize) -> Result<PatchRuns> {
    let mut runs = PatchRuns { bits: vec![Vec::new(); n], recon: vec![Vec::new(); n] };
    for chunk in patches.chunks(CHUNK) {
        let batch = stack(&chunk.iter().collect::<Vec<_>>())?;
        let outs = model.run_chain(&batch, n, Mode::Infer)?;
        let prefixes = model.reconstruct_prefixes(&outs)?;
        for t in 0..n {
            runs.bits[t].extend(split_rows(&outs[t].bits).into_iter().map(Tensor::into_data));
            runs.recon[t].extend(split_rows(&prefixes[t]));
        }
    }
    Ok(runs)
}

fn header_for(model: &ResidualChainModel, img: &Image, allocation: Allocation) -> BitstreamHeader {
    let cfg = model.config();
    BitstreamHeader {
        fingerprint: model.fingerprint(),
        width: img.width() as u16,
        height: img.height() as u16,
        patch_size: cfg.patch_size as u8,
        bits_per_iteration: cfg.bits_per_iteration as u16,
        allocation,
    }
}

fn assemble(model: &ResidualChainModel, img: &Image, runs: &PatchRuns, counts: &[usize], uniform: bool) -> Result<Encoded> {
    let allocation = if uniform {
        Allocation::Uniform(counts[0] as u8)
    } else {
        Allocation::Dynamic(counts.iter().map(|&c| c as u8).collect())
    };
    let header = header_for(model, img, allocation);
    let patch_bits: Vec<Vec<f64>> =
        counts.iter().enumerate().map(|(p, &c)| (0..c).flat_map(|t| runs.bits[t][p].iter().copied()).collect()).collect();
    let stream = Bitstream::from_patch_bits(header, &patch_bits)?;
    let tiles: Vec<Tensor> = counts.iter().enumerate().map(|(p, &c)| runs.recon[c - 1][p].clone()).collect();
    let reconstruction = Image::from_tensor(&stitch(&tiles, img.height(), img.width())?)?;
    Ok(Encoded { stream, reconstruction })
}

/// Uniform allocation with `iterations` planes per patch.
pub fn encode_image_detailed(model: &ResidualChainModel, img: &Image, iterations: usize) -> Result<Encoded> {
    let max = model.config().max_iterations;
    if iterations < 1 || iterations > max {
        return Err(Error::IterationsOutOfRange { got: iterations, min: 1, max });
    }
    let patches = check_image(model, img)?;
    let runs = run_patches(model, &patches, iterations)?;
    assemble(model, img, &runs, &vec![iterations; patches.len()], true)
}

pub fn encode_image(model: &ResidualChainModel, img: &Image, iterations: usize) -> Result<Bitstream> {
    Ok(encode_image_detailed(model, img, iterations)?.stream)
}

/// Payload bytes of a uniform stream with `iterations` per patch.
pub fn uniform_payload_bytes(model: &ResidualChainModel, width: usize, height: usize, iterations: usize) -> usize {
    let cfg = model.config();
    let patches = (width / cfg.patch_size) * (height / cfg.patch_size);
    patches * (iterations * cfg.bits_per_iteration).div_ceil(8)
}

/// Largest uniform iteration count whose payload fits in `byte_budget`.
pub fn iterations_for_budget(model: &ResidualChainModel, width: usize, height: usize, byte_budget: usize) -> Result<usize> {
    let minimum = uniform_payload_bytes(model, width, height, 1);
    if byte_budget < minimum {
        return Err(Error::BudgetTooSmall { budget: byte_budget, minimum });
    }
    Ok((1..=model.config().max_iterations)
        .take_while(|&n| uniform_payload_bytes(model, width, height, n) <= byte_budget)
        .last()
        .expect("one iteration fits"))
}

pub fn encode_with_budget(model: &ResidualChainModel, img: &Image, byte_budget: usize) -> Result<Bitstream> {
    check_image(model, img)?;
    let n = iterations_for_budget(model, img.width(), img.height(), byte_budget)?;
    encode_image(model, img, n)
}

pub fn encode_dynamic_detailed(model: &ResidualChainModel, img: &Image, target: &QualityTarget) -> Result<Encoded> {
    let max = model.config().max_iterations;
    if target.min_iterations < 1 || target.min_iterations > target.max_iterations || target.max_iterations > max {
        return Err(Error::InvalidArgument(format!(
            "quality target needs 1 <= min ({}) <= max ({}) <= {max}",
            target.min_iterations, target.max_iterations
        )));
    }
    let patches = check_image(model, img)?;
    let runs = run_patches(model, &patches, target.max_iterations)?;
    let mut counts = Vec::with_capacity(patches.len());
    for (p, original) in patches.iter().enumerate() {
        let original = Image::from_tensor(original)?;
        let mut chosen = target.max_iterations;
        for t in target.min_iterations..=target.max_iterations {
            let recon = Image::from_tensor(&runs.recon[t - 1][p])?;
            let score = match target.metric {
                Metric::Psnr => psnr(&original, &recon, 255.0)?,
                Metric::Ssim => ssim_image(&original, &recon)?.mean,
            };
            if target.met(score) {
                chosen = t;
                break;
            }
        }
        counts.push(chosen);
    }
    assemble(model, img, &runs, &counts, false)
}

pub fn encode_dynamic(model: &ResidualChainModel, img: &Image, target: &QualityTarget) -> Result<Bitstream> {
    Ok(encode_dynamic_detailed(model, img, target)?.stream)
}

fn check_stream(model: &ResidualChainModel, stream: &Bitstream) -> Result<()> {
    let h = stream.header();
    let cfg = model.config();
    if h.fingerprint != model.fingerprint() {
        return Err(BitstreamError::ModelMismatch { stream: h.fingerprint, model: model.fingerprint() }.into());
    }
    if h.patch_size as usize != cfg.patch_size || h.bits_per_iteration as usize != cfg.bits_per_iteration {
        return Err(BitstreamError::MalformedHeader(format!(
            "patch {} / {} bits per iteration, model uses {} / {}",
            h.patch_size, h.bits_per_iteration, cfg.patch_size, cfg.bits_per_iteration
        ))
        .into());
    }
    if h.max_count() > cfg.max_iterations {
        return Err(BitstreamError::MalformedHeader(format!(
            "{} iterations exceed the model maximum of {}",
            h.max_count(),
            cfg.max_iterations
        ))
        .into());
    }
    Ok(())
}

/// Reconstruction tiles after each prefix `t = 1..=max_count`, where patches
/// with fewer iterations keep their final reconstruction.
fn decode_tiles(model: &ResidualChainModel, stream: &Bitstream) -> Result<Vec<Vec<Tensor>>> {
    check_stream(model, stream)?;
    let h = stream.header();
    let bits_per = h.bits_per_iteration as usize;
    let max_t = h.max_count();
    let mut tiles: Vec<Vec<Tensor>> = vec![Vec::with_capacity(h.patch_count()); max_t];
    let all: Vec<usize> = (0..h.patch_count()).collect();
    for chunk in all.chunks(CHUNK) {
        let patch_bits: Vec<Vec<f64>> = chunk.iter().map(|&p| stream.patch_bits(p)).collect();
        let planes: Vec<Tensor> = (0..max_t)
            .map(|t| {
                let mut data = Vec::with_capacity(chunk.len() * bits_per);
                for bits in &patch_bits {
                    // Patches past their count get filler; rows never interact.
                    match bits.get(t * bits_per..(t + 1) * bits_per) {
                        Some(plane) => data.extend_from_slice(plane),
                        None => data.extend(std::iter::repeat_n(1.0, bits_per)),
                    }
                }
                Tensor::new(vec![chunk.len(), bits_per], data)
            })
            .collect::<Result<_>>()?;
        let prefixes = model.decode_prefixes(&planes)?;
        let rows: Vec<Vec<Tensor>> = prefixes.iter().map(split_rows).collect();
        for (i, &p) in chunk.iter().enumerate() {
            let count = h.iterations(p);
            for (t, out) in tiles.iter_mut().enumerate() {
                out.push(rows[(t + 1).min(count) - 1][i].clone());
            }
        }
    }
    Ok(tiles)
}

fn to_image(h: &BitstreamHeader, tiles: &[Tensor]) -> Result<Image> {
    Image::from_tensor(&stitch(tiles, h.height as usize, h.width as usize)?)
}

pub fn decode_image(model: &ResidualChainModel, stream: &Bitstream) -> Result<Image> {
    let tiles = decode_tiles(model, stream)?;
    to_image(stream.header(), tiles.last().expect("at least one iteration"))
}

/// One image per iteration prefix, `1..=max_count`.
pub fn decode_progressive(model: &ResidualChainModel, stream: &Bitstream) -> Result<Vec<Image>> {
    decode_tiles(model, stream)?.iter().map(|t| to_image(stream.header(), t)).collect()
}

impl RoundTrip for ResidualChainModel {
    fn round_trip(&self, img: &Image, iterations: usize) -> Result<(usize, Image)> {
        let stream = encode_image(self, img, iterations)?;
        let decoded = decode_image(self, &stream)?;
        Ok((stream.payload().len(), decoded))
    }
}
