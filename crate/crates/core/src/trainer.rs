//! Dataset preparation, patch tiling, Adam, and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::ResidualChainModel;
use crate::binarizer::{Mode, NoiseSource};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamStore, Var};
use crate::image::Image;
use crate::tensor::Tensor;

/// Side length of every stored training sample.
pub const SAMPLE_SIZE: usize = 32;

/// The learning-rate grid used for the original large-corpus runs.
pub const LARGE_CORPUS_LR_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: PathBuf,
    pub channels: usize,
    /// Fraction of samples assigned to training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub eval: Vec<Image>,
    /// Decodable images with an axis of 32 pixels or fewer.
    pub rejected: usize,
    /// Files that could not be decoded.
    pub unreadable: usize,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Downsamples every image larger than 32 pixels on both axes to 32x32,
/// shuffles with the spec's seed, and splits into train and eval sets.
pub fn ingest_images(spec: &DatasetSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::InvalidArgument(format!("train fraction {} outside [0, 1]", spec.train_fraction)));
    }
    let mut files = Vec::new();
    collect_files(&spec.source, &mut files)?;
    let mut samples = Vec::new();
    let (mut rejected, mut unreadable) = (0, 0);
    for path in &files {
        match Image::load_png(path, spec.channels) {
            Ok(img) if img.width() > SAMPLE_SIZE && img.height() > SAMPLE_SIZE => {
                samples.push(img.resize_area(SAMPLE_SIZE, SAMPLE_SIZE));
            }
            Ok(img) => {
                log::debug!("{}: {}x{} too small", path.display(), img.width(), img.height());
                rejected += 1;
            }
            Err(e) => {
                log::warn!("skipping unreadable file: {e}");
                unreadable += 1;
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset { rejected, unreadable });
    }
    log::info!("ingested {} images ({rejected} too small, {unreadable} unreadable)", samples.len());
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_fraction * samples.len() as f64).round() as usize;
    let eval = samples.split_off(n_train);
    Ok(Dataset { train: samples, eval, rejected, unreadable })
}

impl Dataset {
    /// Writes `train/NNNNNN.png` and `eval/NNNNNN.png` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (split, images) in [("train", &self.train), ("eval", &self.eval)] {
            let sub = dir.join(split);
            fs::create_dir_all(&sub)?;
            for (i, img) in images.iter().enumerate() {
                img.save_png(&sub.join(format!("{i:06}.png")))?;
            }
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path, channels: usize) -> Result<Dataset> {
        let read = |split: &str| -> Result<Vec<Image>> {
            let sub = dir.join(split);
            if !sub.is_dir() {
                return Ok(Vec::new());
            }
            let mut files = Vec::new();
            collect_files(&sub, &mut files)?;
            files.iter().map(|p| Image::load_png(p, channels)).collect()
        };
        let data = Dataset { train: read("train")?, eval: read("eval")?, rejected: 0, unreadable: 0 };
        if data.train.is_empty() && data.eval.is_empty() {
            return Err(Error::EmptyDataset { rejected: 0, unreadable: 0 });
        }
        Ok(data)
    }
}

/// Row-major, non-overlapping `[C, patch, patch]` tiles of a `[C, H, W]` tensor.
pub fn extract_patches(img: &Tensor, patch: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::InvalidShape(format!("expected [C, H, W] image, got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape(format!("{w}x{h} image is not divisible into {patch}x{patch} patches")));
    }
    let data = img.data();
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut tile = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + py * patch + y) * w + px * patch;
                    tile.extend_from_slice(&data[row..row + patch]);
                }
            }
            out.push(Tensor::new(vec![c, patch, patch], tile)?);
        }
    }
    Ok(out)
}

/// Inverse of [`extract_patches`].
pub fn stitch(patches: &[Tensor], height: usize, width: usize) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::InvalidArgument("no patches to stitch".into()))?;
    let (c, patch) = match first.shape() {
        &[c, p, q] if p == q => (c, p),
        s => return Err(Error::InvalidShape(format!("expected square [C, P, P] patch, got {s:?}"))),
    };
    if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || patches.len() != (height / patch) * (width / patch) {
        return Err(Error::InvalidShape(format!("{} patches of {patch} do not tile {width}x{height}", patches.len())));
    }
    let mut data = vec![0.0; c * height * width];
    let cols = width / patch;
    for (i, tile) in patches.iter().enumerate() {
        if tile.shape() != first.shape() {
            return Err(Error::ShapeMismatch { op: "stitch", left: tile.shape().to_vec(), right: first.shape().to_vec() });
        }
        let (py, px) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..patch {
                let row = (ch * height + py * patch + y) * width + px * patch;
                let src = (ch * patch + y) * patch;
                data[row..row + patch].copy_from_slice(&tile.data()[src..src + patch]);
            }
        }
    }
    Tensor::new(vec![c, height, width], data)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch { op: "stack", left: t.shape().to_vec(), right: first.shape().to_vec() });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// All patches of all images, in image order then row-major order.
pub fn patch_pool(images: &[Image], patch: usize) -> Result<Vec<Tensor>> {
    let mut pool = Vec::new();
    for img in images {
        pool.extend(extract_patches(&img.to_tensor(), patch)?);
    }
    Ok(pool)
}

fn default_learning_rate() -> f64 {
    0.001
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Chain length unrolled during training.
    pub n_iterations: usize,
    pub seed: u64,
    /// Emit a log record every this many steps (and on the last step).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            batch_size: 32,
            steps: 1000,
            n_iterations: 16,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.steps == 0 || self.n_iterations == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("batch_size, steps, n_iterations and log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam step; parameters without a gradient see zero.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!("optimizer tracks {} tensors, store has {}", self.m.len(), params.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "adam update", left: m.shape().to_vec(), right: p.shape().to_vec() });
            }
            let g = grads.param(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam gradient",
                        left: g.shape().to_vec(),
                        right: p.shape().to_vec(),
                    });
                }
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let apply = |m: &mut f64, v: &mut f64, p: &mut f64, g: f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            let state = m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(p.data_mut().iter_mut());
            match g {
                Some(g) => state.zip(g.data()).for_each(|(((m, v), p), &g)| apply(m, v, p, g)),
                None => state.for_each(|((m, v), p)| apply(m, v, p, 0.0)),
            }
        }
        Ok(())
    }
}

/// Anything trainable by [`train_step`]: owns parameters and can record a
/// scalar loss for a batch.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn record_loss<'p>(&'p self, g: &mut Graph<'p>, batch: &Tensor, n_iterations: usize, noise: NoiseSource) -> Result<Var>;
}

impl Objective for ResidualChainModel {
    fn params(&self) -> &ParamStore {
        ResidualChainModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        ResidualChainModel::params_mut(self)
    }

    fn record_loss<'p>(&'p self, g: &mut Graph<'p>, batch: &Tensor, n_iterations: usize, noise: NoiseSource) -> Result<Var> {
        let x = g.input(batch.clone());
        let stages = self.run_chain_graph(g, x, n_iterations, &Mode::Train(noise))?;
        self.chain_loss(g, &stages)
    }
}

/// Loss and gradients for one batch without touching the parameters.
pub fn loss_and_gradients<M: Objective>(
    model: &M,
    batch: &Tensor,
    n_iterations: usize,
    noise: NoiseSource,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let loss = model.record_loss(&mut g, batch, n_iterations, noise)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Gradients::default()));
    }
    Ok((value, g.backward(loss)?))
}

/// Forward, backward, and one Adam update. Returns the pre-update loss.
pub fn train_step<M: Objective>(
    model: &mut M,
    batch: &Tensor,
    cfg: &TrainConfig,
    adam: &mut Adam,
    noise: NoiseSource,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(model, batch, cfg.n_iterations, noise)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { loss, step: adam.step + 1, lr: cfg.learning_rate });
    }
    adam.update(model.params_mut(), &grads, cfg.learning_rate)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for TrainRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step={} loss={:.6e} lr={}", self.step, self.loss, self.lr)
    }
}

/// Runs `cfg.steps` updates over `pool` (patches shaped `[C, P, P]`), drawing
/// batches from a seeded per-epoch shuffle. Returns the per-step losses.
pub fn train<M: Objective>(
    model: &mut M,
    pool: &[Tensor],
    cfg: &TrainConfig,
    adam: &mut Adam,
    mut log: impl FnMut(&TrainRecord),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset { rejected: 0, unreadable: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = NoiseSource::new(cfg.seed.rotate_left(32) ^ 0x6E6F_6973_6521);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for i in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&pool[order[cursor]]);
            cursor += 1;
        }
        let batch = stack(&picked)?;
        let step = adam.step + 1;
        let loss = train_step(model, &batch, cfg, adam, noise.at_step(step))?;
        losses.push(loss);
        if (i + 1) % cfg.log_every == 0 || i + 1 == cfg.steps {
            log(&TrainRecord { step, loss, lr: cfg.learning_rate });
        }
    }
    Ok(losses)
}
