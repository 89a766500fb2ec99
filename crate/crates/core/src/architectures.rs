//! The four residual-chain models and their chaining semantics.
//!
//! Feed-forward variants have no memory: stage `t` encodes the previous
//! residual `r_{t-1}`, predicts it, and leaves `r_t = F_t(r_{t-1}) - r_{t-1}`.
//! The image estimate is the alternating sum of stage predictions, for which
//! `r_0 - x̂_N = (-1)^N r_N` holds identically. LSTM variants carry state and
//! predict the original patch every stage, so `r_t = F_t(r_{t-1}) - r_0` and the
//! estimate is simply the latest prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binarizer::{self, Binarizer, Mode, Projection};
use crate::cells::{CellState, FcLstmCell, LstmState, SpatialLstmCell};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{ConvSpec, Tensor};

pub const MAX_ITERATIONS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FcResidual,
    FcLstm,
    ConvResidual,
    ConvLstm,
}

impl Variant {
    pub fn is_recurrent(self) -> bool {
        matches!(self, Variant::FcLstm | Variant::ConvLstm)
    }

    pub fn is_convolutional(self) -> bool {
        matches!(self, Variant::ConvResidual | Variant::ConvLstm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPolicy {
    Shared,
    Distinct,
}

/// Layer widths (fc) or filter counts (conv) of the encoder; the decoder mirrors them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPlan {
    pub widths: Vec<usize>,
    /// Spatial kernel of the strided (de)convolutions.
    pub kernel: usize,
    /// Spatial kernel of the recurrent convolution in spatial LSTMs.
    pub recurrent_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub weight_policy: WeightPolicy,
    pub patch_size: usize,
    pub bits_per_iteration: usize,
    pub max_iterations: usize,
    pub channels: usize,
    pub layers: LayerPlan,
}

impl ModelConfig {
    /// fc: 8x8 patches, 8 bits per step, 512-wide tanh layers.
    /// conv: 32x32 patches reduced to 8x8 with 2 bits per pixel (128 bits per step).
    pub fn default_for(variant: Variant) -> Self {
        let (patch_size, bits, widths) = match variant {
            Variant::FcResidual => (8, 8, vec![512, 512]),
            Variant::FcLstm => (8, 8, vec![512, 512, 512]),
            Variant::ConvResidual | Variant::ConvLstm => (32, 128, vec![64, 256, 512]),
        };
        ModelConfig {
            variant,
            weight_policy: if variant.is_recurrent() { WeightPolicy::Shared } else { WeightPolicy::Distinct },
            patch_size,
            bits_per_iteration: bits,
            max_iterations: 16,
            channels: 3,
            layers: LayerPlan { widths, kernel: 3, recurrent_kernel: 1 },
        }
    }

    pub fn total_bits(&self) -> usize {
        self.bits_per_iteration * self.max_iterations
    }

    /// Values per patch, `C * P * P`.
    pub fn patch_values(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Side of the binary code grid for conv variants.
    pub fn bottleneck_side(&self) -> usize {
        self.patch_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) {
            return bad(format!("patch size {} must be a positive multiple of 8", self.patch_size));
        }
        if !(1..=MAX_ITERATIONS).contains(&self.max_iterations) {
            return bad(format!("max_iterations {} outside [1, {MAX_ITERATIONS}]", self.max_iterations));
        }
        if self.bits_per_iteration == 0 || self.bits_per_iteration > u16::MAX as usize {
            return bad(format!("bits_per_iteration {} out of range", self.bits_per_iteration));
        }
        if self.variant.is_recurrent() && self.weight_policy == WeightPolicy::Distinct {
            return bad("LSTM variants always share weights across iterations".into());
        }
        let plan = &self.layers;
        if plan.widths.is_empty() || plan.widths.contains(&0) {
            return bad("layer widths must be non-empty and positive".into());
        }
        if plan.kernel.is_multiple_of(2) || plan.recurrent_kernel.is_multiple_of(2) {
            return bad("kernels must be odd".into());
        }
        match self.variant {
            Variant::FcResidual => {}
            Variant::FcLstm | Variant::ConvResidual | Variant::ConvLstm => {
                if plan.widths.len() != 3 {
                    return bad(format!("{:?} needs exactly 3 layer widths", self.variant));
                }
            }
        }
        if self.variant.is_convolutional() {
            let cells = self.bottleneck_side() * self.bottleneck_side();
            if !self.bits_per_iteration.is_multiple_of(cells) {
                return bad(format!(
                    "bits_per_iteration {} not a multiple of the {}x{} code grid",
                    self.bits_per_iteration,
                    self.bottleneck_side(),
                    self.bottleneck_side()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Dense { weight: ParamId, bias: ParamId },
    Conv { weight: ParamId, bias: ParamId, spec: ConvSpec },
    Deconv { weight: ParamId, bias: ParamId, spec: ConvSpec },
    FcLstm(FcLstmCell),
    SpatialLstm(SpatialLstmCell),
}

impl Layer {
    fn is_recurrent(&self) -> bool {
        matches!(self, Layer::FcLstm(_) | Layer::SpatialLstm(_))
    }
}

/// One encoder/decoder pair `E_t`, `D_t` with the bottleneck between them.
#[derive(Clone, Debug, PartialEq)]
struct Stage {
    encoder: Vec<Layer>,
    binarizer: Binarizer,
    decoder: Vec<Layer>,
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn dense(&mut self, name: &str, input: usize, output: usize) -> Layer {
        let weight = self.store.add_uniform(format!("{name}.weight"), &[output, input], input, self.rng);
        let bias = self.store.add_uniform(format!("{name}.bias"), &[output], input, self.rng);
        Layer::Dense { weight, bias }
    }

    fn conv_spec(&mut self, name: &str, spec: ConvSpec) -> (ParamId, ParamId) {
        let weight = self.store.add_uniform(format!("{name}.weight"), &spec.weight_shape(), spec.fan_in(), self.rng);
        let bias = self.store.add_uniform(format!("{name}.bias"), &[spec.out_channels], spec.fan_in(), self.rng);
        (weight, bias)
    }

    fn conv(&mut self, name: &str, spec: ConvSpec) -> Layer {
        let (weight, bias) = self.conv_spec(name, spec);
        Layer::Conv { weight, bias, spec }
    }

    fn deconv(&mut self, name: &str, spec: ConvSpec) -> Layer {
        let (weight, bias) = self.conv_spec(name, spec);
        Layer::Deconv { weight, bias, spec }
    }

    fn binarizer(&mut self, name: &str, input: usize, bits: usize, projection: Projection) -> Binarizer {
        let shape: Vec<usize> = match projection {
            Projection::Dense => vec![bits, input],
            Projection::Pointwise => vec![bits, input, 1, 1],
        };
        let weight = self.store.add_uniform(format!("{name}.weight"), &shape, input, self.rng);
        let bias = self.store.add_uniform(format!("{name}.bias"), &[bits], input, self.rng);
        Binarizer { weight, bias, projection, bits }
    }

    fn stage(&mut self, cfg: &ModelConfig, prefix: &str) -> Stage {
        let w = &cfg.layers.widths;
        let (k, rk) = (cfg.layers.kernel, cfg.layers.recurrent_kernel);
        let n = |s: &str| format!("{prefix}{s}");
        let input = cfg.patch_values();
        match cfg.variant {
            Variant::FcResidual => {
                let mut encoder = Vec::new();
                let mut prev = input;
                for (i, &width) in w.iter().enumerate() {
                    encoder.push(self.dense(&n(&format!("enc{i}")), prev, width));
                    prev = width;
                }
                let binarizer = self.binarizer(&n("bin"), prev, cfg.bits_per_iteration, Projection::Dense);
                let mut decoder = Vec::new();
                let mut prev = cfg.bits_per_iteration;
                for (i, &width) in w.iter().rev().enumerate() {
                    decoder.push(self.dense(&n(&format!("dec{i}")), prev, width));
                    prev = width;
                }
                decoder.push(self.dense(&n("head"), prev, input));
                Stage { encoder, binarizer, decoder }
            }
            Variant::FcLstm => {
                let encoder = vec![
                    self.dense(&n("enc0"), input, w[0]),
                    Layer::FcLstm(FcLstmCell::init(self.store, &n("enc1"), w[0], w[1], self.rng)),
                    Layer::FcLstm(FcLstmCell::init(self.store, &n("enc2"), w[1], w[2], self.rng)),
                ];
                let binarizer = self.binarizer(&n("bin"), w[2], cfg.bits_per_iteration, Projection::Dense);
                let decoder = vec![
                    Layer::FcLstm(FcLstmCell::init(self.store, &n("dec0"), cfg.bits_per_iteration, w[2], self.rng)),
                    Layer::FcLstm(FcLstmCell::init(self.store, &n("dec1"), w[2], w[1], self.rng)),
                    self.dense(&n("head"), w[1], input),
                ];
                Stage { encoder, binarizer, decoder }
            }
            Variant::ConvResidual | Variant::ConvLstm => {
                let c = cfg.channels;
                let bpp = cfg.bits_per_iteration / (cfg.bottleneck_side() * cfg.bottleneck_side());
                let recurrent = cfg.variant == Variant::ConvLstm;
                let first = self.conv(&n("enc0"), ConvSpec::same(c, w[0], k, 2));
                let (enc1, enc2) = if recurrent {
                    (
                        Layer::SpatialLstm(SpatialLstmCell::init_conv(self.store, &n("enc1"), w[0], w[1], k, rk, 2, self.rng)),
                        Layer::SpatialLstm(SpatialLstmCell::init_conv(self.store, &n("enc2"), w[1], w[2], k, rk, 1, self.rng)),
                    )
                } else {
                    (
                        self.conv(&n("enc1"), ConvSpec::same(w[0], w[1], k, 2)),
                        self.conv(&n("enc2"), ConvSpec::same(w[1], w[2], k, 1)),
                    )
                };
                let binarizer = self.binarizer(&n("bin"), w[2], bpp, Projection::Pointwise);
                let dec0 = self.conv(&n("dec0"), ConvSpec::same(bpp, w[2], 1, 1));
                let (dec1, dec2) = if recurrent {
                    (
                        Layer::SpatialLstm(SpatialLstmCell::init_deconv(self.store, &n("dec1"), w[2], w[1], k, rk, 2, self.rng)),
                        Layer::SpatialLstm(SpatialLstmCell::init_deconv(self.store, &n("dec2"), w[1], w[0], k, rk, 2, self.rng)),
                    )
                } else {
                    (
                        self.deconv(&n("dec1"), ConvSpec::same(w[2], w[1], k, 2)),
                        self.deconv(&n("dec2"), ConvSpec::same(w[1], w[0], k, 2)),
                    )
                };
                let head = self.conv(&n("head"), ConvSpec::same(w[0], c, 1, 1));
                Stage { encoder: vec![first, enc1, enc2], binarizer, decoder: vec![dec0, dec1, dec2, head] }
            }
        }
    }
}

/// Graph handles for one stage of the chain.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub bits: Var,
    pub prediction: Var,
    pub residual: Var,
}

/// Values produced by one stage: bit plane `[batch, bits_per_iteration]` and
/// patch-shaped prediction and residual `[batch, C, P, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub bits: Tensor,
    pub prediction: Tensor,
    pub residual: Tensor,
}

/// Recurrent state for one encoding session.
#[derive(Clone, Debug)]
pub struct ChainState {
    encoder: LstmState,
    decoder: LstmState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualChainModel {
    config: ModelConfig,
    params: ParamStore,
    stages: Vec<Stage>,
    seed: u64,
}

impl ResidualChainModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let copies = match config.weight_policy {
            WeightPolicy::Shared => 1,
            WeightPolicy::Distinct => config.max_iterations,
        };
        let mut builder = Builder { store: &mut params, rng: &mut rng };
        let stages = (0..copies)
            .map(|t| {
                let prefix = if copies == 1 { String::new() } else { format!("stage{t}.") };
                builder.stage(&config, &prefix)
            })
            .collect();
        Ok(ResidualChainModel { config, params, stages, seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of independently parameterized stages.
    pub fn stage_copies(&self) -> usize {
        self.stages.len()
    }

    /// First 8 bytes (little-endian) of SHA-256 over the config and parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn stage(&self, t: usize) -> &Stage {
        if self.stages.len() == 1 {
            &self.stages[0]
        } else {
            &self.stages[t]
        }
    }

    pub fn new_state(&self) -> ChainState {
        let count = |layers: &[Layer]| layers.iter().filter(|l| l.is_recurrent()).count();
        let s = &self.stages[0];
        ChainState { encoder: LstmState::new(count(&s.encoder)), decoder: LstmState::new(count(&s.decoder)) }
    }

    fn check_iterations(&self, n: usize) -> Result<()> {
        if n < 1 || n > self.config.max_iterations {
            return Err(Error::IterationsOutOfRange { got: n, min: 1, max: self.config.max_iterations });
        }
        Ok(())
    }

    fn patch_shape(&self, batch: usize) -> [usize; 4] {
        let c = &self.config;
        [batch, c.channels, c.patch_size, c.patch_size]
    }

    fn run_layers<'p>(&'p self, g: &mut Graph<'p>, layers: &[Layer], mut x: Var, state: &mut LstmState) -> Result<Var> {
        let store = &self.params;
        let mut slot = 0;
        for layer in layers {
            x = match layer {
                Layer::Dense { weight, bias } => {
                    let (w, b) = (g.param(store, *weight), g.param(store, *bias));
                    let a = g.affine(x, w, Some(b))?;
                    g.tanh(a)
                }
                Layer::Conv { weight, bias, spec } => {
                    let (w, b) = (g.param(store, *weight), g.param(store, *bias));
                    let a = g.conv2d(w, x, spec)?;
                    let a = g.channel_bias(a, b)?;
                    g.tanh(a)
                }
                Layer::Deconv { weight, bias, spec } => {
                    let (w, b) = (g.param(store, *weight), g.param(store, *bias));
                    let a = g.deconv2d(w, x, spec)?;
                    let a = g.channel_bias(a, b)?;
                    g.tanh(a)
                }
                Layer::FcLstm(cell) => {
                    let s: CellState = cell.step(g, store, x, state.layer(slot))?;
                    state.set(slot, s);
                    slot += 1;
                    s.h
                }
                Layer::SpatialLstm(cell) => {
                    let s = cell.step(g, store, x, state.layer(slot))?;
                    state.set(slot, s);
                    slot += 1;
                    s.h
                }
            };
        }
        Ok(x)
    }

    /// `E_t` followed by `B`; returns the bit node in the binarizer's native layout.
    fn encode_stage<'p>(&'p self, g: &mut Graph<'p>, t: usize, input: Var, state: &mut ChainState, mode: &Mode) -> Result<Var> {
        let stage = self.stage(t);
        let batch = g.value(input).shape()[0];
        let x =
            if self.config.variant.is_convolutional() { input } else { g.reshape(input, &[batch, self.config.patch_values()])? };
        let h = self.run_layers(g, &stage.encoder, x, &mut state.encoder)?;
        let bin = &stage.binarizer;
        let (w, b) = (g.param(&self.params, bin.weight), g.param(&self.params, bin.bias));
        let (_, _, bits) = binarizer::record(g, w, b, h, bin.projection, mode, t)?;
        Ok(bits)
    }

    /// `D_t` applied to a bit node; returns a patch-shaped prediction.
    fn decode_stage<'p>(&'p self, g: &mut Graph<'p>, t: usize, bits: Var, state: &mut ChainState) -> Result<Var> {
        let batch = g.value(bits).shape()[0];
        let y = self.run_layers(g, &self.stage(t).decoder, bits, &mut state.decoder)?;
        g.reshape(y, &self.patch_shape(batch))
    }

    fn bits_layout(&self, batch: usize) -> Vec<usize> {
        let c = &self.config;
        if c.variant.is_convolutional() {
            let side = c.bottleneck_side();
            vec![batch, c.bits_per_iteration / (side * side), side, side]
        } else {
            vec![batch, c.bits_per_iteration]
        }
    }

    fn as_patch_batch(&self, patch: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let single = [c.channels, c.patch_size, c.patch_size];
        if patch.shape() == single {
            return patch.clone().reshape(&self.patch_shape(1));
        }
        if patch.ndim() == 4 && patch.shape()[1..] == single {
            return Ok(patch.clone());
        }
        Err(Error::ShapeMismatch { op: "model input patch", left: patch.shape().to_vec(), right: single.to_vec() })
    }

    /// Records the chain on `g`; `patch` is `[batch, C, P, P]`.
    pub fn run_chain_graph<'p>(&'p self, g: &mut Graph<'p>, patch: Var, n_iters: usize, mode: &Mode) -> Result<Vec<StageVars>> {
        self.check_iterations(n_iters)?;
        let shape = g.value(patch).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.patch_shape(1)[1..] {
            return Err(Error::ShapeMismatch { op: "model input patch", left: shape, right: self.patch_shape(1).to_vec() });
        }
        let mut state = self.new_state();
        let recurrent = self.config.variant.is_recurrent();
        let mut outputs = Vec::with_capacity(n_iters);
        let mut residual = patch;
        for t in 0..n_iters {
            let bits = self.encode_stage(g, t, residual, &mut state, mode)?;
            let prediction = self.decode_stage(g, t, bits, &mut state)?;
            residual = if recurrent { g.sub(prediction, patch)? } else { g.sub(prediction, residual)? };
            outputs.push(StageVars { bits, prediction, residual });
        }
        Ok(outputs)
    }

    /// Runs `n_iters` stages on `patch` (`[C, P, P]` or `[batch, C, P, P]`).
    pub fn run_chain(&self, patch: &Tensor, n_iters: usize, mode: Mode) -> Result<Vec<StageOutput>> {
        let batch = self.as_patch_batch(patch)?;
        let rows = batch.shape()[0];
        let mut g = Graph::new();
        let x = g.input(batch);
        let vars = self.run_chain_graph(&mut g, x, n_iters, &mode)?;
        vars.iter()
            .map(|v| {
                Ok(StageOutput {
                    bits: g.value(v.bits).clone().reshape(&[rows, self.config.bits_per_iteration])?,
                    prediction: g.value(v.prediction).clone(),
                    residual: g.value(v.residual).clone(),
                })
            })
            .collect()
    }

    /// Image estimate after `outputs.len()` stages.
    pub fn reconstruct(&self, outputs: &[StageOutput]) -> Result<Tensor> {
        let preds: Vec<&Tensor> = outputs.iter().map(|o| &o.prediction).collect();
        self.reconstructions(&preds)?.pop().ok_or_else(|| Error::InvalidArgument("no stage outputs".into()))
    }

    /// Estimate after each prefix of `outputs`.
    pub fn reconstruct_prefixes(&self, outputs: &[StageOutput]) -> Result<Vec<Tensor>> {
        let preds: Vec<&Tensor> = outputs.iter().map(|o| &o.prediction).collect();
        self.reconstructions(&preds)
    }

    fn reconstructions(&self, predictions: &[&Tensor]) -> Result<Vec<Tensor>> {
        if predictions.is_empty() {
            return Err(Error::InvalidArgument("no stage outputs to reconstruct".into()));
        }
        if self.config.variant.is_recurrent() {
            return Ok(predictions.iter().map(|&p| p.clone()).collect());
        }
        let mut acc = predictions[0].clone();
        let mut out = vec![acc.clone()];
        for (t, p) in predictions.iter().enumerate().skip(1) {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            acc = acc.zip_map(p, "reconstruct", |a, b| a + sign * b)?;
            out.push(acc.clone());
        }
        Ok(out)
    }

    /// Decoder-only path: reconstruction after each prefix of `planes`
    /// (each `[batch, bits_per_iteration]` of ±1). Never touches an encoder.
    pub fn decode_prefixes(&self, planes: &[Tensor]) -> Result<Vec<Tensor>> {
        if planes.is_empty() {
            return Err(Error::InvalidArgument("no bit planes to decode".into()));
        }
        self.check_iterations(planes.len())?;
        let batch = planes[0].shape()[0];
        let expected = [batch, self.config.bits_per_iteration];
        let mut g = Graph::new();
        let mut state = self.new_state();
        let mut preds = Vec::with_capacity(planes.len());
        for (t, plane) in planes.iter().enumerate() {
            if plane.shape() != expected {
                return Err(Error::ShapeMismatch { op: "bit plane", left: plane.shape().to_vec(), right: expected.to_vec() });
            }
            let bits = g.input(plane.clone().reshape(&self.bits_layout(batch))?);
            preds.push(self.decode_stage(&mut g, t, bits, &mut state)?);
        }
        let values: Vec<&Tensor> = preds.iter().map(|&p| g.value(p)).collect();
        self.reconstructions(&values)
    }

    pub fn decode_only(&self, planes: &[Tensor]) -> Result<Tensor> {
        Ok(self.decode_prefixes(planes)?.pop().expect("non-empty"))
    }

    /// Normalized training objective over all stage residuals:
    /// `sum_t ||r_t||^2 / (C*P*P * n_iters * batch)`.
    pub fn chain_loss(&self, g: &mut Graph<'_>, stages: &[StageVars]) -> Result<Var> {
        residual_loss(g, stages.iter().map(|s| s.residual).collect::<Vec<_>>().as_slice(), self.config.patch_values())
    }
}

/// `sum_t ||r_t||^2 / (pixels * steps * batch)`; each residual is `[batch, ..]`.
pub fn residual_loss(g: &mut Graph<'_>, residuals: &[Var], pixels: usize) -> Result<Var> {
    let first = *residuals.first().ok_or_else(|| Error::InvalidArgument("no residuals".into()))?;
    let batch = g.value(first).shape()[0];
    let zero = g.input(Tensor::zeros(g.value(first).shape()));
    let mut total: Option<Var> = None;
    for &r in residuals {
        let term = g.l2_loss(r, zero, pixels * batch, residuals.len())?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}
