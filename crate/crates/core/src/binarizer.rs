//! Binary bottleneck: a tanh projection followed by stochastic (training) or
//! sign (inference) binarization, with straight-through gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::tensor::{ConvSpec, Tensor};

/// Counter-based noise: each `(stage, patch, unit)` coordinate maps to a
/// fixed position of a keyed ChaCha stream, so draws never depend on
/// evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSource {
    pub seed: u64,
    /// Training step; fresh noise every step.
    pub step: u64,
    /// Global index of the first patch in the current batch.
    pub patch_base: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { seed, step: 0, patch_base: 0 }
    }

    pub fn at_step(self, step: u64) -> Self {
        NoiseSource { step, ..self }
    }

    fn stream(&self, stage: usize, patch: u64) -> ChaCha8Rng {
        let key = self.seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(((stage as u64) << 40) ^ (self.patch_base + patch));
        rng
    }

    /// Uniform draw in `[0, 1)` for one coordinate.
    pub fn uniform(&self, stage: usize, patch: u64, unit: usize) -> f64 {
        let mut rng = self.stream(stage, patch);
        // each f64 consumes two 32-bit words
        rng.set_word_pos(2 * unit as u128);
        rng.gen::<f64>()
    }

    /// Draws for units `0..n` of one patch; equal to `uniform` per unit.
    pub fn uniforms(&self, stage: usize, patch: u64, n: usize) -> Vec<f64> {
        let mut rng = self.stream(stage, patch);
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Stochastic binarization driven by the given noise.
    Train(NoiseSource),
    /// Deterministic sign binarization.
    Infer,
}

/// `+1` with probability `(1 + x) / 2`, given a uniform draw `u` in `[0, 1)`.
pub fn binarize_stochastic(x: f64, u: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::BinarizerRange(x));
    }
    Ok(if u < (1.0 + x) / 2.0 { 1.0 } else { -1.0 })
}

/// `-1` for negative inputs, `+1` otherwise (including zero).
pub fn binarize_inference(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// How the bottleneck projection is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// `[batch, features] -> [batch, bits]`
    Dense,
    /// 1x1 convolution `[batch, C, H, W] -> [batch, bits_per_pixel, H, W]`
    Pointwise,
}

/// Binarizes tanh outputs row by row; each leading-axis row is one patch.
pub(crate) fn binarize_rows(t: &Tensor, mode: &Mode, stage: usize) -> Result<Tensor> {
    let rows = t.shape()[0];
    let per_row = t.len() / rows;
    let mut out = Vec::with_capacity(t.len());
    match mode {
        Mode::Infer => out.extend(t.data().iter().map(|&v| binarize_inference(v))),
        Mode::Train(noise) => {
            for (n, row) in t.data().chunks(per_row).enumerate() {
                let draws = noise.uniforms(stage, n as u64, per_row);
                for (&x, u) in row.iter().zip(draws) {
                    out.push(binarize_stochastic(x, u)?);
                }
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Records `B(x) = b(tanh(W x + b))` on the graph and returns
/// `(pre_activation, tanh_output, bits)`.
pub(crate) fn record(
    g: &mut Graph<'_>,
    weight: Var,
    bias: Var,
    x: Var,
    projection: Projection,
    mode: &Mode,
    stage: usize,
) -> Result<(Var, Var, Var)> {
    let pre = match projection {
        Projection::Dense => g.affine(x, weight, Some(bias))?,
        Projection::Pointwise => {
            let w = g.value(weight).shape().to_vec();
            let spec = ConvSpec::valid(w[1], w[0], 1, 1);
            let c = g.conv2d(weight, x, &spec)?;
            g.channel_bias(c, bias)?
        }
    };
    let t = g.tanh(pre);
    let bits = binarize_rows(g.value(t), mode, stage)?;
    let out = g.straight_through(t, bits)?;
    Ok((pre, t, out))
}

/// Binarizer parameters as part of a model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Binarizer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub projection: Projection,
    /// Bits per row for `Dense`, bits per pixel for `Pointwise`.
    pub bits: usize,
}

/// Standalone binarizer holding its own weights (`[bits, input]` and `[bits]`).
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizerLayer {
    weight: Tensor,
    bias: Tensor,
}

const WEIGHT: ParamId = ParamId(0);
const BIAS: ParamId = ParamId(1);
const INPUT: ParamId = ParamId(2);

impl BinarizerLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[bits, _] = weight.shape() else {
            return Err(Error::InvalidShape(format!("binarizer weight must be 2-D, got {:?}", weight.shape())));
        };
        if bias.shape() != [bits] {
            return Err(Error::ShapeMismatch {
                op: "binarizer bias",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(BinarizerLayer { weight, bias })
    }

    pub fn bit_count(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// `activations` is `[features]` or `[batch, features]`.
    pub fn forward(&self, activations: &Tensor, mode: Mode, stage: usize) -> Result<BinaryForward> {
        let x = if activations.ndim() == 1 { activations.clone().reshape(&[1, activations.len()])? } else { activations.clone() };
        let mut graph = Graph::new();
        let w = graph.param_owned(WEIGHT, self.weight.clone());
        let b = graph.param_owned(BIAS, self.bias.clone());
        let xv = graph.param_owned(INPUT, x);
        let (pre, tanh, bits) = record(&mut graph, w, b, xv, Projection::Dense, &mode, stage)?;
        Ok(BinaryForward { graph, pre, tanh, bits, train: matches!(mode, Mode::Train(_)) })
    }
}

/// Retained forward state of a [`BinarizerLayer`].
pub struct BinaryForward {
    graph: Graph<'static>,
    pre: Var,
    tanh: Var,
    bits: Var,
    train: bool,
}

#[derive(Clone, Debug)]
pub struct BinaryGradients {
    pub input: Tensor,
    pub pre_activation: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl BinaryForward {
    pub fn bits(&self) -> &Tensor {
        self.graph.value(self.bits)
    }

    pub fn tanh_output(&self) -> &Tensor {
        self.graph.value(self.tanh)
    }

    pub fn pre_activation(&self) -> &Tensor {
        self.graph.value(self.pre)
    }

    /// Straight-through backward: `b` contributes an identity Jacobian.
    pub fn backward(&self, upstream: &Tensor) -> Result<BinaryGradients> {
        if !self.train {
            return Err(Error::NotTrainMode);
        }
        let seed = if upstream.shape() == self.bits().shape() {
            upstream.clone()
        } else {
            upstream.clone().reshape(self.bits().shape())?
        };
        let grads = self.graph.backward_from(self.bits, seed, &[self.pre])?;
        let get = |id| grads.param(id).cloned().expect("binarizer parameters reach the output");
        Ok(BinaryGradients {
            input: get(INPUT),
            pre_activation: grads.wrt(self.pre).cloned().expect("watched"),
            weight: get(WEIGHT),
            bias: get(BIAS),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{finite_diff_check, loss_builder, ParamStore};

    #[test]
    fn endpoint_probabilities() {
        for i in 0..1000 {
            let u = i as f64 / 1000.0;
            assert_eq!(binarize_stochastic(1.0, u).unwrap(), 1.0);
            assert_eq!(binarize_stochastic(-1.0, u).unwrap(), -1.0);
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(binarize_stochastic(1.01, 0.5), Err(Error::BinarizerRange(_))));
    }

    #[test]
    fn inference_sign() {
        assert_eq!(binarize_inference(-0.3), -1.0);
        assert_eq!(binarize_inference(0.0), 1.0);
        assert_eq!(binarize_inference(-0.0), 1.0);
        assert_eq!(binarize_inference(0.7), 1.0);
    }

    #[test]
    fn half_has_unbiased_mean() {
        let noise = NoiseSource::new(42);
        let n = 100_000;
        let draws = noise.uniforms(0, 0, n);
        let mean = draws.iter().map(|&u| binarize_stochastic(0.5, u).unwrap()).sum::<f64>() / n as f64;
        let tol = 3.0 * ((1.0 - 0.25) / n as f64).sqrt();
        assert!((mean - 0.5).abs() <= tol, "mean {mean}");
    }

    #[test]
    fn coordinates_fix_draws() {
        let noise = NoiseSource { seed: 9, step: 3, patch_base: 10 };
        let row = noise.uniforms(2, 5, 17);
        for (u, &v) in row.iter().enumerate() {
            assert_eq!(noise.uniform(2, 5, u), v);
        }
        assert_ne!(noise.uniforms(2, 6, 4), noise.uniforms(2, 5, 4));
        assert_ne!(noise.at_step(4).uniforms(2, 5, 4), noise.uniforms(2, 5, 4));
        assert_ne!(noise.uniforms(3, 5, 4), noise.uniforms(2, 5, 4));
    }

    #[test]
    fn zero_layer_emits_all_ones() {
        let layer = BinarizerLayer::new(Tensor::zeros(&[6, 4]), Tensor::zeros(&[6])).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2, 0.9, 1.0]);
        let out = layer.forward(&x, Mode::Infer, 0).unwrap();
        assert_eq!(out.bits().data(), &[1.0; 6]);
    }

    fn random_layer(seed: u64, bits: usize, input: usize) -> BinarizerLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(&[bits, input], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[bits], |_| rng.gen_range(-0.5..0.5));
        BinarizerLayer::new(w, b).unwrap()
    }

    #[test]
    fn codomain_and_determinism() {
        let layer = random_layer(1, 16, 8);
        let x = Tensor::from_fn(&[3, 8], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
        let noise = NoiseSource::new(77);
        for mode in [Mode::Infer, Mode::Train(noise)] {
            let a = layer.forward(&x, mode, 1).unwrap();
            assert!(a.bits().data().iter().all(|&v| v == 1.0 || v == -1.0));
            let b = layer.forward(&x, mode, 1).unwrap();
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn backward_is_straight_through() {
        let layer = random_layer(2, 5, 3);
        let x = Tensor::vector(vec![0.2, -0.7, 0.4]);
        let fwd = layer.forward(&x, Mode::Train(NoiseSource::new(5)), 0).unwrap();
        let g = Tensor::from_fn(&[1, 5], |i| 0.3 * i as f64 - 0.5);
        let grads = fwd.backward(&g).unwrap();
        for ((gp, gi), t) in grads.pre_activation.data().iter().zip(g.data()).zip(fwd.tanh_output().data()) {
            assert_eq!(*gp, gi * (1.0 - t * t));
        }
        let zero = fwd.backward(&Tensor::zeros(&[1, 5])).unwrap();
        assert!(zero.weight.data().iter().chain(zero.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_after_inference_rejected() {
        let layer = random_layer(3, 2, 2);
        let fwd = layer.forward(&Tensor::vector(vec![0.1, 0.2]), Mode::Infer, 0).unwrap();
        assert!(matches!(fwd.backward(&Tensor::zeros(&[1, 2])), Err(Error::NotTrainMode)));
    }

    #[test]
    fn matches_surrogate_finite_differences() {
        // With b removed the layer is tanh(Wx + b); the straight-through
        // gradients must equal the surrogate's exact gradients.
        let layer = random_layer(4, 4, 3);
        let x = Tensor::from_fn(&[2, 3], |i| 0.1 * i as f64 - 0.2);
        let up = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.7).sin());
        let fwd = layer.forward(&x, Mode::Train(NoiseSource::new(8)), 0).unwrap();
        let grads = fwd.backward(&up).unwrap();

        let mut store = ParamStore::new();
        let w = store.add("w", layer.weight().clone());
        let b = store.add("b", layer.bias().clone());
        let build = loss_builder(|g, s| {
            let (wv, bv) = (g.param(s, w), g.param(s, b));
            let xv = g.input(x.clone());
            let pre = g.affine(xv, wv, Some(bv))?;
            let t = g.tanh(pre);
            let u = g.input(up.clone());
            let p = g.mul(t, u)?;
            Ok(g.sum(p))
        });
        assert!(finite_diff_check(&store, w, 1e-5, build).unwrap() <= 1e-4);
        assert!(finite_diff_check(&store, b, 1e-5, build).unwrap() <= 1e-4);
        let mut g = Graph::new();
        let loss = build(&mut g, &store).unwrap();
        let exact = g.backward(loss).unwrap();
        assert!(exact.param(w).unwrap().max_abs_diff(&grads.weight).unwrap() < 1e-15);
        assert!(exact.param(b).unwrap().max_abs_diff(&grads.bias).unwrap() < 1e-15);
    }
}
