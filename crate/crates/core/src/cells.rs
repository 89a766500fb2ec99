//! LSTM cells: fully-connected, convolutional and deconvolutional.
//!
//! All three share the gate math: the `4n` pre-activation block is split in
//! `(i, f, o, g)` order, then `c = f*c_prev + i*g` and `h = o*tanh(c)`. They
//! differ only in how the pre-activation is formed from the layer input and
//! the previous hidden state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{ConvSpec, Tensor};

/// Hidden and cell state of one layer at one time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

/// Per-layer recurrent state. `None` means freshly reset (all zeros).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LstmState {
    layers: Vec<Option<CellState>>,
}

impl LstmState {
    pub fn new(layers: usize) -> Self {
        LstmState { layers: vec![None; layers] }
    }

    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(|l| *l = None);
    }

    pub fn is_reset(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }

    pub fn layer(&self, l: usize) -> Option<CellState> {
        self.layers[l]
    }

    pub fn set(&mut self, l: usize, s: CellState) {
        self.layers[l] = Some(s);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

fn gate_update(g: &mut Graph<'_>, pre: Var, n: usize, c_prev: Var) -> Result<CellState> {
    let i = g.slice(pre, 1, 0, n)?;
    let f = g.slice(pre, 1, n, n)?;
    let o = g.slice(pre, 1, 2 * n, n)?;
    let gg = g.slice(pre, 1, 3 * n, n)?;
    let (i, f, o, gg) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(gg));
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, gg)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(CellState { h, c })
}

fn zero_state(g: &mut Graph<'_>, shape: &[usize]) -> CellState {
    let h = g.input(Tensor::zeros(shape));
    let c = g.input(Tensor::zeros(shape));
    CellState { h, c }
}

/// `T_4n(x, h) = W [x; h] + b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcLstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub units: usize,
}

impl FcLstmCell {
    pub fn init(store: &mut ParamStore, name: &str, input: usize, units: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input + units;
        let weight = store.add_uniform(format!("{name}.weight"), &[4 * units, fan_in], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[4 * units], fan_in, rng);
        FcLstmCell { weight, bias, input, units }
    }

    /// `x` is `[batch, input]`.
    pub fn step<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var, prev: Option<CellState>) -> Result<CellState> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::ShapeMismatch { op: "fc lstm input", left: shape, right: vec![self.input] });
        }
        let prev = prev.unwrap_or_else(|| zero_state(g, &[shape[0], self.units]));
        if g.value(prev.h).shape() != [shape[0], self.units] {
            return Err(Error::ShapeMismatch {
                op: "fc lstm state",
                left: g.value(prev.h).shape().to_vec(),
                right: vec![shape[0], self.units],
            });
        }
        let xh = g.concat(&[x, prev.h], 1)?;
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let pre = g.affine(xh, w, Some(b))?;
        gate_update(g, pre, self.units, prev.c)
    }
}

/// Spatial LSTM whose input term is either a strided convolution or a
/// deconvolution; the recurrent term is always a stride-1 convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialLstmCell {
    pub input_weight: ParamId,
    pub recurrent_weight: ParamId,
    pub bias: ParamId,
    pub input_spec: ConvSpec,
    pub recurrent_spec: ConvSpec,
    pub units: usize,
    pub upsample: bool,
}

/// `T_4n = W1 ⊗_k x + W2 ⊗_1 h + b`.
pub type ConvLstmCell = SpatialLstmCell;
/// `T_4n = Wd ⊘_k x + Wc ⊗_1 h + b`.
pub type DeconvLstmCell = SpatialLstmCell;

impl SpatialLstmCell {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        units: usize,
        kernel: usize,
        recurrent_kernel: usize,
        stride: usize,
        upsample: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let input_spec = ConvSpec::same(in_channels, 4 * units, kernel, stride);
        let recurrent_spec = ConvSpec::same(units, 4 * units, recurrent_kernel, 1);
        let fan_in = input_spec.fan_in() + recurrent_spec.fan_in();
        let input_weight = store.add_uniform(format!("{name}.input_weight"), &input_spec.weight_shape(), fan_in, rng);
        let recurrent_weight = store.add_uniform(format!("{name}.recurrent_weight"), &recurrent_spec.weight_shape(), fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[4 * units], fan_in, rng);
        SpatialLstmCell { input_weight, recurrent_weight, bias, input_spec, recurrent_spec, units, upsample }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init_conv(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        units: usize,
        kernel: usize,
        recurrent_kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> ConvLstmCell {
        Self::init(store, name, in_channels, units, kernel, recurrent_kernel, stride, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init_deconv(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        units: usize,
        kernel: usize,
        recurrent_kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> DeconvLstmCell {
        Self::init(store, name, in_channels, units, kernel, recurrent_kernel, stride, true, rng)
    }

    /// State spatial size for an `h x w` input.
    pub fn state_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.upsample {
            self.input_spec.deconv_output(h, w)
        } else {
            self.input_spec.conv_output(h, w)
        }
    }

    /// `x` is `[batch, C, H, W]`.
    pub fn step<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var, prev: Option<CellState>) -> Result<CellState> {
        let shape = g.value(x).shape().to_vec();
        let &[batch, _, hin, win] = shape.as_slice() else {
            return Err(Error::InvalidShape(format!("spatial lstm input must be [B,C,H,W], got {shape:?}")));
        };
        let (ho, wo) = self.state_size(hin, win)?;
        let state_shape = [batch, self.units, ho, wo];
        let prev = prev.unwrap_or_else(|| zero_state(g, &state_shape));
        if g.value(prev.h).shape() != state_shape {
            return Err(Error::ShapeMismatch {
                op: "spatial lstm state",
                left: g.value(prev.h).shape().to_vec(),
                right: state_shape.to_vec(),
            });
        }
        let w_in = g.param(store, self.input_weight);
        let w_rec = g.param(store, self.recurrent_weight);
        let b = g.param(store, self.bias);
        let input_term =
            if self.upsample { g.deconv2d(w_in, x, &self.input_spec)? } else { g.conv2d(w_in, x, &self.input_spec)? };
        let recurrent_term = g.conv2d(w_rec, prev.h, &self.recurrent_spec)?;
        let sum = g.add(input_term, recurrent_term)?;
        let pre = g.channel_bias(sum, b)?;
        gate_update(g, pre, self.units, prev.c)
    }
}

/// Convenience wrappers matching the three named cell operations.
pub fn fc_lstm_step<'p>(
    cell: &FcLstmCell,
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    x: Var,
    prev: Option<CellState>,
) -> Result<CellState> {
    cell.step(g, store, x, prev)
}

pub fn conv_lstm_step<'p>(
    cell: &ConvLstmCell,
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    x: Var,
    prev: Option<CellState>,
) -> Result<CellState> {
    debug_assert!(!cell.upsample);
    cell.step(g, store, x, prev)
}

pub fn deconv_lstm_step<'p>(
    cell: &DeconvLstmCell,
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    x: Var,
    prev: Option<CellState>,
) -> Result<CellState> {
    debug_assert!(cell.upsample);
    cell.step(g, store, x, prev)
}
