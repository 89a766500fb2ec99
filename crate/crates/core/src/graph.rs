//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and the
//! backward pass is a single reverse sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{axpy, ensure_same_shape, gemm_acc, gemm_acc_bt, transpose, ConvGeom, ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::from_fn(shape, |_| rng.gen_range(-s..=s)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Primitive kinds addressable through [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Affine,
    Tanh,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Concat { axis: usize },
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Conv { x: Var, w: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    StraightThrough(Var),
    SquaredError { a: Var, b: Var, scale: f64 },
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients from one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    watched: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn from_params(params: impl IntoIterator<Item = (ParamId, Tensor)>) -> Self {
        Gradients { params: params.into_iter().collect(), watched: HashMap::new() }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.watched.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input)
    }

    /// Parameter leaf, borrowed from the store. Repeated requests for the same
    /// id return the same node so fan-out gradients accumulate.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// Parameter leaf holding an owned tensor.
    pub fn param_owned(&mut self, id: ParamId, t: Tensor) -> Var {
        let v = self.push(Cow::Owned(t), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!("{kind:?} takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match kind {
            Primitive::Affine => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return Err(Error::InvalidArgument("affine takes (x, w[, b])".into()));
                }
                self.affine(inputs[0], inputs[1], inputs.get(2).copied())
            }
            Primitive::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            Primitive::Sigmoid => arity(1).map(|_| self.sigmoid(inputs[0])),
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Scale(s) => arity(1).map(|_| self.scale(inputs[0], s)),
        }
    }

    /// `x [.., in] -> x W^T + b`, with `w [out, in]` and `b [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[out, inp] = wv.shape() else {
            return Err(Error::InvalidShape(format!("affine weight must be 2-D, got {:?}", wv.shape())));
        };
        if xv.shape().last() != Some(&inp) {
            return Err(Error::ShapeMismatch { op: "affine input", left: xv.shape().to_vec(), right: wv.shape().to_vec() });
        }
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [out] {
                    return Err(Error::ShapeMismatch {
                        op: "affine bias",
                        left: wv.shape().to_vec(),
                        right: bv.shape().to_vec(),
                    });
                }
                Some(bv.data())
            }
            None => None,
        };
        let rows = xv.len() / inp;
        let mut y = match bias {
            Some(b) => b.repeat(rows),
            None => vec![0.0; rows * out],
        };
        gemm_acc_bt(xv.data(), wv.data(), &mut y, rows, inp, out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let t = Tensor::new(shape, y)?;
        Ok(self.push(Cow::Owned(t), Op::Affine { x, w, b }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(Cow::Owned(t), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(Cow::Owned(t), Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Cow::Owned(t), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Cow::Owned(t), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Cow::Owned(t), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(Cow::Owned(t), Op::Scale(a, s))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::InvalidArgument("empty concat".into()))?);
        if axis >= first.ndim() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range for {:?}", first.shape())));
        }
        let base = first.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch { op: "concat", left: base.clone(), right: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Cow::Owned(t), Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::InvalidArgument(format!("slice {start}+{len} on axis {axis} of {:?}", v.shape())));
        }
        let (outer, inner) = axis_split(v.shape(), axis);
        let full = v.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[o * full + start * inner..][..len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Cow::Owned(t), Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Cow::Owned(t), Op::Reshape(x)))
    }

    /// `W ⊗_k x`.
    pub fn conv2d(&mut self, w: Var, x: Var, spec: &ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), spec, 1, spec.stride)?;
        self.push_conv(w, x, geom)
    }

    /// `W ⊘_k x`.
    pub fn deconv2d(&mut self, w: Var, x: Var, spec: &ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), spec, spec.stride, 1)?;
        self.push_conv(w, x, geom)
    }

    fn push_conv(&mut self, w: Var, x: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let out = geom.forward(xv.data(), wv.data());
        let t = Tensor::new(geom.out_shape(xv.ndim()), out)?;
        Ok(self.push(Cow::Owned(t), Op::Conv { x, w, geom }))
    }

    /// Adds `b[c]` to every spatial position of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c_axis = match xv.ndim() {
            3 => 0,
            4 => 1,
            _ => return Err(Error::InvalidShape(format!("channel bias needs [C,H,W] or [B,C,H,W], got {:?}", xv.shape()))),
        };
        let c = xv.shape()[c_axis];
        if bv.shape() != [c] {
            return Err(Error::ShapeMismatch { op: "channel bias", left: xv.shape().to_vec(), right: bv.shape().to_vec() });
        }
        let plane = xv.shape()[c_axis + 1] * xv.shape()[c_axis + 2];
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bias = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(t), Op::ChannelBias { x, b }))
    }

    /// Node whose forward value is `value` but whose backward is the identity
    /// into `x`.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        ensure_same_shape("straight_through", self.value(x), &value)?;
        Ok(self.push(Cow::Owned(value), Op::StraightThrough(x)))
    }

    /// Scalar `scale * sum((a - b)^2)`.
    pub fn squared_error(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure_same_shape("squared_error", av, bv)?;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Cow::Owned(Tensor::scalar(scale * s)), Op::SquaredError { a, b, scale }))
    }

    /// `sum((pred - target)^2) / (pixel_count * step_count)`.
    pub fn l2_loss(&mut self, pred: Var, target: Var, pixel_count: usize, step_count: usize) -> Result<Var> {
        if pixel_count == 0 || step_count == 0 {
            return Err(Error::InvalidArgument("loss normalization counts must be positive".into()));
        }
        self.squared_error(pred, target, 1.0 / (pixel_count as f64 * step_count as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        self.backward_from(loss, Tensor::filled(v.shape(), 1.0), &[])
    }

    /// Backpropagates `seed` from node `from`. Gradients are kept for
    /// parameters and for the `watch`ed nodes.
    pub fn backward_from(&self, from: Var, seed: Tensor, watch: &[Var]) -> Result<Gradients> {
        ensure_same_shape("backward seed", self.value(from), &seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; from.0 + 1];
        grads[from.0] = Some(seed);
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }

        for idx in (0..=from.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if watch.contains(&Var(idx)) {
                out.watched.insert(Var(idx), g.clone());
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (out_dim, inp) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.len() / inp;
                    let gd = g.data();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    gemm_acc(gd, wv.data(), &mut dx, rows, out_dim, inp);
                    gemm_acc(&transpose(gd, rows, out_dim), xv.data(), &mut dw, out_dim, rows, inp);
                    if let Some(b) = b {
                        let mut db = vec![0.0; out_dim];
                        for row in gd.chunks(out_dim) {
                            axpy(&mut db, 1.0, row);
                        }
                        acc(&mut grads, *b, Tensor::vector(db));
                    }
                    acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, "tanh", |gi, t| gi * (1.0 - t * t))?;
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, "sigmoid", |gi, s| gi * s * (1.0 - s))?;
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), "mul", |gi, bv| gi * bv)?;
                    let db = g.zip_map(self.value(*a), "mul", |gi, av| gi * av)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::Concat { parts, axis } => {
                    let (outer, inner) = axis_split(g.shape(), *axis);
                    let total = g.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let chunk = shape[*axis] * inner;
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total + offset..][..chunk]);
                        }
                        offset += chunk;
                        acc(&mut grads, p, Tensor::new(shape, data)?);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xv = self.value(*x);
                    let (outer, inner) = axis_split(xv.shape(), *axis);
                    let full = xv.shape()[*axis] * inner;
                    let part = g.shape()[*axis] * inner;
                    let mut data = vec![0.0; xv.len()];
                    for o in 0..outer {
                        data[o * full + start * inner..][..part].copy_from_slice(&g.data()[o * part..][..part]);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::Conv { x, w, geom } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (dx, dw) = geom.backward(xv.data(), wv.data(), g.data());
                    acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::ChannelBias { x, b } => {
                    let c = self.value(*b).len();
                    let shape = g.shape();
                    let plane = shape[shape.len() - 1] * shape[shape.len() - 2];
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    acc(&mut grads, *b, Tensor::vector(db));
                    acc(&mut grads, *x, g);
                }
                Op::StraightThrough(x) => acc(&mut grads, *x, g),
                Op::SquaredError { a, b, scale } => {
                    let k = 2.0 * scale * g.data()[0];
                    let da = self.value(*a).zip_map(self.value(*b), "squared_error", |x, y| k * (x - y))?;
                    acc(&mut grads, *b, da.map(|v| -v));
                    acc(&mut grads, *a, da);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::filled(&shape, g.data()[0]));
                }
            }
        }
        Ok(out)
    }
}

/// Pins a closure to the signature `finite_diff_check` expects.
pub fn loss_builder<F>(f: F) -> F
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<Var>,
{
    f
}

/// Relative error between the analytic gradient of `build`'s scalar output
/// with respect to `param` and a central-difference estimate with step `h`:
/// the largest elementwise difference over the larger max-norm of the two
/// gradients (floored at 1e-12). Scaling by the whole tensor keeps elements
/// at the roundoff floor of the difference quotient from dominating.
pub fn finite_diff_check<F>(store: &ParamStore, param: ParamId, h: f64, build: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };
    let analytic = {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let grads = g.backward(loss)?;
        grads.param(param).cloned().unwrap_or_else(|| Tensor::zeros(store.get(param).shape()))
    };
    let mut probe = store.clone();
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1e-12;
    for j in 0..analytic.len() {
        let orig = probe.get(param).data()[j];
        probe.get_mut(param).data_mut()[j] = orig + h;
        let plus = eval(&probe)?;
        probe.get_mut(param).data_mut()[j] = orig - h;
        let minus = eval(&probe)?;
        probe.get_mut(param).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[j];
        diff = diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    Ok(diff / scale)
}
