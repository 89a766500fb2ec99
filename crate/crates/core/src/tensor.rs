//! Dense row-major `f64` tensors and the raw convolution kernels.
//!
//! Activations use two layouts: fully-connected values are `[batch, features]`
//! and spatial values are `[batch, channels, height, width]`. Convolution
//! weights are `[out_channels, in_channels, kernel_h, kernel_w]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_shape(op, self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Flat inner product; shapes must match.
    pub fn inner(&self, other: &Tensor) -> Result<f64> {
        ensure_same_shape("inner", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        ensure_same_shape("max_abs_diff", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Zero-inflation `T_k` over the last two axes: each sample moves to
    /// `(k*i, k*j)` of a `kH x kW` grid, everything else is zero.
    pub fn inflate(&self, k: usize) -> Result<Tensor> {
        if k < 1 {
            return Err(Error::InvalidArgument("inflation factor must be >= 1".into()));
        }
        let (lead, h, w) = split_spatial(&self.shape)?;
        let (ho, wo) = (h * k, w * k);
        let mut out = vec![0.0; lead * ho * wo];
        for p in 0..lead {
            for i in 0..h {
                for j in 0..w {
                    out[p * ho * wo + i * k * wo + j * k] = self.data[p * h * w + i * w + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 2] = ho;
        shape[n - 1] = wo;
        Ok(Tensor { shape, data: out })
    }

    /// Stride operator `S_k`: keeps samples at `(k*i, k*j)` over the last two axes.
    pub fn subsample(&self, k: usize) -> Result<Tensor> {
        if k < 1 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let (lead, h, w) = split_spatial(&self.shape)?;
        let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
        let mut out = Vec::with_capacity(lead * ho * wo);
        for p in 0..lead {
            for i in 0..ho {
                for j in 0..wo {
                    out.push(self.data[p * h * w + i * k * w + j * k]);
                }
            }
        }
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 2] = ho;
        shape[n - 1] = wo;
        Ok(Tensor { shape, data: out })
    }

    /// Spatially flipped, channel-transposed copy of a `[out, in, kh, kw]` kernel.
    pub fn flip_transpose_kernel(&self) -> Result<Tensor> {
        let &[co, ci, kh, kw] = self.shape.as_slice() else {
            return Err(Error::InvalidShape(format!("kernel must be 4-D, got {:?}", self.shape)));
        };
        let mut out = vec![0.0; self.data.len()];
        for o in 0..co {
            for i in 0..ci {
                for a in 0..kh {
                    for b in 0..kw {
                        out[((i * co + o) * kh + (kh - 1 - a)) * kw + (kw - 1 - b)] = self.data[((o * ci + i) * kh + a) * kw + b];
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![ci, co, kh, kw], data: out })
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch { op, left: a.shape.clone(), right: b.shape.clone() });
    }
    Ok(())
}

fn split_spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape(format!("need at least 2 spatial axes, got {shape:?}")));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding { top: p, bottom: p, left: p, right: p }
    }

    /// Zero padding that keeps a stride-1 convolution size-preserving.
    pub fn same(kernel_h: usize, kernel_w: usize) -> Self {
        let top = (kernel_h - 1) / 2;
        let left = (kernel_w - 1) / 2;
        Padding { top, bottom: kernel_h - 1 - top, left, right: kernel_w - 1 - left }
    }
}

/// Geometry of a convolution `W ⊗_k x` or deconvolution `W ⊘_k x`.
///
/// For deconvolution `stride` is the inflation factor and the padding applies
/// to the stride-1 convolution over the inflated grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Square kernel with "same" padding, so stride `k` maps `kn -> n` and the
    /// matching deconvolution maps `n -> kn`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding: Padding::same(kernel, kernel) }
    }

    pub fn valid(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec { padding: Padding::default(), ..Self::same(in_channels, out_channels, kernel, stride) }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidConv(format!("zero-sized conv spec {self:?}")));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConv("stride must be >= 1".into()));
        }
        Ok(())
    }

    fn out_len(&self, virt: usize, before: usize, after: usize, kernel: usize, stride: usize) -> Result<usize> {
        let padded = virt + before + after;
        if padded < kernel {
            return Err(Error::InvalidConv(format!("kernel {kernel} larger than padded input {padded} for {self:?}")));
        }
        Ok((padded - kernel) / stride + 1)
    }

    /// Output spatial size of the strided convolution.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let p = self.padding;
        Ok((
            self.out_len(h, p.top, p.bottom, self.kernel_h, self.stride)?,
            self.out_len(w, p.left, p.right, self.kernel_w, self.stride)?,
        ))
    }

    /// Output spatial size of the deconvolution (inflate by `stride`, then stride-1 conv).
    pub fn deconv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let p = self.padding;
        Ok((
            self.out_len(h * self.stride, p.top, p.bottom, self.kernel_h, 1)?,
            self.out_len(w * self.stride, p.left, p.right, self.kernel_w, 1)?,
        ))
    }

    /// Spec of the deconvolution that is the exact adjoint of this convolution
    /// applied to an `h x w` input (weights must be flip-transposed separately).
    pub fn adjoint(&self, h: usize, w: usize) -> Result<ConvSpec> {
        let (ho, wo) = self.conv_output(h, w)?;
        let p = self.padding;
        let side = |before: usize, kernel: usize, n: usize, nout: usize| -> Result<(usize, usize)> {
            let lead = kernel - 1;
            if before > lead || n + before < self.stride * nout {
                return Err(Error::InvalidConv(format!("no exact adjoint for {self:?} at input {h}x{w}")));
            }
            Ok((lead - before, n + before - self.stride * nout))
        };
        let (top, bottom) = side(p.top, self.kernel_h, h, ho)?;
        let (left, right) = side(p.left, self.kernel_w, w, wo)?;
        Ok(ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: Padding { top, bottom, left, right },
        })
    }
}

/// Output positions along one axis that see the same kernel taps. With an
/// inflated input, taps landing on inflation zeros are dropped per phase.
#[derive(Clone, Debug)]
struct AxisPhase {
    outs: Vec<usize>,
    taps: Vec<usize>,
    /// Input index read by tap `taps[t]` at output `outs[j]`, stored at
    /// `t * outs.len() + j`; `None` for padding.
    src: Vec<Option<usize>>,
}

fn axis_phases(taps: usize, before: usize, out: usize, stride: usize, dilation: usize, real: usize) -> Vec<AxisPhase> {
    let virt = (real * dilation) as isize;
    let d = dilation as isize;
    let mut phases = Vec::new();
    for r in 0..dilation {
        // virtual index v = o*stride + tap - before; tap contributes when v % dilation == 0
        let outs: Vec<usize> =
            (0..out).filter(|&o| ((o * stride) as isize - before as isize).rem_euclid(d) as usize == r).collect();
        if outs.is_empty() {
            continue;
        }
        let taps: Vec<usize> = (0..taps).filter(|&a| (r + a) % dilation == 0).collect();
        let mut src = Vec::with_capacity(taps.len() * outs.len());
        for &a in &taps {
            for &o in &outs {
                let v = (o * stride + a) as isize - before as isize;
                src.push((v >= 0 && v < virt && v % d == 0).then(|| (v / d) as usize));
            }
        }
        phases.push(AxisPhase { outs, taps, src });
    }
    phases
}

/// `c[m, :] += sum_k a[m, k] * b[k, :]` for row-major `a: [m, k]`,
/// `b: [k, n]`, `c: [m, n]`. Every element is updated by fused multiply-adds
/// in increasing `k`, so results do not depend on tiling or on which code
/// path runs, and exact zeros in `a` or `b` leave sums untouched.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { gemm_acc_avx2(a, b, c, m, k, n) };
            return;
        }
    }
    gemm_acc_body::<4, 8>(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_acc_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc_body::<4, 8>(a, b, c, m, k, n);
}

/// Register-tiled kernel with `MR x NR` accumulator blocks.
#[inline(always)]
fn gemm_acc_body<const MR: usize, const NR: usize>(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full_cols = n - n % NR;
    let mut row = 0;
    while row < m {
        let rows = MR.min(m - row);
        if rows == MR {
            let mut col = 0;
            while col < full_cols {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    acc_r.copy_from_slice(&c[(row + r) * n + col..][..NR]);
                }
                for kk in 0..k {
                    let bv: &[f64; NR] = b[kk * n + col..][..NR].try_into().unwrap();
                    for (r, acc_r) in acc.iter_mut().enumerate() {
                        let w = a[(row + r) * k + kk];
                        for j in 0..NR {
                            acc_r[j] = w.mul_add(bv[j], acc_r[j]);
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    c[(row + r) * n + col..][..NR].copy_from_slice(acc_r);
                }
                col += NR;
            }
        }
        // leftover rows, and leftover columns of full row blocks
        for r in 0..rows {
            let start = if rows == MR { full_cols } else { 0 };
            let crow = &mut c[(row + r) * n..][..n];
            for kk in 0..k {
                let w = a[(row + r) * k + kk];
                for (x, &v) in crow[start..].iter_mut().zip(&b[kk * n + start..kk * n + n]) {
                    *x = w.mul_add(v, *x);
                }
            }
        }
        row += rows;
    }
}

/// Same as [`gemm_acc`] with `b` supplied transposed (`bt: [n, k]`), so
/// `c[i, j] += sum_k a[i, k] * bt[j, k]` with the identical per-element order.
pub(crate) fn gemm_acc_bt(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && bt.len() >= k * n && c.len() >= m * n);
    // Few rows: dot products straight off `bt` beat materializing its transpose.
    if m > 4 {
        gemm_acc(a, &transpose(bt, n, k), c, m, k, n);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { dots_avx2(a, bt, c, m, k, n) };
            return;
        }
    }
    dots_body(a, bt, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dots_avx2(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    dots_body(a, bt, c, m, k, n);
}

#[inline(always)]
fn dots_body(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const LANES: usize = 8;
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * n..][..n];
        let mut j = 0;
        while j + LANES <= n {
            let mut acc: [f64; LANES] = crow[j..j + LANES].try_into().unwrap();
            let rows: [&[f64]; LANES] = std::array::from_fn(|u| &bt[(j + u) * k..][..k]);
            for (t, &x) in arow.iter().enumerate() {
                for u in 0..LANES {
                    acc[u] = x.mul_add(rows[u][t], acc[u]);
                }
            }
            crow[j..j + LANES].copy_from_slice(&acc);
            j += LANES;
        }
        for (jj, cv) in crow.iter_mut().enumerate().skip(j) {
            *cv = arow.iter().zip(&bt[jj * k..][..k]).fold(*cv, |acc, (&x, &w)| x.mul_add(w, acc));
        }
    }
}

/// Row-major transpose of a `[rows, cols]` matrix.
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for (cidx, &v) in x[r * cols..][..cols].iter().enumerate() {
            out[cidx * rows + r] = v;
        }
    }
    out
}

/// Lowered geometry shared by the forward and backward kernels. The virtual
/// input is the real input inflated by `dilation` (1 for plain convolution).
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    hin: usize,
    win: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pub hout: usize,
    pub wout: usize,
    row_phases: Vec<AxisPhase>,
    col_phases: Vec<AxisPhase>,
}

/// One (row phase, column phase) block lowered to a matrix product.
struct PhaseBlock<'a> {
    rows: &'a AxisPhase,
    cols: &'a AxisPhase,
    /// Offset of each contributing tap within one `[cin, kh, kw]` filter, in
    /// (input channel, tap row, tap col) order.
    taps: Vec<usize>,
    positions: usize,
}

impl ConvGeom {
    /// `dilation` > 1 requires `stride` == 1.
    pub(crate) fn new(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec, dilation: usize, stride: usize) -> Result<Self> {
        let (batch, cin, hin, win) = match *x_shape {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::InvalidShape(format!("conv input must be [C,H,W] or [B,C,H,W], got {x_shape:?}"))),
        };
        if w_shape != spec.weight_shape() {
            return Err(Error::ShapeMismatch { op: "conv weights", left: w_shape.to_vec(), right: spec.weight_shape().to_vec() });
        }
        if cin != spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv input channels",
                left: x_shape.to_vec(),
                right: spec.weight_shape().to_vec(),
            });
        }
        debug_assert!(dilation == 1 || stride == 1);
        let (hout, wout) = if dilation == 1 { spec.conv_output(hin, win)? } else { spec.deconv_output(hin, win)? };
        let p = spec.padding;
        Ok(ConvGeom {
            batch,
            cin,
            hin,
            win,
            cout: spec.out_channels,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            hout,
            wout,
            row_phases: axis_phases(spec.kernel_h, p.top, hout, stride, dilation, hin),
            col_phases: axis_phases(spec.kernel_w, p.left, wout, stride, dilation, win),
        })
    }

    pub(crate) fn out_shape(&self, x_ndim: usize) -> Vec<usize> {
        if x_ndim == 3 {
            vec![self.cout, self.hout, self.wout]
        } else {
            vec![self.batch, self.cout, self.hout, self.wout]
        }
    }

    fn blocks(&self) -> Vec<PhaseBlock<'_>> {
        let mut out = Vec::new();
        for rows in &self.row_phases {
            for cols in &self.col_phases {
                let mut taps = Vec::with_capacity(self.cin * rows.taps.len() * cols.taps.len());
                for i in 0..self.cin {
                    for &a in &rows.taps {
                        for &b in &cols.taps {
                            taps.push((i * self.kh + a) * self.kw + b);
                        }
                    }
                }
                out.push(PhaseBlock { rows, cols, taps, positions: rows.outs.len() * cols.outs.len() });
            }
        }
        out
    }

    /// Filter weights restricted to a block's taps, `[cout, taps]`.
    fn block_weights(&self, blk: &PhaseBlock, w: &[f64]) -> Vec<f64> {
        let filter = self.cin * self.kh * self.kw;
        (0..self.cout).flat_map(|o| blk.taps.iter().map(move |&t| w[o * filter + t])).collect()
    }

    /// Lowers one sample to `[taps, positions]`, zero where a tap reads padding.
    fn im2col(&self, x: &[f64], blk: &PhaseBlock, col: &mut Vec<f64>) {
        let (rp, cp) = (blk.rows, blk.cols);
        let (nr, nc) = (rp.outs.len(), cp.outs.len());
        col.clear();
        col.reserve(blk.taps.len() * blk.positions);
        let hw_in = self.hin * self.win;
        for i in 0..self.cin {
            let plane = &x[i * hw_in..][..hw_in];
            for ta in 0..rp.taps.len() {
                for tb in 0..cp.taps.len() {
                    for jr in 0..nr {
                        match rp.src[ta * nr + jr] {
                            Some(yi) => {
                                let row = &plane[yi * self.win..][..self.win];
                                col.extend(cp.src[tb * nc..][..nc].iter().map(|s| s.map_or(0.0, |xi| row[xi])));
                            }
                            None => col.extend(std::iter::repeat_n(0.0, nc)),
                        }
                    }
                }
            }
        }
    }

    fn position_index(&self, blk: &PhaseBlock, j: usize) -> usize {
        let nc = blk.cols.outs.len();
        blk.rows.outs[j / nc] * self.wout + blk.cols.outs[j % nc]
    }

    /// Accumulation order per output element is (input channel, tap row, tap
    /// col); taps that land on inflation zeros are skipped, and padding taps
    /// add exact zeros, which leaves every partial sum bit-identical to the
    /// dense reference.
    pub(crate) fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (hw_in, hw_out) = (self.hin * self.win, self.hout * self.wout);
        let mut out = vec![0.0; self.batch * self.cout * hw_out];
        let (mut col, mut acc) = (Vec::new(), Vec::new());
        for blk in self.blocks() {
            if blk.taps.is_empty() || blk.positions == 0 {
                continue;
            }
            let wk = self.block_weights(&blk, w);
            let index: Vec<usize> = (0..blk.positions).map(|j| self.position_index(&blk, j)).collect();
            for n in 0..self.batch {
                self.im2col(&x[n * self.cin * hw_in..][..self.cin * hw_in], &blk, &mut col);
                acc.clear();
                acc.resize(self.cout * blk.positions, 0.0);
                gemm_acc(&wk, &col, &mut acc, self.cout, blk.taps.len(), blk.positions);
                for o in 0..self.cout {
                    let plane = &mut out[(n * self.cout + o) * hw_out..][..hw_out];
                    for (&p, &v) in index.iter().zip(&acc[o * blk.positions..][..blk.positions]) {
                        plane[p] = v;
                    }
                }
            }
        }
        out
    }

    /// Returns (grad wrt input, grad wrt weights).
    pub(crate) fn backward(&self, x: &[f64], w: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (hw_in, hw_out) = (self.hin * self.win, self.hout * self.wout);
        let filter = self.cin * self.kh * self.kw;
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let (mut col, mut dcol, mut g) = (Vec::new(), Vec::new(), Vec::new());
        for blk in self.blocks() {
            let k = blk.taps.len();
            if k == 0 || blk.positions == 0 {
                continue;
            }
            let npos = blk.positions;
            let wk = self.block_weights(&blk, w);
            // transposed to [taps, cout] for the input-gradient product
            let wkt: Vec<f64> = (0..k).flat_map(|t| (0..self.cout).map(move |o| (t, o))).map(|(t, o)| wk[o * k + t]).collect();
            let index: Vec<usize> = (0..npos).map(|j| self.position_index(&blk, j)).collect();
            let mut dwk = vec![0.0; self.cout * k];
            for n in 0..self.batch {
                g.clear();
                for o in 0..self.cout {
                    let plane = &dout[(n * self.cout + o) * hw_out..][..hw_out];
                    g.extend(index.iter().map(|&p| plane[p]));
                }
                self.im2col(&x[n * self.cin * hw_in..][..self.cin * hw_in], &blk, &mut col);
                gemm_acc(&g, &transpose(&col, k, npos), &mut dwk, self.cout, npos, k);
                dcol.clear();
                dcol.resize(k * npos, 0.0);
                gemm_acc(&wkt, &g, &mut dcol, k, self.cout, npos);
                self.col2im(&dcol, &blk, &mut dx[n * self.cin * hw_in..][..self.cin * hw_in]);
            }
            for o in 0..self.cout {
                for (t, &tap) in blk.taps.iter().enumerate() {
                    dw[o * filter + tap] += dwk[o * k + t];
                }
            }
        }
        (dx, dw)
    }

    /// Scatter-adds a `[taps, positions]` gradient back onto one input sample.
    fn col2im(&self, dcol: &[f64], blk: &PhaseBlock, dx: &mut [f64]) {
        let (rp, cp) = (blk.rows, blk.cols);
        let (nr, nc) = (rp.outs.len(), cp.outs.len());
        let hw_in = self.hin * self.win;
        let mut rows = dcol.chunks_exact(nc);
        for i in 0..self.cin {
            let plane = &mut dx[i * hw_in..][..hw_in];
            for ta in 0..rp.taps.len() {
                for tb in 0..cp.taps.len() {
                    for jr in 0..nr {
                        let vals = rows.next().expect("dcol sized to block");
                        let Some(yi) = rp.src[ta * nr + jr] else { continue };
                        let row = &mut plane[yi * self.win..][..self.win];
                        for (s, &v) in cp.src[tb * nc..][..nc].iter().zip(vals) {
                            if let Some(xi) = s {
                                row[*xi] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Strided convolution `W ⊗_k x` without bias.
pub fn conv2d(weights: &Tensor, x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let geom = ConvGeom::new(x.shape(), weights.shape(), spec, 1, spec.stride)?;
    let out = geom.forward(x.data(), weights.data());
    Tensor::new(geom.out_shape(x.ndim()), out)
}

/// Deconvolution `W ⊘_k x = W ⊗_1 T_k(x)` without bias.
pub fn deconv2d(weights: &Tensor, x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let geom = ConvGeom::new(x.shape(), weights.shape(), spec, spec.stride, 1)?;
    let out = geom.forward(x.data(), weights.data());
    Tensor::new(geom.out_shape(x.ndim()), out)
}
