//! 2-D convolution over [`Tensor4`] timesteps, BN folding and linear chain
//! composition.
//!
//! Kernels are laid out `(c_out, c_in / groups, k, k)`. Padding is zero
//! padding on all four sides. Every timestep is convolved independently.

use std::ops::{Add, AddAssign, Mul};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Frozen batch-norm statistics and affine parameters, one entry per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    /// `gamma = 1, beta = 0, mean = 0, var = 1`.
    pub fn identity(channels: usize, eps: f64) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` so that `bn(y) = scale * y + shift`.
    pub fn affine(&self) -> Result<Vec<(f64, f64)>> {
        (0..self.channels())
            .map(|c| {
                let denom = self.var[c] + self.eps;
                if !(denom > 0.0) {
                    return Err(Error::Domain(format!(
                        "batch-norm channel {c}: var + eps = {denom} is not positive"
                    )));
                }
                let scale = self.gamma[c] / denom.sqrt();
                Ok((scale, self.beta[c] - scale * self.mean[c]))
            })
            .collect()
    }
}

/// A convolution layer's hyper-parameters and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BatchNorm>,
}

impl ConvSpec {
    /// Zero-weight spec with no bias and no batch norm.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let spec = ConvSpec {
            c_in,
            c_out,
            k,
            stride,
            padding,
            groups,
            weights: vec![0.0; weight_len(c_in, c_out, k, groups.max(1))],
            bias: None,
            bn: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        self.bias = Some(bias);
        self.validate()?;
        Ok(self)
    }

    pub fn with_bn(mut self, bn: BatchNorm) -> Result<Self> {
        self.bn = Some(bn);
        self.validate()?;
        Ok(self)
    }

    /// Input channels seen by each output channel.
    pub fn group_in(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn group_out(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.c_in && self.c_in == self.c_out
    }

    #[inline]
    pub fn weight_index(&self, co: usize, ci_local: usize, ky: usize, kx: usize) -> usize {
        ((co * self.group_in() + ci_local) * self.k + ky) * self.k + kx
    }

    /// Stored parameter count: weights, bias and all four batch-norm vectors.
    pub fn param_count(&self) -> usize {
        self.weights.len()
            + self.bias.as_ref().map_or(0, Vec::len)
            + self.bn.as_ref().map_or(0, |bn| 4 * bn.channels())
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::Config(format!(
                "conv dims must be positive (c_in {}, c_out {}, k {}, stride {}, groups {})",
                self.c_in, self.c_out, self.k, self.stride, self.groups
            )));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels {}→{} not divisible by groups {}",
                self.c_in, self.c_out, self.groups
            )));
        }
        let expected = weight_len(self.c_in, self.c_out, self.k, self.groups);
        if self.weights.len() != expected {
            return Err(Error::dims("conv weights", &[expected], &[self.weights.len()]));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.c_out {
                return Err(Error::dims("conv bias", &[self.c_out], &[b.len()]));
            }
        }
        if let Some(bn) = &self.bn {
            let lens = [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()];
            if lens.iter().any(|&l| l != self.c_out) {
                return Err(Error::dims("batch-norm vectors", &[self.c_out; 4], &lens));
            }
        }
        Ok(())
    }

    /// Output `(h, w)` for an input plane of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.k || pw < self.k {
            return Err(Error::dims("conv input plane (padded) smaller than kernel", &[self.k, self.k], &[ph, pw]));
        }
        Ok(((ph - self.k) / self.stride + 1, (pw - self.k) / self.stride + 1))
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.c_in {
            return Err(Error::dims(
                "conv input channels",
                &[input.t, self.c_in, input.h, input.w],
                &input.dims(),
            ));
        }
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape4::new(input.t, self.c_out, oh, ow))
    }

    pub(crate) fn geometry(&self, input: Shape4) -> Result<ConvGeom> {
        let out = self.output_shape(input)?;
        Ok(ConvGeom {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            in_h: input.h,
            in_w: input.w,
            out_h: out.h,
            out_w: out.w,
        })
    }

    /// Per-output-channel `(scale, shift)` applied after the raw convolution.
    pub fn output_affine(&self) -> Result<Vec<(f64, f64)>> {
        let mut aff: Vec<(f64, f64)> = match &self.bias {
            Some(b) => b.iter().map(|&b| (1.0, b)).collect(),
            None => vec![(1.0, 0.0); self.c_out],
        };
        if let Some(bn) = &self.bn {
            for (a, (s, t)) in aff.iter_mut().zip(bn.affine()?) {
                *a = (a.0 * s, a.1 * s + t);
            }
        }
        Ok(aff)
    }
}

fn weight_len(c_in: usize, c_out: usize, k: usize, groups: usize) -> usize {
    c_out * (c_in / groups) * k * k
}

/// Arithmetic the convolution kernels can run in.
pub trait Scalar: Copy + Default + PartialEq + Add<Output = Self> + Mul<Output = Self> + AddAssign + Send + Sync {
    /// Type products are accumulated in before rounding back to `Self`.
    type Acc: Scalar;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn widen(self) -> Self::Acc;
    fn narrow(a: Self::Acc) -> Self;
}

impl Scalar for f64 {
    type Acc = f64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn widen(self) -> f64 {
        self
    }
    fn narrow(a: f64) -> Self {
        a
    }
}

impl Scalar for f32 {
    type Acc = f64;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn widen(self) -> f64 {
        self as f64
    }
    fn narrow(a: f64) -> Self {
        a as f32
    }
}

impl Scalar for i64 {
    type Acc = i64;
    fn from_f64(v: f64) -> Self {
        v as i64
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn widen(self) -> i64 {
        self
    }
    fn narrow(a: i64) -> Self {
        a
    }
}

/// Resolved geometry of one convolution over one input plane size.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output indices `o` for which `o * stride + kk - padding` lies in `[0, extent)`.
    #[inline]
    fn valid_range(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        let hi = if extent + p > kk {
            (extent + p - kk).div_ceil(s).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn gin(&self) -> usize {
        self.c_in / self.groups
    }

    fn gout(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn in_frame(&self) -> usize {
        self.c_in * self.in_h * self.in_w
    }

    pub fn out_frame(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }
}

/// Raw cross-correlation of one frame, accumulated into `out` (no bias).
pub(crate) fn conv_frame<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], out: &mut [S]) {
    let (gin, gout, k, s) = (g.gin(), g.gout(), g.k, g.stride);
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    for co in 0..g.c_out {
        let grp = co / gout;
        let o_plane = &mut out[co * out_plane..(co + 1) * out_plane];
        for cl in 0..gin {
            let ci = grp * gin + cl;
            let x_plane = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..k {
                    let wv = w[((co * gin + cl) * k + ky) * k + kx];
                    if wv == S::default() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - g.padding;
                        let x_row = &x_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let o_row = &mut o_plane[oy * g.out_w + ox0..oy * g.out_w + ox1];
                        let ix0 = ox0 * s + kx - g.padding;
                        if s == 1 {
                            for (o, &xv) in o_row.iter_mut().zip(&x_row[ix0..ix0 + (ox1 - ox0)]) {
                                *o += wv * xv;
                            }
                        } else {
                            for (j, o) in o_row.iter_mut().enumerate() {
                                *o += wv * x_row[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the raw cross-correlation w.r.t. its input, accumulated into `gx`.
pub(crate) fn conv_frame_backward_input(g: &ConvGeom, gy: &[f64], w: &[f64], gx: &mut [f64]) {
    let (gin, gout, k, s) = (g.gin(), g.gout(), g.k, g.stride);
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    for co in 0..g.c_out {
        let grp = co / gout;
        let gy_plane = &gy[co * out_plane..(co + 1) * out_plane];
        for cl in 0..gin {
            let ci = grp * gin + cl;
            let gx_plane = &mut gx[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..k {
                    let wv = w[((co * gin + cl) * k + ky) * k + kx];
                    let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - g.padding;
                        let ix0 = ox0 * s + kx - g.padding;
                        let gy_row = &gy_plane[oy * g.out_w + ox0..oy * g.out_w + ox1];
                        let gx_row = &mut gx_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        if s == 1 {
                            for (gxv, &gv) in gx_row[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(gy_row) {
                                *gxv += wv * gv;
                            }
                        } else {
                            for (j, &gv) in gy_row.iter().enumerate() {
                                gx_row[ix0 + j * s] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the raw cross-correlation w.r.t. its kernel, accumulated into `gw`.
pub(crate) fn conv_frame_backward_weight(g: &ConvGeom, gy: &[f64], x: &[f64], gw: &mut [f64]) {
    let (gin, gout, k, s) = (g.gin(), g.gout(), g.k, g.stride);
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    for co in 0..g.c_out {
        let grp = co / gout;
        let gy_plane = &gy[co * out_plane..(co + 1) * out_plane];
        for cl in 0..gin {
            let ci = grp * gin + cl;
            let x_plane = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..k {
                    let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - g.padding;
                        let ix0 = ox0 * s + kx - g.padding;
                        let gy_row = &gy_plane[oy * g.out_w + ox0..oy * g.out_w + ox1];
                        let x_row = &x_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        if s == 1 {
                            acc += gy_row.iter().zip(&x_row[ix0..ix0 + (ox1 - ox0)]).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            acc += gy_row.iter().enumerate().map(|(j, a)| a * x_row[ix0 + j * s]).sum::<f64>();
                        }
                    }
                    gw[((co * gin + cl) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Raw convolution without bias or batch norm.
pub fn conv2d_raw(x: &Tensor4, spec: &ConvSpec) -> Result<Tensor4> {
    spec.validate()?;
    let g = spec.geometry(x.shape())?;
    let out_shape = spec.output_shape(x.shape())?;
    let mut out = Tensor4::zeros(out_shape);
    for t in 0..out_shape.t {
        conv_frame(&g, x.frame(t), &spec.weights, out.frame_mut(t));
    }
    Ok(out)
}

/// Applies per-channel `(scale, shift)` in place.
pub(crate) fn apply_affine(y: &mut Tensor4, affine: &[(f64, f64)]) {
    let s = y.shape();
    let plane = s.plane_len();
    for t in 0..s.t {
        for (c, chunk) in y.frame_mut(t).chunks_mut(plane).enumerate() {
            let (a, b) = affine[c];
            chunk.iter_mut().for_each(|v| *v = a * *v + b);
        }
    }
}

/// Cross-correlation per timestep, then bias, then batch norm (frozen stats).
pub fn conv2d(x: &Tensor4, spec: &ConvSpec) -> Result<Tensor4> {
    let mut y = conv2d_raw(x, spec)?;
    if spec.bias.is_some() || spec.bn.is_some() {
        apply_affine(&mut y, &spec.output_affine()?);
    }
    Ok(y)
}

/// Runs the kernel in an arbitrary [`Scalar`] type: operands and result in
/// `S`, sums in `S::Acc`. Bias is added once per output element; batch norm is not applied (fold it first).
pub fn conv2d_in<S: Scalar>(x: &[S], input: Shape4, spec: &ConvSpec) -> Result<(Vec<S>, Shape4)> {
    spec.validate()?;
    if x.len() != input.len() {
        return Err(Error::dims("conv input buffer", &[input.len()], &[x.len()]));
    }
    if spec.bn.is_some() {
        return Err(Error::Domain("conv2d_in expects a bn-free spec; fold it first".into()));
    }
    let g = spec.geometry(input)?;
    let out_shape = spec.output_shape(input)?;
    let w: Vec<S::Acc> = spec.weights.iter().map(|&v| S::from_f64(v).widen()).collect();
    let xw: Vec<S::Acc> = x.iter().map(|&v| v.widen()).collect();
    let mut acc = vec![S::Acc::default(); out_shape.len()];
    let (fi, fo) = (g.in_frame(), g.out_frame());
    for t in 0..input.t {
        conv_frame(&g, &xw[t * fi..(t + 1) * fi], &w, &mut acc[t * fo..(t + 1) * fo]);
    }
    let mut out: Vec<S> = acc.into_iter().map(S::narrow).collect();
    if let Some(b) = &spec.bias {
        let plane = out_shape.plane_len();
        for (i, v) in out.iter_mut().enumerate() {
            *v += S::from_f64(b[(i / plane) % out_shape.c]);
        }
    }
    Ok((out, out_shape))
}

/// Gradients of a raw (bias-free, bn-free view) convolution.
#[derive(Clone, Debug)]
pub struct ConvBackward {
    pub input: Tensor4,
    pub weights: Vec<f64>,
    /// Sum of the upstream gradient per output channel.
    pub bias: Vec<f64>,
}

/// Backward pass of [`conv2d_raw`]; `grad_out` is the gradient of its output.
pub fn conv2d_backward(x: &Tensor4, spec: &ConvSpec, grad_out: &Tensor4) -> Result<ConvBackward> {
    let g = spec.geometry(x.shape())?;
    let out_shape = spec.output_shape(x.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::dims("conv grad_out", &out_shape.dims(), &grad_out.shape().dims()));
    }
    let mut gx = Tensor4::zeros(x.shape());
    let mut gw = vec![0.0; spec.weights.len()];
    let mut gb = vec![0.0; spec.c_out];
    let plane = out_shape.plane_len();
    for t in 0..out_shape.t {
        let gy = grad_out.frame(t);
        conv_frame_backward_input(&g, gy, &spec.weights, gx.frame_mut(t));
        conv_frame_backward_weight(&g, gy, x.frame(t), &mut gw);
        for (c, chunk) in gy.chunks(plane).enumerate() {
            gb[c] += chunk.iter().sum::<f64>();
        }
    }
    Ok(ConvBackward {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

/// Absorbs batch norm into the kernel and bias.
pub fn fold_bn(spec: &ConvSpec) -> Result<ConvSpec> {
    let Some(bn) = &spec.bn else {
        return Err(Error::Domain("fold_bn: spec has no batch norm".into()));
    };
    let aff = bn.affine()?;
    let per_out = spec.group_in() * spec.k * spec.k;
    let mut weights = spec.weights.clone();
    for (co, chunk) in weights.chunks_mut(per_out).enumerate() {
        let scale = aff[co].0;
        chunk.iter_mut().for_each(|w| *w *= scale);
    }
    let bias = (0..spec.c_out)
        .map(|co| {
            let b = spec.bias.as_ref().map_or(0.0, |b| b[co]);
            aff[co].0 * b + aff[co].1
        })
        .collect();
    Ok(ConvSpec {
        weights,
        bias: Some(bias),
        bn: None,
        ..spec.clone()
    })
}

/// Folds batch norm when present, otherwise returns a copy.
pub fn fold_bn_if_present(spec: &ConvSpec) -> Result<ConvSpec> {
    if spec.bn.is_some() {
        fold_bn(spec)
    } else {
        Ok(spec.clone())
    }
}

/// Total padding of a chain: the padding the merged convolution needs.
pub fn chain_padding(specs: &[ConvSpec]) -> usize {
    let mut pad = 0;
    let mut stride = 1;
    for s in specs {
        pad += stride * s.padding;
        stride *= s.stride;
    }
    pad
}

/// Applies a linear chain with all padding moved to the chain input: the
/// input is zero-padded once by [`chain_padding`] and every conv then runs
/// unpadded. Each conv's bias and batch norm are applied in sequence.
///
/// This agrees with naive layer-by-layer application whenever no bias
/// precedes a padded conv, and is the semantics [`compose_linear_convs`]
/// reproduces exactly.
pub fn apply_chain(x: &Tensor4, specs: &[ConvSpec]) -> Result<Tensor4> {
    let pad = chain_padding(specs);
    let mut cur = pad_spatial(x, pad);
    for s in specs {
        let unpadded = ConvSpec {
            padding: 0,
            ..s.clone()
        };
        cur = conv2d(&cur, &unpadded)?;
    }
    Ok(cur)
}

pub(crate) fn pad_spatial(x: &Tensor4, pad: usize) -> Tensor4 {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape();
    let mut out = Tensor4::zeros((s.t, s.c, s.h + 2 * pad, s.w + 2 * pad));
    for t in 0..s.t {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    out[(t, c, y + pad, xx + pad)] = x[(t, c, y, xx)];
                }
            }
        }
    }
    out
}

pub(crate) fn crop_spatial(x: &Tensor4, pad: usize) -> Tensor4 {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape();
    Tensor4::from_fn((s.t, s.c, s.h - 2 * pad, s.w - 2 * pad), |t, c, y, xx| x[(t, c, y + pad, xx + pad)])
}

/// Dense `(c_out, c_in, k, k)` view of a possibly grouped kernel.
fn dense_kernel(spec: &ConvSpec) -> Vec<f64> {
    let k2 = spec.k * spec.k;
    let mut dense = vec![0.0; spec.c_out * spec.c_in * k2];
    let (gin, gout) = (spec.group_in(), spec.group_out());
    for co in 0..spec.c_out {
        let grp = co / gout;
        for cl in 0..gin {
            let ci = grp * gin + cl;
            let src = &spec.weights[(co * gin + cl) * k2..(co * gin + cl + 1) * k2];
            dense[(co * spec.c_in + ci) * k2..(co * spec.c_in + ci + 1) * k2].copy_from_slice(src);
        }
    }
    dense
}

/// Merges `first` followed by `second` (no nonlinearity between) into one conv.
fn compose_pair(first: &ConvSpec, second: &ConvSpec) -> Result<ConvSpec> {
    if second.c_in != first.c_out {
        return Err(Error::Composition(format!(
            "channel mismatch: {} outputs feed a conv expecting {}",
            first.c_out, second.c_in
        )));
    }
    if second.stride != 1 {
        return Err(Error::Composition(format!(
            "inner conv has stride {}; only the first conv of a chain may stride",
            second.stride
        )));
    }
    let s1 = first.stride;
    let (k1, k2) = (first.k, second.k);
    let k = s1 * (k2 - 1) + k1;
    let (c_in, mid, c_out) = (first.c_in, first.c_out, second.c_out);
    let a = dense_kernel(first);
    let b = dense_kernel(second);

    let depthwise = first.is_depthwise() && second.is_depthwise();
    let mut dense = vec![0.0; c_out * c_in * k * k];
    for co in 0..c_out {
        for m in 0..mid {
            for j_y in 0..k2 {
                for j_x in 0..k2 {
                    let bv = b[((co * mid + m) * k2 + j_y) * k2 + j_x];
                    if bv == 0.0 {
                        continue;
                    }
                    for ci in 0..c_in {
                        for i_y in 0..k1 {
                            for i_x in 0..k1 {
                                let av = a[((m * c_in + ci) * k1 + i_y) * k1 + i_x];
                                let (y, x) = (s1 * j_y + i_y, s1 * j_x + i_x);
                                dense[((co * c_in + ci) * k + y) * k + x] += bv * av;
                            }
                        }
                    }
                }
            }
        }
    }

    // bias: second(first_bias broadcast) + second_bias
    let bias_first = first.bias.clone().unwrap_or_else(|| vec![0.0; mid]);
    let mut bias = second.bias.clone().unwrap_or_else(|| vec![0.0; c_out]);
    for (co, b_out) in bias.iter_mut().enumerate() {
        for (m, &bf) in bias_first.iter().enumerate() {
            if bf == 0.0 {
                continue;
            }
            let base = (co * mid + m) * k2 * k2;
            *b_out += bf * b[base..base + k2 * k2].iter().sum::<f64>();
        }
    }
    let has_bias = first.bias.is_some() || second.bias.is_some();

    let (groups, weights) = if depthwise {
        let k2m = k * k;
        let w = (0..c_out)
            .flat_map(|c| dense[(c * c_in + c) * k2m..(c * c_in + c + 1) * k2m].to_vec())
            .collect();
        (c_in, w)
    } else {
        (1, dense)
    };
    let merged = ConvSpec {
        c_in,
        c_out,
        k,
        stride: s1 * second.stride,
        padding: s1 * second.padding + first.padding,
        groups,
        weights,
        bias: has_bias.then_some(bias),
        bn: None,
    };
    merged.validate()?;
    Ok(merged)
}

/// Merges a chain of bn-free linear convolutions into a single convolution.
///
/// The result matches [`apply_chain`] on every input. Only the first conv
/// may have a stride above one.
pub fn compose_linear_convs(specs: &[ConvSpec]) -> Result<ConvSpec> {
    let Some((first, rest)) = specs.split_first() else {
        return Err(Error::Composition("empty chain".into()));
    };
    if let Some(i) = specs.iter().position(|s| s.bn.is_some()) {
        return Err(Error::Composition(format!("conv {i} still carries batch norm; fold it first")));
    }
    for s in specs {
        s.validate()?;
    }
    let mut acc = first.clone();
    for s in rest {
        acc = compose_pair(&acc, s)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{naive_conv, random_spec, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_by_one_scaling() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0, 1).unwrap().with_weights(vec![2.0]).unwrap();
        let y = conv2d(&Tensor4::full((1, 1, 2, 2), 1.0), &spec).unwrap();
        assert_eq!(y, Tensor4::full((1, 1, 2, 2), 2.0));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = random_spec(&mut rng, 3, 4, 3, 1, 1, 1, false);
        let y = conv2d(&Tensor4::zeros((2, 3, 5, 5)), &spec).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let spec = ConvSpec::new(3, 4, 3, 1, 1, 1).unwrap();
        let err = conv2d(&Tensor4::zeros((1, 2, 5, 5)), &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 5, 5]") && msg.contains("[1, 2, 5, 5]"), "{msg}");
    }

    #[test]
    fn invalid_groups_rejected() {
        assert!(ConvSpec::new(3, 4, 3, 1, 1, 2).is_err());
        assert!(ConvSpec::new(4, 4, 3, 1, 1, 4).is_ok());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad, groups, k) in &[(1, 1, 1, 3), (2, 1, 1, 3), (1, 3, 3, 7), (2, 0, 1, 1), (1, 0, 3, 3)] {
            let spec = random_spec(&mut rng, 3, 6, k, stride, pad, groups, true);
            let x = random_tensor(&mut rng, (2, 3, 8, 8), 1.0);
            let y = conv2d(&x, &spec).unwrap();
            let oracle = naive_conv(&x, &spec);
            assert!(y.max_abs_diff(&oracle).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn identity_bn_fold_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = random_spec(&mut rng, 2, 2, 3, 1, 1, 1, false);
        let folded = fold_bn(&spec.clone().with_bn(BatchNorm::identity(2, 0.0)).unwrap()).unwrap();
        assert_eq!(folded.weights, spec.weights);
        assert_eq!(folded.bias, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn affine_bn_fold() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0, 1).unwrap().with_weights(vec![0.7]).unwrap();
        let bn = BatchNorm {
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![0.0],
            var: vec![1.0],
            eps: 0.0,
        };
        let folded = fold_bn(&spec.with_bn(bn).unwrap()).unwrap();
        assert_eq!(folded.weights, vec![1.4]);
        assert_eq!(folded.bias, Some(vec![1.0]));
    }

    #[test]
    fn bn_fold_rejects_nonpositive_variance() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0, 1).unwrap();
        let mut bn = BatchNorm::identity(1, 0.0);
        bn.var[0] = 0.0;
        assert!(matches!(fold_bn(&spec.with_bn(bn).unwrap()), Err(Error::Domain(_))));
    }

    #[test]
    fn identity_chain_composes_to_identity() {
        let id = ConvSpec::new(3, 3, 1, 1, 0, 1)
            .unwrap()
            .with_weights((0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect())
            .unwrap();
        let merged = compose_linear_convs(&[id.clone(), id.clone(), id.clone()]).unwrap();
        assert_eq!(merged.weights, id.weights);
        assert_eq!(merged.k, 1);
    }

    #[test]
    fn singleton_chain_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = random_spec(&mut rng, 2, 3, 3, 2, 1, 1, true);
        assert_eq!(compose_linear_convs(std::slice::from_ref(&spec)).unwrap(), spec);
    }

    #[test]
    fn strided_inner_conv_rejected() {
        let a = ConvSpec::new(2, 2, 1, 1, 0, 1).unwrap();
        let b = ConvSpec::new(2, 2, 3, 2, 1, 1).unwrap();
        assert!(matches!(compose_linear_convs(&[a, b]), Err(Error::Composition(_))));
    }

    #[test]
    fn depthwise_pair_stays_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spec(&mut rng, 4, 4, 3, 1, 1, 4, true);
        let b = random_spec(&mut rng, 4, 4, 3, 1, 1, 4, true);
        let merged = compose_linear_convs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!((merged.groups, merged.k, merged.padding), (4, 5, 2));
        let x = random_tensor(&mut rng, (1, 4, 6, 6), 1.0);
        let diff = conv2d(&x, &merged).unwrap().max_abs_diff(&apply_chain(&x, &[a, b]).unwrap()).unwrap();
        assert!(diff <= 1e-9);
    }

    #[test]
    fn strided_first_conv_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_spec(&mut rng, 2, 3, 3, 2, 1, 1, true);
        let b = random_spec(&mut rng, 3, 2, 3, 1, 1, 1, true);
        let merged = compose_linear_convs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!((merged.k, merged.stride, merged.padding), (7, 2, 3));
        let x = random_tensor(&mut rng, (1, 2, 9, 9), 1.0);
        let diff = conv2d(&x, &merged).unwrap().max_abs_diff(&apply_chain(&x, &[a, b]).unwrap()).unwrap();
        assert!(diff <= 1e-9);
    }
}
