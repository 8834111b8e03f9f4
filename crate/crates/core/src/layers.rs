//! Trainable building blocks shared by [`crate::blocks`] and [`crate::model`].
//!
//! Every convolution that consumes neuron output is wrapped in a
//! [`SpikingConv`]: an I-LIF layer followed by a linear operator. In train
//! mode the operator runs densely on integer activations; in inference mode
//! the activations are expanded into binary virtual-timestep slots and the
//! operator only accumulates weights for 1-spikes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{
    apply_affine, chain_padding, compose_linear_convs, conv_frame, conv_frame_backward_input, conv_frame_backward_weight,
    crop_spatial, fold_bn_if_present, pad_spatial, BatchNorm, ConvGeom, ConvSpec,
};
use crate::error::{Error, Result};
use crate::neuron::{ilif_bptt, ilif_forward, NeuronState, SpikeTensor};
use crate::spike_codec::{expand, BinarySpikeTrain};
use crate::tensor::{Shape4, Tensor4};

pub const BN_EPS: f64 = 1e-5;

/// Train mode keeps batch norm and factorized chains; inference mode runs
/// merged convolutions on binary spikes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Decay and ceiling shared by every I-LIF layer of a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams {
    pub beta: f64,
    pub ceiling: u32,
}

impl NeuronParams {
    fn state_for(&self, s: Shape4) -> Result<NeuronState> {
        NeuronState::rest(s.c, s.h, s.w, self.beta, self.ceiling)
    }

    /// I-LIF over all timesteps from a resting membrane.
    pub fn fire(&self, x: &Tensor4) -> Result<(SpikeTensor, Tensor4)> {
        let (s, _, u) = ilif_forward(x, &self.state_for(x.shape())?)?;
        Ok((s, u))
    }
}

pub struct ConvRecord<'a> {
    pub name: &'a str,
    pub spec: &'a ConvSpec,
    /// Binary spike train the conv consumed.
    pub input: &'a BinarySpikeTrain,
    pub output: Shape4,
    /// Accumulates actually performed (border taps excluded).
    pub synops: u64,
}

/// Instrumentation hook for inference passes.
pub trait Probe {
    fn on_conv(&mut self, record: &ConvRecord<'_>);

    /// `count` neuron updates (membrane integrate + fire + reset).
    fn on_neurons(&mut self, _count: u64) {}

    /// `count` element-wise additions outside convolutions.
    fn on_adds(&mut self, _count: u64) {}
}

/// Probe that ignores everything.
pub struct NoProbe;

impl Probe for NoProbe {
    fn on_conv(&mut self, _record: &ConvRecord<'_>) {}
}

/// Parameter gradients for one [`ConvLayer`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ConvGrad {
    fn zeros_for(spec: &ConvSpec) -> Self {
        ConvGrad {
            weights: vec![0.0; spec.weights.len()],
            bias: vec![0.0; spec.bias.as_ref().map_or(0, Vec::len)],
            gamma: vec![0.0; spec.bn.as_ref().map_or(0, BatchNorm::channels)],
            beta: vec![0.0; spec.bn.as_ref().map_or(0, BatchNorm::channels)],
        }
    }

    fn slices(&self) -> [&[f64]; 4] {
        [&self.weights, &self.bias, &self.gamma, &self.beta]
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.weights, &mut self.bias, &mut self.gamma, &mut self.beta]
    }
}

/// Gradients for every conv layer of a network, indexed by layer id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    pub layers: Vec<ConvGrad>,
}

impl GradStore {
    pub fn zeros_like(layers: &[&ConvLayer]) -> Self {
        let n = layers.iter().map(|l| l.id + 1).max().unwrap_or(0);
        let mut store = vec![ConvGrad::default(); n];
        for l in layers {
            store[l.id] = ConvGrad::zeros_for(&l.spec);
        }
        GradStore { layers: store }
    }

    pub fn add(&mut self, other: &GradStore) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (va, vb) in a.slices_mut().into_iter().zip(b.slices()) {
                va.iter_mut().zip(vb).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.layers {
            for v in g.slices_mut() {
                v.iter_mut().for_each(|x| *x *= k);
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|g| g.slices().into_iter().flatten())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A named convolution (optionally with bias and batch norm) and its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub id: usize,
}

/// Input and pre-affine output of one conv application.
#[derive(Clone, Debug)]
pub struct ConvCache {
    x: Tensor4,
    raw: Tensor4,
    padding: usize,
}

/// Hands out sequential gradient slots while a network is being built.
#[derive(Debug, Default)]
pub struct LayerIds(usize);

impl LayerIds {
    pub fn next(&mut self) -> usize {
        self.0 += 1;
        self.0 - 1
    }

    pub fn count(&self) -> usize {
        self.0
    }
}

/// He-normal kernel, identity batch norm, optional zero bias.
#[allow(clippy::too_many_arguments)]
pub fn init_conv<R: Rng>(
    rng: &mut R,
    ids: &mut LayerIds,
    name: impl Into<String>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    groups: usize,
    bn: bool,
) -> Result<ConvLayer> {
    let spec = ConvSpec::new(c_in, c_out, k, stride, k / 2, groups)?;
    let fan_in = (c_in / groups * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let weights = (0..spec.weights.len()).map(|_| normal.sample(rng)).collect();
    let spec = spec.with_weights(weights)?;
    let spec = if bn {
        spec.with_bn(BatchNorm::identity(c_out, BN_EPS))?
    } else {
        spec.with_bias(vec![0.0; c_out])?
    };
    Ok(ConvLayer {
        name: name.into(),
        spec,
        id: ids.next(),
    })
}

impl ConvLayer {
    fn geometry(&self, input: Shape4, padding: usize) -> Result<ConvGeom> {
        let spec = &self.spec;
        if input.c != spec.c_in {
            return Err(Error::dims(
                "conv input channels",
                &[input.t, spec.c_in, input.h, input.w],
                &input.dims(),
            ));
        }
        let (ph, pw) = (input.h + 2 * padding, input.w + 2 * padding);
        if ph < spec.k || pw < spec.k {
            return Err(Error::dims("conv input plane (padded) smaller than kernel", &[spec.k, spec.k], &[ph, pw]));
        }
        Ok(ConvGeom {
            c_in: spec.c_in,
            c_out: spec.c_out,
            k: spec.k,
            stride: spec.stride,
            padding,
            groups: spec.groups,
            in_h: input.h,
            in_w: input.w,
            out_h: (ph - spec.k) / spec.stride + 1,
            out_w: (pw - spec.k) / spec.stride + 1,
        })
    }

    fn raw(&self, x: &Tensor4, padding: usize) -> Result<Tensor4> {
        let g = self.geometry(x.shape(), padding)?;
        let s = x.shape();
        let mut out = Tensor4::zeros((s.t, g.c_out, g.out_h, g.out_w));
        for t in 0..s.t {
            conv_frame(&g, x.frame(t), &self.spec.weights, out.frame_mut(t));
        }
        Ok(out)
    }

    /// Dense forward with the layer's own padding.
    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ConvCache)> {
        self.forward_padded(x, self.spec.padding)
    }

    pub(crate) fn forward_padded(&self, x: &Tensor4, padding: usize) -> Result<(Tensor4, ConvCache)> {
        let raw = self.raw(x, padding)?;
        let mut y = raw.clone();
        apply_affine(&mut y, &self.spec.output_affine()?);
        Ok((
            y,
            ConvCache {
                x: x.clone(),
                raw,
                padding,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache, gy: &Tensor4, grads: &mut GradStore) -> Result<Tensor4> {
        let spec = &self.spec;
        let s = gy.shape();
        let plane = s.plane_len();
        let bias = spec.bias.as_ref();
        let bn_aff = spec.bn.as_ref().map(BatchNorm::affine).transpose()?;
        let grad = &mut grads.layers[self.id];

        // out = bn_scale * (raw + bias) + bn_shift
        let mut g_raw = gy.clone();
        for t in 0..s.t {
            let gyf = gy.frame(t);
            let rawf = cache.raw.frame(t);
            for c in 0..s.c {
                let range = c * plane..(c + 1) * plane;
                let gsum: f64 = gyf[range.clone()].iter().sum();
                let pre_bias = bias.map_or(0.0, |b| b[c]);
                let scale = match (&bn_aff, &spec.bn) {
                    (Some(aff), Some(bn)) => {
                        let inv_std = aff[c].0 / bn.gamma[c];
                        let centered: f64 = gyf[range.clone()]
                            .iter()
                            .zip(&rawf[range.clone()])
                            .map(|(g, r)| g * (r + pre_bias - bn.mean[c]))
                            .sum();
                        grad.gamma[c] += centered * inv_std;
                        grad.beta[c] += gsum;
                        aff[c].0
                    }
                    _ => 1.0,
                };
                if bias.is_some() {
                    grad.bias[c] += scale * gsum;
                }
                if scale != 1.0 {
                    g_raw.frame_mut(t)[range].iter_mut().for_each(|v| *v *= scale);
                }
            }
        }

        let g = self.geometry(cache.x.shape(), cache.padding)?;
        let mut gx = Tensor4::zeros(cache.x.shape());
        for t in 0..s.t {
            conv_frame_backward_input(&g, g_raw.frame(t), &spec.weights, gx.frame_mut(t));
            conv_frame_backward_weight(&g, g_raw.frame(t), cache.x.frame(t), &mut grad.weights);
        }
        Ok(gx)
    }

    /// Event-driven convolution of a binary train: every 1-spike adds its
    /// weights into the output positions it reaches. Bias is added once per
    /// real timestep. Requires a bn-free spec.
    pub fn forward_spikes(&self, train: &BinarySpikeTrain, probe: &mut dyn Probe) -> Result<Tensor4> {
        let spec = &self.spec;
        if spec.bn.is_some() {
            return Err(Error::Mode(format!("{}: spike-driven conv needs folded batch norm", self.name)));
        }
        let frame = train.frame_shape();
        let g = self.geometry(frame, spec.padding)?;
        let out_shape = Shape4::new(frame.t, g.c_out, g.out_h, g.out_w);
        let mut out = Tensor4::zeros(out_shape);
        let (gin, gout, k) = (spec.group_in(), spec.group_out(), spec.k);
        let (s, p) = (spec.stride as isize, spec.padding as isize);
        let out_plane = g.out_h * g.out_w;
        let mut synops = 0u64;
        for t in 0..frame.t {
            let of = out.frame_mut(t);
            for d in 0..train.slots() {
                let bits = train.slot(t, d);
                for (idx, _) in bits.iter().enumerate().filter(|(_, &b)| b == 1) {
                    let ci = idx / (frame.h * frame.w);
                    let iy = ((idx / frame.w) % frame.h) as isize;
                    let ix = (idx % frame.w) as isize;
                    let grp = ci / gin;
                    let cl = ci % gin;
                    for ky in 0..k {
                        let ny = iy + p - ky as isize;
                        if ny < 0 || ny % s != 0 || (ny / s) as usize >= g.out_h {
                            continue;
                        }
                        let oy = (ny / s) as usize;
                        for kx in 0..k {
                            let nx = ix + p - kx as isize;
                            if nx < 0 || nx % s != 0 || (nx / s) as usize >= g.out_w {
                                continue;
                            }
                            let pos = oy * g.out_w + (nx / s) as usize;
                            for co in grp * gout..(grp + 1) * gout {
                                of[co * out_plane + pos] += spec.weights[((co * gin + cl) * k + ky) * k + kx];
                            }
                            synops += gout as u64;
                        }
                    }
                }
            }
        }
        if let Some(b) = &spec.bias {
            apply_affine(&mut out, &b.iter().map(|&b| (1.0, b)).collect::<Vec<_>>());
        }
        probe.on_conv(&ConvRecord {
            name: &self.name,
            spec,
            input: train,
            output: out_shape,
            synops,
        });
        Ok(out)
    }
}

/// `pw → dw(k×k) → pw` chain trained factorized and merged for inference.
///
/// The chain zero-pads its input once and runs each conv unpadded, so
/// every bias/batch-norm shift is also present at the border, exactly as
/// in the merged convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RepChain {
    pub convs: Vec<ConvLayer>,
}

#[derive(Clone, Debug)]
pub struct ChainCache {
    pad: usize,
    convs: Vec<ConvCache>,
}

impl RepChain {
    pub fn specs(&self) -> Vec<ConvSpec> {
        self.convs.iter().map(|c| c.spec.clone()).collect()
    }

    pub fn padding(&self) -> usize {
        chain_padding(&self.specs())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ChainCache)> {
        let pad = self.padding();
        let mut cur = pad_spatial(x, pad);
        let mut caches = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (y, c) = conv.forward_padded(&cur, 0)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, ChainCache { pad, convs: caches }))
    }

    pub fn backward(&self, cache: &ChainCache, gy: &Tensor4, grads: &mut GradStore) -> Result<Tensor4> {
        let mut g = gy.clone();
        for (conv, c) in self.convs.iter().zip(&cache.convs).rev() {
            g = conv.backward(c, &g, grads)?;
        }
        Ok(crop_spatial(&g, cache.pad))
    }

    /// Folds every batch norm and composes the chain into one convolution.
    pub fn merge(&self, name: impl Into<String>, id: usize) -> Result<ConvLayer> {
        let folded = self
            .convs
            .iter()
            .map(|c| fold_bn_if_present(&c.spec))
            .collect::<Result<Vec<_>>>()?;
        let merged = compose_linear_convs(&folded)?;
        Ok(ConvLayer {
            name: name.into(),
            spec: merged,
            id,
        })
    }
}

/// Linear operator applied to spikes.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearOp {
    Conv(ConvLayer),
    Chain(RepChain),
}

#[derive(Clone, Debug)]
pub enum LinearCache {
    Conv(ConvCache),
    Chain(ChainCache),
}

impl LinearOp {
    pub fn convs(&self) -> Vec<&ConvLayer> {
        match self {
            LinearOp::Conv(c) => vec![c],
            LinearOp::Chain(ch) => ch.convs.iter().collect(),
        }
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvLayer> {
        match self {
            LinearOp::Conv(c) => vec![c],
            LinearOp::Chain(ch) => ch.convs.iter_mut().collect(),
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            LinearOp::Conv(c) => c.spec.c_out,
            LinearOp::Chain(ch) => ch.convs.last().map_or(0, |c| c.spec.c_out),
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, LinearCache)> {
        match self {
            LinearOp::Conv(c) => c.forward(x).map(|(y, k)| (y, LinearCache::Conv(k))),
            LinearOp::Chain(ch) => ch.forward(x).map(|(y, k)| (y, LinearCache::Chain(k))),
        }
    }

    fn backward(&self, cache: &LinearCache, gy: &Tensor4, grads: &mut GradStore) -> Result<Tensor4> {
        match (self, cache) {
            (LinearOp::Conv(c), LinearCache::Conv(k)) => c.backward(k, gy, grads),
            (LinearOp::Chain(ch), LinearCache::Chain(k)) => ch.backward(k, gy, grads),
            _ => Err(Error::Mode("cache does not belong to this operator".into())),
        }
    }

    /// Folded / merged replacement used in inference mode. Keeps the id of
    /// the first conv so gradient slots stay unique.
    pub fn reparameterized(&self, name: &str) -> Result<LinearOp> {
        match self {
            LinearOp::Conv(c) => Ok(LinearOp::Conv(ConvLayer {
                spec: fold_bn_if_present(&c.spec)?,
                ..c.clone()
            })),
            LinearOp::Chain(ch) => {
                let id = ch.convs.first().map(|c| c.id).unwrap_or_default();
                Ok(LinearOp::Conv(ch.merge(name, id)?))
            }
        }
    }
}

/// I-LIF followed by a linear operator: `op(SN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingConv {
    pub name: String,
    pub neuron: NeuronParams,
    pub op: LinearOp,
}

#[derive(Clone, Debug)]
pub struct SpikingConvCache {
    u: Tensor4,
    op: LinearCache,
}

impl SpikingConv {
    pub fn forward_train(&self, x: &Tensor4) -> Result<(Tensor4, SpikingConvCache)> {
        let (spikes, u) = self.neuron.fire(x)?;
        let (y, op) = self.op.forward(&spikes.to_tensor())?;
        Ok((y, SpikingConvCache { u, op }))
    }

    pub fn backward(&self, cache: &SpikingConvCache, gy: &Tensor4, grads: &mut GradStore) -> Result<Tensor4> {
        let g_spikes = self.op.backward(&cache.op, gy, grads)?;
        ilif_bptt(&g_spikes, &cache.u, self.neuron.beta, self.neuron.ceiling)
    }

    /// Spike-driven pass: integer spikes are expanded to `D` binary slots
    /// and the merged conv accumulates weights per 1-spike.
    pub fn forward_infer(&self, x: &Tensor4, probe: &mut dyn Probe) -> Result<Tensor4> {
        let LinearOp::Conv(conv) = &self.op else {
            return Err(Error::Mode(format!(
                "{}: factorized chain must be re-parameterized before spike-driven inference",
                self.name
            )));
        };
        let (spikes, _) = self.neuron.fire(x)?;
        probe.on_neurons(x.len() as u64);
        conv.forward_spikes(&expand(&spikes)?, probe)
    }

    /// Integer-activation pass without caches (train-mode semantics).
    pub fn forward_dense(&self, x: &Tensor4) -> Result<Tensor4> {
        self.forward_train(x).map(|(y, _)| y)
    }

    pub fn reparameterize(&mut self) -> Result<()> {
        self.op = self.op.reparameterized(&self.name)?;
        Ok(())
    }
}
