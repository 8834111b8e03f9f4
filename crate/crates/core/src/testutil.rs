//! Test-only oracles and random fixtures, shared by unit and integration tests.
//!
//! Everything here is written independently of the optimized code paths it
//! checks: plain nested loops, no shared helpers.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use spikeyolo::conv::{BatchNorm, ConvSpec};
use spikeyolo::tensor::{Shape4, Tensor4};

pub fn random_tensor<R: Rng>(rng: &mut R, shape: impl Into<Shape4>, scale: f64) -> Tensor4 {
    let shape = shape.into();
    let data = (0..shape.len()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

#[allow(clippy::too_many_arguments)]
pub fn random_spec<R: Rng>(
    rng: &mut R,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    bias: bool,
) -> ConvSpec {
    let spec = ConvSpec::new(c_in, c_out, k, stride, padding, groups).unwrap();
    let n = spec.weights.len();
    let std = (1.0 / ((c_in / groups) * k * k) as f64).sqrt();
    let w = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let spec = spec.with_weights(w).unwrap();
    if bias {
        let b = (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
        spec.with_bias(b).unwrap()
    } else {
        spec
    }
}

pub fn random_bn<R: Rng>(rng: &mut R, channels: usize) -> BatchNorm {
    BatchNorm {
        gamma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        mean: (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        var: (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect(),
        eps: 1e-5,
    }
}

/// Six nested loops over (t, co, oy, ox, ci, ky·kx), then bias, then BN.
pub fn naive_conv(x: &Tensor4, spec: &ConvSpec) -> Tensor4 {
    let s = x.shape();
    let oh = (s.h + 2 * spec.padding - spec.k) / spec.stride + 1;
    let ow = (s.w + 2 * spec.padding - spec.k) / spec.stride + 1;
    let gin = spec.c_in / spec.groups;
    let gout = spec.c_out / spec.groups;
    let mut out = Tensor4::zeros((s.t, spec.c_out, oh, ow));
    for t in 0..s.t {
        for co in 0..spec.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for cl in 0..gin {
                        let ci = (co / gout) * gin + cl;
                        for ky in 0..spec.k {
                            for kx in 0..spec.k {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let w = spec.weights[((co * gin + cl) * spec.k + ky) * spec.k + kx];
                                acc += w * x[(t, ci, iy as usize, ix as usize)];
                            }
                        }
                    }
                    if let Some(b) = &spec.bias {
                        acc += b[co];
                    }
                    if let Some(bn) = &spec.bn {
                        acc = bn.gamma[co] * (acc - bn.mean[co]) / (bn.var[co] + bn.eps).sqrt() + bn.beta[co];
                    }
                    out[(t, co, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

/// Small two-stage model (one block per stage) for fast tests.
pub fn tiny_config() -> spikeyolo::model::ModelConfig {
    spikeyolo::model::ModelConfig::from_toml_str(
        r#"
in_channels = 1
image_size = 16
stem_channels = 4
expansion_ratio = 2
T = 2
D = 4
beta = 0.25

[[stages]]
kind = "block1"
repeat = 1
channels = 4
stride = 2

[[stages]]
kind = "block2"
repeat = 1
channels = 8
stride = 2

[head]
num_classes = 2
"#,
    )
    .unwrap()
}
