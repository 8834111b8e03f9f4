//! Meta blocks: a separable-conv token mixer and a channel mixer, each on a
//! membrane shortcut.
//!
//! ```text
//! U'  = U  + SepConv(U)
//! U'' = U' + ChannelConv(U')
//! ```
//!
//! Shortcuts carry real-valued membrane tensors; every convolution inside
//! the branches consumes I-LIF output. Block-1 mixes channels with two
//! standard 3×3 convs of hidden width `r·C`. Block-2 uses two
//! `pw → dw(3×3) → pw` chains that merge into single 3×3 convs for inference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    init_conv, GradStore, LayerIds, LinearOp, Mode, NeuronParams, NoProbe, Probe, RepChain, SpikingConv,
    SpikingConvCache,
};
use crate::layers::ConvLayer;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlockKind {
    /// Standard-conv channel mixer (low stages).
    #[serde(rename = "block1")]
    Block1,
    /// Re-parameterizable channel mixer (high stages).
    #[serde(rename = "block2")]
    Block2,
}

/// Width multipliers inside a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockWidths {
    /// Channel-mixer expansion `r`.
    pub expansion_ratio: usize,
    /// Hidden width of the separable conv relative to the block width.
    pub sep_expansion: usize,
    /// Hidden width of each rep chain relative to the wider of its ends.
    pub rep_hidden_ratio: usize,
}

impl Default for BlockWidths {
    fn default() -> Self {
        BlockWidths {
            expansion_ratio: 4,
            sep_expansion: 2,
            rep_hidden_ratio: 2,
        }
    }
}

/// Inverted separable conv: `pw1 → dw1(7×7) → pw2 → dw2(3×3)`, each conv
/// fed by an I-LIF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SepConv {
    pub pw1: SpikingConv,
    pub dw1: SpikingConv,
    pub pw2: SpikingConv,
    pub dw2: SpikingConv,
}

impl SepConv {
    fn units(&self) -> [&SpikingConv; 4] {
        [&self.pw1, &self.dw1, &self.pw2, &self.dw2]
    }

    fn units_mut(&mut self) -> [&mut SpikingConv; 4] {
        [&mut self.pw1, &mut self.dw1, &mut self.pw2, &mut self.dw2]
    }
}

/// Caches for a train-mode block pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    sep: Vec<SpikingConvCache>,
    mix: Vec<SpikingConvCache>,
}

/// One meta block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    pub channels: usize,
    pub widths: BlockWidths,
    pub neuron: NeuronParams,
    pub sepconv: SepConv,
    /// Two channel-mixer units, `C → rC → C`.
    pub mixer: [SpikingConv; 2],
    pub mode: Mode,
}

fn unit(name: String, neuron: NeuronParams, op: LinearOp) -> SpikingConv {
    SpikingConv { name, neuron, op }
}

fn rep_chain<R: Rng>(
    rng: &mut R,
    ids: &mut LayerIds,
    name: &str,
    c_in: usize,
    c_out: usize,
    hidden_ratio: usize,
) -> Result<RepChain> {
    let hidden = hidden_ratio * c_in.max(c_out);
    Ok(RepChain {
        convs: vec![
            init_conv(rng, ids, format!("{name}.pw1"), c_in, hidden, 1, 1, 1, true)?,
            init_conv(rng, ids, format!("{name}.dw"), hidden, hidden, 3, 1, hidden, true)?,
            init_conv(rng, ids, format!("{name}.pw2"), hidden, c_out, 1, 1, 1, true)?,
        ],
    })
}

impl BlockSpec {
    /// Randomly initialised train-mode block.
    pub fn new<R: Rng>(
        rng: &mut R,
        ids: &mut LayerIds,
        name: impl Into<String>,
        kind: BlockKind,
        channels: usize,
        widths: BlockWidths,
        neuron: NeuronParams,
    ) -> Result<Self> {
        let name = name.into();
        let c = channels;
        let sep_hidden = widths.sep_expansion * c;
        let conv = |rng: &mut R, ids: &mut LayerIds, part: &str, cin, cout, k, groups| -> Result<SpikingConv> {
            let full = format!("{name}.{part}");
            let layer = init_conv(rng, ids, full.clone(), cin, cout, k, 1, groups, true)?;
            Ok(unit(full, neuron, LinearOp::Conv(layer)))
        };
        let sepconv = SepConv {
            pw1: conv(rng, ids, "sep.pw1", c, sep_hidden, 1, 1)?,
            dw1: conv(rng, ids, "sep.dw1", sep_hidden, sep_hidden, 7, sep_hidden)?,
            pw2: conv(rng, ids, "sep.pw2", sep_hidden, c, 1, 1)?,
            dw2: conv(rng, ids, "sep.dw2", c, c, 3, c)?,
        };
        let hidden = widths.expansion_ratio * c;
        let mixer = match kind {
            BlockKind::Block1 => [
                conv(rng, ids, "mix.conv1", c, hidden, 3, 1)?,
                conv(rng, ids, "mix.conv2", hidden, c, 3, 1)?,
            ],
            BlockKind::Block2 => {
                let first = format!("{name}.mix.rep1");
                let second = format!("{name}.mix.rep2");
                [
                    unit(
                        first.clone(),
                        neuron,
                        LinearOp::Chain(rep_chain(rng, ids, &first, c, hidden, widths.rep_hidden_ratio)?),
                    ),
                    unit(
                        second.clone(),
                        neuron,
                        LinearOp::Chain(rep_chain(rng, ids, &second, hidden, c, widths.rep_hidden_ratio)?),
                    ),
                ]
            }
        };
        Ok(BlockSpec {
            name,
            kind,
            channels,
            widths,
            neuron,
            sepconv,
            mixer,
            mode: Mode::Train,
        })
    }

    pub fn units(&self) -> Vec<&SpikingConv> {
        let mut v: Vec<&SpikingConv> = self.sepconv.units().into_iter().collect();
        v.extend(self.mixer.iter());
        v
    }

    pub fn units_mut(&mut self) -> Vec<&mut SpikingConv> {
        let [a, b] = &mut self.mixer;
        let mut v: Vec<&mut SpikingConv> = self.sepconv.units_mut().into_iter().collect();
        v.push(a);
        v.push(b);
        v
    }

    pub fn convs(&self) -> Vec<&ConvLayer> {
        self.units().into_iter().flat_map(|u| u.op.convs()).collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.units_mut().into_iter().flat_map(|u| u.op.convs_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.spec.param_count()).sum()
    }

    fn check_input(&self, u: &Tensor4) -> Result<()> {
        let s = u.shape();
        if s.c != self.channels {
            return Err(Error::dims(
                "meta block input",
                &[s.t, self.channels, s.h, s.w],
                &s.dims(),
            ));
        }
        Ok(())
    }

    fn run(&self, units: &[&SpikingConv], x: &Tensor4, probe: &mut dyn Probe) -> Result<Tensor4> {
        let mut cur = x.clone();
        for u in units {
            cur = match self.mode {
                Mode::Train => u.forward_dense(&cur)?,
                Mode::Inference => u.forward_infer(&cur, probe)?,
            };
        }
        Ok(cur)
    }

    /// Token mixer output (pre-residual).
    pub fn sepconv_forward(&self, u: &Tensor4, probe: &mut dyn Probe) -> Result<Tensor4> {
        self.check_input(u)?;
        self.run(&self.sepconv.units(), u, probe)
    }

    /// Channel mixer output (pre-residual).
    pub fn channel_mixer_forward(&self, u: &Tensor4, probe: &mut dyn Probe) -> Result<Tensor4> {
        self.check_input(u)?;
        self.run(&[&self.mixer[0], &self.mixer[1]], u, probe)
    }

    /// Both residual stages.
    pub fn meta_block_forward(&self, u: &Tensor4, probe: &mut dyn Probe) -> Result<Tensor4> {
        let sep = self.sepconv_forward(u, probe)?;
        let u1 = u.add(&sep)?;
        let mix = self.channel_mixer_forward(&u1, probe)?;
        probe.on_adds(2 * u.len() as u64);
        u1.add(&mix)
    }

    pub fn forward(&self, u: &Tensor4) -> Result<Tensor4> {
        self.meta_block_forward(u, &mut NoProbe)
    }

    pub fn forward_train(&self, u: &Tensor4) -> Result<(Tensor4, BlockCache)> {
        if self.mode != Mode::Train {
            return Err(Error::Mode(format!("{}: training pass on an inference-mode block", self.name)));
        }
        self.check_input(u)?;
        let mut sep_caches = Vec::with_capacity(4);
        let mut cur = u.clone();
        for unit in self.sepconv.units() {
            let (y, c) = unit.forward_train(&cur)?;
            sep_caches.push(c);
            cur = y;
        }
        let u1 = u.add(&cur)?;
        let mut mix_caches = Vec::with_capacity(2);
        let mut cur = u1.clone();
        for unit in &self.mixer {
            let (y, c) = unit.forward_train(&cur)?;
            mix_caches.push(c);
            cur = y;
        }
        Ok((
            u1.add(&cur)?,
            BlockCache {
                sep: sep_caches,
                mix: mix_caches,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache, g_out: &Tensor4, grads: &mut GradStore) -> Result<Tensor4> {
        // out = u1 + mix(u1), u1 = u + sep(u)
        let mut g = g_out.clone();
        for (unit, c) in self.mixer.iter().zip(&cache.mix).rev() {
            g = unit.backward(c, &g, grads)?;
        }
        let g_u1 = g_out.add(&g)?;
        let mut g = g_u1.clone();
        for (unit, c) in self.sepconv.units().into_iter().zip(&cache.sep).rev() {
            g = unit.backward(c, &g, grads)?;
        }
        g_u1.add(&g)
    }

    /// Folds batch norm everywhere and merges Block-2 chains.
    pub fn reparameterize(&self) -> Result<BlockSpec> {
        if self.mode == Mode::Inference {
            return Err(Error::Mode(format!("{} is already re-parameterized", self.name)));
        }
        let mut out = self.clone();
        for u in out.units_mut() {
            u.reparameterize()?;
        }
        out.mode = Mode::Inference;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::testutil::{random_bn, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NEURON: NeuronParams = NeuronParams { beta: 0.25, ceiling: 4 };

    fn block(kind: BlockKind, c: usize, seed: u64) -> BlockSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = BlockSpec::new(&mut rng, &mut LayerIds::default(), "b", kind, c, BlockWidths::default(), NEURON).unwrap();
        // non-trivial frozen statistics so folding has something to do
        for conv in b.convs_mut() {
            let n = conv.spec.c_out;
            conv.spec.bn = Some(random_bn(&mut rng, n));
        }
        b
    }

    #[test]
    fn shapes_and_widths() {
        let b = block(BlockKind::Block1, 4, 1);
        let [m1, m2] = &b.mixer;
        let LinearOp::Conv(c1) = &m1.op else { panic!() };
        let LinearOp::Conv(c2) = &m2.op else { panic!() };
        assert_eq!((c1.spec.c_out, c1.spec.k), (16, 3));
        assert_eq!((c2.spec.c_in, c2.spec.c_out), (16, 4));
        let LinearOp::Conv(dw1) = &b.sepconv.dw1.op else { panic!() };
        assert_eq!((dw1.spec.k, dw1.spec.groups), (7, 8));
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), (2, 4, 5, 5), 2.0);
        assert_eq!(b.forward(&x).unwrap().shape(), x.shape());
    }

    #[test]
    fn sepconv_matches_straight_line_reference() {
        let b = block(BlockKind::Block1, 2, 3);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), (1, 2, 4, 4), 2.0);
        let mut cur = x.clone();
        for unit in [&b.sepconv.pw1, &b.sepconv.dw1, &b.sepconv.pw2, &b.sepconv.dw2] {
            // SN as a plain per-element loop (T = 1, resting membrane)
            let spikes = cur.map(|u| (u + 0.5).floor().clamp(0.0, 4.0));
            let LinearOp::Conv(c) = &unit.op else { panic!() };
            cur = conv2d(&spikes, &c.spec).unwrap();
        }
        let got = b.sepconv_forward(&x, &mut NoProbe).unwrap();
        assert!(got.max_abs_diff(&cur).unwrap() <= 1e-5);
    }

    #[test]
    fn dead_input_with_zero_shifts_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = BlockSpec::new(&mut rng, &mut LayerIds::default(), "b", BlockKind::Block2, 3, BlockWidths::default(), NEURON).unwrap();
        let x = Tensor4::zeros((1, 3, 4, 4));
        assert_eq!(b.sepconv_forward(&x, &mut NoProbe).unwrap().max_abs(), 0.0);
        assert_eq!(b.channel_mixer_forward(&x, &mut NoProbe).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn residual_identity_when_branches_silenced() {
        let mut b = block(BlockKind::Block1, 3, 6);
        for u in [&mut b.sepconv.dw2, &mut b.mixer[1]] {
            for c in u.op.convs_mut() {
                c.spec.weights.iter_mut().for_each(|w| *w = 0.0);
                let bn = c.spec.bn.as_mut().unwrap();
                bn.beta.iter_mut().for_each(|v| *v = 0.0);
                bn.mean.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(7), (2, 3, 4, 4), 2.0);
        assert_eq!(b.forward(&x).unwrap(), x);
    }

    #[test]
    fn block_output_recomposes_from_branches() {
        let b = block(BlockKind::Block2, 3, 8);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(9), (2, 3, 4, 4), 2.0);
        let sep = b.sepconv_forward(&x, &mut NoProbe).unwrap();
        let u1 = x.add(&sep).unwrap();
        let mix = b.channel_mixer_forward(&u1, &mut NoProbe).unwrap();
        let expected = u1.add(&mix).unwrap();
        assert!(b.forward(&x).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn reparameterized_blocks_agree_and_shrink() {
        for kind in [BlockKind::Block1, BlockKind::Block2] {
            let b = block(kind, 4, 10);
            let merged = b.reparameterize().unwrap();
            assert!(merged.param_count() < b.param_count());
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..5 {
                let x = random_tensor(&mut rng, (2, 4, 5, 5), 2.5);
                let a = b.forward(&x).unwrap();
                let m = merged.forward(&x).unwrap();
                assert!(a.max_abs_diff(&m).unwrap() <= 1e-5);
            }
            assert!(matches!(merged.reparameterize(), Err(Error::Mode(_))));
        }
    }

    #[test]
    fn block_backward_shift_gradient() {
        // d(sum out)/d(beta) of the last conv is the per-channel element count
        let b = block(BlockKind::Block2, 2, 12);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(13), (2, 2, 4, 4), 2.0);
        let (y, cache) = b.forward_train(&x).unwrap();
        let ones = Tensor4::full(y.shape(), 1.0);
        let mut grads = GradStore::zeros_like(&b.convs());
        let gx = b.backward(&cache, &ones, &mut grads).unwrap();
        assert!(gx.is_finite());
        let last = b.mixer[1].op.convs().last().unwrap().id;
        let expected: f64 = (y.shape().t * y.shape().h * y.shape().w) as f64;
        assert!(grads.layers[last].beta.iter().all(|&g| (g - expected).abs() < 1e-9));
    }
}
