use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BlockCache, BlockSpec};
use crate::error::{Error, Result};
use crate::layers::{
    init_conv, ConvLayer, GradStore, LayerIds, LinearOp, Mode, NeuronParams, NoProbe, Probe, SpikingConv,
    SpikingConvCache,
};
use crate::model::config::ModelConfig;
use crate::tensor::{Shape4, Tensor4};

/// Channel layout of a head map: objectness, class logits, then box terms.
pub const OBJ: usize = 0;
pub const CLS: usize = 1;

pub fn box_channel(num_classes: usize) -> usize {
    CLS + num_classes
}

pub fn head_channels(num_classes: usize) -> usize {
    CLS + num_classes + 4
}

/// Initial objectness bias; sigmoid(-3) ≈ 0.05.
const OBJ_PRIOR: f64 = -3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// Strided 3×3 conv between stages.
    pub transition: SpikingConv,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub stride: usize,
    pub conv: SpikingConv,
    pub pred: SpikingConv,
}

/// Time-averaged prediction map of one detection scale, shape `(1, 5 + nc, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMap {
    pub stride: usize,
    pub map: Tensor4,
}

pub struct NetCache {
    stem: SpikingConvCache,
    stages: Vec<(SpikingConvCache, Vec<BlockCache>)>,
    lateral: SpikingConvCache,
    heads: Vec<(SpikingConvCache, SpikingConvCache)>,
    t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeYolo {
    pub config: ModelConfig,
    pub stem: SpikingConv,
    pub stages: Vec<Stage>,
    /// 1×1 conv bringing the deepest features to the previous stage's width.
    pub lateral: SpikingConv,
    pub heads: Vec<Head>,
    pub mode: Mode,
}

fn spiking(name: &str, neuron: NeuronParams, layer: ConvLayer) -> SpikingConv {
    SpikingConv {
        name: name.to_string(),
        neuron,
        op: LinearOp::Conv(layer),
    }
}

/// Repeats a single frame `t` times along the time axis.
pub fn encode_static(image: &Tensor4, t: usize) -> Result<Tensor4> {
    image.repeat_time(t)
}

impl SpikeYolo {
    /// Randomly initialised train-mode network.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = &mut LayerIds::default();
        let neuron = config.neuron();
        let conv = |rng: &mut ChaCha8Rng, ids: &mut LayerIds, name: &str, cin, cout, k, stride| -> Result<SpikingConv> {
            Ok(spiking(name, neuron, init_conv(rng, ids, name, cin, cout, k, stride, 1, true)?))
        };

        let stem = conv(&mut rng, ids, "stem", config.in_channels, config.stem_channels, 3, 2)?;
        let mut stages = Vec::new();
        let mut c_prev = config.stem_channels;
        for (i, st) in config.stages.iter().enumerate() {
            let transition = conv(&mut rng, ids, &format!("stage{i}.down"), c_prev, st.channels, 3, st.stride)?;
            let blocks = (0..st.repeat)
                .map(|j| {
                    BlockSpec::new(
                        &mut rng,
                        ids,
                        format!("stage{i}.block{j}"),
                        st.kind,
                        st.channels,
                        config.widths(),
                        neuron,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { transition, blocks });
            c_prev = st.channels;
        }
        let n = config.stages.len();
        let (c_small, c_large) = (config.stages[n - 2].channels, config.stages[n - 1].channels);
        let lateral = conv(&mut rng, ids, "neck.lateral", c_large, c_small, 1, 1)?;

        let nc = config.head.num_classes;
        let strides = config.head_strides();
        let mut heads = Vec::new();
        for (i, (c_in, hidden)) in [(2 * c_small, c_small), (c_large, c_large)].into_iter().enumerate() {
            let name = format!("head{i}");
            let conv3 = conv(&mut rng, ids, &format!("{name}.conv"), c_in, hidden, 3, 1)?;
            let mut pred = init_conv(&mut rng, ids, format!("{name}.pred"), hidden, head_channels(nc), 1, 1, 1, false)?;
            // small initial predictions; objectness starts near its prior
            pred.spec.weights.iter_mut().for_each(|w| *w *= 0.1);
            pred.spec.bias.as_mut().expect("pred has bias")[OBJ] = OBJ_PRIOR;
            heads.push(Head {
                stride: strides[i],
                conv: conv3,
                pred: spiking(&format!("{name}.pred"), neuron, pred),
            });
        }
        Ok(SpikeYolo {
            config: config.clone(),
            stem,
            stages,
            lateral,
            heads,
            mode: Mode::Train,
        })
    }

    pub fn units(&self) -> Vec<&SpikingConv> {
        let mut v = vec![&self.stem];
        for st in &self.stages {
            v.push(&st.transition);
            for b in &st.blocks {
                v.extend(b.units());
            }
        }
        v.push(&self.lateral);
        for h in &self.heads {
            v.push(&h.conv);
            v.push(&h.pred);
        }
        v
    }

    pub fn units_mut(&mut self) -> Vec<&mut SpikingConv> {
        let mut v = vec![&mut self.stem];
        for st in &mut self.stages {
            v.push(&mut st.transition);
            for b in &mut st.blocks {
                v.extend(b.units_mut());
            }
        }
        v.push(&mut self.lateral);
        for h in &mut self.heads {
            v.push(&mut h.conv);
            v.push(&mut h.pred);
        }
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

    /// Changes `T` and `D` without touching weights.
    pub fn set_timing(&mut self, t: usize, d: u32) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.t = t;
        cfg.d = d;
        cfg.validate()?;
        let neuron = cfg.neuron();
        self.config = cfg;
        for u in self.units_mut() {
            u.neuron = neuron;
        }
        for st in &mut self.stages {
            for b in &mut st.blocks {
                b.neuron = neuron;
            }
        }
        Ok(())
    }

    /// Folds every batch norm and merges every rep chain.
    pub fn reparameterize(&self) -> Result<SpikeYolo> {
        if self.mode == Mode::Inference {
            return Err(Error::Mode("model is already re-parameterized".into()));
        }
        let mut out = self.clone();
        for st in &mut out.stages {
            st.transition.reparameterize()?;
            for b in &mut st.blocks {
                *b = b.reparameterize()?;
            }
        }
        out.stem.reparameterize()?;
        out.lateral.reparameterize()?;
        for h in &mut out.heads {
            h.conv.reparameterize()?;
            h.pred.reparameterize()?;
        }
        out.mode = Mode::Inference;
        Ok(out)
    }

    /// Scaled, time-expanded network input. Accepts one frame (repeated
    /// `T` times) or exactly `T` frames.
    pub fn prepare_input(&self, x: &Tensor4) -> Result<Tensor4> {
        let cfg = &self.config;
        let s = x.shape();
        let want = [cfg.t, cfg.in_channels, cfg.image_size, cfg.image_size];
        if s.c != cfg.in_channels || s.h != cfg.image_size || s.w != cfg.image_size || (s.t != 1 && s.t != cfg.t) {
            return Err(Error::dims("model input", &want, &s.dims()));
        }
        let x = if s.t == cfg.t { x.clone() } else { encode_static(x, cfg.t)? };
        Ok(x.scale(cfg.input_gain))
    }

    fn apply(&self, unit: &SpikingConv, x: &Tensor4, probe: &mut dyn Probe) -> Result<Tensor4> {
        match self.mode {
            Mode::Train => unit.forward_dense(x),
            Mode::Inference => unit.forward_infer(x, probe),
        }
    }

    fn heads_from(&self, small: &Tensor4, large: &Tensor4, probe: &mut dyn Probe) -> Result<Vec<HeadMap>> {
        let up = self.apply(&self.lateral, large, probe)?.upsample_nearest(2);
        let fused = small.concat_channels(&up)?;
        let mut maps = Vec::with_capacity(2);
        for (head, input) in self.heads.iter().zip([&fused, large]) {
            let hidden = self.apply(&head.conv, input, probe)?;
            let out = self.apply(&head.pred, &hidden, probe)?;
            maps.push(HeadMap {
                stride: head.stride,
                map: out.mean_time(),
            });
        }
        Ok(maps)
    }

    /// Raw head maps. Inference mode runs every conv spike-driven and
    /// reports each one to `probe`.
    pub fn forward_probed(&self, x: &Tensor4, probe: &mut dyn Probe) -> Result<Vec<HeadMap>> {
        let mut cur = self.apply(&self.stem, &self.prepare_input(x)?, probe)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            cur = self.apply(&st.transition, &cur, probe)?;
            for b in &st.blocks {
                cur = b.meta_block_forward(&cur, probe)?;
            }
            outs.push(cur.clone());
        }
        let n = outs.len();
        self.heads_from(&outs[n - 2], &outs[n - 1], probe)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Vec<HeadMap>> {
        self.forward_probed(x, &mut NoProbe)
    }

    pub fn forward_train(&self, x: &Tensor4) -> Result<(Vec<HeadMap>, NetCache)> {
        if self.mode != Mode::Train {
            return Err(Error::Mode("training pass on a re-parameterized model".into()));
        }
        let input = self.prepare_input(x)?;
        let (mut cur, stem) = self.stem.forward_train(&input)?;
        let mut outs = Vec::new();
        let mut stage_caches = Vec::new();
        for st in &self.stages {
            let (y, tc) = st.transition.forward_train(&cur)?;
            cur = y;
            let mut bcs = Vec::new();
            for b in &st.blocks {
                let (y, bc) = b.forward_train(&cur)?;
                cur = y;
                bcs.push(bc);
            }
            stage_caches.push((tc, bcs));
            outs.push(cur.clone());
        }
        let n = outs.len();
        let (lat, lateral) = self.lateral.forward_train(&outs[n - 1])?;
        let fused = outs[n - 2].concat_channels(&lat.upsample_nearest(2))?;
        let mut maps = Vec::new();
        let mut head_caches = Vec::new();
        for (head, input) in self.heads.iter().zip([&fused, &outs[n - 1]]) {
            let (hidden, c1) = head.conv.forward_train(input)?;
            let (out, c2) = head.pred.forward_train(&hidden)?;
            maps.push(HeadMap {
                stride: head.stride,
                map: out.mean_time(),
            });
            head_caches.push((c1, c2));
        }
        let cache = NetCache {
            stem,
            stages: stage_caches,
            lateral,
            heads: head_caches,
            t: input.shape().t,
        };
        Ok((maps, cache))
    }

    /// Parameter gradients given gradients of the loss w.r.t. each head map.
    pub fn backward(&self, cache: &NetCache, grad_maps: &[Tensor4]) -> Result<GradStore> {
        if grad_maps.len() != self.heads.len() {
            return Err(Error::dims("head gradients", &[self.heads.len()], &[grad_maps.len()]));
        }
        let mut grads = GradStore::zeros_like(&self.convs());
        let t = cache.t;
        let mut g_inputs = Vec::new();
        for ((head, (c1, c2)), g) in self.heads.iter().zip(&cache.heads).zip(grad_maps) {
            let g_out = g.repeat_time(t)?.scale(1.0 / t as f64);
            let g_hidden = head.pred.backward(c2, &g_out, &mut grads)?;
            g_inputs.push(head.conv.backward(c1, &g_hidden, &mut grads)?);
        }
        let n = self.stages.len();
        let c_small = self.config.stages[n - 2].channels;
        let (g_small, g_up) = g_inputs[0].split_channels(c_small);
        let g_lat = g_up.upsample_nearest_backward(2);
        let mut g = self.lateral.backward(&cache.lateral, &g_lat, &mut grads)?;
        g.add_assign(&g_inputs[1])?;
        for (i, (st, (tc, bcs))) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            if i == n - 2 {
                g.add_assign(&g_small)?;
            }
            for (b, bc) in st.blocks.iter().zip(bcs).rev() {
                g = b.backward(bc, &g, &mut grads)?;
            }
            g = st.transition.backward(tc, &g, &mut grads)?;
        }
        self.stem.backward(&cache.stem, &g, &mut grads)?;
        Ok(grads)
    }

    /// Shape of one model input frame.
    pub fn input_shape(&self) -> Shape4 {
        let c = &self.config;
        Shape4::new(1, c.in_channels, c.image_size, c.image_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::audit::SpikeAudit;
    use crate::testutil::{random_tensor, tiny_config};
    use rand::Rng;

    fn image(seed: u64, n: usize) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn((1, 1, n, n), |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encode_static_repeats_frames() {
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), (1, 2, 3, 3), 1.0);
        assert_eq!(encode_static(&x, 1).unwrap(), x);
        let r = encode_static(&x, 4).unwrap();
        assert_eq!(r.shape().t, 4);
        for t in 0..4 {
            assert_eq!(r.frame(t), x.frame(0));
        }
    }

    #[test]
    fn head_maps_follow_cumulative_stride() {
        let cfg = tiny_config();
        let m = SpikeYolo::new(&cfg, 1).unwrap();
        let maps = m.forward(&image(2, 16)).unwrap();
        for (hm, stride) in maps.iter().zip(cfg.head_strides()) {
            assert_eq!(hm.stride, stride);
            assert_eq!(hm.map.shape().dims(), [1, head_channels(2), 16 / stride, 16 / stride]);
        }
        assert!(m.forward(&image(2, 8)).is_err());
    }

    #[test]
    fn merged_model_matches_train_model() {
        let cfg = tiny_config();
        let m = SpikeYolo::new(&cfg, 3).unwrap();
        let merged = m.reparameterize().unwrap();
        assert!(merged.param_count() <= m.param_count());
        for seed in 0..5 {
            let x = image(seed, 16);
            let a = m.forward(&x).unwrap();
            let mut audit = SpikeAudit::default();
            let b = merged.forward_probed(&x, &mut audit).unwrap();
            assert!(audit.passed(), "{audit:?}");
            assert_eq!(audit.convs_seen, merged.convs().len());
            for (p, q) in a.iter().zip(&b) {
                assert!(p.map.max_abs_diff(&q.map).unwrap() <= 1e-4);
            }
        }
        assert!(matches!(merged.reparameterize(), Err(Error::Mode(_))));
        assert!(merged.forward_train(&image(0, 16)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = SpikeYolo::new(&tiny_config(), 4).unwrap();
        let x = image(5, 16);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        assert_eq!(SpikeYolo::new(&tiny_config(), 4).unwrap(), m);
    }

    #[test]
    fn timing_changes_dynamics() {
        let mut a = SpikeYolo::new(&tiny_config(), 6).unwrap();
        a.set_timing(1, 4).unwrap();
        let mut b = a.clone();
        b.set_timing(4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // nonconstant per-slice input, summed for the single-step model
        let frames = Tensor4::from_fn((4, 1, 16, 16), |_, _, _, _| rng.gen_range(0..3) as f64);
        let single = Tensor4::from_vec((1, 1, 16, 16), {
            let mut s = vec![0.0; 256];
            for t in 0..4 {
                s.iter_mut().zip(frames.frame(t)).for_each(|(a, b)| *a += b);
            }
            s
        })
        .unwrap();
        let ya = a.forward(&single).unwrap();
        let yb = b.forward(&frames).unwrap();
        assert!(ya[0].map.max_abs_diff(&yb[0].map).unwrap() > 1e-6);
    }

    #[test]
    fn backward_reaches_every_layer() {
        let m = SpikeYolo::new(&tiny_config(), 8).unwrap();
        let (maps, cache) = m.forward_train(&image(9, 16).scale(2.0)).unwrap();
        let g: Vec<Tensor4> = maps.iter().map(|h| Tensor4::full(h.map.shape(), 1.0)).collect();
        let grads = m.backward(&cache, &g).unwrap();
        assert_eq!(grads.layers.len(), m.convs().len());
        // the prediction biases receive the summed map gradient exactly
        for (h, hm) in m.heads.iter().zip(&maps) {
            let id = h.pred.op.convs()[0].id;
            let s = hm.map.shape();
            for v in &grads.layers[id].bias {
                assert!((v - (s.h * s.w) as f64).abs() < 1e-9);
            }
        }
        assert!(grads.norm().is_finite() && grads.norm() > 0.0);
    }
}
