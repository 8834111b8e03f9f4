//! Surrogate-gradient training on the synthetic shapes task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{GradStore, Mode};
use crate::model::config::{HeadConfig, TrainConfig};
use crate::model::data::Sample;
use crate::model::decode::decode_with;
use crate::model::loss::{detection_loss, LossParts};
use crate::model::metrics::mean_average_precision;
use crate::model::network::SpikeYolo;

/// Confidence floor used when ranking detections for mAP.
pub const EVAL_CONF: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// mAP@50 of the re-parameterized, spike-driven model on the held-out split.
    pub final_map50: f64,
}

/// Loss and summed parameter gradients over `batch`. Per-sample work runs
/// in parallel; the reduction is sequential in sample order.
pub fn batch_gradients(
    model: &SpikeYolo,
    batch: &[&Sample],
    head: &HeadConfig,
    box_weight: f64,
) -> Result<(LossParts, GradStore)> {
    let per_sample: Vec<Result<(LossParts, GradStore)>> = batch
        .par_iter()
        .map(|s| {
            let (maps, cache) = model.forward_train(&s.image)?;
            let (parts, g_maps) = detection_loss(&maps, &s.boxes, head, box_weight);
            Ok((parts, model.backward(&cache, &g_maps)?))
        })
        .collect();
    let mut total = LossParts::default();
    let mut grads: Option<GradStore> = None;
    for r in per_sample {
        let (p, g) = r?;
        total.obj += p.obj;
        total.cls += p.cls;
        total.boxes += p.boxes;
        total.total += p.total;
        total.positives += p.positives;
        match &mut grads {
            Some(acc) => acc.add(&g),
            None => grads = Some(g),
        }
    }
    let grads = grads.unwrap_or_else(|| GradStore::zeros_like(&model.convs()));
    Ok((total, grads))
}

/// Momentum SGD over conv weights, biases and batch-norm affine terms.
/// Batch-norm statistics stay frozen.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: GradStore,
}

impl Sgd {
    pub fn new(model: &SpikeYolo, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: GradStore::zeros_like(&model.convs()),
        }
    }

    pub fn step(&mut self, model: &mut SpikeYolo, grads: &GradStore, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for conv in model.convs_mut() {
            let v = &mut self.velocity.layers[conv.id];
            let g = &grads.layers[conv.id];
            let s = &mut conv.spec;
            let update = |p: &mut [f64], v: &mut [f64], g: &[f64], decay: f64| {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v + g + decay * *p;
                    *p -= lr * *v;
                }
            };
            update(&mut s.weights, &mut v.weights, &g.weights, wd);
            if let Some(b) = &mut s.bias {
                update(b, &mut v.bias, &g.bias, 0.0);
            }
            if let Some(bn) = &mut s.bn {
                update(&mut bn.gamma, &mut v.gamma, &g.gamma, 0.0);
                update(&mut bn.beta, &mut v.beta, &g.beta, 0.0);
            }
        }
    }
}

/// Linear warm-up, then cosine decay to 5% of the base rate.
pub fn learning_rate(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos()))
}

/// mAP@50 of `model` (either mode) on `samples`.
pub fn evaluate(model: &SpikeYolo, samples: &[Sample]) -> Result<f64> {
    let head = &model.config.head;
    let per_image = samples
        .par_iter()
        .map(|s| Ok((decode_with(&model.forward(&s.image)?, head, EVAL_CONF), s.boxes.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_average_precision(&per_image, head.num_classes, 0.5))
}

/// Trains `model` in place. `on_epoch` sees each epoch's log line as it completes.
pub fn train_toy(
    model: &mut SpikeYolo,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    if model.mode != Mode::Train {
        return Err(Error::Mode("cannot train a re-parameterized model".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let head = model.config.head.clone();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut opt = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr;
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (parts, mut grads) = batch_gradients(model, &batch, &head, cfg.box_weight)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: k,
                    loss: parts.total,
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.norm();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: k,
                    loss: norm,
                });
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            lr = learning_rate(cfg.lr, step, total, warmup);
            opt.step(model, &grads, lr);
            epoch_loss += parts.total;
            step += 1;
        }
        let log = EpochLog {
            epoch,
            loss: epoch_loss / train.len() as f64,
            lr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    let merged = model.reparameterize()?;
    Ok(TrainLog {
        epochs: logs,
        final_map50: evaluate(&merged, val)?,
    })
}
