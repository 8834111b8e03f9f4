//! Detection loss on time-averaged head maps, with its gradient.
//!
//! Each ground-truth box is assigned to the cell holding its center at
//! every scale. Objectness BCE runs over all cells; class BCE and the
//! `1 - IoU` box term only at assigned cells. The sum is divided by the
//! number of assigned cells.

use crate::model::config::HeadConfig;
use crate::model::data::GtBox;
use crate::model::decode::{cell_box, sigmoid};
use crate::model::network::{box_channel, HeadMap, CLS, OBJ};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub obj: f64,
    pub cls: f64,
    pub boxes: f64,
    pub total: f64,
    pub positives: usize,
}

/// BCE with logits and its derivative w.r.t. the logit.
fn bce(z: f64, y: f64) -> (f64, f64) {
    (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p(), sigmoid(z) - y)
}

/// IoU of two center-format boxes and its gradient w.r.t. the first.
pub fn iou_grad(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let axis = |c: f64, s: f64, gc: f64, gs: f64| {
        let (pl, pr) = (c - s / 2.0, c + s / 2.0);
        let (gl, gr) = (gc - gs / 2.0, gc + gs / 2.0);
        let len = pr.min(gr) - pl.max(gl);
        let right = if pr < gr { 1.0 } else { 0.0 };
        let left = if pl > gl { 1.0 } else { 0.0 };
        // d len / d center, d len / d size
        (len, right - left, 0.5 * (right + left))
    };
    let (ix, dix_c, dix_s) = axis(p[0], p[2], g[0], g[2]);
    let (iy, diy_c, diy_s) = axis(p[1], p[3], g[1], g[3]);
    if ix <= 0.0 || iy <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = ix * iy;
    let union = p[2] * p[3] + g[2] * g[3] - inter;
    let d_inter = [iy * dix_c, ix * diy_c, iy * dix_s, ix * diy_s];
    let d_area = [0.0, 0.0, p[3], p[2]];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = (d_inter[k] * (union + inter) - inter * d_area[k]) / (union * union);
    }
    (inter / union, grad)
}

/// Loss and its gradient w.r.t. every head map.
pub fn detection_loss(maps: &[HeadMap], gts: &[GtBox], head: &HeadConfig, box_weight: f64) -> (LossParts, Vec<Tensor4>) {
    let nc = head.num_classes;
    let bc = box_channel(nc);
    let mut parts = LossParts::default();
    let mut grads: Vec<Tensor4> = maps.iter().map(|m| Tensor4::zeros(m.map.shape())).collect();

    for (hm, g) in maps.iter().zip(grads.iter_mut()) {
        let s = hm.map.shape();
        let (gw, gh) = (s.w as f64, s.h as f64);
        let mut assigned: Vec<Option<&GtBox>> = vec![None; s.h * s.w];
        for gt in gts {
            let cx = ((gt.x * gw) as usize).min(s.w - 1);
            let cy = ((gt.y * gh) as usize).min(s.h - 1);
            assigned[cy * s.w + cx].get_or_insert(gt);
        }
        for cy in 0..s.h {
            for cx in 0..s.w {
                let target = assigned[cy * s.w + cx];
                let (l, d) = bce(hm.map[(0, OBJ, cy, cx)], if target.is_some() { 1.0 } else { 0.0 });
                parts.obj += l;
                g[(0, OBJ, cy, cx)] = d;
                let Some(gt) = target else { continue };
                parts.positives += 1;
                for k in 0..nc {
                    let (l, d) = bce(hm.map[(0, CLS + k, cy, cx)], if gt.class == k { 1.0 } else { 0.0 });
                    parts.cls += l;
                    g[(0, CLS + k, cy, cx)] = d;
                }
                let t = [0, 1, 2, 3].map(|k| hm.map[(0, bc + k, cy, cx)]);
                let pred = cell_box(cx, cy, t, head.box_scale);
                let (v, dv) = iou_grad(pred, [gt.x * gw, gt.y * gh, gt.w * gw, gt.h * gh]);
                parts.boxes += box_weight * (1.0 - v);
                for k in 0..4 {
                    let sg = sigmoid(t[k]);
                    let dp_dt = sg * (1.0 - sg) * if k < 2 { 1.0 } else { head.box_scale };
                    g[(0, bc + k, cy, cx)] = -box_weight * dv[k] * dp_dt;
                }
            }
        }
    }
    let norm = parts.positives.max(1) as f64;
    parts.obj /= norm;
    parts.cls /= norm;
    parts.boxes /= norm;
    parts.total = parts.obj + parts.cls + parts.boxes;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= norm);
    }
    (parts, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;
    use crate::model::network::head_channels;
    use crate::testutil::random_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head() -> HeadConfig {
        HeadConfig {
            num_classes: 2,
            conf_threshold: 0.25,
            iou_threshold: 0.5,
            box_scale: 4.0,
        }
    }

    #[test]
    fn iou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = [rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
            let p = [
                g[0] + rng.gen_range(-0.5..0.5),
                g[1] + rng.gen_range(-0.5..0.5),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
            ];
            let (_, grad) = iou_grad(p, g);
            let pt = Tensor4::from_vec((1, 1, 1, 4), p.to_vec()).unwrap();
            let fd = finite_diff_grad(|q| iou_grad([0, 1, 2, 3].map(|k| q.data()[k]), g).0, &pt, 1e-7);
            let fd = fd.data();
            for k in 0..4 {
                assert!((grad[k] - fd[k]).abs() < 1e-5, "{k}: {} vs {}", grad[k], fd[k]);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps = vec![
            HeadMap { stride: 8, map: random_tensor(&mut rng, (1, head_channels(2), 4, 4), 2.0) },
            HeadMap { stride: 16, map: random_tensor(&mut rng, (1, head_channels(2), 2, 2), 2.0) },
        ];
        let gts = [
            GtBox { class: 0, x: 0.3, y: 0.3, w: 0.2, h: 0.2 },
            GtBox { class: 1, x: 0.8, y: 0.6, w: 0.25, h: 0.25 },
        ];
        let (_, grads) = detection_loss(&maps, &gts, &head(), 2.0);
        for (i, m) in maps.iter().enumerate() {
            let fd = finite_diff_grad(
                |v| {
                    let mut ms = maps.clone();
                    ms[i].map = v.clone();
                    detection_loss(&ms, &gts, &head(), 2.0).0.total
                },
                &m.map,
                1e-6,
            );
            for (a, b) in grads[i].data().iter().zip(fd.data()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn perfect_prediction_has_small_loss() {
        let mut map = Tensor4::full((1, head_channels(2), 2, 2), -20.0);
        // box centered in cell (0,0) with side 2 cells = σ(0)·4
        map[(0, OBJ, 0, 0)] = 20.0;
        map[(0, CLS, 0, 0)] = 20.0;
        for k in 0..4 {
            map[(0, box_channel(2) + k, 0, 0)] = 0.0;
        }
        let gt = GtBox { class: 0, x: 0.25, y: 0.25, w: 1.0, h: 1.0 };
        let (p, _) = detection_loss(&[HeadMap { stride: 8, map }], &[gt], &head(), 2.0);
        assert_eq!(p.positives, 1);
        assert!(p.total < 1e-6, "{p:?}");
    }
}
