use serde::{Deserialize, Serialize};

use crate::model::config::HeadConfig;
use crate::model::network::{box_channel, HeadMap, CLS, OBJ};

/// One detected box. Coordinates are normalized to the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub f: f64,
    pub c: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// IoU of two center-format boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0);
    let iy = (a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

impl Detection {
    pub fn bbox(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Predicted box of cell `(cx, cy)` in cell units: center `(cx + σ(tx), cy + σ(ty))`,
/// side `σ(tw)·box_scale`.
pub fn cell_box(cx: usize, cy: usize, t: [f64; 4], box_scale: f64) -> [f64; 4] {
    [
        cx as f64 + sigmoid(t[0]),
        cy as f64 + sigmoid(t[1]),
        sigmoid(t[2]) * box_scale,
        sigmoid(t[3]) * box_scale,
    ]
}

/// Every cell whose confidence reaches `conf_threshold`, before NMS.
pub fn candidates(maps: &[HeadMap], head: &HeadConfig, conf_threshold: f64) -> Vec<Detection> {
    let nc = head.num_classes;
    let bc = box_channel(nc);
    let mut out = Vec::new();
    for hm in maps {
        let s = hm.map.shape();
        for cy in 0..s.h {
            for cx in 0..s.w {
                let at = |c: usize| hm.map[(0, c, cy, cx)];
                let (cls, score) = (0..nc)
                    .map(|k| (k, sigmoid(at(CLS + k))))
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                let f = sigmoid(at(OBJ)) * score;
                if f < conf_threshold {
                    continue;
                }
                let b = cell_box(cx, cy, [at(bc), at(bc + 1), at(bc + 2), at(bc + 3)], head.box_scale);
                let (gw, gh) = (s.w as f64, s.h as f64);
                // clamp corners to the image, then back to center format
                let x0 = ((b[0] - b[2] / 2.0) / gw).clamp(0.0, 1.0);
                let x1 = ((b[0] + b[2] / 2.0) / gw).clamp(0.0, 1.0);
                let y0 = ((b[1] - b[3] / 2.0) / gh).clamp(0.0, 1.0);
                let y1 = ((b[1] + b[3] / 2.0) / gh).clamp(0.0, 1.0);
                out.push(Detection {
                    f: f.clamp(0.0, 1.0),
                    c: cls,
                    x: (x0 + x1) / 2.0,
                    y: (y0 + y1) / 2.0,
                    w: x1 - x0,
                    h: y1 - y0,
                });
            }
        }
    }
    out
}

/// Class-wise greedy NMS. Output is sorted by confidence, highest first.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.f.total_cmp(&a.f));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| k.c != d.c || iou(k.bbox(), d.bbox()) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

pub fn decode(maps: &[HeadMap], head: &HeadConfig) -> Vec<Detection> {
    decode_with(maps, head, head.conf_threshold)
}

pub fn decode_with(maps: &[HeadMap], head: &HeadConfig, conf_threshold: f64) -> Vec<Detection> {
    nms(candidates(maps, head, conf_threshold), head.iou_threshold)
}
